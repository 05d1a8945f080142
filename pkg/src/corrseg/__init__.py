"""Interactive corrective-annotation training for 3D volumetric segmentation.

A client-server loop: a segmentation model trains continuously from sparse
corrective annotations on 3D volumes and serves predictions back to the
annotator, whose corrections become new training data.
"""

__version__ = "0.1.0"
