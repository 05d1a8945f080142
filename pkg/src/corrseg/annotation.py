"""Sparse corrective annotations and corrected-contour derivation.

An annotation holds disjoint foreground (false-negative) and background
(false-positive) correction voxels scoped to a bounding box. On disk it is a
single uint8 label grid over the full volume extent: 0 = unannotated,
1 = background correction, 2 = foreground correction. The bounding box is
kept in the NIfTI descrip field so a round trip preserves it.
"""

from dataclasses import dataclass, field

import numpy as np

from . import nifti
from .volume_io import BoundingBox, volume_id_from_path

LABEL_UNANNOTATED = 0
LABEL_BACKGROUND = 1
LABEL_FOREGROUND = 2


class AnnotationError(ValueError):
    """Annotation violates disjointness/containment or fails to parse."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


def _as_voxel_array(voxels) -> np.ndarray:
    arr = np.asarray(list(voxels) if isinstance(voxels, (set, frozenset)) else voxels)
    if arr.size == 0:
        return np.empty((0, 3), dtype=np.int64)
    arr = arr.reshape(-1, 3).astype(np.int64)
    # canonical order makes equality and round-trip checks well defined
    order = np.lexsort((arr[:, 2], arr[:, 1], arr[:, 0]))
    arr = arr[order]
    keep = np.ones(len(arr), dtype=bool)
    keep[1:] = np.any(arr[1:] != arr[:-1], axis=1)
    return arr[keep]


@dataclass
class SparseAnnotation:
    """Corrective annotation: fg fixes false negatives, bg false positives."""

    volume_id: str
    box: BoundingBox
    fg: np.ndarray = field(default_factory=lambda: np.empty((0, 3), dtype=np.int64))
    bg: np.ndarray = field(default_factory=lambda: np.empty((0, 3), dtype=np.int64))

    def __post_init__(self):
        self.fg = _as_voxel_array(self.fg)
        self.bg = _as_voxel_array(self.bg)

    @property
    def size(self) -> int:
        return len(self.fg) + len(self.bg)

    def is_empty(self) -> bool:
        return self.size == 0


def validate(ann: SparseAnnotation) -> list[str]:
    """Check disjointness and box containment; returns violations (empty = ok)."""
    violations = []
    if len(ann.fg) and len(ann.bg):
        fg_view = {tuple(v) for v in ann.fg}
        for v in ann.bg:
            if tuple(v) in fg_view:
                violations.append(f"voxel {tuple(int(x) for x in v)} is in both fg and bg")
    for name, coords in (("fg", ann.fg), ("bg", ann.bg)):
        for v in coords:
            if not ann.box.contains_point(v):
                violations.append(
                    f"{name} voxel {tuple(int(x) for x in v)} lies outside box "
                    f"{ann.box.min_corner}..{ann.box.max_corner}"
                )
    return violations


def require_valid(ann: SparseAnnotation) -> SparseAnnotation:
    violations = validate(ann)
    if violations:
        raise AnnotationError(violations)
    return ann


@dataclass
class Segmentation:
    """Model prediction thresholded over a bounding box."""

    volume_id: str
    box: BoundingBox
    mask: np.ndarray
    threshold_used: float = 0.5

    def __post_init__(self):
        self.mask = np.asarray(self.mask).astype(bool)
        if self.mask.shape != self.box.shape:
            raise ValueError(
                f"mask shape {self.mask.shape} does not match box shape {self.box.shape}"
            )


def merge_corrected(seg: Segmentation, ann: SparseAnnotation) -> np.ndarray:
    """Corrected contour: (seg.mask union fg) minus bg, over the box extents."""
    if seg.volume_id != ann.volume_id:
        raise ValueError(f"volume id mismatch: {seg.volume_id!r} vs {ann.volume_id!r}")
    if seg.box != ann.box:
        raise ValueError(f"box mismatch: {seg.box} vs {ann.box}")
    require_valid(ann)
    corrected = seg.mask.copy()
    origin = np.asarray(ann.box.min_corner)
    if len(ann.fg):
        local = ann.fg - origin
        corrected[local[:, 0], local[:, 1], local[:, 2]] = True
    if len(ann.bg):
        local = ann.bg - origin
        corrected[local[:, 0], local[:, 1], local[:, 2]] = False
    return corrected


def to_label_grid(ann: SparseAnnotation, extent) -> np.ndarray:
    """Full-extent uint8 label grid (0 unannotated, 1 bg, 2 fg)."""
    labels = np.zeros(tuple(int(e) for e in extent), dtype=np.uint8)
    if len(ann.bg):
        labels[ann.bg[:, 0], ann.bg[:, 1], ann.bg[:, 2]] = LABEL_BACKGROUND
    if len(ann.fg):
        labels[ann.fg[:, 0], ann.fg[:, 1], ann.fg[:, 2]] = LABEL_FOREGROUND
    return labels


def from_label_grid(volume_id: str, labels: np.ndarray, box: BoundingBox | None = None) -> SparseAnnotation:
    """Build an annotation from a label grid; box defaults to the tight nonzero box."""
    labels = np.asarray(labels)
    bad = np.unique(labels[(labels != 0) & (labels != 1) & (labels != 2)])
    if bad.size:
        raise AnnotationError([f"label values outside {{0,1,2}}: {bad.tolist()}"])
    fg = np.argwhere(labels == LABEL_FOREGROUND)
    bg = np.argwhere(labels == LABEL_BACKGROUND)
    if box is None:
        if len(fg) or len(bg):
            box = BoundingBox.of_mask(labels != 0)
        else:
            box = BoundingBox.full(labels.shape)
    return SparseAnnotation(volume_id=volume_id, box=box, fg=fg, bg=bg)


def _box_descrip(box: BoundingBox) -> str:
    lo = ",".join(str(v) for v in box.min_corner)
    hi = ",".join(str(v) for v in box.max_corner)
    return f"box={lo}:{hi}"


def _parse_box_descrip(descrip: str) -> BoundingBox | None:
    if not descrip.startswith("box="):
        return None
    try:
        lo, hi = descrip[4:].split(":")
        return BoundingBox(
            tuple(int(v) for v in lo.split(",")),
            tuple(int(v) for v in hi.split(",")),
        )
    except (ValueError, TypeError):
        return None


def serialize(ann: SparseAnnotation, extent, path, affine=None, spacing=None) -> None:
    """Write the annotation as a uint8 label NIfTI over the full volume extent."""
    require_valid(ann)
    labels = to_label_grid(ann, extent)
    nifti.write(path, labels, affine=affine, spacing=spacing, descrip=_box_descrip(ann.box))


def serialize_bytes(ann: SparseAnnotation, extent, affine=None, spacing=None) -> bytes:
    require_valid(ann)
    labels = to_label_grid(ann, extent)
    return nifti.to_bytes(labels, affine=affine, spacing=spacing, descrip=_box_descrip(ann.box))


def deserialize(path) -> SparseAnnotation:
    """Read an annotation written by serialize; inverse on fg/bg sets and box."""
    labels, _, meta = nifti.read(path)
    box = _parse_box_descrip(meta.get("descrip", ""))
    return from_label_grid(volume_id_from_path(path), labels, box=box)


def deserialize_bytes(data: bytes, volume_id: str) -> tuple[SparseAnnotation, np.ndarray]:
    """Parse annotation bytes; returns the annotation and its label grid."""
    labels, _, meta = nifti.read(data)
    box = _parse_box_descrip(meta.get("descrip", ""))
    ann = from_label_grid(volume_id, labels, box=box)
    return ann, labels
