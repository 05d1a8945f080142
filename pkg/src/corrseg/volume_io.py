"""Load, save, crop and window 3D volumes and masks stored as NIfTI files.

Grids are indexed (width, height, depth). A volume's id is its file basename
stripped of ".nii.gz"/".nii"; masks and annotations for a volume are stored
under the same id so folders pair up by filename.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nifti
from .nifti import NiftiFormatError

__all__ = [
    "Volume",
    "BoundingBox",
    "WindowPreset",
    "MEDIASTINAL",
    "NiftiFormatError",
    "volume_id_from_path",
    "load_volume",
    "save_volume",
    "save_mask",
    "load_mask",
    "window_normalize",
    "apply_window",
    "crop",
]


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned voxel-index box; max_corner is inclusive."""

    min_corner: tuple[int, int, int]
    max_corner: tuple[int, int, int]

    def __post_init__(self):
        lo = tuple(int(v) for v in self.min_corner)
        hi = tuple(int(v) for v in self.max_corner)
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)
        if any(a > b for a, b in zip(lo, hi)):
            raise ValueError(f"min_corner {lo} exceeds max_corner {hi}")
        if any(a < 0 for a in lo):
            raise ValueError(f"negative min_corner {lo}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(b - a + 1 for a, b in zip(self.min_corner, self.max_corner))

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(a, b + 1) for a, b in zip(self.min_corner, self.max_corner))

    def contains_point(self, voxel) -> bool:
        return all(a <= v <= b for v, a, b in zip(voxel, self.min_corner, self.max_corner))

    def within(self, extent) -> bool:
        return all(b < e for b, e in zip(self.max_corner, extent))

    @classmethod
    def full(cls, extent) -> "BoundingBox":
        return cls((0, 0, 0), tuple(int(e) - 1 for e in extent))

    @classmethod
    def of_mask(cls, mask: np.ndarray) -> "BoundingBox":
        """Tight box around the nonzero voxels of a mask."""
        idx = np.nonzero(mask)
        if idx[0].size == 0:
            raise ValueError("mask is empty; no bounding box")
        return cls(
            tuple(int(ax.min()) for ax in idx),
            tuple(int(ax.max()) for ax in idx),
        )

    def dilate(self, margin: int, extent) -> "BoundingBox":
        lo = tuple(max(0, a - margin) for a in self.min_corner)
        hi = tuple(min(int(e) - 1, b + margin) for b, e in zip(self.max_corner, extent))
        return BoundingBox(lo, hi)


@dataclass(frozen=True)
class WindowPreset:
    """Display/normalization intensity window in HU."""

    name: str
    lower: float
    upper: float

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError(f"window lower {self.lower} must be < upper {self.upper}")


MEDIASTINAL = WindowPreset("mediastinal", -125.0, 250.0)


@dataclass
class Volume:
    """A 3D scalar grid of HU intensities with voxel spacing and affine."""

    id: str
    grid: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        self.grid = np.asarray(self.grid)
        if self.grid.ndim != 3:
            raise ValueError(f"volume grid must be 3D, got shape {self.grid.shape}")
        if any(d < 1 for d in self.grid.shape):
            raise ValueError(f"degenerate volume shape {self.grid.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"non-positive spacing {self.spacing}")
        if not np.isfinite(np.asarray(self.grid, dtype=np.float64)).all():
            raise ValueError("volume grid contains non-finite values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.grid.shape


def volume_id_from_path(path) -> str:
    name = Path(path).name
    for ext in (".nii.gz", ".nii"):
        if name.endswith(ext):
            return name[: -len(ext)]
    return Path(name).stem


def load_volume(path) -> Volume:
    """Load a (optionally gzipped) NIfTI file as a Volume."""
    grid, affine, meta = nifti.read(path)
    return Volume(
        id=volume_id_from_path(path),
        grid=grid,
        spacing=meta["spacing"],
        affine=affine,
    )


def save_volume(volume: Volume, path) -> None:
    nifti.write(path, volume.grid, affine=volume.affine, spacing=volume.spacing)


def save_mask(mask: np.ndarray, reference: Volume, path) -> None:
    """Save a binary grid as an 8-bit NIfTI on the reference volume's grid."""
    mask = np.asarray(mask)
    if mask.shape != reference.shape:
        raise ValueError(
            f"mask shape {mask.shape} does not match volume shape {reference.shape}"
        )
    nifti.write(
        path,
        (mask != 0).astype(np.uint8),
        affine=reference.affine,
        spacing=reference.spacing,
    )


def load_mask(path) -> np.ndarray:
    """Load a mask saved with save_mask back as a boolean grid."""
    grid, _, _ = nifti.read(path)
    return grid != 0


def apply_window(grid: np.ndarray, lower: float, upper: float) -> np.ndarray:
    """Map intensities through clamp((v - lower) / (upper - lower), 0, 1)."""
    scaled = (np.asarray(grid, dtype=np.float32) - lower) / (upper - lower)
    return np.clip(scaled, 0.0, 1.0)


def window_normalize(volume: Volume, preset: WindowPreset) -> np.ndarray:
    return apply_window(volume.grid, preset.lower, preset.upper)


def crop(volume: Volume, box: BoundingBox) -> Volume:
    """Extract the subvolume covered by box (inclusive corners)."""
    if not box.within(volume.shape):
        raise ValueError(f"box {box} exceeds volume extent {volume.shape}")
    offset = np.eye(4)
    offset[:3, 3] = box.min_corner
    return Volume(
        id=volume.id,
        grid=np.ascontiguousarray(volume.grid[box.slices]),
        spacing=volume.spacing,
        affine=volume.affine @ offset,
    )
