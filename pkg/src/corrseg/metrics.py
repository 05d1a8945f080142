"""Evaluation arithmetic: dice, mean organ dose, deviation and running stats."""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class DoseMatrix:
    """Per-voxel absorbed dose (Gy) co-registered with a volume's grid."""

    grid: np.ndarray
    volume_id: str = ""

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 3:
            raise ValueError(f"dose grid must be 3D, got shape {self.grid.shape}")
        if (self.grid < 0).any():
            raise ValueError("dose grid contains negative values")


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """Overlap score 2|a∩b| / (|a|+|b|); two empty masks agree perfectly (1.0)."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    size_a = int(a.sum())
    size_b = int(b.sum())
    if size_a + size_b == 0:
        return 1.0
    inter = int(np.logical_and(a, b).sum())
    return 2.0 * inter / (size_a + size_b)


def dice_counts(intersection: int, size_a: int, size_b: int) -> float:
    """Dice from pooled voxel counts (used for multi-image validation scores)."""
    if size_a + size_b == 0:
        return 1.0
    return 2.0 * intersection / (size_a + size_b)


def mean_dose(dose: DoseMatrix, mask: np.ndarray) -> float:
    """Arithmetic mean of dose over the mask's voxels, in Gy."""
    mask = np.asarray(mask).astype(bool)
    if mask.shape != dose.grid.shape:
        raise ValueError(f"mask shape {mask.shape} does not match dose {dose.grid.shape}")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("mean dose over an empty mask is undefined")
    return float(dose.grid[mask].sum()) / count


def dose_abs_diff(dose: DoseMatrix, pred_mask: np.ndarray, corrected_mask: np.ndarray) -> float:
    """|mean_dose(pred) - mean_dose(corrected)| in Gy."""
    return abs(mean_dose(dose, pred_mask) - mean_dose(dose, corrected_mask))


def running_stats(series, window: int = 60) -> tuple[np.ndarray, np.ndarray]:
    """Trailing-window mean and standard deviation per index.

    The window at index i covers the last min(i+1, window) values, the
    current one included.
    """
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    values = np.asarray(series, dtype=np.float64)
    if values.size == 0:
        raise ValueError("empty series")
    means = np.empty_like(values)
    stds = np.empty_like(values)
    for i in range(len(values)):
        chunk = values[max(0, i - window + 1) : i + 1]
        means[i] = chunk.mean()
        stds[i] = chunk.std()
    return means, stds


def gaussian_running_mean(series, bandwidth: float = 120.0) -> np.ndarray:
    """Gaussian-kernel running mean over index distance (normalized weights)."""
    if bandwidth <= 0:
        raise ValueError(f"bandwidth must be > 0, got {bandwidth}")
    values = np.asarray(series, dtype=np.float64)
    if values.size == 0:
        return values.copy()
    idx = np.arange(len(values), dtype=np.float64)
    out = np.empty_like(values)
    for i in range(len(values)):
        w = np.exp(-0.5 * ((idx - i) / bandwidth) ** 2)
        out[i] = float((w * values).sum() / w.sum())
    return out


def write_series_csv(path, rows) -> None:
    """Write (index, volume_id, value) rows; the common shape of our analyses."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "volume_id", "value"])
        for index, volume_id, value in rows:
            writer.writerow([index, volume_id, value])


def read_series_csv(path) -> list[tuple[int, str, float]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [(int(r["index"]), r["volume_id"], float(r["value"])) for r in reader]
