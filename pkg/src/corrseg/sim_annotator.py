"""Deterministic oracle annotator and synthetic data for desk-scale runs.

Stands in for the physician in the corrective-annotation loop: it requests a
segmentation, marks (a fraction of) the model's errors as fg/bg corrections,
submits them and paces the trainer, producing an analysis-ready session
report without a human in front of the UI.
"""

import csv
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .annotation import Segmentation, SparseAnnotation, merge_corrected, serialize_bytes
from .metrics import dice
from .volume_io import BoundingBox, Volume


@dataclass
class OracleConfig:
    """How much of the error the oracle corrects, and how it picks voxels."""

    correction_fraction: float = 1.0
    component_policy: str = "largest_components_first"
    dense_bootstrap: bool = True
    seed: int = 0
    box_margin: int = 8

    def __post_init__(self):
        if not 0.0 < self.correction_fraction <= 1.0:
            raise ValueError(f"correction_fraction {self.correction_fraction} outside (0, 1]")
        if self.component_policy not in ("largest_components_first", "uniform"):
            raise ValueError(f"unknown component_policy {self.component_policy!r}")


@dataclass
class SessionConfig:
    """Pacing and reporting knobs for a simulated annotation session."""

    epochs_per_image: int = 2
    pacing: str = "step"  # "step" drives epochs synchronously; "poll" waits on /status
    poll_timeout: float = 300.0
    session_id: str = "sim"
    emit_events: bool = True
    save_masks_dir: Path | None = None


def make_synthetic_dataset(n: int, dims, seed: int) -> list[tuple[Volume, np.ndarray]]:
    """Randomized bright ellipsoids on a noisy soft-tissue background.

    Returns (volume, ground-truth mask) pairs, deterministic per seed.
    Intensities sit inside the mediastinal window so the default input
    normalization sees real contrast.
    """
    if n < 1:
        raise ValueError("need at least one volume")
    dims = tuple(int(d) for d in dims)
    if any(d < 16 for d in dims):
        raise ValueError(f"dims {dims} too small; need >= 16 per axis")
    rng = np.random.default_rng(seed)
    grids = np.indices(dims, dtype=np.float32)
    dataset = []
    for i in range(n):
        radii = np.array([rng.uniform(0.14, 0.22) * d for d in dims])
        radii = np.maximum(radii, 4.0)
        center = np.array(
            [rng.uniform(r + 2.0, d - r - 3.0) for r, d in zip(radii, dims)]
        )
        dist = sum(((grids[a] - center[a]) / radii[a]) ** 2 for a in range(3))
        truth = dist <= 1.0
        fg_level = rng.uniform(60.0, 90.0)
        bg_level = rng.uniform(-90.0, -60.0)
        image = rng.normal(bg_level, 18.0, size=dims).astype(np.float32)
        image[truth] = rng.normal(fg_level, 18.0, size=int(truth.sum())).astype(np.float32)
        volume = Volume(id=f"synth_{i:03d}", grid=image)
        dataset.append((volume, truth))
    return dataset


def make_synthetic_dose(truth: np.ndarray, seed: int = 0, peak: float = 2.0) -> np.ndarray:
    """Smooth dose field peaking near (but offset from) the structure."""
    rng = np.random.default_rng(seed)
    dims = truth.shape
    center = np.array(ndimage.center_of_mass(truth)) + rng.uniform(-6.0, 6.0, size=3)
    sigma = np.array([0.35 * d for d in dims])
    grids = np.indices(dims, dtype=np.float32)
    dist = sum(((grids[a] - center[a]) / sigma[a]) ** 2 for a in range(3))
    return (peak * np.exp(-0.5 * dist)).astype(np.float32)


def dense_annotation(volume_id: str, box: BoundingBox, truth: np.ndarray) -> SparseAnnotation:
    """Fully annotate ground truth inside the box (bootstrap supervision)."""
    local = truth[box.slices]
    origin = np.asarray(box.min_corner)
    return SparseAnnotation(
        volume_id=volume_id,
        box=box,
        fg=np.argwhere(local) + origin,
        bg=np.argwhere(~local) + origin,
    )


def _ranked_components(error: np.ndarray):
    labeled, count = ndimage.label(error)
    comps = []
    for index in range(1, count + 1):
        coords = np.argwhere(labeled == index)
        comps.append((len(coords), coords))
    return comps


def correct(
    pred: Segmentation,
    truth: np.ndarray,
    cfg: OracleConfig,
    rng: np.random.Generator | None = None,
) -> SparseAnnotation:
    """Corrective annotation targeting only genuine model errors.

    fg covers false negatives, bg false positives; at most
    ceil(correction_fraction * errors) voxels are annotated, chosen per the
    component policy.
    """
    if truth.shape != pred.mask.shape:
        truth = truth[pred.box.slices]
    if truth.shape != pred.mask.shape:
        raise ValueError(f"truth shape {truth.shape} does not cover box {pred.box.shape}")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    false_neg = truth & ~pred.mask
    false_pos = pred.mask & ~truth
    total_errors = int(false_neg.sum()) + int(false_pos.sum())
    origin = np.asarray(pred.box.min_corner)
    if total_errors == 0:
        return SparseAnnotation(volume_id=pred.volume_id, box=pred.box)
    budget = math.ceil(cfg.correction_fraction * total_errors)

    if cfg.component_policy == "uniform":
        fn_coords = np.argwhere(false_neg)
        fp_coords = np.argwhere(false_pos)
        kinds = np.concatenate([np.zeros(len(fn_coords), int), np.ones(len(fp_coords), int)])
        coords = np.concatenate([fn_coords, fp_coords])
        chosen = rng.choice(total_errors, size=min(budget, total_errors), replace=False)
        fg_local = coords[chosen[kinds[chosen] == 0]]
        bg_local = coords[chosen[kinds[chosen] == 1]]
    else:
        ranked = [(size, 0, coords) for size, coords in _ranked_components(false_neg)]
        ranked += [(size, 1, coords) for size, coords in _ranked_components(false_pos)]
        ranked.sort(key=lambda item: (-item[0], item[1]))
        fg_parts, bg_parts = [], []
        remaining = budget
        for size, kind, coords in ranked:
            if remaining <= 0:
                break
            take = coords if size <= remaining else coords[:remaining]
            (fg_parts if kind == 0 else bg_parts).append(take)
            remaining -= len(take)
        fg_local = np.concatenate(fg_parts) if fg_parts else np.empty((0, 3), int)
        bg_local = np.concatenate(bg_parts) if bg_parts else np.empty((0, 3), int)

    return SparseAnnotation(
        volume_id=pred.volume_id,
        box=pred.box,
        fg=fg_local + origin,
        bg=bg_local + origin,
    )


class ServerClient:
    """Thin wrapper over an httpx-compatible client bound to the service API."""

    def __init__(self, http):
        self.http = http

    def status(self) -> dict:
        response = self.http.get("/status")
        response.raise_for_status()
        return response.json()

    def segment(self, volume_id: str, box: BoundingBox) -> Segmentation | None:
        """Box-scoped segmentation, or None while no checkpoint exists."""
        response = self.http.post(
            "/segment",
            json={
                "volume_id": volume_id,
                "box_min": list(box.min_corner),
                "box_max": list(box.max_corner),
            },
        )
        if response.status_code == 503:
            return None
        response.raise_for_status()
        from . import nifti

        mask, _, _ = nifti.read(response.content)
        return Segmentation(volume_id, box, mask != 0)

    def annotate(self, volume_id: str, payload: bytes) -> dict:
        response = self.http.post(f"/annotate?volume_id={volume_id}", content=payload)
        response.raise_for_status()
        return response.json()

    def step_training(self, epochs: int) -> dict:
        response = self.http.post("/train/step", json={"epochs": epochs})
        response.raise_for_status()
        return response.json()

    def post_events(self, session: str, events: list[dict]) -> None:
        response = self.http.post("/events", json={"session": session, "events": events})
        response.raise_for_status()


def run_session(
    dataset: list[tuple[Volume, np.ndarray]],
    client: ServerClient,
    oracle_cfg: OracleConfig,
    session_cfg: SessionConfig | None = None,
) -> list[dict]:
    """Annotate every image in order through the server API.

    Timestamps use a synthetic session clock advanced by the annotation
    workload, so reports and event logs are reproducible run to run.
    """
    session_cfg = session_cfg or SessionConfig()
    rng = np.random.default_rng(oracle_cfg.seed)
    clock = 0.0
    rows = []
    for index, (volume, truth) in enumerate(dataset):
        box = BoundingBox.of_mask(truth).dilate(oracle_cfg.box_margin, volume.shape)
        opened_at = clock
        events = [
            {"timestamp": clock, "kind": "open_file", "volume_id": volume.id}
        ]
        seg = client.segment(volume.id, box)
        bootstrap = seg is None
        if bootstrap:
            pred = Segmentation(volume.id, box, np.zeros(box.shape, dtype=bool))
            if oracle_cfg.dense_bootstrap:
                ann = dense_annotation(volume.id, box, truth)
            else:
                ann = correct(pred, truth, oracle_cfg, rng)
        else:
            pred = seg
            ann = correct(pred, truth, oracle_cfg, rng)
        corrected = merge_corrected(pred, ann)

        # synthetic annotation effort: a base cost plus per-voxel painting time
        work_seconds = 4.0 + 0.002 * ann.size
        step = 5.0
        t = opened_at
        while t + step < opened_at + work_seconds:
            t += step
            events.append({"timestamp": t, "kind": "axial_slice_change", "volume_id": volume.id})
        clock = opened_at + work_seconds
        events.append({"timestamp": clock, "kind": "save", "volume_id": volume.id})

        client.annotate(volume.id, serialize_bytes(ann, volume.shape, spacing=volume.spacing))
        if session_cfg.emit_events:
            client.post_events(session_cfg.session_id, events)

        if session_cfg.pacing == "step":
            status = client.step_training(session_cfg.epochs_per_image)
        else:
            status = _wait_for_epochs(client, session_cfg)

        corrected_full = np.zeros(volume.shape, dtype=bool)
        corrected_full[box.slices] = corrected
        rows.append(
            {
                "index": index,
                "volume_id": volume.id,
                "dice_pred_corrected": dice(pred.mask, corrected),
                "dice_corrected_truth": dice(corrected_full, truth),
                "annotated_voxels": ann.size,
                "timestamp": opened_at,
                "epoch_index": status["epoch_index"],
                "bootstrap": bootstrap,
            }
        )
        if session_cfg.save_masks_dir is not None:
            _save_session_masks(session_cfg.save_masks_dir, volume, box, pred.mask, corrected)
        clock += 30.0  # between-image break; excluded by the inactivity rule
    return rows


def _wait_for_epochs(client: ServerClient, session_cfg: SessionConfig) -> dict:
    status = client.status()
    target = status["epoch_index"] + session_cfg.epochs_per_image
    deadline = time.time() + session_cfg.poll_timeout
    while status["epoch_index"] < target:
        if time.time() > deadline:
            raise TimeoutError(
                f"trainer did not reach epoch {target} within {session_cfg.poll_timeout}s"
            )
        time.sleep(0.2)
        status = client.status()
    return status


def _save_session_masks(directory, volume: Volume, box: BoundingBox, pred, corrected) -> None:
    from . import nifti

    directory = Path(directory)
    for name, mask in (("pred", pred), ("corrected", corrected)):
        full = np.zeros(volume.shape, dtype=np.uint8)
        full[box.slices] = mask
        nifti.write(
            directory / name / f"{volume.id}.nii.gz",
            full,
            affine=volume.affine,
            spacing=volume.spacing,
        )


REPORT_COLUMNS = [
    "index",
    "volume_id",
    "dice_pred_corrected",
    "dice_corrected_truth",
    "annotated_voxels",
    "timestamp",
    "epoch_index",
    "bootstrap",
]


def write_report(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_report(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = []
        for row in csv.DictReader(fh):
            rows.append(
                {
                    "index": int(row["index"]),
                    "volume_id": row["volume_id"],
                    "dice_pred_corrected": float(row["dice_pred_corrected"]),
                    "dice_corrected_truth": float(row["dice_corrected_truth"]),
                    "annotated_voxels": int(row["annotated_voxels"]),
                    "timestamp": float(row["timestamp"]),
                    "epoch_index": int(row["epoch_index"]),
                    "bootstrap": row["bootstrap"] == "True",
                }
            )
        return rows
