"""Continuous training orchestration.

Owns the train/validation split policy, epoch sizing, validation-driven
model selection, the epochs_without_progress counter and the restart
procedure. A single TrainerLoop thread owns the TrainerState; annotation
arrivals are signalled to it and take effect at epoch boundaries.
"""

import json
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import unet3d
from .annotation import SparseAnnotation, to_label_grid
from .metrics import dice_counts
from .unet3d import Checkpoint, NetworkConfig, UNet3d
from .volume_io import Volume

EPOCH_LENGTH_NO_VALIDATION = 128
EPOCH_LENGTH_FLOOR = 64
EPOCH_LENGTH_MULTIPLIER = 2
RESTART_THRESHOLD = 60
VALIDATION_RATIO = 5


@dataclass
class DatasetSplit:
    """Ordered train/validation volume ids, in arrival order."""

    train_ids: list = field(default_factory=list)
    val_ids: list = field(default_factory=list)

    def __contains__(self, volume_id) -> bool:
        return volume_id in self.train_ids or volume_id in self.val_ids

    @property
    def size(self) -> int:
        return len(self.train_ids) + len(self.val_ids)


def assign(split: DatasetSplit, new_id: str) -> DatasetSplit:
    """Route a new id: first to train, second to validation, then validation
    only while the training set is at least 5x as large."""
    if new_id in split:
        raise ValueError(f"volume {new_id!r} already assigned")
    train = list(split.train_ids)
    val = list(split.val_ids)
    if split.size == 0:
        train.append(new_id)
    elif split.size == 1:
        val.append(new_id)
    elif len(train) >= VALIDATION_RATIO * len(val):
        val.append(new_id)
    else:
        train.append(new_id)
    return DatasetSplit(train, val)


def epoch_length(v: int) -> int:
    """Training samples per epoch given v annotated validation patches."""
    if v < 0:
        raise ValueError(f"negative validation patch count {v}")
    if v == 0:
        return EPOCH_LENGTH_NO_VALIDATION
    return max(EPOCH_LENGTH_FLOOR, EPOCH_LENGTH_MULTIPLIER * v)


def count_annotated_tiles(ann: SparseAnnotation, patch_dims) -> int:
    """Patch-sized windows tiling the annotation's box that contain annotation."""
    if ann.is_empty():
        return 0
    shape = ann.box.shape
    origin = np.asarray(ann.box.min_corner)
    local = np.zeros(shape, dtype=bool)
    for coords in (ann.fg, ann.bg):
        if len(coords):
            rel = coords - origin
            local[rel[:, 0], rel[:, 1], rel[:, 2]] = True
    count = 0
    for sx in unet3d.tile_starts(shape[0], patch_dims[0], patch_dims[0]):
        for sy in unet3d.tile_starts(shape[1], patch_dims[1], patch_dims[1]):
            for sz in unet3d.tile_starts(shape[2], patch_dims[2], patch_dims[2]):
                window = local[sx : sx + patch_dims[0], sy : sy + patch_dims[1], sz : sz + patch_dims[2]]
                if window.any():
                    count += 1
    return count


class InMemoryStore:
    """Volume/annotation store keyed by volume id."""

    def __init__(self):
        self._volumes: dict[str, Volume] = {}
        self._annotations: dict[str, SparseAnnotation] = {}
        self._labels: dict[str, np.ndarray] = {}

    def add_volume(self, volume: Volume) -> None:
        self._volumes[volume.id] = volume

    def add_annotation(self, ann: SparseAnnotation) -> None:
        self._annotations[ann.volume_id] = ann
        self._labels[ann.volume_id] = to_label_grid(ann, self._volumes[ann.volume_id].shape)

    def image(self, volume_id: str) -> Volume:
        return self._volumes[volume_id]

    def labels(self, volume_id: str) -> np.ndarray:
        return self._labels[volume_id]

    def annotation(self, volume_id: str) -> SparseAnnotation:
        return self._annotations[volume_id]


@dataclass
class TrainerState:
    """Mutable state owned by the trainer loop."""

    params: OrderedDict
    opt_state: dict = field(default_factory=dict)
    epoch_index: int = 0
    epochs_without_progress: int = 0
    best: Checkpoint | None = None
    restart_enabled: bool = True
    restart_threshold: int = RESTART_THRESHOLD
    running: bool = False
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))


def on_new_data(state: TrainerState) -> TrainerState:
    state.epochs_without_progress = 0
    return state


def maybe_restart(state: TrainerState, config: NetworkConfig, seed: int) -> TrainerState:
    """Reinitialize from scratch after prolonged lack of validation progress.

    The best checkpoint survives a restart: fresh models must still beat it
    to be published. With restarts disabled the trainer halts instead.
    """
    if state.epochs_without_progress < state.restart_threshold:
        return state
    if state.restart_enabled:
        state.params = unet3d.init_params(config, seed)
        state.opt_state = {}
        state.epochs_without_progress = 0
    else:
        state.running = False
    return state


def validation_dice(config: NetworkConfig, params, store, val_ids) -> float | None:
    """Dice over the annotated voxels of all validation annotations, pooled
    by voxel counts across images rather than averaged per image.

    Absent (None) when there is no annotated validation voxel to score."""
    if not val_ids:
        return None
    intersection = 0
    pred_size = 0
    true_size = 0
    annotated_total = 0
    for volume_id in val_ids:
        ann = store.annotation(volume_id)
        if ann.is_empty():
            continue
        volume = store.image(volume_id)
        seg = unet3d.segment(config, params, volume, ann.box)
        labels = to_label_grid(ann, volume.shape)[ann.box.slices]
        annotated = labels > 0
        annotated_total += int(annotated.sum())
        pred_fg = seg.mask & annotated
        true_fg = labels == 2
        intersection += int((pred_fg & true_fg).sum())
        pred_size += int(pred_fg.sum())
        true_size += int(true_fg.sum())
    if annotated_total == 0:
        return None
    return dice_counts(intersection, pred_size, true_size)


def _epoch_sample_ids(train_ids, n: int, rng: np.random.Generator) -> list:
    """Without-replacement sampling: concatenated fresh permutations, cut at n."""
    ids = []
    while len(ids) < n:
        perm = rng.permutation(len(train_ids))
        ids.extend(train_ids[i] for i in perm)
    return ids[:n]


def run_epoch(
    state: TrainerState,
    split: DatasetSplit,
    store,
    config: NetworkConfig,
    module: UNet3d | None = None,
    checkpoint_sink=None,
) -> TrainerState:
    """One training epoch followed by validation-driven model selection.

    Draws epoch_length(v) patches from the training annotations in batches,
    then scores the validation set. A strictly better dice publishes a new
    checkpoint and zeroes the progress counter; anything else increments it.
    Without validation data the epoch trains but cannot select.
    """
    # an image saved with no corrections is a valid (empty) annotation but
    # carries no supervision, so it never enters a batch
    trainable = [i for i in split.train_ids if store.labels(i).any()]
    if not trainable:
        raise ValueError("cannot run an epoch with an empty training set")
    if module is None:
        module = UNet3d(config)
    v = sum(count_annotated_tiles(store.annotation(i), config.patch_dims) for i in split.val_ids)
    n_samples = epoch_length(v)
    sample_ids = _epoch_sample_ids(trainable, n_samples, state.rng)
    for i in range(0, len(sample_ids), config.batch_size):
        batch_ids = sample_ids[i : i + config.batch_size]
        images = []
        labels = []
        for volume_id in batch_ids:
            img, lbl = unet3d.sample_patch_grids(
                store.image(volume_id).grid,
                store.labels(volume_id),
                config.patch_dims,
                state.rng,
            )
            images.append(img)
            labels.append(lbl)
        state.params, state.opt_state, _ = unet3d.train_step(
            config,
            state.params,
            state.opt_state,
            np.stack(images),
            np.stack(labels),
            module=module,
        )
    state.epoch_index += 1

    score = validation_dice(config, state.params, store, split.val_ids)
    if score is not None:
        if state.best is None or score > state.best.val_dice:
            snapshot = OrderedDict((k, v.clone()) for k, v in state.params.items())
            state.best = Checkpoint(
                params=snapshot,
                val_dice=score,
                epoch_index=state.epoch_index,
                created_at=time.time(),
            )
            state.epochs_without_progress = 0
            if checkpoint_sink is not None:
                checkpoint_sink(state.best)
        else:
            state.epochs_without_progress += 1
    return state


def save_split(split: DatasetSplit, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps({"train": split.train_ids, "val": split.val_ids}, indent=2))
    tmp.replace(path)


def load_split(path) -> DatasetSplit:
    data = json.loads(Path(path).read_text())
    return DatasetSplit(list(data["train"]), list(data["val"]))


class TrainerLoop:
    """Single-writer training loop with background-thread and stepped modes."""

    def __init__(
        self,
        config: NetworkConfig,
        store,
        checkpoint_dir,
        status_path=None,
        restart_enabled: bool = True,
        seed: int = 0,
        split: DatasetSplit | None = None,
        resume: Checkpoint | None = None,
        start_epoch: int = 0,
    ):
        self.config = config
        self.store = store
        self.checkpoint_dir = Path(checkpoint_dir)
        self.status_path = Path(status_path) if status_path else None
        self.split = split or DatasetSplit()
        params = resume.params if resume is not None else unet3d.init_params(config, seed)
        self.state = TrainerState(
            params=OrderedDict((k, v.clone()) for k, v in params.items()),
            restart_enabled=restart_enabled,
            rng=np.random.default_rng(seed),
            epoch_index=start_epoch,
            best=resume,
        )
        self._module = UNet3d(config)
        self._lock = threading.Lock()
        self._wake = threading.Event()
        self._stop_requested = False
        self._pending_new_data = False
        self._thread: threading.Thread | None = None
        self._write_status()

    # -- annotation arrivals ------------------------------------------------

    def assign_annotation(self, volume_id: str) -> str:
        """Route a new annotated volume to a split; resets progress at the
        next epoch boundary. Returns "train" or "val"."""
        with self._lock:
            self.split = assign(self.split, volume_id)
            name = "val" if volume_id in self.split.val_ids else "train"
            self._pending_new_data = True
        self._wake.set()
        self._write_status()
        return name

    # -- lifecycle ----------------------------------------------------------

    @property
    def running(self) -> bool:
        return self._thread is not None and self._thread.is_alive()

    def start(self) -> None:
        if self.running:
            return
        self._stop_requested = False
        self.state.running = True
        self._thread = threading.Thread(target=self._run, name="trainer", daemon=True)
        self._thread.start()

    def stop(self, wait: bool = True) -> None:
        """Halt after the current epoch; a no-op when idle."""
        self._stop_requested = True
        self._wake.set()
        if wait and self._thread is not None:
            self._thread.join()
        self.state.running = False
        self._write_status()

    def _has_trainable_data(self) -> bool:
        with self._lock:
            train_ids = list(self.split.train_ids)
        return any(self.store.labels(i).any() for i in train_ids)

    def step(self, epochs: int = 1) -> None:
        """Run epochs synchronously on the calling thread (serialized mode)."""
        if self.running:
            raise RuntimeError("cannot step while the background trainer is running")
        if not self._has_trainable_data():
            raise ValueError("no training annotations yet")
        self.state.running = True
        for _ in range(epochs):
            self._one_epoch()
            if not self.state.running:
                break
        self.state.running = False
        self._write_status()

    def _run(self) -> None:
        while not self._stop_requested:
            if not self._has_trainable_data():
                self._wake.wait(timeout=0.2)
                self._wake.clear()
                continue
            self._one_epoch()
        self.state.running = False
        self._write_status()

    def _one_epoch(self) -> None:
        with self._lock:
            split = DatasetSplit(list(self.split.train_ids), list(self.split.val_ids))
        run_epoch(
            self.state,
            split,
            self.store,
            self.config,
            module=self._module,
            checkpoint_sink=self._publish_checkpoint,
        )
        with self._lock:
            if self._pending_new_data:
                on_new_data(self.state)
                self._pending_new_data = False
        restart_seed = int(self.state.rng.integers(2**31 - 1))
        maybe_restart(self.state, self.config, restart_seed)
        if not self.state.running:
            # restarts disabled and progress stalled: the trainer halts
            self._stop_requested = True
        self._write_status()

    def _publish_checkpoint(self, ckpt: Checkpoint) -> None:
        unet3d.save_checkpoint(self.checkpoint_dir, ckpt, self.config)

    # -- reporting ----------------------------------------------------------

    def status(self) -> dict:
        with self._lock:
            return {
                "running": self.running or self.state.running,
                "epoch_index": self.state.epoch_index,
                "epochs_without_progress": self.state.epochs_without_progress,
                "best_val_dice": None if self.state.best is None else self.state.best.val_dice,
                "train_size": len(self.split.train_ids),
                "val_size": len(self.split.val_ids),
            }

    def _write_status(self) -> None:
        if self.status_path is None:
            return
        status = self.status()
        self.status_path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.status_path.with_name(self.status_path.name + ".tmp")
        tmp.write_text(json.dumps(status, indent=2))
        tmp.replace(self.status_path)
