"""3D U-Net variant and its training/inference primitives.

The network uses group normalization and residual blocks, same-padded
convolutions (output spatial dims equal input dims) and concatenating skip
connections. Supervision is sparse: the loss masks everything the annotator
did not mark, so unannotated voxels contribute exactly zero gradient.
"""

import logging
import math
import os
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.func import functional_call

from .annotation import LABEL_FOREGROUND, Segmentation, SparseAnnotation, to_label_grid
from .volume_io import BoundingBox, Volume

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture plus training hyperparameters.

    The default is the desk-scale setup (3 levels, base 16 features,
    64x64x32 patches); `paper_scale()` gives the full-size 228x228x52
    configuration. Inputs are windowed to [0, 1] with the configured HU
    window before the first convolution.
    """

    input_channels: int = 1
    output_channels: int = 2
    base_features: int = 16
    levels: int = 3
    downsample: tuple = ((2, 2, 2), (2, 2, 2))
    groupnorm_groups: int = 4
    patch_dims: tuple = (64, 64, 32)
    batch_size: int = 4
    learning_rate: float = 0.01
    momentum: float = 0.9
    threshold: float = 0.5
    window_lower: float = -125.0
    window_upper: float = 250.0

    def __post_init__(self):
        object.__setattr__(self, "downsample", tuple(tuple(int(f) for f in d) for d in self.downsample))
        object.__setattr__(self, "patch_dims", tuple(int(d) for d in self.patch_dims))
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if len(self.downsample) != self.levels - 1:
            raise ValueError(
                f"need {self.levels - 1} downsample factors for {self.levels} levels, "
                f"got {len(self.downsample)}"
            )
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.window_lower < self.window_upper:
            raise ValueError("window_lower must be < window_upper")
        for feats in self.feature_counts:
            if feats % self.groupnorm_groups:
                raise ValueError(
                    f"groupnorm_groups={self.groupnorm_groups} does not divide {feats} features"
                )
        for dim, total in zip(self.patch_dims, self.cumulative_downsample):
            if dim % total:
                raise ValueError(
                    f"patch dims {self.patch_dims} not divisible by cumulative "
                    f"downsample {self.cumulative_downsample}"
                )

    @property
    def feature_counts(self) -> tuple:
        return tuple(self.base_features * 2**i for i in range(self.levels))

    @property
    def cumulative_downsample(self) -> tuple:
        total = [1, 1, 1]
        for factors in self.downsample:
            for axis, f in enumerate(factors):
                total[axis] *= f
        return tuple(total)

    @property
    def inference_stride(self) -> tuple:
        return tuple(max(1, d // 2) for d in self.patch_dims)

    @classmethod
    def paper_scale(cls, **overrides) -> "NetworkConfig":
        """Full-size configuration: 228x228x52 patches, depth halved once."""
        defaults = dict(
            patch_dims=(228, 228, 52),
            downsample=((2, 2, 2), (2, 2, 1)),
        )
        defaults.update(overrides)
        return cls(**defaults)


class _ResidualBlock(nn.Module):
    def __init__(self, channels: int, groups: int):
        super().__init__()
        self.conv1 = nn.Conv3d(channels, channels, 3, padding=1)
        self.gn1 = nn.GroupNorm(groups, channels)
        self.conv2 = nn.Conv3d(channels, channels, 3, padding=1)
        self.gn2 = nn.GroupNorm(groups, channels)

    def forward(self, x):
        out = F.relu(self.gn1(self.conv1(x)))
        out = self.gn2(self.conv2(out))
        return F.relu(x + out)


class UNet3d(nn.Module):
    """Encoder/decoder with residual blocks; returns foreground probability."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        feats = config.feature_counts
        groups = config.groupnorm_groups
        self.stem = nn.Conv3d(config.input_channels, feats[0], 3, padding=1)
        self.enc_blocks = nn.ModuleList(_ResidualBlock(f, groups) for f in feats)
        self.down = nn.ModuleList(
            nn.Conv3d(feats[i], feats[i + 1], kernel_size=config.downsample[i], stride=config.downsample[i])
            for i in range(config.levels - 1)
        )
        self.up = nn.ModuleList()
        self.merge = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        for i in reversed(range(config.levels - 1)):
            self.up.append(nn.Conv3d(feats[i + 1], feats[i], 3, padding=1))
            self.merge.append(nn.Conv3d(feats[i] * 2, feats[i], 3, padding=1))
            self.dec_blocks.append(_ResidualBlock(feats[i], groups))
        self.head = nn.Conv3d(feats[0], config.output_channels, 1)

    def forward(self, x):
        cfg = self.config
        x = torch.clamp(
            (x - cfg.window_lower) / (cfg.window_upper - cfg.window_lower), 0.0, 1.0
        )
        x = self.stem(x)
        skips = []
        for i, block in enumerate(self.enc_blocks):
            x = block(x)
            if i < len(self.down):
                skips.append(x)
                x = self.down[i](x)
        up_factors = list(reversed(cfg.downsample))
        for factor, up, merge, block in zip(up_factors, self.up, self.merge, self.dec_blocks):
            x = F.interpolate(x, scale_factor=tuple(float(f) for f in factor), mode="nearest")
            x = up(x)
            x = torch.cat([x, skips.pop()], dim=1)
            x = merge(x)
            x = block(x)
        logits = self.head(x)
        probs = torch.softmax(logits, dim=1)
        return probs[:, 1]


def build_module(config: NetworkConfig) -> UNet3d:
    return UNet3d(config)


ModelParameters = "OrderedDict[str, torch.Tensor]"


def init_params(config: NetworkConfig, seed: int) -> OrderedDict:
    """Kaiming-initialized parameters: conv weights ~ N(0, 2/fan_in), biases 0."""
    module = UNet3d(config)
    gen = torch.Generator().manual_seed(int(seed))
    params = OrderedDict()
    for name, tensor in module.state_dict().items():
        fresh = torch.empty_like(tensor)
        if name.endswith("weight") and tensor.dim() == 5:
            fan_in = tensor[0].numel()
            fresh.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
        elif name.endswith("weight"):
            fresh.fill_(1.0)
        else:
            fresh.zero_()
        params[name] = fresh
    return params


def _check_patch_shape(config: NetworkConfig, spatial) -> None:
    for dim, total in zip(spatial, config.cumulative_downsample):
        if dim % total:
            raise ValueError(
                f"spatial dims {tuple(spatial)} not divisible by cumulative "
                f"downsample {config.cumulative_downsample}"
            )


def forward(config: NetworkConfig, params: OrderedDict, patch: np.ndarray) -> np.ndarray:
    """Foreground probability grid for one channels-first (or bare 3D) patch."""
    arr = np.asarray(patch, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[0] != config.input_channels:
        raise ValueError(
            f"expected patch of shape ({config.input_channels}, W, H, D), got {arr.shape}"
        )
    _check_patch_shape(config, arr.shape[1:])
    module = UNet3d(config)
    module.load_state_dict(params)
    module.eval()
    with torch.no_grad():
        probs = module(torch.from_numpy(np.ascontiguousarray(arr))[None])
    return probs[0].numpy()


def masked_loss(probs: torch.Tensor, labels: torch.Tensor, eps: float = 1e-7, smooth: float = 1e-6) -> torch.Tensor:
    """Cross-entropy plus (1 - dice), both restricted to annotated voxels.

    Unannotated voxels are zeroed in prediction and target before the dice
    term and masked out of the cross-entropy, so their gradient is exactly 0.
    """
    if probs.shape != labels.shape:
        raise ValueError(f"shape mismatch: probs {tuple(probs.shape)} vs labels {tuple(labels.shape)}")
    annotated = labels > 0
    if not bool(annotated.any()):
        raise ValueError("patch has no annotated voxels; sampler must guarantee one")
    mask = annotated.to(probs.dtype)
    target = (labels == LABEL_FOREGROUND).to(probs.dtype)
    p = probs.clamp(eps, 1.0 - eps)
    ce = -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p))
    ce = (ce * mask).sum() / mask.sum()
    pred_masked = probs * mask
    target_masked = target * mask
    intersection = (pred_masked * target_masked).sum()
    denom = pred_masked.sum() + target_masked.sum()
    dice_score = (2.0 * intersection + smooth) / (denom + smooth)
    return ce + (1.0 - dice_score)


def sample_patch_grids(image: np.ndarray, labels: np.ndarray, dims, rng: np.random.Generator):
    """Random patch guaranteed to contain at least one annotated voxel."""
    dims = tuple(int(d) for d in dims)
    coords = np.argwhere(labels > 0)
    if coords.size == 0:
        raise ValueError("annotation is empty; cannot sample a patch")
    pad = [max(0, d - s) for d, s in zip(dims, image.shape)]
    if any(pad):
        width = [(0, p) for p in pad]
        image = np.pad(image, width, mode="edge")
        labels = np.pad(labels, width, mode="constant")
    voxel = coords[int(rng.integers(len(coords)))]
    start = []
    for v, d, s in zip(voxel, dims, image.shape):
        lo = max(0, int(v) - d + 1)
        hi = min(s - d, int(v))
        start.append(int(rng.integers(lo, hi + 1)))
    window = tuple(slice(st, st + d) for st, d in zip(start, dims))
    return image[window].astype(np.float32), labels[window].copy()


def sample_patch(volume: Volume, ann: SparseAnnotation, dims, rng: np.random.Generator):
    labels = to_label_grid(ann, volume.shape)
    return sample_patch_grids(volume.grid, labels, dims, rng)


def train_step(
    config: NetworkConfig,
    params: OrderedDict,
    opt_state: dict,
    images: np.ndarray,
    labels: np.ndarray,
    module: UNet3d | None = None,
):
    """One SGD-with-momentum update; returns (params, opt_state, loss).

    A non-finite loss skips the update and returns the inputs unchanged.
    """
    if module is None:
        module = UNet3d(config)
    x = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
    if x.dim() == 4:
        x = x[:, None]
    y = torch.from_numpy(np.ascontiguousarray(labels)).long()
    live = {name: p.detach().clone().requires_grad_(True) for name, p in params.items()}
    probs = functional_call(module, live, (x,))
    loss = masked_loss(probs, y)
    loss_value = float(loss.detach())
    if not math.isfinite(loss_value):
        logger.warning("non-finite loss %s; skipping this update", loss_value)
        return params, opt_state, loss_value
    grads = torch.autograd.grad(loss, list(live.values()))
    lr = config.learning_rate
    mu = config.momentum
    new_params = OrderedDict()
    new_opt = {}
    for (name, p), g in zip(live.items(), grads):
        buf = opt_state.get(name)
        buf = g if buf is None else mu * buf + g
        new_params[name] = (p - lr * buf).detach()
        new_opt[name] = buf.detach()
    return new_params, new_opt, loss_value


def tile_starts(length: int, patch: int, stride: int) -> list[int]:
    """Window start offsets covering [0, length) with a flush final window."""
    if patch >= length:
        return [0]
    starts = list(range(0, length - patch + 1, max(1, stride)))
    if starts[-1] != length - patch:
        starts.append(length - patch)
    return starts


def predict_region(config: NetworkConfig, params: OrderedDict, region: np.ndarray, stride=None) -> np.ndarray:
    """Sliding-window foreground probabilities for an arbitrary 3D region.

    The region is edge-padded up to one patch per axis when smaller;
    overlapping window probabilities are averaged.
    """
    dims = config.patch_dims
    stride = tuple(stride) if stride is not None else config.inference_stride
    region = np.asarray(region, dtype=np.float32)
    pad = [max(0, d - s) for d, s in zip(dims, region.shape)]
    padded = np.pad(region, [(0, p) for p in pad], mode="edge") if any(pad) else region
    module = UNet3d(config)
    module.load_state_dict(params)
    module.eval()
    acc = np.zeros(padded.shape, dtype=np.float32)
    count = np.zeros(padded.shape, dtype=np.float32)
    with torch.no_grad():
        for sx in tile_starts(padded.shape[0], dims[0], stride[0]):
            for sy in tile_starts(padded.shape[1], dims[1], stride[1]):
                for sz in tile_starts(padded.shape[2], dims[2], stride[2]):
                    window = tuple(slice(s, s + d) for s, d in zip((sx, sy, sz), dims))
                    tensor = torch.from_numpy(np.ascontiguousarray(padded[window]))
                    probs = module(tensor[None, None])[0].numpy()
                    acc[window] += probs
                    count[window] += 1.0
    averaged = acc / count
    return averaged[tuple(slice(0, s) for s in region.shape)]


def segment(
    config: NetworkConfig,
    params: OrderedDict,
    volume: Volume,
    box: BoundingBox,
    stride=None,
) -> Segmentation:
    """Sliding-window segmentation scoped exactly to the bounding box."""
    if not box.within(volume.shape):
        raise ValueError(f"box {box} exceeds volume extent {volume.shape}")
    region = volume.grid[box.slices]
    probs = predict_region(config, params, region, stride=stride)
    mask = probs >= config.threshold
    return Segmentation(volume.id, box, mask, threshold_used=config.threshold)


@dataclass
class Checkpoint:
    """Parameter snapshot with its validation score."""

    params: OrderedDict
    val_dice: float
    epoch_index: int
    created_at: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.val_dice <= 1.0:
            raise ValueError(f"val_dice {self.val_dice} outside [0, 1]")


def checkpoint_filename(epoch_index: int, val_dice: float) -> str:
    return f"ckpt_{epoch_index:06d}_dice_{val_dice:.4f}.pt"


def save_checkpoint(directory, ckpt: Checkpoint, config: NetworkConfig) -> Path:
    """Atomically publish a checkpoint (write to temp, rename)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / checkpoint_filename(ckpt.epoch_index, ckpt.val_dice)
    payload = {
        "params": ckpt.params,
        "val_dice": float(ckpt.val_dice),
        "epoch_index": int(ckpt.epoch_index),
        "created_at": float(ckpt.created_at or time.time()),
        "config": asdict(config),
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> tuple[Checkpoint, NetworkConfig]:
    payload = torch.load(path, map_location="cpu")
    config = NetworkConfig(**payload["config"])
    ckpt = Checkpoint(
        params=OrderedDict(payload["params"]),
        val_dice=payload["val_dice"],
        epoch_index=payload["epoch_index"],
        created_at=payload["created_at"],
    )
    return ckpt, config


def best_checkpoint_path(directory) -> Path | None:
    """Latest checkpoint; filenames are monotone in epoch and best-so-far dice."""
    directory = Path(directory)
    if not directory.is_dir():
        return None
    candidates = sorted(directory.glob("ckpt_*.pt"))
    return candidates[-1] if candidates else None
