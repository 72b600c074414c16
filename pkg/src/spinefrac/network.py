"""Dual-pathway voxel-classification CNN.

Both pathways run the same stack of valid (unpadded) convolutions. The
subsampled pathway sees the image average-pooled by ``subsample_factor`` on a
grid anchored at voxel 0 of the whole volume, so its output can be cropped
consistently no matter where a segment starts. Its features are upsampled by
repetition, concatenated with the normal pathway, and classified per voxel by
1x1x1 layers.

Filter shapes are given as (x, y, z) with x the sagittal-plane normal, so a
``1x3x3`` filter never mixes sagittal slices.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
from torch import nn

CHECKPOINT_FORMAT = "spinefrac-checkpoint/1"

VARIANT_FILTERS = {
    "1slice": ((1, 3, 3), (1, 3, 3)),
    "5slices": ((5, 3, 3), (1, 3, 3)),
    "3D": ((3, 3, 3), (3, 3, 3)),
}
# 2D variants are not subsampled across sagittal slices, which keeps them
# strictly per-slice.
VARIANT_SUBSAMPLE = {"1slice": (1, 3, 3), "5slices": (1, 3, 3), "3D": (3, 3, 3)}

BASE_CHANNEL_RATIOS = (30, 30, 40, 40, 40, 40, 50, 50)
PARAMETER_BUDGET = 230_000

# produced by calibrate_channels(variant); see tests/test_network.py
CALIBRATED_PLANS = {
    "3D": ((17, 17, 23, 23, 23, 23, 28, 28), (135, 150)),
    "5slices": ((30, 30, 39, 39, 39, 39, 49, 49), (113, 150)),
    "1slice": ((29, 29, 39, 39, 39, 39, 49, 49), (129, 150)),
}


class CheckpointFormatError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    variant: str = "3D"
    conv1_filter: tuple = (3, 3, 3)
    conv_rest_filter: tuple = (3, 3, 3)
    channels_per_layer: tuple = CALIBRATED_PLANS["3D"][0]
    fc_channels: tuple = CALIBRATED_PLANS["3D"][1]
    subsample_factor: tuple = (3, 3, 3)
    n_classes: int = 3

    def __post_init__(self):
        for name in ("conv1_filter", "conv_rest_filter", "subsample_factor"):
            value = tuple(int(v) for v in getattr(self, name))
            if len(value) != 3 or min(value) < 1:
                raise ValueError(f"{name} must be three positive ints, got {value}")
            object.__setattr__(self, name, value)
        for name in ("conv1_filter", "conv_rest_filter"):
            if any(f % 2 == 0 for f in getattr(self, name)):
                raise ValueError(f"{name} extents must be odd")
        object.__setattr__(self, "channels_per_layer", tuple(int(c) for c in self.channels_per_layer))
        object.__setattr__(self, "fc_channels", tuple(int(c) for c in self.fc_channels))
        if not self.channels_per_layer or min(self.channels_per_layer) < 1:
            raise ValueError("need at least one conv layer with positive channels")
        if self.fc_channels and min(self.fc_channels) < 1:
            raise ValueError("fc channel counts must be positive")

    @classmethod
    def for_variant(cls, variant: str = "3D", **overrides) -> "NetworkConfig":
        if variant not in VARIANT_FILTERS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {list(VARIANT_FILTERS)}")
        conv1, rest = VARIANT_FILTERS[variant]
        channels, fc = CALIBRATED_PLANS[variant]
        kwargs = dict(
            variant=variant,
            conv1_filter=conv1,
            conv_rest_filter=rest,
            channels_per_layer=channels,
            fc_channels=fc,
            subsample_factor=VARIANT_SUBSAMPLE[variant],
        )
        kwargs.update(overrides)
        return cls(**kwargs)

    @property
    def n_conv_layers(self) -> int:
        return len(self.channels_per_layer)

    @property
    def n_layers_total(self) -> int:
        # conv stack + hidden fused layers + classification layer
        return self.n_conv_layers + len(self.fc_channels) + 1

    def filters(self) -> list[tuple[int, int, int]]:
        return [self.conv1_filter] + [self.conv_rest_filter] * (self.n_conv_layers - 1)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


def receptive_field(cfg: NetworkConfig) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
    """Per-axis receptive field of the normal pathway and the effective one of
    the subsampled pathway, in full-resolution voxels."""
    normal = tuple(1 + sum(f[a] - 1 for f in cfg.filters()) for a in range(3))
    subsampled = tuple(n * s for n, s in zip(normal, cfg.subsample_factor))
    return normal, subsampled


def count_parameters(cfg: NetworkConfig) -> int:
    """Weights, biases and PReLU slopes of both pathways and the fused head."""
    pathway = 0
    c_in = 1
    for f, c in zip(cfg.filters(), cfg.channels_per_layer):
        pathway += c_in * c * math.prod(f) + 2 * c
        c_in = c
    total = 2 * pathway
    c_in = 2 * cfg.channels_per_layer[-1]
    for c in cfg.fc_channels:
        total += c_in * c + 2 * c
        c_in = c
    return total + c_in * cfg.n_classes + cfg.n_classes


@lru_cache(maxsize=None)
def calibrate_channels(variant: str, budget: int = PARAMETER_BUDGET) -> tuple[tuple, tuple]:
    """Channel plan for ``variant`` whose parameter count is closest to ``budget``.

    Scales ``BASE_CHANNEL_RATIOS`` and then tunes the width of the first fused
    layer; the second fused layer stays at 150.
    """
    best = None
    for step in range(300, 1501, 5):
        scale = step / 1000
        channels = tuple(max(1, round(b * scale)) for b in BASE_CHANNEL_RATIOS)
        for fc1 in range(100, 201):
            cfg = NetworkConfig.for_variant(variant, channels_per_layer=channels, fc_channels=(fc1, 150))
            err = abs(count_parameters(cfg) - budget)
            if best is None or err < best[0]:
                best = (err, channels, (fc1, 150))
    return best[1], best[2]


@dataclass(frozen=True)
class SegmentSpec:
    """Shapes involved in classifying one output patch."""

    input_segment_dims: tuple
    input_segment_dims_subsampled: tuple
    output_patch_dims: tuple
    subsampled_output_dims: tuple


def segment_spec(cfg: NetworkConfig, output_dims) -> SegmentSpec:
    rf, _ = receptive_field(cfg)
    out = tuple(int(o) for o in output_dims)
    if min(out) < 1:
        raise ValueError(f"output dims must be positive, got {out}")
    m = tuple(-(-(o + f - 1) // f) if f > 1 else o for o, f in zip(out, cfg.subsample_factor))
    return SegmentSpec(
        input_segment_dims=tuple(o + r - 1 for o, r in zip(out, rf)),
        input_segment_dims_subsampled=tuple(mm + r - 1 for mm, r in zip(m, rf)),
        output_patch_dims=out,
        subsampled_output_dims=m,
    )


def crop_padded(arr: np.ndarray, start, size) -> np.ndarray:
    """``arr[start:start+size]`` per axis, zero-filled where out of bounds."""
    out = np.zeros(tuple(size), dtype=arr.dtype)
    src, dst = [], []
    for s, n, dim in zip(start, size, arr.shape):
        lo, hi = max(s, 0), min(s + n, dim)
        if hi <= lo:
            return out
        src.append(slice(lo, hi))
        dst.append(slice(lo - s, hi - s))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def downsample(arr: np.ndarray, factor) -> np.ndarray:
    """Block-average on a grid anchored at voxel 0; partial blocks at the far
    edges are averaged with zeros."""
    factor = tuple(factor)
    if factor == (1, 1, 1):
        return arr
    shape = tuple(-(-n // f) * f for n, f in zip(arr.shape, factor))
    padded = np.zeros(shape, dtype=np.float32)
    padded[tuple(slice(0, n) for n in arr.shape)] = arr
    blocks = padded.reshape(
        shape[0] // factor[0], factor[0], shape[1] // factor[1], factor[1], shape[2] // factor[2], factor[2]
    )
    return blocks.mean(axis=(1, 3, 5), dtype=np.float64).astype(np.float32)


@dataclass
class Segment:
    """Network input for one output patch.

    ``normal`` and ``subsampled`` are the two pathway inputs; ``offset`` is
    where the output patch starts inside the upsampled subsampled-pathway output.
    """

    normal: np.ndarray
    subsampled: np.ndarray
    offset: tuple = (0, 0, 0)
    target: np.ndarray | None = field(default=None, repr=False)


def make_segment(
    image: np.ndarray,
    out_start,
    out_dims,
    cfg: NetworkConfig,
    lowres: np.ndarray | None = None,
) -> Segment:
    """Cut both pathway inputs for the output patch at ``out_start``.

    ``lowres`` may be passed to avoid recomputing ``downsample(image)``.
    """
    spec = segment_spec(cfg, out_dims)
    rf, _ = receptive_field(cfg)
    half = [(r - 1) // 2 for r in rf]
    if lowres is None:
        lowres = downsample(image.astype(np.float32, copy=False), cfg.subsample_factor)
    normal = crop_padded(image, [s - h for s, h in zip(out_start, half)], spec.input_segment_dims)
    low_start = [s // f for s, f in zip(out_start, cfg.subsample_factor)]
    offset = tuple(s - l * f for s, l, f in zip(out_start, low_start, cfg.subsample_factor))
    sub = crop_padded(
        lowres, [l - h for l, h in zip(low_start, half)], spec.input_segment_dims_subsampled
    )
    return Segment(normal.astype(np.float32, copy=False), sub, offset)


def _pathway(cfg: NetworkConfig) -> nn.Sequential:
    layers = []
    c_in = 1
    for f, c in zip(cfg.filters(), cfg.channels_per_layer):
        layers += [nn.Conv3d(c_in, c, f), nn.PReLU(c)]
        c_in = c
    return nn.Sequential(*layers)


class DualPathwayNet(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        self.normal = _pathway(cfg)
        self.subsampled = _pathway(cfg)
        head = []
        c_in = 2 * cfg.channels_per_layer[-1]
        for c in cfg.fc_channels:
            head += [nn.Conv3d(c_in, c, 1), nn.PReLU(c)]
            c_in = c
        head.append(nn.Conv3d(c_in, cfg.n_classes, 1))
        self.head = nn.Sequential(*head)

    def forward(self, x_normal: torch.Tensor, x_sub: torch.Tensor, offsets) -> torch.Tensor:
        """Class logits of shape (B, n_classes, *output_dims).

        Inputs are (B, 1, X, Y, Z); ``offsets`` is a (B, 3) integer sequence.
        """
        n = self.normal(x_normal)
        s = self.subsampled(x_sub)
        for axis, f in enumerate(self.cfg.subsample_factor):
            if f > 1:
                s = s.repeat_interleave(f, dim=2 + axis)
        out_dims = n.shape[2:]
        crops = []
        for b, off in enumerate(offsets):
            off = [int(o) for o in off]
            crops.append(
                s[b, :, off[0]:off[0] + out_dims[0], off[1]:off[1] + out_dims[1], off[2]:off[2] + out_dims[2]]
            )
        s = torch.stack(crops)
        if s.shape != n.shape:
            raise ValueError(f"pathway outputs disagree: {tuple(n.shape)} vs {tuple(s.shape)}")
        return self.head(torch.cat([n, s], dim=1))


def build_model(cfg: NetworkConfig, weights: dict | None = None, dtype=torch.float32) -> DualPathwayNet:
    model = DualPathwayNet(cfg).to(dtype)
    if weights is not None:
        state = {k: torch.as_tensor(np.asarray(v)).to(dtype) for k, v in weights.items()}
        model.load_state_dict(state)
    return model


def init_weights(cfg: NetworkConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """He-initialized conv weights, zero biases, PReLU slopes at 0.25."""
    gen = torch.Generator().manual_seed(int(seed))
    model = DualPathwayNet(cfg)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.Conv3d):
                fan_in = module.weight[0].numel()
                std = math.sqrt(2.0 / ((1 + 0.25**2) * fan_in))
                module.weight.copy_(torch.randn(module.weight.shape, generator=gen) * std)
                module.bias.zero_()
            elif isinstance(module, nn.PReLU):
                module.weight.fill_(0.25)
    return model_weights(model)


def model_weights(model: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().astype(np.float32).copy() for k, v in model.state_dict().items()}


def _batch_tensors(segments, dtype):
    xn = torch.as_tensor(np.stack([s.normal for s in segments])[:, None]).to(dtype)
    xs = torch.as_tensor(np.stack([s.subsampled for s in segments])[:, None]).to(dtype)
    return xn, xs, [s.offset for s in segments]


def check_segment(cfg: NetworkConfig, segment: Segment) -> SegmentSpec:
    rf, _ = receptive_field(cfg)
    if any(n < r for n, r in zip(segment.normal.shape, rf)):
        raise ValueError(f"segment {segment.normal.shape} smaller than receptive field {rf}")
    out = tuple(n - r + 1 for n, r in zip(segment.normal.shape, rf))
    spec = segment_spec(cfg, out)
    if tuple(segment.subsampled.shape) != spec.input_segment_dims_subsampled:
        raise ValueError(
            f"subsampled input {segment.subsampled.shape} does not match {spec.input_segment_dims_subsampled}"
        )
    return spec


def forward(cfg: NetworkConfig, weights: dict, segment) -> np.ndarray:
    """Per-voxel class probabilities, shape (*output_dims, n_classes).

    ``segment`` is a :class:`Segment` or a bare 3D array; a bare array is the
    normal-pathway input and its subsampled context is taken from the same
    array with zeros beyond its borders.
    """
    if not isinstance(segment, Segment):
        arr = np.asarray(segment, dtype=np.float32)
        rf, _ = receptive_field(cfg)
        if arr.ndim != 3 or any(n < r for n, r in zip(arr.shape, rf)):
            raise ValueError(f"segment {arr.shape} smaller than receptive field {rf}")
        half = [(r - 1) // 2 for r in rf]
        out = [n - r + 1 for n, r in zip(arr.shape, rf)]
        segment = make_segment(arr, half, out, cfg)
    return forward_batch(cfg, weights, [segment])[0]


def forward_batch(cfg: NetworkConfig, weights, segments, model: DualPathwayNet | None = None) -> np.ndarray:
    for seg in segments:
        check_segment(cfg, seg)
    if model is None:
        model = build_model(cfg, weights)
    model.eval()
    xn, xs, offsets = _batch_tensors(segments, next(model.parameters()).dtype)
    with torch.no_grad():
        probs = torch.softmax(model(xn, xs, offsets), dim=1)
    return np.moveaxis(probs.cpu().numpy(), 1, -1)


def save_checkpoint(path, cfg: NetworkConfig, weights: dict, metadata: dict | None = None) -> None:
    arrays = {f"w:{k}": np.asarray(v) for k, v in weights.items()}
    header = {"format": CHECKPOINT_FORMAT, "config": cfg.to_dict(), "metadata": metadata or {}}
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[NetworkConfig, dict, dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        if "__header__" not in data.files:
            raise CheckpointFormatError(f"{path}: not a checkpoint (no header)")
        header = json.loads(data["__header__"].tobytes().decode())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointFormatError(
                f"{path}: checkpoint format {header.get('format')!r}, expected {CHECKPOINT_FORMAT!r}"
            )
        weights = {k[2:]: data[k].copy() for k in data.files if k.startswith("w:")}
    return NetworkConfig.from_dict(header["config"]), weights, header.get("metadata", {})
