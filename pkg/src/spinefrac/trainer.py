"""Segment sampling, augmentation, training and tiled whole-volume inference."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .labels import BACKGROUND, FRACTURE, NORMAL
from .network import (
    NetworkConfig,
    Segment,
    build_model,
    crop_padded,
    downsample,
    init_weights,
    make_segment,
    model_weights,
    receptive_field,
    segment_spec,
)
from .volume_io import Volume, load_probability_map, save_probability_map

log = logging.getLogger(__name__)

CLASSES = (BACKGROUND, NORMAL, FRACTURE)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 35
    initial_lr: float = 0.001
    anneal: bool = True
    lr_anneal_factor: float = 0.5
    lr_anneal_patience: int = 3
    lr_anneal_min_delta: float = 1e-4
    l1_weight: float = 1e-6
    l2_weight: float = 1e-4
    rmsprop_alpha: float = 0.9
    rmsprop_eps: float = 1e-4
    segments_per_epoch: int = 200
    segment_batch: int = 10
    output_patch: tuple = (9, 9, 9)
    val_segments: int = 100
    sampling_weights: tuple = (0.5, 0.25, 0.25)
    intensity_noise_std: float = 0.05
    flip_axes: tuple = (0, 1, 2)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        w = np.asarray(self.sampling_weights, dtype=float)
        if w.shape != (3,) or np.any(w < 0) or not np.isclose(w.sum(), 1.0):
            raise ConfigError(f"sampling_weights must be 3 non-negative values summing to 1, got {self.sampling_weights}")
        if self.initial_lr < 0:
            raise ConfigError("initial_lr must be non-negative")
        if self.segment_batch < 1 or self.segments_per_epoch < 1:
            raise ConfigError("segment_batch and segments_per_epoch must be >= 1")
        if not set(self.flip_axes) <= {0, 1, 2}:
            raise ConfigError(f"flip_axes must be a subset of (0, 1, 2), got {self.flip_axes}")
        object.__setattr__(self, "sampling_weights", tuple(float(v) for v in self.sampling_weights))
        object.__setattr__(self, "output_patch", tuple(int(v) for v in self.output_patch))
        object.__setattr__(self, "flip_axes", tuple(int(v) for v in self.flip_axes))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ProbabilityMap:
    """Per-voxel (background, normal, fracture) probabilities on an image grid."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[-1] != 3:
            raise ValueError(f"expected (X, Y, Z, 3) probabilities, got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)

    @property
    def shape(self):
        return self.data.shape[:3]

    def channel(self, name: str) -> Volume:
        idx = ("background", "normal", "fracture").index(name)
        return Volume(self.data[..., idx], self.spacing, self.origin)

    @property
    def fracture(self) -> np.ndarray:
        return self.data[..., FRACTURE]

    def save(self, path) -> None:
        save_probability_map(self.data, self.spacing, self.origin, path)

    @classmethod
    def load(cls, path) -> "ProbabilityMap":
        return cls(*load_probability_map(path))


@dataclass
class TrainingCase:
    """A preprocessed image with its label volume, plus cached sampling tables."""

    case_id: str
    image: Volume
    labels: Volume
    _lowres: dict = field(default_factory=dict, repr=False)
    _class_index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.image.shape != self.labels.shape:
            raise ValueError(f"{self.case_id}: image {self.image.shape} and labels {self.labels.shape} differ")
        self.image = self.image.with_data(self.image.data.astype(np.float32, copy=False))

    def lowres(self, factor) -> np.ndarray:
        factor = tuple(factor)
        if factor not in self._lowres:
            self._lowres[factor] = downsample(self.image.data, factor)
        return self._lowres[factor]

    def class_voxels(self, cls: int) -> np.ndarray:
        if cls not in self._class_index:
            self._class_index[cls] = np.flatnonzero(self.labels.data.ravel() == cls)
        return self._class_index[cls]


def _effective_weights(case: TrainingCase, weights) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    present = np.array([case.class_voxels(c).size > 0 for c in CLASSES])
    if present.all():
        return w
    missing = [c for c, p in zip(CLASSES, present) if not p and w[c] > 0]
    w = np.where(present, w, 0.0)
    if w.sum() == 0:
        w = present.astype(float)
    if missing:
        log.info("%s: classes %s absent, sampling weight redistributed", case.case_id, missing)
    return w / w.sum()


def draw_centers(case: TrainingCase, weights, n: int, rng: np.random.Generator):
    """Class-weighted segment centers: class first, then a uniform voxel of it."""
    w = _effective_weights(case, weights)
    classes = rng.choice(len(CLASSES), size=n, p=w)
    centers = np.empty((n, 3), dtype=int)
    for c in CLASSES:
        sel = np.flatnonzero(classes == c)
        if sel.size:
            flat = case.class_voxels(c)[rng.integers(0, case.class_voxels(c).size, size=sel.size)]
            centers[sel] = np.stack(np.unravel_index(flat, case.labels.shape), axis=1)
    return centers, classes


def segment_at(case: TrainingCase, center, net_cfg: NetworkConfig, out_dims) -> Segment:
    out_dims = tuple(out_dims)
    start = [int(c) - o // 2 for c, o in zip(center, out_dims)]
    seg = make_segment(case.image.data, start, out_dims, net_cfg, case.lowres(net_cfg.subsample_factor))
    # out-of-volume target voxels are marked -1 and ignored by the loss
    seg.target = crop_padded(case.labels.data.astype(np.int64) + 1, start, out_dims) - 1
    return seg


def sample_segments(
    image: Volume,
    labels: Volume,
    cfg: TrainingConfig,
    n: int,
    net_cfg: NetworkConfig | None = None,
    rng: np.random.Generator | None = None,
) -> list[Segment]:
    """``n`` training segments centered on class-weighted voxels, each carrying
    its target label patch."""
    if n < 1:
        raise ValueError("n must be >= 1")
    net_cfg = net_cfg or NetworkConfig()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    case = TrainingCase("sample", image, labels)
    centers, _ = draw_centers(case, cfg.sampling_weights, n, rng)
    return [segment_at(case, c, net_cfg, cfg.output_patch) for c in centers]


def flip_segment(seg: Segment, axes, net_cfg: NetworkConfig) -> Segment:
    """Mirror a segment along ``axes``; the output patch moves with it."""
    rf, _ = receptive_field(net_cfg)
    normal, sub, target = seg.normal, seg.subsampled, seg.target
    offset = list(seg.offset)
    for a in axes:
        normal = np.flip(normal, a)
        sub = np.flip(sub, a)
        if target is not None:
            target = np.flip(target, a)
        f = net_cfg.subsample_factor[a]
        if f > 1:
            out = normal.shape[a] - rf[a] + 1
            m = sub.shape[a] - rf[a] + 1
            offset[a] = m * f - offset[a] - out
    return Segment(
        np.ascontiguousarray(normal),
        np.ascontiguousarray(sub),
        tuple(offset),
        None if target is None else np.ascontiguousarray(target),
    )


def augment(seg: Segment, cfg: TrainingConfig, rng: np.random.Generator, net_cfg: NetworkConfig | None = None) -> Segment:
    """Additive Gaussian intensity noise and random flips (probability 0.5 per
    enabled axis), applied identically to inputs and target."""
    axes = [a for a in cfg.flip_axes if rng.random() < 0.5]
    if axes:
        seg = flip_segment(seg, axes, net_cfg or NetworkConfig())
    if cfg.intensity_noise_std > 0:
        seg = Segment(
            seg.normal + rng.normal(0.0, cfg.intensity_noise_std, seg.normal.shape).astype(np.float32),
            seg.subsampled + rng.normal(0.0, cfg.intensity_noise_std, seg.subsampled.shape).astype(np.float32),
            seg.offset,
            seg.target,
        )
    return seg


def _batch(segments, dtype=torch.float32):
    xn = torch.as_tensor(np.stack([s.normal for s in segments])[:, None]).to(dtype)
    xs = torch.as_tensor(np.stack([s.subsampled for s in segments])[:, None]).to(dtype)
    target = torch.as_tensor(np.stack([s.target for s in segments]))
    return xn, xs, [s.offset for s in segments], target


def regularization(model, l1: float, l2: float) -> torch.Tensor:
    """L1 and L2 penalties over conv weights (biases and PReLU slopes excluded)."""
    total = torch.zeros((), dtype=next(model.parameters()).dtype)
    for name, p in model.named_parameters():
        if p.dim() == 5:
            if l1:
                total = total + l1 * p.abs().sum()
            if l2:
                total = total + l2 * (p * p).sum()
    return total


def segment_loss(model, segments, l1: float = 0.0, l2: float = 0.0) -> torch.Tensor:
    """Voxel-wise cross-entropy over the output patches plus regularization."""
    dtype = next(model.parameters()).dtype
    xn, xs, offsets, target = _batch(segments, dtype)
    logits = model(xn, xs, offsets)
    ce = F.cross_entropy(logits, target, ignore_index=-1)
    return ce + regularization(model, l1, l2)


def mean_class_accuracy(model, segments, batch: int = 20) -> float:
    """Mean over present classes of per-class voxel accuracy."""
    hits = np.zeros(3)
    totals = np.zeros(3)
    model.eval()
    with torch.no_grad():
        for i in range(0, len(segments), batch):
            chunk = segments[i:i + batch]
            xn, xs, offsets, target = _batch(chunk, next(model.parameters()).dtype)
            pred = model(xn, xs, offsets).argmax(dim=1).numpy()
            t = target.numpy()
            for c in CLASSES:
                mask = t == c
                totals[c] += mask.sum()
                hits[c] += (pred[mask] == c).sum()
    present = totals > 0
    return float(np.mean(hits[present] / totals[present])) if present.any() else 0.0


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_metric: float | None
    lr: float
    wall_time: float = 0.0

    def deterministic(self) -> dict:
        d = asdict(self)
        d.pop("wall_time")
        return d


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_metric: float | None = None

    def __len__(self):
        return len(self.records)

    def deterministic(self) -> list[dict]:
        return [r.deterministic() for r in self.records]

    def write(self, path) -> None:
        """Line-delimited JSON, one record per epoch."""
        with open(path, "a", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(asdict(r)) + "\n")


def _epoch_plan(cases, cfg: TrainingConfig, n: int, rng: np.random.Generator):
    """Pre-drawn (case, center) pairs so results do not depend on worker count."""
    case_idx = rng.integers(0, len(cases), size=n)
    plan = []
    for ci in range(len(cases)):
        sel = np.flatnonzero(case_idx == ci)
        if sel.size:
            centers, _ = draw_centers(cases[ci], cfg.sampling_weights, sel.size, rng)
            plan += [(int(i), ci, c) for i, c in zip(sel, centers)]
    plan.sort(key=lambda t: t[0])
    return [(ci, c) for _, ci, c in plan]


def train(
    train_cases: list[TrainingCase],
    val_cases: list[TrainingCase],
    net_cfg: NetworkConfig,
    train_cfg: TrainingConfig,
    init: dict | None = None,
    keep_best: bool = False,
    log_path=None,
) -> tuple[dict, TrainingLog]:
    """RMSprop on class-weighted segments with L1/L2 regularization; the
    learning rate is halved when the validation metric stops improving.

    Runs exactly ``train_cfg.epochs`` epochs. With ``keep_best`` the weights of
    the best validation epoch are returned instead of the last ones.
    """
    if not train_cases:
        raise ConfigError("need at least one training case")
    train_ids = {c.case_id for c in train_cases}
    if train_ids & {c.case_id for c in val_cases}:
        raise ConfigError("validation cases overlap training cases")
    if train_cfg.anneal and not val_cases:
        raise ConfigError("plateau annealing needs a non-empty validation set")

    torch.manual_seed(train_cfg.seed)
    weights = init if init is not None else init_weights(net_cfg, train_cfg.seed)
    model = build_model(net_cfg, weights)
    params = list(model.parameters())
    opt = torch.optim.RMSprop(
        params, lr=train_cfg.initial_lr, alpha=train_cfg.rmsprop_alpha, eps=train_cfg.rmsprop_eps
    )

    val_segments = []
    if val_cases:
        vrng = np.random.default_rng([train_cfg.seed, 1_000_003])
        for ci, center in _epoch_plan(val_cases, train_cfg, train_cfg.val_segments, vrng):
            val_segments.append(segment_at(val_cases[ci], center, net_cfg, train_cfg.output_patch))

    history = TrainingLog()
    best_metric, best_weights, bad_epochs = -np.inf, None, 0
    lr = train_cfg.initial_lr
    for epoch in range(train_cfg.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng([train_cfg.seed, epoch])
        plan = _epoch_plan(train_cases, train_cfg, train_cfg.segments_per_epoch, rng)
        model.train()
        losses = []
        for i in range(0, len(plan), train_cfg.segment_batch):
            batch = [
                augment(segment_at(train_cases[ci], c, net_cfg, train_cfg.output_patch), train_cfg, rng, net_cfg)
                for ci, c in plan[i:i + train_cfg.segment_batch]
            ]
            opt.zero_grad()
            loss = segment_loss(model, batch, train_cfg.l1_weight, train_cfg.l2_weight)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))

        metric = mean_class_accuracy(model, val_segments) if val_segments else None
        history.records.append(
            EpochRecord(epoch + 1, float(np.mean(losses)), metric, lr, time.perf_counter() - t0)
        )
        log.debug("epoch %d loss %.4f val %s lr %g", epoch + 1, np.mean(losses), metric, lr)
        if metric is not None:
            if metric > best_metric + train_cfg.lr_anneal_min_delta:
                best_metric, bad_epochs = metric, 0
                best_weights = model_weights(model)
                history.best_epoch, history.best_val_metric = epoch + 1, metric
            else:
                bad_epochs += 1
                if train_cfg.anneal and bad_epochs >= train_cfg.lr_anneal_patience:
                    lr *= train_cfg.lr_anneal_factor
                    for group in opt.param_groups:
                        group["lr"] = lr
                    bad_epochs = 0

    if log_path is not None:
        history.write(log_path)
    final = model_weights(model)
    if keep_best and best_weights is not None:
        return best_weights, history
    return final, history


def tile_starts(dim: int, out: int) -> list[int]:
    return list(range(0, dim, out))


def infer_volume(
    image: Volume,
    net_cfg: NetworkConfig,
    weights: dict,
    tile=(45, 45, 45),
    batch: int = 4,
    model=None,
) -> ProbabilityMap:
    """Grid-sampled inference: non-overlapping output tiles cover the volume
    exactly once; context beyond the borders is zero."""
    rf, _ = receptive_field(net_cfg)
    tile = tuple(int(t) for t in tile)
    if len(tile) != 3 or any(t < r for t, r in zip(tile, rf)):
        raise ConfigError(f"tile {tile} smaller than receptive field {rf}")
    out_dims = tuple(t - r + 1 for t, r in zip(tile, rf))
    data = image.data.astype(np.float32, copy=False)
    lowres = downsample(data, net_cfg.subsample_factor)
    model = model if model is not None else build_model(net_cfg, weights)
    model.eval()
    starts = [
        (x, y, z)
        for x in tile_starts(data.shape[0], out_dims[0])
        for y in tile_starts(data.shape[1], out_dims[1])
        for z in tile_starts(data.shape[2], out_dims[2])
    ]
    padded_shape = tuple(len(tile_starts(n, o)) * o for n, o in zip(data.shape, out_dims))
    probs = np.zeros(padded_shape + (net_cfg.n_classes,), dtype=np.float32)
    segment_spec(net_cfg, out_dims)
    with torch.no_grad():
        for i in range(0, len(starts), batch):
            chunk = starts[i:i + batch]
            segs = [make_segment(data, s, out_dims, net_cfg, lowres) for s in chunk]
            xn = torch.as_tensor(np.stack([s.normal for s in segs])[:, None])
            xs = torch.as_tensor(np.stack([s.subsampled for s in segs])[:, None])
            out = torch.softmax(model(xn, xs, [s.offset for s in segs]), dim=1)
            out = np.moveaxis(out.numpy(), 1, -1)
            for s, p in zip(chunk, out):
                probs[s[0]:s[0] + out_dims[0], s[1]:s[1] + out_dims[1], s[2]:s[2] + out_dims[2]] = p
    x, y, z = data.shape
    return ProbabilityMap(np.ascontiguousarray(probs[:x, :y, :z]), image.spacing, image.origin)
