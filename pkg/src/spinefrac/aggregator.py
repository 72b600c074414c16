"""Patient-level and vertebra-level fracture decisions from probability maps."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .trainer import ProbabilityMap

CONNECTIVITY_26 = np.ones((3, 3, 3), dtype=bool)

DEFAULT_CUBE_SIZE = 10
DEFAULT_SIGMA_MM = 5.0
DEFAULT_CENTROID_NOISE_MM = 3.0


class EvaluationError(ValueError):
    """Inputs on which a ROC-type evaluation is undefined."""


@dataclass(frozen=True)
class PatientHyperparams:
    probability_threshold: float
    noise_threshold: int

    def __post_init__(self):
        if not 0.0 <= self.probability_threshold <= 1.0:
            raise ValueError(f"probability_threshold must lie in [0, 1], got {self.probability_threshold}")
        if self.noise_threshold < 0:
            raise ValueError(f"noise_threshold must be >= 0, got {self.noise_threshold}")


@dataclass
class PatientResult:
    fracture_voxel_count: int
    components: list = field(default_factory=list)  # (size, ((x0, x1), (y0, y1), (z0, z1)))

    @property
    def decision(self) -> bool:
        return self.fracture_voxel_count > 0


@dataclass(frozen=True)
class VertebraScore:
    name: str
    centroid: tuple
    score: float


def _fracture_channel(pmap) -> np.ndarray:
    return pmap.fracture if isinstance(pmap, ProbabilityMap) else np.asarray(pmap)


def component_sizes(pmap, probability_threshold: float) -> np.ndarray:
    """Sizes of the 26-connected components of voxels with fracture
    probability >= threshold."""
    mask = _fracture_channel(pmap) >= probability_threshold
    labeled, n = ndimage.label(mask, structure=CONNECTIVITY_26)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    return np.bincount(labeled.ravel(), minlength=n + 1)[1:]


def patient_detect(pmap, hp: PatientHyperparams) -> PatientResult:
    """Keep 26-connected fracture components of at least ``noise_threshold``
    voxels and count what survives; any survivor means a positive patient."""
    mask = _fracture_channel(pmap) >= hp.probability_threshold
    labeled, n = ndimage.label(mask, structure=CONNECTIVITY_26)
    if n == 0:
        return PatientResult(0, [])
    sizes = np.bincount(labeled.ravel(), minlength=n + 1)
    boxes = ndimage.find_objects(labeled)
    components = []
    for idx, box in enumerate(boxes, start=1):
        if sizes[idx] >= hp.noise_threshold:
            components.append((int(sizes[idx]), tuple((s.start, s.stop) for s in box)))
    return PatientResult(sum(c[0] for c in components), components)


def patient_decisions(pmap, grid) -> np.ndarray:
    """Decision per hyperparameter pair, sharing one labeling per probability
    threshold."""
    grid = list(grid)
    out = np.zeros(len(grid), dtype=bool)
    cache: dict[float, np.ndarray] = {}
    for i, hp in enumerate(grid):
        if hp.probability_threshold not in cache:
            cache[hp.probability_threshold] = component_sizes(pmap, hp.probability_threshold)
        sizes = cache[hp.probability_threshold]
        out[i] = bool(np.any(sizes >= max(hp.noise_threshold, 1)))
    return out


def default_grid(
    probability_thresholds=tuple(np.round(np.linspace(0.05, 0.95, 19), 2)) + (0.0, 1.0),
    noise_thresholds=(0, 1, 5, 10, 25, 50, 100, 200, 400, 800, 1600, 3200),
) -> list[PatientHyperparams]:
    return [
        PatientHyperparams(float(p), int(n))
        for p in sorted(set(probability_thresholds))
        for n in noise_thresholds
    ]


def rates(decisions: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(FPR, TPR) per column of a (cases x classifiers) decision matrix."""
    labels = np.asarray(labels, dtype=bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("need at least one positive and one negative case")
    decisions = np.asarray(decisions, dtype=bool)
    tpr = decisions[labels].sum(axis=0) / n_pos
    fpr = decisions[~labels].sum(axis=0) / n_neg
    return fpr, tpr


def sweep_hyperparams(maps, labels, grid=None) -> list[tuple[PatientHyperparams, float, float]]:
    """One (hyperparams, FPR, TPR) triple per grid point over a set of cases."""
    grid = default_grid() if grid is None else list(grid)
    decisions = np.stack([patient_decisions(m, grid) for m in maps])
    fpr, tpr = rates(decisions, labels)
    return [(hp, float(f), float(t)) for hp, f, t in zip(grid, fpr, tpr)]


def vertebra_score(
    pmap: ProbabilityMap,
    centroid,
    cube_size: int = DEFAULT_CUBE_SIZE,
    sigma: float = DEFAULT_SIGMA_MM,
    name: str = "",
) -> VertebraScore:
    """Gaussian-weighted mean fracture probability in a cube around a centroid.

    The cube has ``cube_size`` voxels per side around the voxel nearest the
    centroid (even sizes extend one voxel further toward negative indices) and
    is clipped at the volume border. Weights use physical distance to the
    centroid itself.
    """
    if cube_size < 1:
        raise ValueError("cube_size must be >= 1")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    spacing = np.asarray(pmap.spacing)
    origin = np.asarray(pmap.origin)
    c = np.asarray(centroid, dtype=float)
    center = np.floor((c - origin) / spacing + 0.5).astype(int)
    shape = pmap.shape
    if np.any(center < 0) or np.any(center >= shape):
        raise ValueError(f"centroid {tuple(c)} lies outside the volume")
    lo = np.maximum(center - cube_size // 2, 0)
    hi = np.minimum(center - cube_size // 2 + cube_size, shape)
    d2 = [
        ((origin[a] + np.arange(lo[a], hi[a]) * spacing[a]) - c[a]) ** 2 for a in range(3)
    ]
    w = np.exp(-(d2[0][:, None, None] + d2[1][None, :, None] + d2[2][None, None, :]) / (2 * sigma**2))
    p = pmap.fracture[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]].astype(np.float64)
    score = float((w * p).sum() / w.sum())
    return VertebraScore(name, tuple(float(v) for v in c), min(max(score, 0.0), 1.0))


def perturb_centroids(
    centroids,
    sigma_mm: float = DEFAULT_CENTROID_NOISE_MM,
    rng: np.random.Generator | None = None,
    bounds: tuple | None = None,
) -> np.ndarray:
    """Add independent zero-mean Gaussian noise per axis, then clamp into
    ``bounds`` = (lower corner, upper corner) in mm when given."""
    if sigma_mm < 0:
        raise ValueError("sigma_mm must be >= 0")
    pts = np.array(centroids, dtype=float).reshape(-1, 3)
    if sigma_mm > 0:
        rng = rng if rng is not None else np.random.default_rng()
        pts = pts + rng.normal(0.0, sigma_mm, pts.shape)
    if bounds is not None:
        pts = np.clip(pts, np.asarray(bounds[0], float), np.asarray(bounds[1], float))
    return pts


def write_records(records, path) -> None:
    """Append line-delimited JSON records."""
    with open(path, "a", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
