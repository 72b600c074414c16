"""Synthetic spine phantoms with known vertebra centroids and grades.

Each case is a soft-tissue cylinder along the longitudinal axis holding a
short stack of bright ellipsoidal vertebral bodies. Fractured bodies are
flattened along the longitudinal axis. Centroids follow a gentle sinusoidal
curve. Images are rendered on the native (possibly anisotropic) grid; label
volumes are built on the 1 mm resampled grid from the emitted annotations.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import corpus
from .labels import (
    DEFAULT_FLATTEN,
    DEFAULT_RADII,
    VERTEBRAE,
    AnnotationSet,
    VertebraAnnotation,
    build_label_volume,
    write_annotations,
)
from .trainer import ConfigError
from .volume_io import LONGITUDINAL_AXIS, Volume, preprocess, resampled_shape, save_volume


@dataclass(frozen=True)
class PhantomSpec:
    n_cases: int = 90
    dims: tuple = (48, 48, 76)
    spacing: tuple = (1.0, 1.0, 1.5)
    target_spacing: float = 1.0
    vertebrae_per_case: tuple = (3, 4)
    vertebra_spacing_mm: float = 28.0
    vertebra_radii_mm: tuple = (12.0, 12.0, 11.0)
    fracture_prevalence: float = 0.19
    flatten_range: tuple = (0.4, 0.75)
    vertebra_intensity: float = 1.0
    tissue_intensity: float = 0.3
    tissue_radius_mm: float = 21.0
    noise_std: float = 0.15
    curvature_mm: float = 3.0
    min_negative_cases: int = 10
    label_radii_mm: tuple = DEFAULT_RADII
    label_flatten: float = DEFAULT_FLATTEN
    seed: int = 0

    def __post_init__(self):
        for name in ("dims", "spacing", "vertebrae_per_case", "vertebra_radii_mm", "flatten_range", "label_radii_mm"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not 0.0 <= self.fracture_prevalence <= 1.0:
            raise ConfigError("fracture_prevalence must lie in [0, 1]")
        if self.vertebra_intensity - self.tissue_intensity <= 0:
            raise ConfigError("vertebra contrast over tissue must be positive")
        if self.n_cases < 0:
            raise ConfigError("n_cases must be >= 0")
        lo, hi = self.vertebrae_per_case
        if not 1 <= lo <= hi:
            raise ConfigError("vertebrae_per_case must be an increasing pair >= 1")
        if not 0 < self.flatten_range[0] <= self.flatten_range[1] < 1:
            raise ConfigError("flatten_range must lie inside (0, 1)")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown phantom keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.dims) * np.asarray(self.spacing)


@dataclass
class CasePlan:
    case_id: str
    names: list
    grades: list
    centroids: np.ndarray
    flatten: list = field(default_factory=list)

    @property
    def positive(self) -> bool:
        return any(g != "normal" for g in self.grades)

    def make_negative(self) -> None:
        self.grades = ["normal"] * len(self.names)
        self.flatten = [1.0] * len(self.names)


def grade_for_flatten(ratio: float) -> str:
    loss = 1.0 - ratio
    if loss < 0.3:
        return "mild"
    if loss < 0.45:
        return "moderate"
    return "severe"


def _stack_fits(spec: PhantomSpec, n: int) -> bool:
    rz = spec.vertebra_radii_mm[LONGITUDINAL_AXIS]
    return (n - 1) * spec.vertebra_spacing_mm + 2 * rz <= spec.extent[LONGITUDINAL_AXIS]


def draw_case_plan(spec: PhantomSpec, rng: np.random.Generator, case_id: str = "case") -> CasePlan:
    lo, hi = spec.vertebrae_per_case
    if not _stack_fits(spec, lo) or np.any(spec.extent[:2] < 2 * np.asarray(spec.vertebra_radii_mm[:2])):
        raise ConfigError(f"dims {spec.dims} at spacing {spec.spacing} cannot hold {lo} vertebra(e)")
    n = int(rng.integers(lo, hi + 1))
    while n > lo and not _stack_fits(spec, n):
        n -= 1
    top = int(rng.integers(0, len(VERTEBRAE) - n + 1))
    names = list(VERTEBRAE[top:top + n])

    extent = spec.extent
    rz = spec.vertebra_radii_mm[LONGITUDINAL_AXIS]
    span = (n - 1) * spec.vertebra_spacing_mm
    slack = extent[2] - spec.spacing[2] - span - 2 * rz
    z_bottom = rz + rng.uniform(0.0, max(slack, 0.0))
    # superior vertebrae sit at larger z
    z = z_bottom + span - spec.vertebra_spacing_mm * np.arange(n) + rng.normal(0.0, 0.5, n)
    phase = rng.uniform(0, 2 * np.pi, 2)
    period = 4 * spec.vertebra_spacing_mm
    cx = (extent[0] - spec.spacing[0]) / 2 + spec.curvature_mm * np.sin(2 * np.pi * z / period + phase[0])
    cy = (extent[1] - spec.spacing[1]) / 2 + 0.5 * spec.curvature_mm * np.sin(2 * np.pi * z / period + phase[1])
    centroids = np.round(np.stack([cx, cy, z], axis=1), 3)

    grades, flatten = [], []
    for _ in range(n):
        if rng.random() < spec.fracture_prevalence:
            ratio = float(rng.uniform(*spec.flatten_range))
            grades.append(grade_for_flatten(ratio))
            flatten.append(ratio)
        else:
            grades.append("normal")
            flatten.append(1.0)
    return CasePlan(case_id, names, grades, centroids, flatten)


def annotations_of(plan: CasePlan) -> AnnotationSet:
    return AnnotationSet(
        plan.case_id,
        [VertebraAnnotation(n, g, tuple(c)) for n, g, c in zip(plan.names, plan.grades, plan.centroids)],
    )


def render_image(spec: PhantomSpec, plan: CasePlan, rng: np.random.Generator) -> Volume:
    spacing = np.asarray(spec.spacing)
    coords = [np.arange(n) * s for n, s in zip(spec.dims, spacing)]
    img = np.zeros(spec.dims, dtype=np.float32)
    center_xy = (np.asarray(spec.extent[:2]) - spacing[:2]) / 2
    r2 = (coords[0][:, None] - center_xy[0]) ** 2 + (coords[1][None, :] - center_xy[1]) ** 2
    img[r2 <= spec.tissue_radius_mm**2] = spec.tissue_intensity

    for c, ratio in zip(plan.centroids, plan.flatten):
        radii = np.asarray(spec.vertebra_radii_mm, dtype=float)
        radii[LONGITUDINAL_AXIS] *= ratio
        lo = np.maximum(np.floor((c - radii) / spacing).astype(int), 0)
        hi = np.minimum(np.ceil((c + radii) / spacing).astype(int) + 1, spec.dims)
        if np.any(hi <= lo):
            continue
        d = [((coords[a][lo[a]:hi[a]] - c[a]) / radii[a]) ** 2 for a in range(3)]
        inside = d[0][:, None, None] + d[1][None, :, None] + d[2][None, None, :] <= 1.0
        box = img[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        box[inside] = spec.vertebra_intensity

    if spec.noise_std > 0:
        img += rng.normal(0.0, spec.noise_std, img.shape).astype(np.float32)
    return Volume(img, spec.spacing, (0.0, 0.0, 0.0))


def label_reference(spec: PhantomSpec) -> Volume:
    """Empty volume with the geometry of the resampled phantom grid."""
    shape = resampled_shape(spec.dims, spec.spacing, spec.target_spacing)
    return Volume(np.zeros(shape, dtype=np.uint8), (spec.target_spacing,) * 3, (0.0, 0.0, 0.0))


def build_labels(spec: PhantomSpec, annotations: AnnotationSet) -> Volume:
    return build_label_volume(annotations, label_reference(spec), spec.label_radii_mm, spec.label_flatten)


def generate_case(spec: PhantomSpec, rng: np.random.Generator, case_id: str = "case"):
    """One phantom: (native image, annotations, label volume on the resampled grid)."""
    plan = draw_case_plan(spec, rng, case_id)
    return _render(spec, plan, rng)


def _render(spec, plan, rng):
    ann = annotations_of(plan)
    return render_image(spec, plan, rng), ann, build_labels(spec, ann)


def case_ids(n: int) -> list[str]:
    return [f"case{i:03d}" for i in range(n)]


def plan_corpus(spec: PhantomSpec) -> list[CasePlan]:
    """Case plans for a corpus, with at least ``min_negative_cases`` negative
    cases (positives are converted to negatives at random if needed)."""
    plans = [
        draw_case_plan(spec, np.random.default_rng([spec.seed, i]), cid)
        for i, cid in enumerate(case_ids(spec.n_cases))
    ]
    need = min(spec.min_negative_cases, spec.n_cases)
    positives = [i for i, p in enumerate(plans) if p.positive]
    short = need - (len(plans) - len(positives))
    if short > 0:
        rng = np.random.default_rng([spec.seed, 10_000_019])
        for i in sorted(rng.choice(positives, size=short, replace=False)):
            plans[i].make_negative()
    return plans


def _case_outputs(spec: PhantomSpec, i: int, plan: CasePlan):
    return _render(spec, plan, np.random.default_rng([spec.seed, i, 1]))


def build_cases(spec: PhantomSpec) -> list[corpus.Case]:
    """The corpus of ``generate_corpus`` as preprocessed in-memory cases,
    identical to what ``corpus.load_corpus`` returns for the written tree."""
    cases = []
    for i, plan in enumerate(plan_corpus(spec)):
        image, ann, labels = _case_outputs(spec, i, plan)
        cases.append(corpus.Case(plan.case_id, preprocess(image, spec.target_spacing), labels, ann))
    return cases


def generate_corpus(spec: PhantomSpec, out_dir, workers: int = 1) -> dict:
    """Write every case plus ``manifest.json`` under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    plans = plan_corpus(spec)

    def write(i_plan):
        i, plan = i_plan
        image, ann, labels = _case_outputs(spec, i, plan)
        case_dir = out_dir / plan.case_id
        case_dir.mkdir(exist_ok=True)
        save_volume(image, case_dir / corpus.IMAGE_FILE)
        write_annotations(ann, case_dir / corpus.ANNOTATION_FILE)
        save_volume(labels, case_dir / corpus.LABEL_FILE)
        return {
            "case_id": plan.case_id,
            "positive": plan.positive,
            "n_vertebrae": len(plan.names),
            "n_fractures": sum(g != "normal" for g in plan.grades),
        }

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            entries = list(pool.map(write, enumerate(plans)))
    else:
        entries = [write(p) for p in enumerate(plans)]
    manifest = {"generator_seed": spec.seed, "spec": spec.to_dict(), "cases": entries}
    (out_dir / corpus.MANIFEST_FILE).write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return manifest
