"""Sparse vertebra annotations and their conversion into dense label volumes."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .volume_io import LONGITUDINAL_AXIS, Volume

VERTEBRAE = (
    tuple(f"T{i}" for i in range(1, 13))
    + tuple(f"L{i}" for i in range(1, 6))
    + ("S1", "S2")
)
GRADES = ("normal", "mild", "moderate", "severe")

BACKGROUND, NORMAL, FRACTURE = 0, 1, 2

DEFAULT_RADII = (12.0, 12.0, 12.0)
DEFAULT_FLATTEN = 0.5


class AnnotationParseError(ValueError):
    pass


class AnnotationValidationError(ValueError):
    pass


def binary_class_of(grade: str) -> str:
    """Collapse a Genant grade into ``"normal"`` or ``"fracture"``."""
    if grade not in GRADES:
        raise AnnotationParseError(f"unknown grade {grade!r}; expected one of {GRADES}")
    return "normal" if grade == "normal" else "fracture"


def label_value(grade: str) -> int:
    return NORMAL if binary_class_of(grade) == "normal" else FRACTURE


@dataclass(frozen=True)
class VertebraAnnotation:
    name: str
    grade: str
    centroid: tuple[float, float, float]

    def __post_init__(self):
        if self.name not in VERTEBRAE:
            raise AnnotationValidationError(f"unknown vertebra name {self.name!r}")
        binary_class_of(self.grade)
        c = tuple(float(v) for v in self.centroid)
        if len(c) != 3 or not np.all(np.isfinite(c)):
            raise AnnotationValidationError(f"{self.name}: centroid must be 3 finite values")
        object.__setattr__(self, "centroid", c)

    @property
    def is_fracture(self) -> bool:
        return self.grade != "normal"


@dataclass
class AnnotationSet:
    """Per-case annotations, kept in top-to-bottom vertebra order."""

    case_id: str
    annotations: list[VertebraAnnotation] = field(default_factory=list)

    def __post_init__(self):
        names = [a.name for a in self.annotations]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise AnnotationValidationError(f"duplicate vertebra names: {dupes}")
        self.annotations = sorted(self.annotations, key=lambda a: VERTEBRAE.index(a.name))

    def __len__(self):
        return len(self.annotations)

    def __iter__(self):
        return iter(self.annotations)

    @property
    def has_fracture(self) -> bool:
        return any(a.is_fracture for a in self.annotations)


def parse_annotations(path, case_id: str | None = None) -> AnnotationSet:
    """Read ``name,grade,x_mm,y_mm,z_mm`` lines; ``#`` starts a comment and a
    leading ``name,...`` header line is skipped."""
    path = Path(path)
    annotations = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            fields = [f.strip() for f in line.split(",")]
            if not annotations and not seen and fields[0].lower() == "name":
                continue
            if len(fields) != 5:
                raise AnnotationParseError(f"{path}:{lineno}: expected 5 fields, got {len(fields)}")
            name, grade = fields[0], fields[1].lower()
            if grade not in GRADES:
                raise AnnotationParseError(f"{path}:{lineno}: unknown grade {fields[1]!r}")
            try:
                xyz = tuple(float(v) for v in fields[2:])
            except ValueError:
                raise AnnotationParseError(f"{path}:{lineno}: non-numeric coordinate") from None
            if name in seen:
                raise AnnotationValidationError(
                    f"{path}:{lineno}: duplicate vertebra {name} (first on line {seen[name]})"
                )
            seen[name] = lineno
            try:
                annotations.append(VertebraAnnotation(name, grade, xyz))
            except AnnotationValidationError as exc:
                raise AnnotationParseError(f"{path}:{lineno}: {exc}") from None
    return AnnotationSet(case_id if case_id is not None else path.stem, annotations)


def write_annotations(ann: AnnotationSet, path) -> None:
    lines = [f"# case {ann.case_id}", "name,grade,x_mm,y_mm,z_mm"]
    for a in ann:
        lines.append(f"{a.name},{a.grade},{a.centroid[0]!r},{a.centroid[1]!r},{a.centroid[2]!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def ellipsoid_radii(grade: str, radii=DEFAULT_RADII, flatten: float = DEFAULT_FLATTEN) -> np.ndarray:
    r = np.asarray(radii, dtype=float).copy()
    if binary_class_of(grade) == "fracture":
        r[LONGITUDINAL_AXIS] *= flatten
    return r


def build_label_volume(
    ann: AnnotationSet,
    ref: Volume,
    radii=DEFAULT_RADII,
    flatten: float = DEFAULT_FLATTEN,
) -> Volume:
    """Paint one ellipsoid per vertebra onto the grid of ``ref``.

    Fractured vertebrae get their longitudinal radius scaled by ``flatten``.
    Where ellipsoids overlap, the centroid with the smaller normalized
    (Mahalanobis) distance wins; exact ties keep the upper vertebra.
    Vertebrae whose centroid lies outside the grid are skipped with a warning.
    """
    radii = np.asarray(radii, dtype=float)
    if radii.shape != (3,) or np.any(radii <= 0):
        raise ValueError(f"radii must be three positive values, got {radii}")
    if not 0 < flatten < 1:
        raise ValueError(f"flatten must lie in (0, 1), got {flatten}")

    labels = np.zeros(ref.shape, dtype=np.uint8)
    best = np.full(ref.shape, np.inf)
    spacing = np.asarray(ref.spacing)
    for a in ann:
        if not ref.contains_point(a.centroid):
            warnings.warn(
                f"{ann.case_id}/{a.name}: centroid {a.centroid} outside the volume, skipped",
                stacklevel=2,
            )
            continue
        r = ellipsoid_radii(a.grade, radii, flatten)
        center = ref.world_to_index(a.centroid)
        half = r / spacing
        lo = np.maximum(np.floor(center - half).astype(int), 0)
        hi = np.minimum(np.ceil(center + half).astype(int) + 1, ref.shape)
        if np.any(hi <= lo):
            continue
        axes = [
            ((np.arange(l, h) - c) * s / rr) ** 2
            for l, h, c, s, rr in zip(lo, hi, center, spacing, r)
        ]
        d2 = axes[0][:, None, None] + axes[1][None, :, None] + axes[2][None, None, :]
        box = tuple(slice(l, h) for l, h in zip(lo, hi))
        claim = (d2 <= 1.0) & (d2 < best[box])
        best[box][claim] = d2[claim]
        labels[box][claim] = label_value(a.grade)
    return ref.with_data(labels)
