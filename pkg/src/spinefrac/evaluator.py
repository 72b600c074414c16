"""Cross-validation, ROC curves (threshold sweep and convex hull), bootstrap
and operating points."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .aggregator import (
    DEFAULT_CENTROID_NOISE_MM,
    DEFAULT_CUBE_SIZE,
    DEFAULT_SIGMA_MM,
    EvaluationError,
    PatientHyperparams,
    default_grid,
    patient_decisions,
    perturb_centroids,
    rates,
    vertebra_score,
)
from .corpus import Case
from .network import NetworkConfig
from .trainer import ConfigError, TrainingCase, TrainingConfig, infer_volume, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Fold:
    index: int
    test_ids: tuple
    train_ids: tuple
    val_ids: tuple
    n_test_negatives: int


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple
    seed: int

    def __len__(self):
        return len(self.folds)

    def __iter__(self):
        return iter(self.folds)


def make_folds(
    case_ids,
    positives,
    k: int = 5,
    min_negatives: int = 2,
    seed: int = 0,
    val_fraction: float = 0.15,
) -> FoldPlan:
    """Stratified k folds with at least ``min_negatives`` negative cases each.

    Negatives are dealt round-robin after shuffling, positives then fill the
    smallest folds. From each training portion ``val_fraction`` of the cases
    (rounded, stratified, at least one) is held back for validation.
    """
    case_ids = list(case_ids)
    positives = np.asarray(positives, dtype=bool)
    if len(set(case_ids)) != len(case_ids):
        raise ConfigError("case ids must be unique")
    if len(case_ids) != positives.size:
        raise ConfigError("case_ids and positives differ in length")
    if k < 2:
        raise ConfigError("k must be >= 2")
    negatives = [c for c, p in zip(case_ids, positives) if not p]
    pos = [c for c, p in zip(case_ids, positives) if p]
    if len(negatives) < k * min_negatives:
        raise ConfigError(
            f"{len(negatives)} negative cases cannot give {k} folds {min_negatives} negatives each; "
            f"need at least {k * min_negatives}"
        )
    rng = np.random.default_rng(seed)
    negatives = [negatives[i] for i in rng.permutation(len(negatives))]
    pos = [pos[i] for i in rng.permutation(len(pos))]
    fold_neg = [negatives[i::k] for i in range(k)]
    fold_pos: list[list] = [[] for _ in range(k)]
    for c in pos:
        sizes = [len(fold_neg[i]) + len(fold_pos[i]) for i in range(k)]
        fold_pos[int(np.argmin(sizes))].append(c)

    folds = []
    for i in range(k):
        rest_neg = [c for j in range(k) if j != i for c in fold_neg[j]]
        rest_pos = [c for j in range(k) if j != i for c in fold_pos[j]]
        n_train = len(rest_neg) + len(rest_pos)
        n_val = int(np.floor(val_fraction * n_train + 0.5))
        if val_fraction > 0 and n_train >= 2:
            n_val = max(n_val, 1)
        n_val_neg = min(len(rest_neg), int(np.floor(n_val * len(rest_neg) / max(n_train, 1) + 0.5)))
        if n_val > 0 and rest_neg and n_val_neg == 0:
            n_val_neg = 1
        n_val_pos = min(len(rest_pos), n_val - n_val_neg)
        vrng = np.random.default_rng([seed, i])
        val_neg = [rest_neg[j] for j in sorted(vrng.choice(len(rest_neg), n_val_neg, replace=False))]
        val_pos = [rest_pos[j] for j in sorted(vrng.choice(len(rest_pos), n_val_pos, replace=False))]
        val = set(val_neg) | set(val_pos)
        order = {c: n for n, c in enumerate(case_ids)}
        test = sorted(fold_neg[i] + fold_pos[i], key=order.get)
        train_ids = sorted((c for c in rest_neg + rest_pos if c not in val), key=order.get)
        folds.append(Fold(i, tuple(test), tuple(train_ids), tuple(sorted(val, key=order.get)), len(fold_neg[i])))
    return FoldPlan(tuple(folds), seed)


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    tags: list = field(default_factory=list)
    auc: float = 0.0

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))

    def to_dict(self) -> dict:
        return {
            "fpr": self.fpr.tolist(),
            "tpr": self.tpr.tolist(),
            "tags": [_jsonable(t) for t in self.tags],
            "auc": self.auc,
        }


def _jsonable(tag):
    if tag is None or isinstance(tag, (int, float, str)):
        return tag
    if hasattr(tag, "__dataclass_fields__"):
        return asdict(tag)
    return str(tag)


def _check_labels(labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=bool)
    if labels.all() or not labels.any():
        raise EvaluationError("ROC needs at least one positive and one negative label")
    return labels


def roc_from_scores(scores, labels) -> RocCurve:
    """Threshold-sweep ROC; ties in score form a single step. Tags are the
    thresholds (score >= tag is positive)."""
    labels = _check_labels(labels)
    scores = np.asarray(scores, dtype=float)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    distinct = np.flatnonzero(np.diff(s)) if s.size > 1 else np.zeros(0, int)
    ends = np.r_[distinct, s.size - 1]
    tp = np.cumsum(y)[ends]
    fp = np.cumsum(~y)[ends]
    tpr = np.r_[0.0, tp / y.sum()]
    fpr = np.r_[0.0, fp / (~y).sum()]
    tags = [float("inf")] + s[ends].tolist()
    return RocCurve(fpr, tpr, tags, float(np.trapezoid(tpr, fpr)))


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def roc_convex_hull(points, tags=None) -> RocCurve:
    """Upper-left convex hull of (FPR, TPR) points plus the (0, 0) and (1, 1)
    anchors. Collinear points are dropped."""
    pts = [(float(f), float(t)) for f, t in points]
    if not pts:
        raise ValueError("need at least one point")
    tags = list(tags) if tags is not None else [None] * len(pts)
    cand = [((0.0, 0.0), None), ((1.0, 1.0), None)] + list(zip(pts, tags))
    # lexicographic by (fpr, tpr); for equal points keep the first tag
    cand.sort(key=lambda pt: (pt[0][0], pt[0][1]))
    hull: list = []
    for p, tag in cand:
        if hull and hull[-1][0] == p:
            continue
        while len(hull) >= 2 and _cross(hull[-2][0], hull[-1][0], p) >= 0:
            hull.pop()
        hull.append((p, tag))
    fpr = np.array([p[0] for p, _ in hull])
    tpr = np.array([p[1] for p, _ in hull])
    return RocCurve(fpr, tpr, [t for _, t in hull], float(np.trapezoid(tpr, fpr)))


def interpolate_curve(curve: RocCurve, grid: np.ndarray) -> np.ndarray:
    """Linear interpolation of TPR at ``grid``; at repeated FPR values the
    highest TPR is used."""
    fpr, tpr = curve.fpr, curve.tpr
    ux = np.unique(fpr)
    uy = np.array([tpr[fpr == x].max() for x in ux])
    return np.interp(grid, ux, uy)


@dataclass
class BootstrapResult:
    mean_auc: float
    std_auc: float
    fpr_grid: np.ndarray
    mean_tpr: np.ndarray
    std_tpr: np.ndarray
    aucs: np.ndarray

    def to_dict(self) -> dict:
        return {
            "mean_auc": self.mean_auc,
            "std_auc": self.std_auc,
            "fpr_grid": self.fpr_grid.tolist(),
            "mean_tpr": self.mean_tpr.tolist(),
            "std_tpr": self.std_tpr.tolist(),
        }


def curve_for(values, labels) -> RocCurve:
    """Score ROC for a 1D array; hull ROC for a (cases x classifiers) decision
    matrix."""
    values = np.asarray(values)
    if values.ndim == 1:
        return roc_from_scores(values, labels)
    fpr, tpr = rates(values, labels)
    return roc_convex_hull(list(zip(fpr, tpr)))


def bootstrap_roc(values, labels, n: int = 1000, seed: int = 0, grid_points: int = 101) -> BootstrapResult:
    """Stratified case bootstrap: every resample draws positives and negatives
    separately, so both classes are always present."""
    labels = _check_labels(labels)
    values = np.asarray(values)
    pos, neg = np.flatnonzero(labels), np.flatnonzero(~labels)
    rng = np.random.default_rng(seed)
    grid = np.linspace(0.0, 1.0, grid_points)
    aucs = np.empty(n)
    tprs = np.empty((n, grid_points))
    for i in range(n):
        idx = np.r_[rng.choice(pos, pos.size), rng.choice(neg, neg.size)]
        curve = curve_for(values[idx], labels[idx])
        aucs[i] = curve.auc
        tprs[i] = interpolate_curve(curve, grid)
    return BootstrapResult(float(aucs.mean()), float(aucs.std()), grid, tprs.mean(0), tprs.std(0), aucs)


@dataclass(frozen=True)
class OperatingPoint:
    recall: float
    specificity: float
    tag: object = None
    feasible: bool = True


def operating_point(curve: RocCurve, criterion="youden") -> OperatingPoint:
    """Pick a curve point.

    ``criterion`` is ``"youden"`` (max TPR - FPR), ``("min_specificity", s)``
    (highest recall with specificity >= s) or ``("min_recall", r)`` (highest
    specificity with recall >= r). An unreachable bound returns the closest
    point with ``feasible=False``.
    """
    fpr, tpr = np.asarray(curve.fpr), np.asarray(curve.tpr)
    if fpr.size == 0:
        raise ValueError("empty curve")
    tags = curve.tags if len(curve.tags) == fpr.size else [None] * fpr.size
    spec = 1.0 - fpr
    eps = 1e-12

    def point(i, feasible=True):
        return OperatingPoint(float(tpr[i]), float(spec[i]), tags[i], feasible)

    if criterion == "youden":
        j = tpr - fpr
        return point(int(np.flatnonzero(j == j.max())[0]))
    kind, bound = criterion
    if kind == "min_specificity":
        ok = np.flatnonzero(spec >= bound - eps)
        if ok.size == 0:
            return point(int(np.argmax(spec)), False)
        best = ok[tpr[ok] == tpr[ok].max()]
        return point(int(best[np.argmax(spec[best])]))
    if kind == "min_recall":
        ok = np.flatnonzero(tpr >= bound - eps)
        if ok.size == 0:
            return point(int(np.argmax(tpr)), False)
        best = ok[spec[ok] == spec[ok].max()]
        return point(int(best[np.argmax(tpr[best])]))
    raise ValueError(f"unknown criterion {criterion!r}")


@dataclass(frozen=True)
class EvalConfig:
    k: int = 5
    min_negatives: int = 2
    val_fraction: float = 0.15
    seed: int = 0
    tile: tuple = (45, 45, 45)
    cube_size: int = DEFAULT_CUBE_SIZE
    sigma_mm: float = DEFAULT_SIGMA_MM
    centroid_noise_mm: float = DEFAULT_CENTROID_NOISE_MM
    bootstrap_n: int = 1000
    probability_thresholds: tuple = tuple(float(v) for v in np.round(np.linspace(0.05, 0.95, 19), 2)) + (0.0, 1.0)
    noise_thresholds: tuple = (0, 1, 5, 10, 25, 50, 100, 200, 400, 800, 1600, 3200)
    keep_best: bool = True

    def __post_init__(self):
        for name in ("tile", "probability_thresholds", "noise_thresholds"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    def grid(self) -> list[PatientHyperparams]:
        return default_grid(self.probability_thresholds, self.noise_thresholds)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown evaluation config keys: {sorted(unknown)}")
        return cls(**d)


def _pooled(cases_out, key):
    return [c[key] for c in cases_out]


def run_cross_validation(
    cases: list[Case],
    net_cfg: NetworkConfig,
    train_cfg: TrainingConfig,
    eval_cfg: EvalConfig = EvalConfig(),
    on_fold=None,
) -> dict:
    """Stratified k-fold experiment: train per fold, infer on held-out cases,
    pool predictions and build patient-level (hull) and vertebra-level
    (score) ROC curves, both bootstrapped.

    ``on_fold(fold, weights, held_out_cases, maps)`` is called after each fold,
    e.g. to save checkpoints or overlays.
    """
    by_id = {c.case_id: c for c in cases}
    if len(by_id) != len(cases):
        raise ConfigError("duplicate case ids")
    plan = make_folds(
        [c.case_id for c in cases],
        [c.positive for c in cases],
        eval_cfg.k,
        eval_cfg.min_negatives,
        eval_cfg.seed,
        eval_cfg.val_fraction,
    )
    grid = eval_cfg.grid()
    case_index = {c.case_id: i for i, c in enumerate(cases)}
    fold_reports, case_outputs = [], []
    timings = {}
    for fold in plan:
        t0 = time.perf_counter()
        if set(fold.test_ids) & (set(fold.train_ids) | set(fold.val_ids)):
            raise AssertionError(f"fold {fold.index}: held-out cases leak into training")
        tcases = [TrainingCase(i, by_id[i].image, by_id[i].labels) for i in fold.train_ids]
        vcases = [TrainingCase(i, by_id[i].image, by_id[i].labels) for i in fold.val_ids]
        fold_cfg = TrainingConfig.from_dict({**train_cfg.to_dict(), "seed": train_cfg.seed + 1000 * fold.index})
        weights, history = train(tcases, vcases, net_cfg, fold_cfg, keep_best=eval_cfg.keep_best)
        maps = {}
        fold_cases = []
        for cid in fold.test_ids:
            case = by_id[cid]
            pmap = infer_volume(case.image, net_cfg, weights, eval_cfg.tile)
            maps[cid] = pmap
            decisions = patient_decisions(pmap, grid)
            rng = np.random.default_rng([eval_cfg.seed, 7, case_index[cid]])
            verts = []
            visible = [a for a in case.annotations if case.image.contains_point(a.centroid)]
            if visible:
                noisy = perturb_centroids(
                    [a.centroid for a in visible], eval_cfg.centroid_noise_mm, rng, case.image.world_bounds()
                )
                for a, c in zip(visible, noisy):
                    vs = vertebra_score(pmap, c, eval_cfg.cube_size, eval_cfg.sigma_mm, a.name)
                    verts.append(
                        {"vertebra": a.name, "grade": a.grade, "fracture": a.is_fracture, "score": vs.score,
                         "centroid_used": list(vs.centroid)}
                    )
            fold_cases.append(
                {"case_id": cid, "fold": fold.index, "positive": case.positive,
                 "decisions": decisions, "vertebrae": verts}
            )
        if on_fold is not None:
            on_fold(fold, weights, [by_id[i] for i in fold.test_ids], maps)
        del maps
        case_outputs += fold_cases
        timings[fold.index] = time.perf_counter() - t0

        fold_report = {
            "fold": fold.index,
            "test_ids": list(fold.test_ids),
            "train_ids": list(fold.train_ids),
            "val_ids": list(fold.val_ids),
            "training_log": history.deterministic(),
            "best_epoch": history.best_epoch,
        }
        fold_report.update(_level_summaries(fold_cases, grid, bootstrap_n=0))
        fold_reports.append(fold_report)

    seen = [c["case_id"] for c in case_outputs]
    if sorted(seen) != sorted(by_id):
        raise AssertionError("held-out predictions do not cover every case exactly once")

    report = {
        "n_cases": len(cases),
        "folds": fold_reports,
        "config": {"network": net_cfg.to_dict(), "training": train_cfg.to_dict(), "evaluation": eval_cfg.to_dict()},
        "cases": [
            {"case_id": c["case_id"], "fold": c["fold"], "positive": c["positive"], "vertebrae": c["vertebrae"]}
            for c in case_outputs
        ],
    }
    report.update(_level_summaries(case_outputs, grid, eval_cfg.bootstrap_n, eval_cfg.seed, strict=True))
    report["digest"] = report_digest(report)
    report["timings_s"] = timings
    return report


def _level_summaries(case_outputs, grid, bootstrap_n=0, seed=0, strict=False) -> dict:
    out = {}
    labels = np.array([c["positive"] for c in case_outputs])
    decisions = np.stack([c["decisions"] for c in case_outputs])
    try:
        fpr, tpr = rates(decisions, labels)
        hull = roc_convex_hull(list(zip(fpr, tpr)), grid)
        patient = {
            "auc": hull.auc,
            "hull": hull.to_dict(),
            "sweep": [[asdict(hp), float(f), float(t)] for hp, f, t in zip(grid, fpr, tpr)],
            "operating_point": asdict(operating_point(hull, "youden")),
        }
        if bootstrap_n:
            patient["bootstrap"] = bootstrap_roc(decisions, labels, bootstrap_n, seed).to_dict()
        out["patient"] = patient
    except EvaluationError:
        if strict:
            raise
        out["patient"] = None

    verts = [v for c in case_outputs for v in c["vertebrae"]]
    scores = np.array([v["score"] for v in verts])
    vlabels = np.array([v["fracture"] for v in verts], dtype=bool)
    try:
        curve = roc_from_scores(scores, vlabels)
        vertebra = {"auc": curve.auc, "roc": curve.to_dict()}
        if bootstrap_n:
            vertebra["bootstrap"] = bootstrap_roc(scores, vlabels, bootstrap_n, seed + 1).to_dict()
        out["vertebra"] = vertebra
    except EvaluationError:
        if strict:
            raise
        out["vertebra"] = None
    return out


def report_digest(report: dict) -> str:
    """SHA-256 over the canonical JSON of the report, timings excluded."""
    body = {k: v for k, v in report.items() if k not in ("digest", "timings_s")}
    return hashlib.sha256(json.dumps(body, sort_keys=True, default=_jsonable).encode()).hexdigest()


def write_report(report: dict, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "report.json"
    path.write_text(json.dumps(report, indent=1, sort_keys=True, default=_jsonable), encoding="utf-8")
    plot_rocs(report, out_dir)
    return path


def plot_rocs(report: dict, out_dir) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for level, title in (("patient", "Patient-level (hull)"), ("vertebra", "Vertebra-level")):
        summary = report.get(level)
        if not summary:
            continue
        fig, ax = plt.subplots(figsize=(4.5, 4.5))
        curve = summary["hull"] if level == "patient" else summary["roc"]
        ax.plot(curve["fpr"], curve["tpr"], color="tab:blue", label=f"pooled AUC {summary['auc']:.3f}")
        boot = summary.get("bootstrap")
        if boot:
            m, s = np.array(boot["mean_tpr"]), np.array(boot["std_tpr"])
            ax.fill_between(boot["fpr_grid"], m - s, m + s, color="tab:blue", alpha=0.2,
                            label=f"bootstrap {boot['mean_auc']:.3f} ± {boot['std_auc']:.3f}")
        ax.plot([0, 1], [0, 1], ":", color="grey")
        ax.set(xlabel="False positive rate", ylabel="True positive rate", title=title, xlim=(0, 1), ylim=(0, 1.01))
        ax.legend(loc="lower right", fontsize=8)
        fig.tight_layout()
        fig.savefig(Path(out_dir) / f"roc_{level}.png", dpi=100)
        plt.close(fig)


def plot_overlay(image, pmap, path, min_probability: float = 0.05) -> None:
    """Mid-sagittal slice with the fracture probability overlaid."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    x = image.shape[0] // 2
    slc = image.data[x].T
    prob = np.ma.masked_less(pmap.fracture[x].T, min_probability)
    fig, ax = plt.subplots(figsize=(3, 6))
    ax.imshow(slc, cmap="gray", origin="lower")
    im = ax.imshow(prob, cmap="jet", vmin=0, vmax=1, alpha=0.6, origin="lower")
    fig.colorbar(im, ax=ax, fraction=0.05)
    ax.set_axis_off()
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
