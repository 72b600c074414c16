"""
Five-fold cross-validation on the smoke profile
===============================================

The same path the acceptance suite takes, at 20 cases: stratified folds,
one model per fold, pooled held-out predictions, a convex-hull ROC over
(probability, noise) threshold pairs at patient level and a score ROC at
vertebra level. About two minutes on one CPU core.
"""

from pathlib import Path

from spinefrac.cli import load_config
from spinefrac.evaluator import operating_point, roc_convex_hull, run_cross_validation, write_report
from spinefrac.phantom import build_cases

root = Path(__file__).resolve().parents[1]
cfg = load_config(root / "configs" / "smoke.yaml")
cases = build_cases(cfg.phantom)
print(len(cases), "cases,", sum(c.positive for c in cases), "with a fracture")

report = run_cross_validation(cases, cfg.network, cfg.training, cfg.evaluation)
for level in ("patient", "vertebra"):
    b = report[level]["bootstrap"]
    print(f"{level:8s} pooled AUC {report[level]['auc']:.3f}  bootstrap {b['mean_auc']:.3f} ± {b['std_auc']:.3f}")

# Operating point with specificity of at least 0.9 on the patient hull.
pts = [(f, t) for _, f, t in report["patient"]["sweep"]]
hull = roc_convex_hull(pts)
op = operating_point(hull, ("min_specificity", 0.9))
print(f"recall {op.recall:.3f} at specificity {op.specificity:.3f}")

path = write_report(report, Path(__file__).parent / "output" / "cv")
print("report:", path, "digest", report["digest"][:16])
