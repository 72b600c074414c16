import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spinefrac.aggregator import EvaluationError
from spinefrac.evaluator import (
    EvalConfig,
    RocCurve,
    bootstrap_roc,
    make_folds,
    operating_point,
    report_digest,
    roc_convex_hull,
    roc_from_scores,
    run_cross_validation,
    write_report,
)
from spinefrac.network import NetworkConfig
from spinefrac.phantom import PhantomSpec, build_cases
from spinefrac.trainer import ConfigError, TrainingConfig

from oracles import above_segment, brute_force_auc


def ids(n):
    return [f"c{i}" for i in range(n)]


@pytest.fixture(scope="module")
def plan():
    positives = np.ones(90, bool)
    positives[np.random.default_rng(0).choice(90, 11, replace=False)] = False
    return make_folds(ids(90), positives, k=5, min_negatives=2, seed=3), positives


class TestFolds:
    def test_sizes_and_negatives(self, plan):
        plan, positives = plan
        neg = {c for c, p in zip(ids(90), positives) if not p}
        assert [len(f.test_ids) for f in plan] == [18] * 5
        assert all(len(set(f.test_ids) & neg) >= 2 for f in plan)
        assert all(f.n_test_negatives == len(set(f.test_ids) & neg) for f in plan)

    def test_partition(self, plan):
        plan, _ = plan
        all_test = [c for f in plan for c in f.test_ids]
        assert sorted(all_test) == sorted(ids(90))
        for f in plan:
            parts = [set(f.test_ids), set(f.train_ids), set(f.val_ids)]
            assert set.union(*parts) == set(ids(90))
            assert sum(map(len, parts)) == 90

    def test_validation_fraction(self, plan):
        plan, positives = plan
        neg = {c for c, p in zip(ids(90), positives) if not p}
        for f in plan:
            assert len(f.val_ids) == round(0.15 * 72)
            assert set(f.val_ids) & neg

    def test_infeasible(self):
        with pytest.raises(ConfigError, match="at least 10"):
            make_folds(ids(10), [True] * 9 + [False], k=5, min_negatives=2)

    def test_deterministic(self):
        pos = [i % 3 != 0 for i in range(30)]
        assert make_folds(ids(30), pos, seed=1) == make_folds(ids(30), pos, seed=1)
        assert make_folds(ids(30), pos, seed=1) != make_folds(ids(30), pos, seed=2)


class TestRocFromScores:
    def test_separated(self):
        assert roc_from_scores([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]).auc == 1.0

    def test_inverted(self):
        assert roc_from_scores([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]).auc == 0.0

    def test_independent_labels(self):
        rng = np.random.default_rng(0)
        auc = roc_from_scores(rng.random(10_000), rng.random(10_000) < 0.3).auc
        assert abs(auc - 0.5) <= 0.03

    def test_endpoints_and_order(self):
        c = roc_from_scores([0.3, 0.3, 0.5, 0.1, 0.9], [1, 0, 1, 0, 0])
        assert (c.fpr[0], c.tpr[0]) == (0.0, 0.0) and (c.fpr[-1], c.tpr[-1]) == (1.0, 1.0)
        assert np.all(np.diff(c.fpr) >= 0) and np.all(np.diff(c.tpr) >= 0)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 6), st.booleans()), min_size=2, max_size=40))
    def test_matches_pairwise_ranking(self, data):
        scores, labels = zip(*data)
        if len(set(labels)) < 2:
            return
        assert roc_from_scores(scores, labels).auc == pytest.approx(brute_force_auc(scores, labels), abs=1e-12)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(1)
        s, y = rng.normal(size=200), rng.random(200) < 0.4
        a = roc_from_scores(s, y).auc
        assert roc_from_scores(np.exp(3 * s) + 7, y).auc == pytest.approx(a, abs=1e-12)

    def test_single_class(self):
        with pytest.raises(EvaluationError):
            roc_from_scores([0.1, 0.2], [1, 1])


class TestHull:
    def test_single_point(self):
        h = roc_convex_hull([(0.2, 0.8)])
        assert h.points() == [(0.0, 0.0), (0.2, 0.8), (1.0, 1.0)]

    def test_dominated_excluded(self):
        assert (0.3, 0.5) not in roc_convex_hull([(0.2, 0.8), (0.3, 0.5)]).points()

    def test_tags_follow_points(self):
        h = roc_convex_hull([(0.2, 0.8), (0.3, 0.5)], tags=["a", "b"])
        assert h.tags == [None, "a", None]

    @pytest.mark.parametrize("seed", range(25))
    def test_dominance_oracle(self, seed):
        rng = np.random.default_rng(seed)
        pts = [tuple(p) for p in rng.random((int(rng.integers(1, 40)), 2))]
        h = roc_convex_hull(pts).points()
        allowed = set(pts) | {(0.0, 0.0), (1.0, 1.0)}
        assert set(h) <= allowed
        for p in pts:
            assert not any(above_segment(p, a, b) for a, b in zip(h, h[1:]))
        slopes = [(b[1] - a[1]) / (b[0] - a[0]) for a, b in zip(h, h[1:]) if b[0] > a[0]]
        assert all(s2 <= s1 + 1e-12 for s1, s2 in zip(slopes, slopes[1:]))

    @pytest.mark.parametrize("seed", range(10))
    def test_hull_auc_at_least_sweep(self, seed):
        rng = np.random.default_rng(seed)
        pts = sorted([(0.0, 0.0), (1.0, 1.0)] + [tuple(p) for p in rng.random((15, 2))])
        fpr, tpr = np.array(pts).T
        assert roc_convex_hull(pts).auc >= np.trapezoid(tpr, fpr) - 1e-12


class TestBootstrap:
    def test_separated(self):
        b = bootstrap_roc([0.1, 0.2, 0.3, 0.7, 0.8], [0, 0, 0, 1, 1], n=200, seed=0)
        assert b.mean_auc == 1.0 and b.std_auc == 0.0

    def test_deterministic(self):
        s, y = [0.1, 0.4, 0.35, 0.8, 0.6, 0.2], [0, 0, 1, 1, 1, 0]
        a, b = bootstrap_roc(s, y, 1000, seed=4), bootstrap_roc(s, y, 1000, seed=4)
        assert np.array_equal(a.aucs, b.aucs) and np.array_equal(a.mean_tpr, b.mean_tpr)
        assert a.fpr_grid.size == 101

    def test_one_misranked_pair(self):
        s = [0.1, 0.2, 0.3, 0.45, 0.4, 0.6, 0.7, 0.8]
        y = [0, 0, 0, 0, 1, 1, 1, 1]
        point = brute_force_auc(s, y)
        assert point == 15 / 16
        assert abs(bootstrap_roc(s, y, 1000, seed=0).mean_auc - point) <= 0.05

    def test_std_shrinks_with_duplication(self):
        rng = np.random.default_rng(0)
        s, y = rng.normal(size=20), np.r_[np.ones(8), np.zeros(12)].astype(bool)
        s[y] += 1.0
        stds = [bootstrap_roc(np.tile(s, m), np.tile(y, m), 300, seed=1).std_auc for m in (1, 4, 16)]
        assert stds[0] >= stds[1] >= stds[2]

    def test_decision_matrix_uses_hull(self):
        dec = np.array([[1, 1], [1, 0], [0, 0], [1, 0]], bool)
        b = bootstrap_roc(dec, [1, 1, 0, 0], n=50, seed=0)
        assert 0 <= b.mean_auc <= 1


class TestOperatingPoint:
    def test_min_specificity_example(self):
        c = RocCurve(np.array([0.0, 0.062, 1.0]), np.array([0.0, 0.905, 1.0]))
        op = operating_point(c, ("min_specificity", 0.938))
        assert op.recall == 0.905 and op.specificity == pytest.approx(0.938) and op.feasible

    def test_anchor(self):
        c = RocCurve(np.array([0.0, 1.0]), np.array([0.0, 1.0]))
        op = operating_point(c, ("min_recall", 1.0))
        assert (op.recall, op.specificity) == (1.0, 0.0)

    def test_youden(self):
        c = RocCurve(np.array([0.0, 0.1, 1.0]), np.array([0.0, 0.9, 1.0]))
        op = operating_point(c, "youden")
        assert (op.recall, op.specificity) == (0.9, 0.9)

    def test_infeasible_flagged(self):
        c = RocCurve(np.array([0.1, 1.0]), np.array([0.5, 1.0]))
        op = operating_point(c, ("min_specificity", 0.95))
        assert not op.feasible and op.specificity == 0.9


class TestEvalConfig:
    def test_round_trip(self):
        cfg = EvalConfig(k=3, tile=(30, 30, 30))
        assert EvalConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown(self):
        with pytest.raises(ConfigError):
            EvalConfig.from_dict({"kk": 3})


TINY_NET = NetworkConfig.for_variant("3D", channels_per_layer=(4,) * 8, fc_channels=(8,))
TINY_TRAIN = TrainingConfig(epochs=1, segments_per_epoch=4, segment_batch=4, output_patch=(3, 3, 3), val_segments=4)


@pytest.fixture(scope="module")
def cases():
    spec = PhantomSpec(n_cases=8, dims=(30, 30, 48), spacing=(1, 1, 1), vertebrae_per_case=(1, 1),
                       vertebra_radii_mm=(10, 10, 9), tissue_radius_mm=14, min_negative_cases=4,
                       fracture_prevalence=0.5, seed=2)
    return build_cases(spec)


@pytest.fixture(scope="module")
def report(cases):
    return run_cross_validation(cases, TINY_NET, TINY_TRAIN, EvalConfig(k=2, bootstrap_n=20, tile=(40, 40, 40)))


class TestCrossValidation:
    def test_structure(self, report):
        assert len(report["folds"]) == 2
        assert 0 <= report["patient"]["auc"] <= 1 and 0 <= report["vertebra"]["auc"] <= 1
        assert {"mean_auc", "std_auc"} <= set(report["patient"]["bootstrap"])

    def test_every_case_once(self, report, cases):
        assert sorted(c["case_id"] for c in report["cases"]) == sorted(c.case_id for c in cases)
        for f in report["folds"]:
            assert not set(f["test_ids"]) & (set(f["train_ids"]) | set(f["val_ids"]))

    def test_digest_excludes_timings(self, report):
        r = dict(report, timings_s={"0": 123.0})
        assert report_digest(r) == report["digest"]

    def test_write_report(self, report, tmp_path):
        path = write_report(report, tmp_path)
        assert path.exists() and (tmp_path / "roc_patient.png").exists()

    def test_all_positive_rejected(self, cases):
        pos = [c for c in cases if c.positive]
        with pytest.raises((EvaluationError, ConfigError)):
            run_cross_validation(pos, TINY_NET, TINY_TRAIN, EvalConfig(k=2, min_negatives=0, bootstrap_n=2))
