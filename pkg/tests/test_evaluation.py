import math

import numpy as np
import pytest
from conftest import random_hypotheses
from hypothesis import given, settings
from hypothesis import strategies as st

from prefact.evaluation import (
    DEFAULT_FRACTIONS,
    CalibrationReport,
    accuracy,
    bin_spearman,
    build_report,
    emit_report,
    evaluate_hypotheses,
    normalized_certainty,
    oracle_labels,
    predict_labels,
    read_reliability_csv,
    read_sparsification_csv,
    reliability_diagram,
    render_report_dir,
    sparsification_curve,
    task_accuracies,
)
from prefact.model import HypothesisSet
from prefact.numerics import make_rng


class TestAccuracy:
    def test_all_and_none(self):
        assert accuracy([1, 2, 3], [1, 2, 3]) == 1.0
        assert accuracy([1, 2, 3], [0, 0, 0]) == 0.0

    def test_three_of_eight(self):
        assert accuracy([1, 1, 1, 0, 0, 0, 0, 0], [1] * 8) == 0.375

    def test_errors(self):
        with pytest.raises(ValueError):
            accuracy([], [])
        with pytest.raises(ValueError):
            accuracy([1, 2], [1])

    def test_joint(self):
        acc = task_accuracies([0, 1, 2, 3], [0, 0, 1, 1], [0, 1, 0, 3], [0, 1, 1, 1])
        assert acc == {"action": 0.75, "object": 0.75, "joint": 0.5}


def _hs_from_logits(action, obj):
    action, obj = np.asarray(action, float), np.asarray(obj, float)
    N, T = action.shape[:2]
    return HypothesisSet(np.zeros((N, T, 1)), np.zeros((N, T, 1)), action, obj, np.zeros((N, T)), np.zeros((N, T)))


class TestPredictions:
    def test_best_uses_lowest_entropy(self):
        # hypothesis 1 is confident about class 2, hypothesis 0 is nearly uniform about class 0
        hs = _hs_from_logits([[[0.1, 0, 0], [0, 0, 9]]], [[[0.1, 0], [0, 9]]])
        a, o = predict_labels(hs, "best")
        assert (a[0], o[0]) == (2, 1)

    def test_mean(self):
        hs = _hs_from_logits([[[5, 0, 0], [0, 1, 0], [0, 1, 0]]], [[[1, 0], [1, 0], [0, 1]]])
        a, o = predict_labels(hs, "mean")
        assert a[0] == 0 and o[0] == 0

    def test_unknown_rule(self):
        with pytest.raises(ValueError):
            predict_labels(_hs_from_logits([[[0, 1]]], [[[0, 1]]]), "vote")

    def test_oracle(self):
        hs = _hs_from_logits([[[1, 0], [0, 1], [0, 1]]], [[[1, 0], [1, 0], [0, 1]]])
        a, o = oracle_labels(hs, np.array([1]), np.array([1]))
        assert (a[0], o[0]) == (1, 1)
        a, o = oracle_labels(hs, np.array([1]), np.array([0]))
        assert (a[0], o[0]) == (1, 0)

    def test_normalized_certainty(self):
        np.testing.assert_allclose(normalized_certainty(np.zeros((2, 4))), 0.0, atol=1e-15)
        assert normalized_certainty(np.array([100.0, 0, 0]))[()] == pytest.approx(1.0, abs=1e-12)


class TestReliability:
    def test_bernoulli_calibrated(self):
        r = make_rng(0)
        conf = r.random(100_000)
        correct = r.random(100_000) < conf
        bins = reliability_diagram(conf, correct)
        assert sum(b.count for b in bins) == 100_000
        for b in bins:
            assert abs(b.accuracy - b.mean_confidence) < 0.02

    def test_all_confident(self):
        bins = reliability_diagram(np.ones(50), np.ones(50, bool))
        occupied = [b for b in bins if b.count]
        assert len(occupied) == 1 and occupied[0].accuracy == 1.0 and occupied[0].upper == 1.0

    def test_empty_bins_absent(self):
        bins = reliability_diagram([0.05, 0.95], [True, False])
        assert bins[5].count == 0 and bins[5].accuracy is None and bins[5].mean_confidence is None

    def test_anti_calibrated(self):
        r = make_rng(1)
        conf = r.random(20_000)
        correct = r.random(20_000) < 1 - conf
        assert bin_spearman(reliability_diagram(conf, correct)) < 0

    def test_partition(self):
        bins = reliability_diagram([0.0, 0.1, 0.2999, 1.0], [1, 1, 1, 1])
        assert [b.count for b in bins] == [1, 1, 1, 0, 0, 0, 0, 0, 0, 1]
        assert bins[0].lower == 0.0 and bins[-1].upper == 1.0

    def test_invalid(self):
        with pytest.raises(ValueError):
            reliability_diagram([1.2], [True])

    def test_spearman_needs_two_bins(self):
        assert math.isnan(bin_spearman(reliability_diagram([0.5], [1])))


class TestSparsification:
    def test_identical_to_error(self):
        e = make_rng(2).random(300)
        curve, oracle = sparsification_curve(e, e)
        assert curve == oracle

    def test_constant_uncertainty_flat(self):
        e = make_rng(3).exponential(size=10_000)
        curve, _ = sparsification_curve(np.zeros_like(e), e)
        mean, sem = e.mean(), e.std() / math.sqrt(len(e))
        for f, m in curve:
            n = len(e) - math.floor(f * len(e))
            assert abs(m - mean) < 2 * e.std() / math.sqrt(n) + 2 * sem

    def test_oracle_dominance_random(self):
        r = make_rng(4)
        for _ in range(100):
            n = int(r.integers(1, 200))
            curve, oracle = sparsification_curve(r.random(n), r.random(n))
            for (_, m), (_, o) in zip(curve, oracle):
                assert o <= m + 1e-12

    def test_fractions(self):
        curve, _ = sparsification_curve(np.arange(20.0), np.arange(20.0))
        assert [f for f, _ in curve] == list(DEFAULT_FRACTIONS)
        # removing 5% of 20 drops the single most uncertain sample
        assert curve[1][1] == pytest.approx(np.mean(np.arange(19.0)))

    def test_tie_by_index(self):
        curve, _ = sparsification_curve([1.0, 1.0, 1.0, 1.0], [4.0, 3.0, 2.0, 1.0], [0.0, 0.5])
        # stable ranking keeps sample order, so the last two are removed
        assert curve[1][1] == 3.5

    def test_empty(self):
        assert sparsification_curve([], []) == ([], [])

    def test_bad_fractions(self):
        with pytest.raises(ValueError):
            sparsification_curve([1.0], [1.0], [0.5, 0.2])


class TestEvaluateHypotheses:
    def test_report_contents(self, rng):
        hs = random_hypotheses(rng, N=40, T=3, D=4, A=3, O=4)
        gt = rng.standard_normal((40, 4))
        ya, yo = rng.integers(0, 3, 40), rng.integers(0, 4, 40)
        ya[:5] = -1
        yo[:5] = -1
        res = evaluate_hypotheses(hs, gt, ya, yo)
        assert set(res.reports) == {"action", "object", "feature"}
        assert sum(b.count for b in res.reports["action"].bins) == 35 * 3
        assert sum(b.count for b in res.reports["feature"].bins) == 40
        lab = ya >= 0
        assert res.accuracies["best"]["action"] == accuracy(res.predictions["best_action"][lab], ya[lab])
        assert res.accuracies["oracle"]["joint"] >= res.accuracies["best"]["joint"]

    def test_feature_error_uses_closest_hypothesis(self):
        med = np.array([[[0.0, 0.0], [1.0, 1.0]]])
        hs = HypothesisSet(med, np.zeros((1, 2, 2)), np.zeros((1, 2, 2)), np.zeros((1, 2, 2)),
                           np.zeros((1, 2)), np.zeros((1, 2)))
        res = evaluate_hypotheses(hs, np.array([[0.9, 1.3]]), np.array([0]), np.array([0]))
        assert res.predictions["feature_error"][0] == pytest.approx(0.2)
        assert res.predictions["feature_uncertainty"][0] == pytest.approx(math.log(2) + 1)

    def test_unlabeled_only(self, rng):
        hs = random_hypotheses(rng, N=6, T=2)
        res = evaluate_hypotheses(hs, rng.standard_normal((6, 5)), -np.ones(6, int), -np.ones(6, int))
        assert set(res.reports) == {"feature"} and res.accuracies == {}


class TestEmission:
    def _report(self):
        r = make_rng(5)
        conf = r.random(200)
        return build_report(conf, r.random(200) < conf, r.random(200), r.random(200))

    def test_files_and_determinism(self, tmp_path):
        rep = self._report()
        paths = emit_report(rep, tmp_path / "a", "action")
        emit_report(rep, tmp_path / "b", "action")
        assert [p.name for p in paths] == ["action_reliability.csv", "action_reliability.svg",
                                           "action_sparsification.csv", "action_sparsification.svg"]
        for p in paths:
            assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()
        assert paths[1].read_text().startswith("<svg")

    def test_csv_round_trip_exact(self, tmp_path):
        rep = self._report()
        emit_report(rep, tmp_path, "x")
        assert read_reliability_csv(tmp_path / "x_reliability.csv") == rep.bins
        curve, oracle = read_sparsification_csv(tmp_path / "x_sparsification.csv")
        assert curve == rep.sparsification and oracle == rep.oracle_sparsification

    def test_empty_sparsification(self, tmp_path):
        emit_report(CalibrationReport(bins=reliability_diagram([0.5], [1])), tmp_path, "e")
        assert (tmp_path / "e_sparsification.csv").read_text().strip() == "removed_fraction,metric,oracle_metric"
        assert "polyline" not in (tmp_path / "e_sparsification.svg").read_text()

    def test_unwritable(self, tmp_path):
        (tmp_path / "file").write_text("x")
        with pytest.raises(OSError):
            emit_report(self._report(), tmp_path / "file" / "sub")

    def test_render_from_csv(self, tmp_path):
        emit_report(self._report(), tmp_path, "x")
        before = (tmp_path / "x_reliability.svg").read_bytes()
        (tmp_path / "x_reliability.svg").unlink()
        written = render_report_dir(tmp_path)
        assert len(written) == 2
        assert b"<rect" in (tmp_path / "x_reliability.svg").read_bytes()
        assert len(before) > 0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 10), st.floats(0, 10)), min_size=1, max_size=80))
def test_oracle_dominance_property(rows):
    u, e = np.array(rows).T
    curve, oracle = sparsification_curve(u, e)
    assert all(o <= m + 1e-12 for (_, m), (_, o) in zip(curve, oracle))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=100))
def test_bins_partition(conf):
    bins = reliability_diagram(conf, np.ones(len(conf), bool))
    assert sum(b.count for b in bins) == len(conf)
    for b in bins:
        if b.count:
            assert b.lower <= b.mean_confidence <= b.upper
