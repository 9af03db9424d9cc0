import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import pair_count_auc
from reqgate.datagen import generate_toy_dataset
from reqgate.exceptions import ConfigurationError
from reqgate.metrics import (
    bootstrap_standard_error,
    operating_point_fp_difference_se,
    roc,
    trapezoid_auc,
    weighted_roc_sweep,
)


class TestRoc:
    def test_separated(self):
        c = roc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
        assert c.auc == 1.0

    def test_constant_scores(self):
        c = roc(np.full(10, 0.3), [0, 1] * 5)
        assert c.auc == 0.5
        assert [(q.fp_fraction, q.tp_fraction) for q in c.points] == [(0.0, 0.0), (1.0, 1.0)]

    def test_hand_case(self):
        s = [0.1, 0.4, 0.35, 0.8, 0.7, 0.9]
        y = [0, 0, 1, 1, 0, 1]
        c = roc(s, y)
        assert abs(c.auc - pair_count_auc(s, y)) < 1e-12
        assert c.auc == pytest.approx(7 / 9, abs=1e-15)

    def test_structure(self):
        c = roc([0.3, 0.3, 0.6, 0.1], [1, 0, 1, 0])
        assert c.thresholds[0] == np.inf
        assert np.all(np.diff(c.thresholds) < 0)
        assert c.points[-1].fp_fraction == 1.0 and c.points[-1].tp_fraction == 1.0
        assert c.auc == trapezoid_auc(c.fp, c.tp)

    def test_single_class(self):
        with pytest.raises(ConfigurationError):
            roc([0.1, 0.2], [1, 1])

    @given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 1)), min_size=2, max_size=80))
    @settings(max_examples=80)
    def test_auc_equals_pair_counting(self, data):
        s = np.array([a for a, _ in data], dtype=float) / 6
        y = np.array([b for _, b in data])
        if y.min() == y.max():
            return
        c = roc(s, y)
        assert abs(c.auc - pair_count_auc(s, y)) < 1e-12
        assert np.all(np.diff(c.fp) >= 0) and np.all(np.diff(c.tp) >= 0)
        assert (c.fp[0], c.tp[0], c.fp[-1], c.tp[-1]) == (0, 0, 1, 1)

    @given(st.floats(0.05, 20))
    @settings(max_examples=25)
    def test_logit_scaling_invariance(self, k):
        rng = np.random.default_rng(0)
        z = rng.normal(size=200)
        y = (z + rng.normal(size=200) > 0).astype(int)
        # keep probabilities away from saturation so no two round together
        a = roc(1 / (1 + np.exp(-z)), y)
        b = roc(1 / (1 + np.exp(-k * z / 20)), y)
        np.testing.assert_array_equal(a.fp, b.fp)
        np.testing.assert_array_equal(a.tp, b.tp)


@pytest.fixture(scope="module")
def toy():
    return generate_toy_dataset(20_000, 400, seed=2)


class TestSweep:
    def test_weights_move_operating_point(self, toy):
        X, y = toy
        lo, hi = weighted_roc_sweep(X, y, [1, 100])
        assert lo.ok and hi.ok
        assert hi.operating_point["fp_fraction"] > lo.operating_point["fp_fraction"]
        assert hi.operating_point["tp_fraction"] > lo.operating_point["tp_fraction"]
        # reweighting a linear model barely changes the ranking
        assert abs(hi.curve.auc - lo.curve.auc) < 1e-3

    def test_equal_ratios_identical(self, toy):
        X, y = toy
        a, b = weighted_roc_sweep(X, y, [3, 3])
        assert a.weights == b.weights

    def test_errors(self, toy):
        X, y = toy
        with pytest.raises(ConfigurationError):
            weighted_roc_sweep(X, y, [])
        with pytest.raises(ConfigurationError):
            weighted_roc_sweep(X, y, [0.0])
        with pytest.raises(ConfigurationError):
            weighted_roc_sweep(X[:3], [0, 0, 1], [1])

    def test_bootstrap(self, toy):
        X, y = toy
        lo, hi = weighted_roc_sweep(X, y, [1, 100])
        se = operating_point_fp_difference_se(X, y, hi.weights, lo.weights, n_boot=50)
        assert 0 < se < 0.01
        assert bootstrap_standard_error(lambda idx: 1.0, 10) == 0.0
