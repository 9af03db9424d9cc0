import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import box_mass_above_half
from reqgate.exceptions import ConfigurationError
from reqgate.loss import (
    LambdaPair,
    Requirements,
    active_samples,
    evaluate_loss,
    ffp,
    fractional_positive,
    fractional_positive_grad,
    ftp,
    loss_terms,
    requirement_loss_grad,
)


class TestFractionalPositive:
    def test_matches_quadrature_on_grid(self):
        rng = np.random.default_rng(11)
        p = rng.uniform(-0.2, 1.2, 10_000)
        lam = rng.uniform(1e-4, 0.5, 10_000)
        oracle = np.array([box_mass_above_half(a, b) for a, b in zip(p, lam)])
        got = np.array([fractional_positive(a, b) for a, b in zip(p, lam)])
        assert np.max(np.abs(got - oracle)) < 1e-9

    def test_hand_values(self):
        np.testing.assert_allclose(fractional_positive([0.5, 0.3, 0.7, 0.6], 0.2),
                                   [0.5, 0.0, 1.0, 0.75])

    def test_zero_below_support(self):
        assert fractional_positive(0.5 - 0.25 - 1e-12, 0.25) == 0.0

    @given(p=st.floats(-1, 2), lam=st.floats(1e-6, 0.5))
    def test_bounded_and_hard_limit(self, p, lam):
        fp = float(fractional_positive(p, lam))
        assert 0.0 <= fp <= 1.0
        if abs(p - 0.5) > lam:
            assert fp == float(p > 0.5)

    @given(p=st.lists(st.floats(0, 1), min_size=2, max_size=20), lam=st.floats(1e-3, 0.5))
    def test_monotone_in_prediction(self, p, lam):
        p = np.sort(p)
        assert np.all(np.diff(fractional_positive(p, lam)) >= 0)

    def test_gradient_zero_at_kinks_and_outside(self):
        g = fractional_positive_grad([0.3, 0.7, 0.1, 0.9, 0.5], 0.2)
        np.testing.assert_array_equal(g, [0, 0, 0, 0, 2.5])

    def test_nonpositive_lambda_rejected(self):
        with pytest.raises(ConfigurationError):
            fractional_positive(0.5, 0.0)


class TestRequirements:
    def test_counts(self):
        req = Requirements(0.5, 0.001, n_class1=582, n_class0=100_000)
        assert req.tp_count == 291
        assert req.fp_count == pytest.approx(100)

    @pytest.mark.parametrize("tp,fp", [(0.0, 0.1), (1.1, 0.1), (0.5, 0.0), (0.5, 1.0), (0.5, -0.1)])
    def test_invalid(self, tp, fp):
        with pytest.raises(ConfigurationError):
            Requirements(tp, fp, 10, 10)

    def test_lambda_pair_bounds(self):
        LambdaPair(0.5, 0.01)
        with pytest.raises(ConfigurationError):
            LambdaPair(0.0, 0.1)
        with pytest.raises(ConfigurationError):
            LambdaPair(0.2, 0.6)


class TestLoss:
    req = Requirements(0.5, 0.01, n_class1=100, n_class0=1000)

    def test_zero_when_met(self):
        e, e_fp, e_tp = loss_terms(ffp_val=10.0, ftp_val=50.0, req=self.req)
        assert (e, e_fp, e_tp) == (0.0, 0.0, 0.0)

    def test_components(self):
        e, e_fp, e_tp = loss_terms(ffp_val=20.0, ftp_val=25.0, req=self.req)
        assert e_fp == pytest.approx(1.0)
        assert e_tp == pytest.approx(1.0)
        assert e == pytest.approx(math.sqrt(2))

    def test_ftp_floor(self):
        e, _, e_tp = loss_terms(0.0, 0.0, self.req)
        assert math.isfinite(e) and e_tp == pytest.approx(50 / 1e-12 - 1)

    def test_fsum_ignores_zeros(self):
        p = np.array([0.6, 0.55, 0.7])
        assert ffp(np.r_[p, np.zeros(1000)], 0.2) == ffp(p, 0.2)
        assert ftp(np.r_[np.zeros(7), p], 0.2) == ftp(p, 0.2)

    def test_gradient_finite_differences(self):
        rng = np.random.default_rng(3)
        lambdas = LambdaPair(0.2, 0.2)
        checked = 0
        while checked < 60:
            n0, n1 = 40, 10
            y = np.r_[np.zeros(n0, int), np.ones(n1, int)]
            p = rng.uniform(0.25, 0.75, n0 + n1)
            req = Requirements(rng.uniform(0.4, 0.95), rng.uniform(0.05, 0.3), n1, n0)
            lo, hi = 0.5 - 0.2, 0.5 + 0.2
            if np.min(np.abs(np.r_[p - lo, p - hi])) < 1e-3:
                continue
            grad = requirement_loss_grad(p, y, req, lambdas)
            base = evaluate_loss(p, y, req, lambdas)
            if base["loss"] == 0 or min(abs(base["ffp"] - req.fp_count),
                                        abs(base["ftp"] - req.tp_count)) < 1e-2:
                continue
            h = 1e-7
            fd = np.empty_like(p)
            for i in range(len(p)):
                up, dn = p.copy(), p.copy()
                up[i] += h
                dn[i] -= h
                fd[i] = (evaluate_loss(up, y, req, lambdas)["loss"]
                         - evaluate_loss(dn, y, req, lambdas)["loss"]) / (2 * h)
            np.testing.assert_allclose(grad, fd, rtol=1e-4, atol=1e-9)
            checked += 1

    def test_gradient_zero_when_met(self):
        y = np.array([0, 0, 1, 1])
        p = np.array([0.1, 0.2, 0.9, 0.8])
        req = Requirements(0.5, 0.5, 2, 2)
        np.testing.assert_array_equal(requirement_loss_grad(p, y, req, LambdaPair(0.1, 0.1)), 0)


class TestActiveSamples:
    def test_threshold_inclusive(self):
        g = np.array([0.0, 0.25, 0.2499, 0.9])
        np.testing.assert_array_equal(active_samples(g, 0.25), [1, 3])

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=50), st.floats(0.01, 0.5))
    @settings(max_examples=50)
    def test_excluded_have_zero_fp(self, gates, lam):
        g = np.array(gates)
        excluded = np.setdiff1d(np.arange(len(g)), active_samples(g, lam))
        # any product g * p2 with p2 <= 1 stays at or below the gate
        assert np.all(fractional_positive(g[excluded], lam) == 0)
