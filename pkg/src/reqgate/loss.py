"""Requirement-driven loss built on smoothed ("fractional") positive counts.

A prediction ``p`` is widened into a box of half-width ``lam`` around ``p``
with height ``1 / (2 lam)``; its fractional positive is the box mass above
the decision threshold 1/2::

    fp(p, lam) = clip((p - (1/2 - lam)) / (2 lam), 0, 1)

Summing over noise samples gives the fractional false positives (FFP), over
motion samples the fractional true positives (FTP). The loss

    E = sqrt(E_FP**2 + E_TP**2)
    E_FP = (FFP / FP_req - 1) * [FFP > FP_req]
    E_TP = (TP_req / FTP - 1) * [FTP < TP_req]

is zero exactly when both requirements hold. Samples whose prediction sits
below ``1/2 - lam`` have ``fp == 0`` and a zero gradient, which is what makes
the active-set training loop possible.

All dataset-level sums go through :func:`math.fsum`: the result is the
correctly rounded sum, so adding or removing exact zeros never changes it.
"""

from dataclasses import dataclass
import math

import numpy as np

from ._validation import check_binary_labels, check_fraction
from .exceptions import ConfigurationError

FTP_FLOOR = 1e-12


@dataclass(frozen=True)
class LambdaPair:
    lambda0: float
    lambda1: float

    def __post_init__(self):
        for name in ("lambda0", "lambda1"):
            check_fraction(getattr(self, name), name, 0.0, 0.5)


@dataclass(frozen=True)
class Requirements:
    """TP/FP requirements as fractions plus the class sizes they apply to.

    Counts are kept as reals: ``tp_count = tp_fraction * n_class1``.
    """

    tp_fraction: float
    fp_fraction: float
    n_class1: int
    n_class0: int

    def __post_init__(self):
        check_fraction(self.tp_fraction, "tp_fraction", 0.0, 1.0)
        check_fraction(self.fp_fraction, "fp_fraction", 0.0, 1.0, high_open=True)
        if self.n_class1 < 1 or self.n_class0 < 1:
            raise ConfigurationError("requirements need at least one sample per class")

    @classmethod
    def for_labels(cls, tp_fraction, fp_fraction, y):
        y = check_binary_labels(y)
        n1 = int(np.count_nonzero(y))
        return cls(tp_fraction, fp_fraction, n_class1=n1, n_class0=len(y) - n1)

    @property
    def tp_count(self):
        return self.tp_fraction * self.n_class1

    @property
    def fp_count(self):
        return self.fp_fraction * self.n_class0


def _check_lambda(lam):
    lam = float(lam)
    if not lam > 0:
        raise ConfigurationError(f"lambda must be > 0, got {lam}")
    return lam


def support_bounds(lam):
    """(lower, upper) edge of the region where the fractional positive is not saturated."""
    return 0.5 - lam, 0.5 + lam


def fractional_positive(y_pred, lam):
    lam = _check_lambda(lam)
    lo, _ = support_bounds(lam)
    return np.clip((np.asarray(y_pred, dtype=np.float64) - lo) / (2 * lam), 0.0, 1.0)


def fractional_positive_grad(y_pred, lam):
    """d fp / d y_pred; zero outside the open support and at both kinks."""
    lam = _check_lambda(lam)
    lo, hi = support_bounds(lam)
    y = np.asarray(y_pred, dtype=np.float64)
    return np.where((y > lo) & (y < hi), 1.0 / (2 * lam), 0.0)


def ffp(predictions_class0, lambda0):
    return math.fsum(np.ravel(fractional_positive(predictions_class0, lambda0)))


def ftp(predictions_class1, lambda1):
    return math.fsum(np.ravel(fractional_positive(predictions_class1, lambda1)))


def loss_terms(ffp_val, ftp_val, req):
    """Return ``(E, E_FP, E_TP)``."""
    fp_req, tp_req = req.fp_count, req.tp_count
    e_fp = ffp_val / fp_req - 1.0 if ffp_val > fp_req else 0.0
    e_tp = tp_req / max(ftp_val, FTP_FLOOR) - 1.0 if ftp_val < tp_req else 0.0
    return math.hypot(e_fp, e_tp), e_fp, e_tp


def requirement_loss(ffp_val, ftp_val, req):
    return loss_terms(ffp_val, ftp_val, req)[0]


def evaluate_loss(predictions, y, req, lambdas):
    """Loss terms and fractional counts for labelled predictions.

    Returns a dict with keys ``loss``, ``e_fp``, ``e_tp``, ``ffp``, ``ftp``.
    """
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(y)
    f0 = ffp(p[y == 0], lambdas.lambda0)
    f1 = ftp(p[y == 1], lambdas.lambda1)
    e, e_fp, e_tp = loss_terms(f0, f1, req)
    return {"loss": e, "e_fp": e_fp, "e_tp": e_tp, "ffp": f0, "ftp": f1}


def requirement_loss_grad(predictions, y, req, lambdas):
    """Per-sample dE/dp for labelled predictions; all zeros when E == 0."""
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(y)
    terms = evaluate_loss(p, y, req, lambdas)
    grad = np.zeros_like(p)
    e = terms["loss"]
    if e == 0.0:
        return grad
    neg = y == 0
    if terms["e_fp"] > 0.0:
        scale = terms["e_fp"] / e / req.fp_count
        grad[neg] = scale * fractional_positive_grad(p[neg], lambdas.lambda0)
    if terms["e_tp"] > 0.0:
        pos = ~neg
        f1 = max(terms["ftp"], FTP_FLOOR)
        scale = -terms["e_tp"] / e * req.tp_count / (f1 * f1)
        grad[pos] = scale * fractional_positive_grad(p[pos], lambdas.lambda1)
    return grad


def active_samples(gate_scores, lambda0):
    """Indices whose gate score is at or above ``1/2 - lambda0``.

    The product prediction never exceeds the gate score, so every excluded
    noise sample has a zero fractional positive and a zero gradient.
    """
    lam = _check_lambda(lambda0)
    lo, _ = support_bounds(lam)
    return np.flatnonzero(np.asarray(gate_scores, dtype=np.float64) >= lo)
