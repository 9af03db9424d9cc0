"""ROC curves, the class-weight sweep on the toy data, and bootstrap noise.

A curve point ``(fp_fraction, tp_fraction, threshold)`` counts a sample as
positive when its score is ``>= threshold``. Equal scores share one step, so
the curve is fully determined by the multiset of (score, label) pairs.
"""

from dataclasses import dataclass, field
import math
import warnings

import numpy as np

from ._validation import check_binary_labels, check_random_state
from .exceptions import ConfigurationError, ConvergenceWarning, ShapeError
from .models import ToyLogisticClassifier, ToyLogisticWeights, toy_logistic_forward
from .trainer import evaluate

DEFAULT_RATIOS = (1.0, 3.0, 10.0, 30.0, 100.0)


@dataclass(frozen=True)
class RocPoint:
    fp_fraction: float
    tp_fraction: float
    threshold: float


@dataclass
class RocCurve:
    points: list
    auc: float

    @property
    def fp(self):
        return np.array([q.fp_fraction for q in self.points])

    @property
    def tp(self):
        return np.array([q.tp_fraction for q in self.points])

    @property
    def thresholds(self):
        return np.array([q.threshold for q in self.points])


def trapezoid_auc(fp, tp):
    fp = np.asarray(fp, dtype=np.float64)
    tp = np.asarray(tp, dtype=np.float64)
    return math.fsum((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1]) * 0.5)


def roc(scores, y):
    """ROC curve of ``scores`` against binary labels ``y``.

    The first point is ``(0, 0)`` at threshold ``+inf``; each distinct score,
    taken in descending order, adds one point; the last point is ``(1, 1)``.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1:
        raise ShapeError(f"scores must be one-dimensional, got shape {s.shape}")
    y = check_binary_labels(y, len(s))
    if np.any(np.isnan(s)):
        raise ConfigurationError("scores contain NaN")
    n1 = int(np.count_nonzero(y))
    n0 = len(y) - n1
    if n1 == 0 or n0 == 0:
        raise ConfigurationError("ROC needs both classes present")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp_cum = np.cumsum(y == 1)
    fp_cum = np.cumsum(y == 0)
    # last index of every run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    fp = np.r_[0.0, fp_cum[ends] / n0]
    tp = np.r_[0.0, tp_cum[ends] / n1]
    thr = np.r_[np.inf, s[ends]]
    points = [RocPoint(float(a), float(b), float(c)) for a, b, c in zip(fp, tp, thr)]
    return RocCurve(points=points, auc=trapezoid_auc(fp, tp))


def bootstrap_standard_error(statistic, n, n_boot=200, random_state=0):
    """Standard deviation of ``statistic(idx)`` over ``n_boot`` resamples of range(n)."""
    if n < 1 or n_boot < 2:
        raise ConfigurationError("bootstrap needs n >= 1 and n_boot >= 2")
    rng = check_random_state(random_state)
    values = np.array([statistic(rng.integers(0, n, size=n)) for _ in range(n_boot)])
    return float(np.std(values, ddof=1))


@dataclass
class SweepResult:
    class_weight_ratio: float
    weights: ToyLogisticWeights = None
    operating_point: dict = field(default_factory=dict)
    curve: RocCurve = None
    converged: bool = False
    error: str = ""

    @property
    def ok(self):
        return not self.error


def weighted_roc_sweep(X, y, ratios=DEFAULT_RATIOS, max_iter=1000, tol=1e-10):
    """Fit the toy logistic model once per class-weight ratio.

    Returns one :class:`SweepResult` per ratio, in the given order. Each holds
    the fitted weights, the operating point at threshold 0.5 and the ROC curve
    on the same data. A fit that fails is reported through ``error`` instead of
    aborting the sweep.
    """
    ratios = [float(r) for r in ratios]
    if not ratios:
        raise ConfigurationError("need at least one class-weight ratio")
    for r in ratios:
        if not (r > 0 and math.isfinite(r)):
            raise ConfigurationError(f"class-weight ratios must be positive reals, got {r}")
    X = np.asarray(X, dtype=np.float64)
    y = check_binary_labels(y, X.shape[0])
    if np.bincount(y, minlength=2).min() < 2:
        raise ConfigurationError("the sweep needs at least two points per class")
    results = []
    for r in ratios:
        clf = ToyLogisticClassifier(class_weight_ratio=r, max_iter=max_iter, tol=tol)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ConvergenceWarning)
                clf.fit(X, y)
        except ConfigurationError as exc:
            results.append(SweepResult(class_weight_ratio=r, error=str(exc)))
            continue
        p = clf.predict_proba(X)[:, 1]
        results.append(SweepResult(
            class_weight_ratio=r,
            weights=clf.weights_,
            operating_point=evaluate(p, y, threshold=0.5),
            curve=roc(p, y),
            converged=clf.converged_,
            error="" if clf.converged_ else "optimizer did not converge",
        ))
    return results


def operating_point_fp_difference_se(X, y, w_a, w_b, n_boot=200, random_state=0):
    """Bootstrap standard error of ``fp_a - fp_b`` at threshold 0.5.

    Both fitted models stay fixed; only the evaluation sample is resampled.
    """
    y = check_binary_labels(y)
    called_a = toy_logistic_forward(X, w_a) > 0.5
    called_b = toy_logistic_forward(X, w_b) > 0.5
    neg = y == 0

    def stat(idx):
        n0 = np.count_nonzero(neg[idx])
        fa = np.count_nonzero(called_a[idx] & neg[idx])
        fb = np.count_nonzero(called_b[idx] & neg[idx])
        return (fa - fb) / max(n0, 1)

    return bootstrap_standard_error(stat, len(y), n_boot=n_boot, random_state=random_state)
