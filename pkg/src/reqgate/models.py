"""Probability models and their hand-written gradients.

* ``p1``: energy gate, ``S(w11 * <E> + w12)``.
* ``p2``: small CNN on the 21 x 64 spectrogram (conv 5x3x3 -> ReLU ->
  max-pool 3 -> dense 10 ReLU -> dense 1 sigmoid), kernels constrained to unit
  norm and dense weights/biases to [0, 1].
* the product model ``p = S(w2a * L(p1) + w2b) * p2``.
* the 2D logistic toy model ``S(a x + b y + c)`` with class-weighted BCE.
"""

from dataclasses import dataclass, field, replace
import math
import warnings

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted, check_X_y

from . import _cnn
from ._validation import check_random_state, check_spectrograms
from .exceptions import ConfigurationError, ConvergenceWarning

LOGIT_CLAMP = 1e-9
N_FILTERS = _cnn.N_FILTERS
N_FLAT = _cnn.N_FLAT
N_HIDDEN = _cnn.N_HIDDEN
FLAT_SHAPE = (_cnn.POOL_H, _cnn.POOL_W, _cnn.N_FILTERS)
CANONICAL_KERNEL = np.zeros((3, 3))
CANONICAL_KERNEL[1, 1] = 1.0


def sigmoid(z):
    return expit(z)


def logit(p):
    """Inverse sigmoid with ``p`` clamped to [1e-9, 1 - 1e-9]."""
    p = np.clip(p, LOGIT_CLAMP, 1.0 - LOGIT_CLAMP)
    return np.log(p) - np.log1p(-p)


@dataclass
class GateWeights:
    w11: float = 1.0
    w12: float = 0.0
    w2a: float = 1.0
    w2b: float = 0.0

    def __post_init__(self):
        for name in ("w11", "w12", "w2a", "w2b"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ConfigurationError(f"gate weight {name} is not finite")
            setattr(self, name, value)


@dataclass
class CnnWeights:
    conv_kernels: np.ndarray
    conv_biases: np.ndarray
    dense1: np.ndarray
    dense1_bias: np.ndarray
    dense2: np.ndarray
    dense2_bias: np.ndarray

    SHAPES = {
        "conv_kernels": (N_FILTERS, 3, 3),
        "conv_biases": (N_FILTERS,),
        "dense1": (N_FLAT, N_HIDDEN),
        "dense1_bias": (N_HIDDEN,),
        "dense2": (N_HIDDEN, 1),
        "dense2_bias": (1,),
    }

    def __post_init__(self):
        for name, shape in self.SHAPES.items():
            arr = np.array(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ConfigurationError(f"{name} must have shape {shape}, got {arr.shape}")
            setattr(self, name, arr)

    @classmethod
    def initialize(cls, random_state=0, dense_scale=0.01, bias=0.05):
        rng = check_random_state(random_state)
        kernels = rng.uniform(-1.0, 1.0, size=(N_FILTERS, 3, 3))
        w = cls(
            conv_kernels=kernels,
            conv_biases=np.full(N_FILTERS, bias),
            dense1=rng.uniform(0.0, dense_scale, size=(N_FLAT, N_HIDDEN)),
            dense1_bias=np.full(N_HIDDEN, bias),
            dense2=rng.uniform(0.0, dense_scale, size=(N_HIDDEN, 1)),
            dense2_bias=np.full(1, bias),
        )
        return apply_constraints(w)

    def copy(self):
        return CnnWeights(**{name: getattr(self, name).copy() for name in self.SHAPES})

    def tensors(self):
        return {name: getattr(self, name) for name in self.SHAPES}


@dataclass
class ProductModelWeights:
    gate: GateWeights = field(default_factory=GateWeights)
    cnn: CnnWeights = field(default_factory=CnnWeights.initialize)
    frozen_gate_p1: bool = True

    def copy(self):
        return ProductModelWeights(replace(self.gate), self.cnn.copy(), self.frozen_gate_p1)


@dataclass
class ProductGradients:
    w11: float
    w12: float
    w2a: float
    w2b: float
    cnn: dict


def apply_constraints(w):
    """Project CNN weights onto the feasible set (returns a new object).

    Kernels are rescaled to unit L2 norm (an all-zero kernel becomes the
    centred delta); dense weights and every bias are clipped to [0, 1].
    """
    kernels = np.array(w.conv_kernels, dtype=np.float64)
    for c in range(kernels.shape[0]):
        norm = np.sqrt(np.sum(kernels[c] ** 2))
        kernels[c] = kernels[c] / norm if norm > 0 else CANONICAL_KERNEL
    return CnnWeights(
        conv_kernels=kernels,
        conv_biases=np.clip(w.conv_biases, 0.0, 1.0),
        dense1=np.clip(w.dense1, 0.0, 1.0),
        dense1_bias=np.clip(w.dense1_bias, 0.0, 1.0),
        dense2=np.clip(w.dense2, 0.0, 1.0),
        dense2_bias=np.clip(w.dense2_bias, 0.0, 1.0),
    )


def p1_forward(energy, gate):
    return sigmoid(gate.w11 * np.asarray(energy, dtype=np.float64) + gate.w12)


def gate_logit(energy, gate):
    """L(p1(energy)); frozen during phase 2 and cached by the trainer."""
    return logit(p1_forward(energy, gate))


def gate_score(frozen_logit, gate):
    return sigmoid(gate.w2a * frozen_logit + gate.w2b)


@dataclass
class CnnCache:
    X: np.ndarray
    z: np.ndarray
    flat: np.ndarray
    arg: np.ndarray
    hpre: np.ndarray


def p2_forward(spectrograms, cnn, return_cache=False):
    """CNN probability for (n, 21, 64) spectrograms (or flattened (n, 1344))."""
    X = check_spectrograms(spectrograms)
    z, flat, arg, hpre = _cnn.forward(
        X, cnn.conv_kernels, cnn.conv_biases, cnn.dense1, cnn.dense1_bias,
        np.ascontiguousarray(cnn.dense2[:, 0]), float(cnn.dense2_bias[0]),
    )
    p2 = sigmoid(z)
    if return_cache:
        return p2, CnnCache(X, z, flat, arg, hpre)
    return p2


def p2_backward(cache, dz, cnn):
    """Reduce per-sample upstream gradients d(loss)/dz into CNN parameter gradients."""
    dz = np.ascontiguousarray(dz, dtype=np.float64)
    gK, gbc, gW1, gb1, gw2, gb2 = _cnn.backward(
        cache.X, dz, cache.flat, cache.arg, cache.hpre, cnn.dense1,
        np.ascontiguousarray(cnn.dense2[:, 0]),
    )
    return {
        "conv_kernels": gK,
        "conv_biases": gbc,
        "dense1": gW1,
        "dense1_bias": gb1,
        "dense2": gw2[:, None],
        "dense2_bias": np.array([gb2]),
    }


@dataclass
class ProductForward:
    p: np.ndarray
    gate: np.ndarray
    p2: np.ndarray
    frozen_logit: np.ndarray
    cache: CnnCache


def product_forward(energy, spectrograms, w, frozen_logit=None):
    """Return p, gate score and p2 for a batch.

    ``frozen_logit`` lets the trainer pass precomputed L(p1) values.
    """
    if frozen_logit is None:
        frozen_logit = gate_logit(energy, w.gate)
    g = gate_score(frozen_logit, w.gate)
    p2, cache = p2_forward(spectrograms, w.cnn, return_cache=True)
    return ProductForward(p=g * p2, gate=g, p2=p2, frozen_logit=frozen_logit, cache=cache)


def product_backward(fwd, dloss_dp, w, energy=None):
    """Chain per-sample dE/dp through the product model.

    Scalar gate gradients are reduced with :func:`math.fsum`; CNN gradients
    are accumulated sample by sample. Both reductions ignore samples whose
    upstream gradient is exactly zero.
    """
    d = np.asarray(dloss_dp, dtype=np.float64)
    g, p2 = fwd.gate, fwd.p2
    dgate_pre = d * p2 * g * (1.0 - g)
    dz = d * g * p2 * (1.0 - p2)
    grads = ProductGradients(
        w11=0.0,
        w12=0.0,
        w2a=math.fsum(dgate_pre * fwd.frozen_logit),
        w2b=math.fsum(dgate_pre),
        cnn=p2_backward(fwd.cache, dz, w.cnn),
    )
    if not w.frozen_gate_p1:
        if energy is None:
            raise ConfigurationError("unfrozen gate gradients need the energy feature")
        energy = np.asarray(energy, dtype=np.float64)
        p1 = p1_forward(energy, w.gate)
        inside = (p1 > LOGIT_CLAMP) & (p1 < 1.0 - LOGIT_CLAMP)
        dlogit = np.where(inside, dgate_pre * w.gate.w2a, 0.0)
        grads.w11 = math.fsum(dlogit * energy)
        grads.w12 = math.fsum(dlogit)
    return grads


# -- toy 2D logistic model ---------------------------------------------------


@dataclass
class ToyLogisticWeights:
    a: float = 0.0
    b: float = 0.0
    c: float = 0.0

    def as_array(self):
        return np.array([self.a, self.b, self.c])


def toy_logistic_forward(X, w):
    X = np.asarray(X, dtype=np.float64)
    return sigmoid(w.a * X[:, 0] + w.b * X[:, 1] + w.c)


def weighted_bce(X, y, w, class_weights=(1.0, 1.0)):
    """Mean over samples of ``class_weight[y] * BCE``."""
    cw = _check_class_weights(class_weights)
    X = np.asarray(X, dtype=np.float64)
    z = w.a * X[:, 0] + w.b * X[:, 1] + w.c
    # -log S(z) = logaddexp(0, -z); -log(1 - S(z)) = logaddexp(0, z)
    per = np.where(y == 1, np.logaddexp(0.0, -z), np.logaddexp(0.0, z))
    return float(np.mean(cw[np.asarray(y, dtype=np.intp)] * per))


def toy_logistic_backward(X, y, w, class_weights=(1.0, 1.0)):
    """Gradient of :func:`weighted_bce` with respect to (a, b, c)."""
    cw = _check_class_weights(class_weights)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    r = cw[y.astype(np.intp)] * (toy_logistic_forward(X, w) - y) / len(y)
    return np.array([r @ X[:, 0], r @ X[:, 1], r.sum()])


def _check_class_weights(class_weights):
    cw = np.asarray(class_weights, dtype=np.float64)
    if cw.shape != (2,) or not np.all(cw > 0) or not np.all(np.isfinite(cw)):
        raise ConfigurationError(f"class weights must be two positive reals, got {class_weights!r}")
    return cw


class ToyLogisticClassifier(ClassifierMixin, BaseEstimator):
    """Linear logistic model on 2D points fitted on class-weighted binary
    cross entropy.

    The weighted loss and its hand-written gradient are handed to L-BFGS-B;
    the problem is convex and smooth, so the minimiser is unique.

    Parameters
    ----------
    class_weight_ratio : float, default=1.0
        Weight of class 1 relative to class 0.
    max_iter : int, default=1000
    tol : float, default=1e-10
        Projected-gradient tolerance of the optimizer.
    """

    def __init__(self, class_weight_ratio=1.0, max_iter=1000, tol=1e-10):
        self.class_weight_ratio = class_weight_ratio
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        if X.shape[1] != 2:
            raise ConfigurationError("the toy model takes 2D points")
        y = y.astype(np.int8)
        counts = np.bincount(y, minlength=2)
        if counts.min() < 2:
            raise ConfigurationError(f"need at least two points per class, got {counts.tolist()}")
        if not (self.class_weight_ratio > 0 and math.isfinite(self.class_weight_ratio)):
            raise ConfigurationError("class_weight_ratio must be a positive real")
        cw = (1.0, float(self.class_weight_ratio))

        def fun(theta):
            w = ToyLogisticWeights(*theta)
            return weighted_bce(X, y, w, cw), toy_logistic_backward(X, y, w, cw)

        res = minimize(fun, np.zeros(3), jac=True, method="L-BFGS-B",
                       options={"maxiter": self.max_iter, "gtol": self.tol, "ftol": 0.0})
        if not np.all(np.isfinite(res.x)):
            raise ConfigurationError("toy logistic training diverged")
        # a line-search stall at a vanishing gradient is still the optimum
        self.converged_ = bool(res.success) or float(np.max(np.abs(res.jac))) < 1e-7
        if not self.converged_:
            warnings.warn(f"toy logistic fit stopped: {res.message}", ConvergenceWarning)
        self.n_iter_ = int(res.nit)
        self.weights_ = ToyLogisticWeights(*map(float, res.x))
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = 2
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "weights_")
        p = toy_logistic_forward(X, self.weights_)
        return np.column_stack([1.0 - p, p])

    def predict(self, X, threshold=0.5):
        return (self.predict_proba(X)[:, 1] > threshold).astype(np.int8)
