"""Two-phase training of the gated product model.

Phase 1 fits the energy gate ``p1`` with class-balanced binary cross entropy
on all motion samples plus a seeded random fill of noise samples.

Phase 2 freezes ``p1`` and minimises the requirement loss over the gate
scale/shift and the CNN weights. For each (lambda0, lambda1) stage only the
*active* samples are pushed through the CNN: every motion sample plus the
noise samples whose gate score reaches ``1/2 - lambda0``. The rest provably
contribute nothing to loss or gradient.
"""

from dataclasses import asdict, dataclass, field, fields, replace
import math
import time
import warnings

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import loss as rl
from ._validation import (
    check_binary_labels,
    check_both_classes,
    check_count,
    check_fraction,
    check_random_state,
    check_spectrograms,
)
from .exceptions import ConfigurationError, ConvergenceWarning, ReqgateError
from .features import mean_energy
from .loss import LambdaPair, Requirements
from .models import (
    CnnWeights,
    GateWeights,
    ProductModelWeights,
    apply_constraints,
    gate_logit,
    gate_score,
    p1_forward,
    p2_forward,
    product_backward,
    product_forward,
    sigmoid,
)

DEFAULT_SCHEDULE = ((0.49, 0.49), (0.245, 0.49), (0.1225, 0.245))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    batch_size: int = 32768
    lambda_schedule: tuple = DEFAULT_SCHEDULE
    max_active_samples: int = 65536
    phase1_subset_size: int = 65536
    phase1_max_iter: int = 100
    phase1_tol: float = 1e-9
    rel_loss_tol: float = 1e-4
    patience: int = 20
    max_iter: int = 300
    debug_check_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ConfigurationError("learning_rate must be a positive real")
        for name in ("batch_size", "max_active_samples", "phase1_subset_size",
                     "phase1_max_iter", "patience", "max_iter"):
            check_count(getattr(self, name), name, minimum=1)
        check_count(self.debug_check_every, "debug_check_every")
        check_count(self.seed, "seed")
        if not self.rel_loss_tol >= 0 or not self.phase1_tol >= 0:
            raise ConfigurationError("tolerances must be >= 0")
        schedule = tuple(
            p if isinstance(p, LambdaPair) else LambdaPair(*map(float, p))
            for p in self.lambda_schedule
        )
        if not schedule:
            raise ConfigurationError("lambda_schedule must not be empty")
        for prev, cur in zip(schedule, schedule[1:]):
            if cur.lambda0 > prev.lambda0 or cur.lambda1 > prev.lambda1:
                raise ConfigurationError("lambda_schedule must be non-increasing in both lambdas")
        object.__setattr__(self, "lambda_schedule", schedule)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    def to_dict(self):
        d = asdict(self)
        d["lambda_schedule"] = [[p.lambda0, p.lambda1] for p in self.lambda_schedule]
        return d


@dataclass
class StageRecord:
    stage: int
    lambda0: float
    lambda1: float
    loss_train: float
    loss_val: float
    tp_train: float
    tp_val: float
    fp_train: float
    fp_val: float
    peak_active: int
    iters: int
    seconds: float
    sample_evals: int = 0
    stop_reason: str = ""
    loss_start: float = float("nan")
    oscillation: bool = False


@dataclass
class TrainReport:
    stages: list = field(default_factory=list)
    phase1: dict = field(default_factory=dict)
    n_train: int = 0
    n_train_class0: int = 0
    n_train_class1: int = 0
    requirements_met: bool = False
    dead_model: bool = False

    @property
    def total_iters(self):
        return sum(s.iters for s in self.stages)

    @property
    def total_sample_evals(self):
        return sum(s.sample_evals for s in self.stages)


# -- data handling -----------------------------------------------------------


def split_dataset(y, train_fraction=2 / 3, seed=0):
    """Stratified seeded split; returns sorted (train_idx, val_idx).

    Each class contributes ``ceil(train_fraction * n_c)`` training samples,
    capped so that at least one sample per class lands in validation.
    """
    y = check_binary_labels(y)
    frac = check_fraction(train_fraction, "train_fraction", 0.0, 1.0, high_open=True)
    check_both_classes(y, minimum=2)
    rng = check_random_state(seed)
    train, val = [], []
    for cls in (0, 1):
        idx = np.flatnonzero(y == cls)
        k = math.ceil(round(frac * len(idx), 9))
        k = min(max(k, 1), len(idx) - 1)
        perm = rng.permutation(idx)
        train.append(perm[:k])
        val.append(perm[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


def evaluate(p, y, threshold=0.5):
    """Hard-threshold rates: a sample is called positive when ``p > threshold``."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y)
    called = p > threshold
    tp = int(np.count_nonzero(called & (y == 1)))
    fp = int(np.count_nonzero(called & (y == 0)))
    n1 = int(np.count_nonzero(y == 1))
    n0 = len(y) - n1
    return {
        "tp_fraction": tp / n1 if n1 else float("nan"),
        "fp_fraction": fp / n0 if n0 else float("nan"),
        "tp": tp,
        "fp": fp,
        "n_class1": n1,
        "n_class0": n0,
    }


# -- phase 1 -----------------------------------------------------------------


def phase1_subset(y, size, seed):
    """All class-1 indices plus a seeded random class-0 fill up to ``size``."""
    rng = check_random_state(seed)
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == 0)
    n_fill = max(0, min(len(neg), size - len(pos)))
    fill = np.sort(rng.choice(neg, size=n_fill, replace=False))
    return np.concatenate([pos, fill])


def balanced_bce(energy, y, gate):
    """Class-balanced BCE of the energy gate: each class carries half the mass."""
    z = gate.w11 * energy + gate.w12
    y = np.asarray(y)
    pos = y == 1
    return 0.5 * np.mean(np.logaddexp(0.0, -z[pos])) + 0.5 * np.mean(np.logaddexp(0.0, z[~pos]))


def _balanced_newton_terms(u, t, weight, theta, batch_size):
    """Loss, gradient and Hessian of the weighted BCE in (slope, bias), batched."""
    loss = 0.0
    grad = np.zeros(2)
    hess = np.zeros((2, 2))
    for lo in range(0, len(u), batch_size):
        ub, tb, wb = u[lo:lo + batch_size], t[lo:lo + batch_size], weight[lo:lo + batch_size]
        z = theta[0] * ub + theta[1]
        p = sigmoid(z)
        loss += float(wb @ np.where(tb == 1, np.logaddexp(0.0, -z), np.logaddexp(0.0, z)))
        r = wb * (p - tb)
        grad += np.array([r @ ub, r.sum()])
        c = wb * p * (1.0 - p)
        hess += np.array([[c @ (ub * ub), c @ ub], [c @ ub, c.sum()]])
    n = len(u)
    return loss / n, grad / n, hess / n


def train_phase1(energy, y, cfg=None):
    """Fit (w11, w12) of ``p1 = S(w11 * E + w12)`` on class-balanced BCE.

    The subset is all motion samples plus a seeded random noise fill. Each
    class carries half of the loss mass. The energy is standardised, the
    two-parameter problem is solved by damped Newton steps (backtracking on
    the loss), and the result is mapped back to the raw energy scale. Sums
    are accumulated in chunks of ``batch_size`` in a fixed order.

    Returns ``(GateWeights, info)``.
    """
    cfg = cfg or TrainConfig()
    energy = np.asarray(energy, dtype=np.float64)
    y = check_binary_labels(y, len(energy))
    counts = check_both_classes(y)
    rng = check_random_state(cfg.seed)
    subset = phase1_subset(y, cfg.phase1_subset_size, rng)
    e, t = energy[subset], y[subset].astype(np.float64)
    n1 = t.sum()
    n0 = len(t) - n1
    if n1 == 0 or n0 == 0:
        raise ConfigurationError("phase-1 subset lacks one of the classes")
    weight = np.where(t == 1, len(t) / (2 * n1), len(t) / (2 * n0))
    center = float(np.mean(e))
    scale = float(np.std(e)) or 1.0
    u = (e - center) / scale
    theta = np.zeros(2)
    loss, grad, hess = _balanced_newton_terms(u, t, weight, theta, cfg.batch_size)
    converged = False
    it = 0
    for it in range(1, cfg.phase1_max_iter + 1):
        try:
            step = np.linalg.solve(hess + 1e-12 * np.eye(2), grad)
        except np.linalg.LinAlgError:
            step = grad
        rate = 1.0
        while True:
            cand = theta - rate * step
            c_loss, c_grad, c_hess = _balanced_newton_terms(u, t, weight, cand, cfg.batch_size)
            if c_loss <= loss or rate < 1e-10:
                break
            rate *= 0.5
        moved = np.max(np.abs(cand - theta))
        theta, loss, grad, hess = cand, c_loss, c_grad, c_hess
        if moved < cfg.phase1_tol:
            converged = True
            break
    if not converged:
        warnings.warn(
            f"phase-1 gate fit did not converge in {cfg.phase1_max_iter} iterations",
            ConvergenceWarning,
        )
    gate = GateWeights(w11=theta[0] / scale, w12=theta[1] - theta[0] * center / scale)
    info = {
        "iterations": it,
        "converged": converged,
        "subset_size": int(len(subset)),
        "subset_class1": int(n1),
        "loss": float(balanced_bce(energy[subset], y[subset], gate)),
        "train_counts": counts.tolist(),
    }
    return gate, info


# -- phase 2 -----------------------------------------------------------------


class _Phase2Problem:
    """Loss/gradient evaluation over a fixed training set with frozen p1 logits."""

    def __init__(self, X, y, energy, w, req):
        self.X = X
        self.y = y
        self.energy = energy
        self.req = req
        self.frozen_logit = gate_logit(energy, w.gate)
        self.pos = np.flatnonzero(y == 1)
        self.neg = np.flatnonzero(y == 0)

    def gate_scores(self, w):
        return gate_score(self.frozen_logit, w.gate)

    def active(self, w, lambdas):
        """Sorted indices of the active set: all class 1 plus gated-in class 0."""
        g = self.gate_scores(w)
        neg_active = self.neg[rl.active_samples(g[self.neg], lambdas.lambda0)]
        return np.union1d(self.pos, neg_active)

    def loss_and_grad(self, w, lambdas, idx, with_grad=True):
        idx = np.asarray(idx)
        fwd = product_forward(
            self.energy[idx], self.X[idx], w, frozen_logit=self.frozen_logit[idx]
        )
        y = self.y[idx]
        terms = rl.evaluate_loss(fwd.p, y, self.req, lambdas)
        if not with_grad:
            return terms, None
        dp = rl.requirement_loss_grad(fwd.p, y, self.req, lambdas)
        grads = product_backward(fwd, dp, w, energy=self.energy[idx])
        return terms, grads


def _step(w, grads, lr):
    gate = replace(
        w.gate,
        w2a=w.gate.w2a - lr * grads.w2a,
        w2b=w.gate.w2b - lr * grads.w2b,
    )
    if not w.frozen_gate_p1:
        gate = replace(gate, w11=gate.w11 - lr * grads.w11, w12=gate.w12 - lr * grads.w12)
    tensors = {name: arr - lr * grads.cnn[name] for name, arr in w.cnn.tensors().items()}
    cnn = apply_constraints(CnnWeights(**tensors))
    return ProductModelWeights(gate=gate, cnn=cnn, frozen_gate_p1=w.frozen_gate_p1)


def _grads_equal(a, b):
    if (a.w11, a.w12, a.w2a, a.w2b) != (b.w11, b.w12, b.w2a, b.w2b):
        return False
    return all(np.array_equal(a.cnn[k], b.cnn[k]) for k in a.cnn)


def predict_product(X, energy, w, chunk_size=8192):
    """Product-model probabilities for a whole set, chunked to bound memory."""
    g = gate_score(gate_logit(energy, w.gate), w.gate)
    out = np.empty(len(g))
    for lo in range(0, len(g), chunk_size):
        out[lo:lo + chunk_size] = g[lo:lo + chunk_size] * p2_forward(X[lo:lo + chunk_size], w.cnn)
    return out


def _set_metrics(X, y, energy, w, req, lambdas):
    p = predict_product(X, energy, w)
    terms = rl.evaluate_loss(p, y, req, lambdas)
    rates = evaluate(p, y)
    return terms["loss"], rates


def train_phase2(X, y, w, req, cfg=None, validation=None, energy=None, log=None):
    """Minimise the requirement loss over (w2a, w2b, CNN) with lambda annealing.

    Parameters
    ----------
    X : array (n, 21, 64) or (n, 1344)
        Normalised training spectrograms.
    y : array (n,)
    w : ProductModelWeights
        Starting weights with a fitted phase-1 gate.
    req : Requirements
        Requirement counts for this training set.
    validation : tuple (X_val, y_val), optional
        Only used to report per-stage metrics.

    Returns
    -------
    (ProductModelWeights, TrainReport)
    """
    cfg = cfg or TrainConfig()
    X = check_spectrograms(X)
    y = check_binary_labels(y, X.shape[0])
    check_both_classes(y)
    if energy is None:
        energy = mean_energy(X)
    w = w.copy()
    w11_w12 = (w.gate.w11, w.gate.w12)
    problem = _Phase2Problem(X, y, energy, w, req)
    if validation is not None:
        Xv = check_spectrograms(validation[0])
        yv = check_binary_labels(validation[1], Xv.shape[0])
        ev = mean_energy(Xv)
        req_val = Requirements.for_labels(req.tp_fraction, req.fp_fraction, yv)
    report = TrainReport(
        n_train=len(y), n_train_class0=len(problem.neg), n_train_class1=len(problem.pos)
    )
    log = log or (lambda msg: None)

    for stage_no, lambdas in enumerate(cfg.lambda_schedule, start=1):
        t0 = time.perf_counter()
        idx = problem.active(w, lambdas)
        if len(idx) > cfg.max_active_samples:
            log(f"stage {stage_no}: {len(idx)} active samples exceed the cap, stopping")
            break
        peak = len(idx)
        evals = 0
        history = []
        best = (math.inf, w)
        stop = "max_iter"
        quiet = 0
        iters = 0
        while True:
            terms, grads = problem.loss_and_grad(w, lambdas, idx)
            evals += len(idx)
            e = terms["loss"]
            history.append(e)
            if cfg.debug_check_every and iters % cfg.debug_check_every == 0:
                full_terms, full_grads = problem.loss_and_grad(w, lambdas, np.arange(len(y)))
                if full_terms != terms or not _grads_equal(full_grads, grads):
                    raise ReqgateError(f"active-set mismatch at stage {stage_no}, iteration {iters}")
            if e < best[0]:
                best = (e, w)
            if e == 0.0:
                stop = "requirements_met"
                break
            if terms["ftp"] < rl.FTP_FLOOR and terms["e_tp"] > 0 and terms["e_fp"] == 0.0:
                stop = "dead_model"
                report.dead_model = True
                break
            if len(history) > 1:
                prev = history[-2]
                rel = abs(prev - e) / max(prev, 1e-300)
                quiet = quiet + 1 if rel < cfg.rel_loss_tol else 0
                if quiet >= cfg.patience:
                    stop = "converged"
                    break
            if iters >= cfg.max_iter:
                break
            candidate = _step(w, grads, cfg.learning_rate)
            cand_idx = problem.active(candidate, lambdas)
            if len(cand_idx) > cfg.max_active_samples:
                stop = "max_active_samples"
                break
            w, idx = candidate, cand_idx
            peak = max(peak, len(idx))
            iters += 1
        if stop != "max_active_samples":
            # the cap stop keeps the last accepted step; otherwise the best iterate
            w = best[1]
        oscillation = any(b > a for a, b in zip(history, history[1:]))
        loss_train, rates_train = _set_metrics(X, y, energy, w, req, lambdas)
        if validation is not None:
            loss_val, rates_val = _set_metrics(Xv, yv, ev, w, req_val, lambdas)
        else:
            loss_val, rates_val = float("nan"), {"tp_fraction": float("nan"), "fp_fraction": float("nan")}
        record = StageRecord(
            stage=stage_no,
            lambda0=lambdas.lambda0,
            lambda1=lambdas.lambda1,
            loss_train=loss_train,
            loss_val=loss_val,
            tp_train=rates_train["tp_fraction"],
            tp_val=rates_val["tp_fraction"],
            fp_train=rates_train["fp_fraction"],
            fp_val=rates_val["fp_fraction"],
            peak_active=int(peak),
            iters=iters,
            seconds=time.perf_counter() - t0,
            sample_evals=int(evals),
            stop_reason=stop,
            loss_start=history[0],
            oscillation=oscillation,
        )
        report.stages.append(record)
        log(
            f"stage {stage_no} (lambda0={lambdas.lambda0:g}, lambda1={lambdas.lambda1:g}): "
            f"loss {history[0]:.4g} -> {loss_train:.4g} in {iters} iterations ({stop}), "
            f"TP {rates_train['tp_fraction']:.2%} FP {rates_train['fp_fraction']:.4%}, "
            f"peak active {peak}"
        )
        if report.dead_model:
            break

    assert (w.gate.w11, w.gate.w12) == w11_w12 or not w.frozen_gate_p1
    report.requirements_met = bool(report.stages) and report.stages[-1].loss_train == 0.0
    return w, report


# -- estimators --------------------------------------------------------------


class EnergyGateClassifier(ClassifierMixin, BaseEstimator):
    """Phase-1 energy gate ``S(w11 * <E> + w12)`` on normalised spectrograms.

    Parameters
    ----------
    learning_rate : float, default=0.1
    batch_size : int, default=32768
    subset_size : int, default=65536
    max_iter : int, default=100
    tol : float, default=1e-9
    random_state : int, default=0
    """

    def __init__(self, learning_rate=0.1, batch_size=32768, subset_size=65536,
                 max_iter=100, tol=1e-9, random_state=0):
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.subset_size = subset_size
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, y):
        X = check_spectrograms(X)
        y = check_binary_labels(y, X.shape[0])
        cfg = TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            phase1_subset_size=self.subset_size,
            phase1_max_iter=self.max_iter,
            phase1_tol=self.tol,
            seed=self.random_state,
        )
        self.gate_, self.info_ = train_phase1(mean_energy(X), y, cfg)
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "gate_")
        p = p1_forward(mean_energy(check_spectrograms(X)), self.gate_)
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] > 0.5).astype(np.int8)


class GatedProductClassifier(ClassifierMixin, BaseEstimator):
    """Gated product model trained directly against TP/FP requirements.

    ``fit`` runs phase 1 (balanced-BCE energy gate) then phase 2 (requirement
    loss with lambda annealing over active samples only). Input is the
    normalised spectrogram matrix produced by
    :class:`reqgate.features.SpectrogramExtractor`, so the two chain in a
    :class:`sklearn.pipeline.Pipeline`.

    Parameters
    ----------
    tp_fraction : float, default=0.5
        Minimum fraction of motion samples to detect.
    fp_fraction : float, default=0.001
        Maximum fraction of noise samples allowed to fire.
    learning_rate, batch_size, lambda_schedule, max_active_samples,
    phase1_subset_size, phase1_max_iter, phase1_tol, rel_loss_tol, patience,
    max_iter, debug_check_every :
        See :class:`TrainConfig`.
    random_state : int, default=0

    Attributes
    ----------
    weights_ : ProductModelWeights
    report_ : TrainReport
    requirements_ : Requirements
    """

    def __init__(self, tp_fraction=0.5, fp_fraction=0.001, learning_rate=0.1,
                 batch_size=32768, lambda_schedule=DEFAULT_SCHEDULE,
                 max_active_samples=65536, phase1_subset_size=65536,
                 phase1_max_iter=100, phase1_tol=1e-9, rel_loss_tol=1e-4,
                 patience=20, max_iter=300, debug_check_every=0, random_state=0):
        self.tp_fraction = tp_fraction
        self.fp_fraction = fp_fraction
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.lambda_schedule = lambda_schedule
        self.max_active_samples = max_active_samples
        self.phase1_subset_size = phase1_subset_size
        self.phase1_max_iter = phase1_max_iter
        self.phase1_tol = phase1_tol
        self.rel_loss_tol = rel_loss_tol
        self.patience = patience
        self.max_iter = max_iter
        self.debug_check_every = debug_check_every
        self.random_state = random_state

    @classmethod
    def from_config(cls, cfg, tp_fraction=0.5, fp_fraction=0.001):
        params = {k: v for k, v in cfg.to_dict().items() if k != "seed"}
        return cls(tp_fraction=tp_fraction, fp_fraction=fp_fraction,
                   random_state=cfg.seed, **params)

    def train_config(self):
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            lambda_schedule=tuple(tuple(p) if not isinstance(p, LambdaPair) else p
                                  for p in self.lambda_schedule),
            max_active_samples=self.max_active_samples,
            phase1_subset_size=self.phase1_subset_size,
            phase1_max_iter=self.phase1_max_iter,
            phase1_tol=self.phase1_tol,
            rel_loss_tol=self.rel_loss_tol,
            patience=self.patience,
            max_iter=self.max_iter,
            debug_check_every=self.debug_check_every,
            seed=self.random_state,
        )

    def fit(self, X, y, eval_set=None, log=None):
        cfg = self.train_config()
        X = check_spectrograms(X)
        y = check_binary_labels(y, X.shape[0])
        check_both_classes(y)
        self.requirements_ = Requirements.for_labels(self.tp_fraction, self.fp_fraction, y)
        energy = mean_energy(X)
        gate, phase1_info = train_phase1(energy, y, cfg)
        w = ProductModelWeights(
            gate=gate,
            cnn=CnnWeights.initialize(random_state=cfg.seed),
            frozen_gate_p1=True,
        )
        self.weights_, self.report_ = train_phase2(
            X, y, w, self.requirements_, cfg, validation=eval_set, energy=energy, log=log
        )
        self.report_.phase1 = phase1_info
        if not self.report_.requirements_met:
            warnings.warn("training ended with unmet requirements", ConvergenceWarning)
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "weights_")
        X = check_spectrograms(X)
        p = predict_product(X, mean_energy(X), self.weights_)
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] > 0.5).astype(np.int8)

    def gate_scores(self, X):
        check_is_fitted(self, "weights_")
        X = check_spectrograms(X)
        return gate_score(gate_logit(mean_energy(X), self.weights_.gate), self.weights_.gate)
