"""Input validation helpers shared by the estimators and the functional API."""

import numbers

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import ConfigurationError, ShapeError

N_SAMPLES = 768
N_WINDOWS = 21
N_BINS = 64
N_FEATURES = N_WINDOWS * N_BINS


def check_random_state(seed):
    """Return a numpy ``Generator`` (PCG64) for ``seed``.

    Unlike :func:`sklearn.utils.check_random_state` this hands out the new
    ``Generator`` API, whose bit stream is documented and stable across
    numpy releases.
    """
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None:
        return np.random.default_rng()
    if isinstance(seed, numbers.Integral):
        return np.random.default_rng(int(seed))
    raise ConfigurationError(f"cannot seed a generator from {seed!r}")


def check_count(value, name, minimum=0):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise ConfigurationError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ConfigurationError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_fraction(value, name, low=0.0, high=1.0, low_open=True, high_open=False):
    value = float(value)
    bad_low = value <= low if low_open else value < low
    bad_high = value >= high if high_open else value > high
    if not np.isfinite(value) or bad_low or bad_high:
        lb = "(" if low_open else "["
        rb = ")" if high_open else "]"
        raise ConfigurationError(f"{name} must lie in {lb}{low}, {high}{rb}, got {value}")
    return value


def check_groups(X):
    """Validate raw sample groups; returns a float64 array of shape (n, 768)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != N_SAMPLES:
        raise ShapeError(f"expected groups of {N_SAMPLES} samples, got shape {X.shape}")
    return check_array(X, dtype=np.float64)


def check_spectrograms(X):
    """Accept (n, 1344) flattened or (n, 21, 64) spectrograms; return (n, 21, 64)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2 and X.shape == (N_WINDOWS, N_BINS):
        X = X[None]
    if X.ndim == 2 and X.shape[1] == N_FEATURES:
        X = X.reshape(-1, N_WINDOWS, N_BINS)
    if X.ndim != 3 or X.shape[1:] != (N_WINDOWS, N_BINS):
        raise ShapeError(
            f"expected spectrograms of shape (n, {N_WINDOWS}, {N_BINS}) "
            f"or (n, {N_FEATURES}), got {X.shape}"
        )
    if not np.all(np.isfinite(X)):
        raise ShapeError("spectrograms contain non-finite values")
    return np.ascontiguousarray(X)


def check_binary_labels(y, n=None):
    y = np.asarray(y)
    if y.ndim != 1:
        raise ShapeError(f"labels must be one-dimensional, got shape {y.shape}")
    if n is not None and y.shape[0] != n:
        raise ShapeError(f"got {y.shape[0]} labels for {n} samples")
    if not np.all((y == 0) | (y == 1)):
        raise ConfigurationError("labels must be 0 or 1")
    return y.astype(np.int8)


def check_both_classes(y, minimum=1):
    counts = np.bincount(y, minlength=2)
    if counts.min() < minimum:
        raise ConfigurationError(
            f"need at least {minimum} sample(s) of each class, got counts {counts.tolist()}"
        )
    return counts
