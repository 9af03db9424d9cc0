"""Spectrogram features for 768-sample groups.

Each group is mean-centred, cut into 21 Hann-tapered windows of 128 samples
(hop 32) and transformed with an unnormalised real DFT. Bins 1..64 of the
magnitude are kept (DC is dropped, Nyquist kept), giving a 21 x 64 grid.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import (
    N_BINS,
    N_FEATURES,
    N_SAMPLES,
    N_WINDOWS,
    check_count,
    check_groups,
    check_random_state,
    check_spectrograms,
)
from .exceptions import ConfigurationError

WINDOW = 128
HOP = 32

# symmetric Hann: 0.5 * (1 - cos(2 pi n / (N - 1)))
HANN = np.hanning(WINDOW)


def n_windows(n_samples=N_SAMPLES, window=WINDOW, hop=HOP):
    return (n_samples - window) // hop + 1


def _spectrogram_chunk(x):
    x = x - x.mean(axis=-1, keepdims=True)
    frames = sliding_window_view(x, WINDOW, axis=-1)[:, ::HOP, :]
    return np.abs(np.fft.rfft(frames * HANN, axis=-1))[..., 1:N_BINS + 1]


def extract_spectrogram(samples, chunk_size=4096):
    """Amplitude spectrogram(s) of one group (768,) or many groups (n, 768).

    Returns (21, 64) for a single group, (n, 21, 64) otherwise.
    """
    single = np.ndim(samples) == 1
    x = check_groups(samples)
    out = np.empty((x.shape[0], N_WINDOWS, N_BINS))
    for start in range(0, x.shape[0], chunk_size):
        out[start:start + chunk_size] = _spectrogram_chunk(x[start:start + chunk_size])
    return out[0] if single else out


def compute_normalization(spectrograms):
    """Mean power of the mean power spectrum.

    The mean power spectrum averages A_ij**2 over groups and windows; its mean
    over the 64 bins is returned. Both averages run over equally sized axes,
    so this is the plain mean of all squared amplitudes.
    """
    A = np.asarray(spectrograms, dtype=np.float64)
    if A.size == 0:
        raise ConfigurationError("cannot normalise over an empty set of spectrograms")
    A = check_spectrograms(A)
    mean_spectrum = np.mean(A ** 2, axis=(0, 1))
    value = float(np.mean(mean_spectrum))
    if not value > 0:
        raise ConfigurationError("calibration spectrograms carry no power")
    return value


def normalize(spectrogram, constant):
    if not constant > 0:
        raise ConfigurationError(f"normalisation constant must be > 0, got {constant}")
    return np.asarray(spectrogram, dtype=np.float64) / np.sqrt(constant)


def mean_energy(spectrogram):
    """Mean of A_ij**2 over the 21 x 64 grid; works on (21, 64) or batches."""
    A = np.asarray(spectrogram, dtype=np.float64)
    if A.ndim >= 2 and A.shape[-2:] == (N_WINDOWS, N_BINS):
        return np.mean(A ** 2, axis=(-2, -1))
    if A.shape[-1] == N_FEATURES:
        return np.mean(A ** 2, axis=-1)
    raise ConfigurationError(f"not a spectrogram: shape {A.shape}")


class SpectrogramExtractor(TransformerMixin, BaseEstimator):
    """Turn raw groups (n, 768) into normalised flattened spectrograms (n, 1344).

    ``fit`` estimates the normalisation constant on a seeded random subset
    of at most ``n_calibration`` groups. Pass ``normalization`` to reuse a
    constant from an earlier run; ``fit`` then leaves it untouched.

    Parameters
    ----------
    n_calibration : int, default=4096
    normalization : float or None, default=None
    random_state : int, default=0
    """

    def __init__(self, n_calibration=4096, normalization=None, random_state=0):
        self.n_calibration = n_calibration
        self.normalization = normalization
        self.random_state = random_state

    def fit(self, X, y=None):
        if self.normalization is not None:
            if not float(self.normalization) > 0:
                raise ConfigurationError("normalization must be > 0")
            self.normalization_ = float(self.normalization)
            return self
        X = check_groups(X)
        n_cal = check_count(self.n_calibration, "n_calibration", minimum=1)
        rng = check_random_state(self.random_state)
        if X.shape[0] > n_cal:
            idx = np.sort(rng.choice(X.shape[0], size=n_cal, replace=False))
        else:
            idx = np.arange(X.shape[0])
        self.normalization_ = compute_normalization(extract_spectrogram(X[idx]))
        return self

    def transform(self, X):
        check_is_fitted(self, "normalization_")
        A = extract_spectrogram(check_groups(X))
        A /= np.sqrt(self.normalization_)
        return A.reshape(A.shape[0], N_FEATURES)

    def get_feature_names_out(self, input_features=None):
        return np.array(
            [f"a_{i}_{j}" for i in range(1, N_WINDOWS + 1) for j in range(1, N_BINS + 1)],
            dtype=object,
        )
