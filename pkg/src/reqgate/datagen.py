"""Seeded synthetic datasets.

Two generators live here:

* :func:`generate_signal_dataset` produces fixed-length groups of raw sensor
  samples that mimic motion events, the low-level background ("easy noise")
  and rare impulsive interference ("spurious noise").
* :func:`generate_toy_dataset` draws the two overlapping 2D Gaussian classes
  used to show how class weights move a logistic model's operating point.

All randomness comes from ``numpy.random.default_rng(seed)``, i.e. the PCG64
bit generator, so equal seeds give bit-identical output on every platform
numpy supports.
"""

from dataclasses import dataclass, field
import enum

import numpy as np

from ._validation import N_SAMPLES, check_count
from .exceptions import ConfigurationError

SAMPLE_RATE = 240.0


class SourceKind(enum.IntEnum):
    MOTION = 0
    EASY_NOISE = 1
    SPURIOUS_NOISE = 2

    @property
    def label(self):
        return int(self is SourceKind.MOTION)

    @property
    def slug(self):
        return self.name.lower()

    @classmethod
    def from_slug(cls, text):
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise ConfigurationError(f"unknown source kind {text!r}") from None


@dataclass(frozen=True)
class TimeSeriesGroup:
    samples: np.ndarray
    label: int
    source_kind: SourceKind


@dataclass(frozen=True)
class MotionParams:
    """Doppler-like bursts: 1-3 tones under a Gaussian envelope.

    ``peak_amplitude`` is the range of the envelope peak, i.e. the sum of the
    tone amplitudes. ``coverage`` is the fraction of the window spanned by
    +/- 2 envelope standard deviations.
    """

    peak_amplitude: tuple = (1.0, 3.0)
    n_tones: tuple = (1, 3)
    frequency_hz: tuple = (5.0, 40.0)
    coverage: tuple = (0.4, 1.0)


@dataclass(frozen=True)
class EasyNoiseParams:
    sigma: float = 0.1


@dataclass(frozen=True)
class SpuriousParams:
    """Rectangular-windowed bursts of white noise on top of the noise floor.

    ``relative_amplitude`` scales the burst RMS level relative to the lower
    end of the motion peak amplitude range.
    """

    n_bursts: tuple = (1, 3)
    burst_length: tuple = (5, 20)
    relative_amplitude: tuple = (0.75, 1.5)


@dataclass(frozen=True)
class SignalDatasetSpec:
    n_motion: int = 0
    n_easy_noise: int = 0
    n_spurious_noise: int = 0
    seed: int = 0
    motion_params: MotionParams = field(default_factory=MotionParams)
    easy_noise_params: EasyNoiseParams = field(default_factory=EasyNoiseParams)
    spurious_params: SpuriousParams = field(default_factory=SpuriousParams)

    def __post_init__(self):
        for name in ("n_motion", "n_easy_noise", "n_spurious_noise"):
            check_count(getattr(self, name), name)
        check_count(self.seed, "seed")
        if self.total == 0:
            raise ConfigurationError("dataset spec asks for zero groups")
        _check_params(self)

    @property
    def total(self):
        return self.n_motion + self.n_easy_noise + self.n_spurious_noise


def _check_range(rng_pair, name, positive=True, integer=False):
    lo, hi = rng_pair
    if integer and (int(lo) != lo or int(hi) != hi):
        raise ConfigurationError(f"{name} must be an integer range, got {rng_pair}")
    if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi or (positive and lo <= 0):
        raise ConfigurationError(f"invalid range for {name}: {rng_pair}")


def _check_params(spec):
    m, e, s = spec.motion_params, spec.easy_noise_params, spec.spurious_params
    _check_range(m.peak_amplitude, "motion peak_amplitude")
    _check_range(m.n_tones, "motion n_tones", integer=True)
    _check_range(m.frequency_hz, "motion frequency_hz")
    _check_range(m.coverage, "motion coverage")
    if m.frequency_hz[1] > SAMPLE_RATE / 2:
        raise ConfigurationError("motion frequencies must stay below Nyquist")
    if not (np.isfinite(e.sigma) and e.sigma >= 0):
        raise ConfigurationError(f"easy noise sigma must be >= 0, got {e.sigma}")
    _check_range(s.n_bursts, "spurious n_bursts", integer=True)
    _check_range(s.burst_length, "spurious burst_length", integer=True)
    _check_range(s.relative_amplitude, "spurious relative_amplitude")
    if s.burst_length[1] > N_SAMPLES:
        raise ConfigurationError("spurious bursts cannot exceed the group length")


@dataclass
class SignalDataset:
    """Columnar container for generated groups.

    Iterating or indexing yields :class:`TimeSeriesGroup` records; the
    arrays are what the feature pipeline consumes.
    """

    samples: np.ndarray
    labels: np.ndarray
    source_kinds: np.ndarray

    def __len__(self):
        return self.samples.shape[0]

    def __getitem__(self, i):
        return TimeSeriesGroup(
            samples=self.samples[i],
            label=int(self.labels[i]),
            source_kind=SourceKind(int(self.source_kinds[i])),
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def _motion(rng, n, params, sigma):
    t = np.arange(N_SAMPLES) / SAMPLE_RATE
    out = sigma * rng.standard_normal((n, N_SAMPLES))
    max_tones = int(params.n_tones[1])
    for g in range(n):
        k = int(rng.integers(params.n_tones[0], max_tones + 1))
        peak = rng.uniform(*params.peak_amplitude)
        freqs = rng.uniform(*params.frequency_hz, size=k)
        phases = rng.uniform(0.0, 2 * np.pi, size=k)
        weights = rng.uniform(0.5, 1.0, size=k)
        amps = peak * weights / weights.sum()
        cover = rng.uniform(*params.coverage)
        width = cover * N_SAMPLES / 4.0
        center = rng.uniform(0.25, 0.75) * N_SAMPLES
        envelope = np.exp(-0.5 * ((np.arange(N_SAMPLES) - center) / width) ** 2)
        tones = amps @ np.sin(2 * np.pi * freqs[:, None] * t[None, :] + phases[:, None])
        out[g] += envelope * tones
    return out


def _spurious(rng, n, params, sigma, motion_floor):
    out = sigma * rng.standard_normal((n, N_SAMPLES))
    for g in range(n):
        k = int(rng.integers(params.n_bursts[0], params.n_bursts[1] + 1))
        for _ in range(k):
            length = int(rng.integers(params.burst_length[0], params.burst_length[1] + 1))
            start = int(rng.integers(0, N_SAMPLES - length + 1))
            level = motion_floor * rng.uniform(*params.relative_amplitude)
            out[g, start:start + length] += level * rng.standard_normal(length)
    return out


def generate_signal_dataset(spec):
    """Generate ``spec.total`` groups, shuffled deterministically by ``spec.seed``.

    Groups are drawn kind by kind (motion, easy noise, spurious noise) from a
    single PCG64 stream and then permuted with the same stream.
    """
    if not isinstance(spec, SignalDatasetSpec):
        raise ConfigurationError("expected a SignalDatasetSpec")
    rng = np.random.default_rng(spec.seed)
    sigma = spec.easy_noise_params.sigma
    parts = [
        _motion(rng, spec.n_motion, spec.motion_params, sigma),
        sigma * rng.standard_normal((spec.n_easy_noise, N_SAMPLES)),
        _spurious(rng, spec.n_spurious_noise, spec.spurious_params, sigma,
                  spec.motion_params.peak_amplitude[0]),
    ]
    kinds = np.repeat(
        np.array([SourceKind.MOTION, SourceKind.EASY_NOISE, SourceKind.SPURIOUS_NOISE], dtype=np.int8),
        [spec.n_motion, spec.n_easy_noise, spec.n_spurious_noise],
    )
    order = rng.permutation(spec.total)
    samples = np.concatenate(parts, axis=0)[order]
    kinds = kinds[order]
    labels = (kinds == SourceKind.MOTION).astype(np.int8)
    return SignalDataset(samples=samples, labels=labels, source_kinds=kinds)


@dataclass(frozen=True)
class ToyPoint2D:
    x: float
    y: float
    label: int


TOY_CLASS0_MEAN = (0.0, 0.0)
TOY_CLASS1_MEAN = (2.5, 2.5)


def generate_toy_dataset(n_class0=100_000, n_class1=1_000, seed=0):
    """Two unit-covariance Gaussians, class 0 at the origin, class 1 at (2.5, 2.5).

    Returns ``(X, y)`` with ``X`` of shape (n_class0 + n_class1, 2). Points are
    shuffled by the seed. Use :func:`toy_points` for record objects.
    """
    n_class0 = check_count(n_class0, "n_class0", minimum=1)
    n_class1 = check_count(n_class1, "n_class1", minimum=1)
    rng = np.random.default_rng(check_count(seed, "seed"))
    x0 = rng.standard_normal((n_class0, 2)) + TOY_CLASS0_MEAN
    x1 = rng.standard_normal((n_class1, 2)) + TOY_CLASS1_MEAN
    X = np.concatenate([x0, x1])
    y = np.concatenate([np.zeros(n_class0, np.int8), np.ones(n_class1, np.int8)])
    order = rng.permutation(len(y))
    return X[order], y[order]


def toy_points(X, y):
    return [ToyPoint2D(float(a), float(b), int(c)) for (a, b), c in zip(X, y)]
