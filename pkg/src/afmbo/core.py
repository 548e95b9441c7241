"""Shared domain types, seeded randomness, and numeric primitives.

Everything downstream (search models, oracles, the autofocus step, the EDA
drivers) builds on the small vocabulary defined here: labeled training data,
Gaussian predictive distributions, nonnegative weight vectors, and a
value-semantics random stream that makes every run replayable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special


class InvalidArgumentError(ValueError):
    """An argument violates a documented precondition."""


class InvalidStateError(RuntimeError):
    """Inputs are individually valid but jointly inconsistent."""


# ---------------------------------------------------------------------------
# Randomness
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RngStream:
    """Reproducible random stream identified by (seed, path of stream ids).

    An ``RngStream`` is a value, not a stateful generator: calling
    :meth:`generator` always returns a fresh ``numpy.random.Generator``
    positioned at the start of the stream.  Disjoint paths give statistically
    independent streams, so separate trials, modules, and iterations can each
    derive their own child without any ordering dependence between them.
    """

    seed: int
    path: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not (0 <= int(self.seed) < 2 ** 64):
            raise InvalidArgumentError(f"seed must be a u64, got {self.seed}")

    def child(self, *ids: int) -> "RngStream":
        """Derive the sub-stream at ``path + ids``."""
        return RngStream(self.seed, self.path + tuple(int(i) for i in ids))

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        return np.random.Generator(np.random.PCG64(seq))


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

def _as_float_array(values, name: str, ndim: int) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != ndim:
        raise InvalidArgumentError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class LabeledDataset:
    """Fixed training set: an n x d feature matrix with scalar labels."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        feats = _as_float_array(self.features, "features", 2)
        labels = _as_float_array(self.labels, "labels", 1)
        if feats.shape[0] < 1 or feats.shape[1] < 1:
            raise InvalidArgumentError("dataset needs at least one row and one feature")
        if feats.shape[0] != labels.shape[0]:
            raise InvalidArgumentError(
                f"features have {feats.shape[0]} rows but labels have {labels.shape[0]}"
            )
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class GaussianPrediction:
    """Predictive normal distribution over the property value."""

    mean: float
    variance: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.mean):
            raise InvalidArgumentError("prediction mean must be finite")
        if not (math.isfinite(self.variance) and self.variance > 0):
            raise InvalidArgumentError(f"prediction variance must be positive, got {self.variance}")

    @property
    def sd(self) -> float:
        return math.sqrt(self.variance)


@dataclass(frozen=True)
class ThresholdConstraint:
    """Desired property set {y : y >= threshold}; -inf means fully relaxed."""

    threshold: float

    def __post_init__(self) -> None:
        t = float(self.threshold)
        if math.isnan(t) or t == math.inf:
            raise InvalidArgumentError(f"threshold must be finite or -inf, got {t}")
        object.__setattr__(self, "threshold", t)


@dataclass(frozen=True)
class WeightVector:
    """Nonnegative per-point weights with at least one positive entry."""

    values: np.ndarray

    def __post_init__(self) -> None:
        vals = _as_float_array(self.values, "weights", 1)
        if np.any(vals < 0):
            raise InvalidArgumentError("weights must be nonnegative")
        if not np.any(vals > 0):
            raise InvalidArgumentError("at least one weight must be positive")
        object.__setattr__(self, "values", vals)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def total(self) -> float:
        return float(np.sum(self.values))

    @staticmethod
    def ones(n: int) -> "WeightVector":
        return WeightVector(np.ones(int(n)))


# ---------------------------------------------------------------------------
# Numeric primitives
# ---------------------------------------------------------------------------

_SQRT2 = math.sqrt(2.0)


def normal_survival(threshold: float, pred: GaussianPrediction) -> float:
    """P(Y >= threshold) for Y ~ N(pred.mean, pred.variance).

    Uses ``0.5 * erfc(z / sqrt(2))``, which stays accurate in both tails
    (no cancellation for |z| <= 8, unlike ``1 - cdf``).
    """
    t = float(threshold)
    if t == -math.inf:
        return 1.0
    if not math.isfinite(t):
        raise InvalidArgumentError(f"threshold must be finite or -inf, got {t}")
    z = (t - pred.mean) / pred.sd
    return 0.5 * math.erfc(z / _SQRT2)


def survival_values(threshold: float, means: np.ndarray, variances: np.ndarray) -> np.ndarray:
    """Vectorized :func:`normal_survival` over arrays of means and variances."""
    t = float(threshold)
    means = np.asarray(means, dtype=float)
    if t == -math.inf:
        return np.ones_like(means)
    if not math.isfinite(t):
        raise InvalidArgumentError(f"threshold must be finite or -inf, got {t}")
    z = (t - means) / np.sqrt(np.asarray(variances, dtype=float))
    return 0.5 * special.erfc(z / _SQRT2)


def log_survival_values(threshold: float, means: np.ndarray, variances: np.ndarray) -> np.ndarray:
    """log P(Y >= threshold), stable deep into the lower tail via log_ndtr."""
    t = float(threshold)
    means = np.asarray(means, dtype=float)
    if t == -math.inf:
        return np.zeros_like(means)
    if not math.isfinite(t):
        raise InvalidArgumentError(f"threshold must be finite or -inf, got {t}")
    z = (means - t) / np.sqrt(np.asarray(variances, dtype=float))
    return special.log_ndtr(z)


def percentile(values, q: float) -> float:
    """Linear-interpolation percentile of ``values`` at level ``q`` in [0, 100].

    The rank index is q/100 * (n - 1); fractional indices interpolate between
    the two neighboring order statistics, so q=0 is the minimum and q=100 the
    maximum.
    """
    arr = np.asarray(values, dtype=float).ravel()
    if arr.size == 0:
        raise InvalidArgumentError("percentile of an empty vector is undefined")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError("percentile requires finite values")
    q = float(q)
    if not (0.0 <= q <= 100.0):
        raise InvalidArgumentError(f"percentile level must be in [0, 100], got {q}")
    s = np.sort(arr)
    idx = q / 100.0 * (s.size - 1)
    lo = int(math.floor(idx))
    hi = int(math.ceil(idx))
    if lo == hi:
        return float(s[lo])
    frac = idx - lo
    return float(s[lo] * (1.0 - frac) + s[hi] * frac)


def log_sum_exp(values) -> float:
    """log(sum(exp(v_i))) computed by shifting out the maximum first.

    All entries equal to -inf yield -inf (an empty sum in log space), which is
    a valid result rather than an error.
    """
    arr = np.asarray(values, dtype=float).ravel()
    if arr.size == 0:
        raise InvalidArgumentError("log_sum_exp of an empty vector is undefined")
    if np.any(np.isnan(arr)) or np.any(arr == math.inf):
        raise InvalidArgumentError("log_sum_exp requires entries in [-inf, inf)")
    m = float(np.max(arr))
    if m == -math.inf:
        return -math.inf
    if arr.size == 1:
        return m
    return m + math.log(float(np.sum(np.exp(arr - m))))


# ---------------------------------------------------------------------------
# Feature standardization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Standardizer:
    """Per-feature affine transform to zero mean and unit variance.

    Constant features keep scale 1 so the transform stays invertible.
    """

    mean: np.ndarray
    scale: np.ndarray

    @staticmethod
    def fit(features: np.ndarray) -> "Standardizer":
        feats = _as_float_array(features, "features", 2)
        mu = feats.mean(axis=0)
        sd = feats.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        return Standardizer(mean=mu, scale=sd)

    def apply(self, features: np.ndarray) -> np.ndarray:
        return (np.asarray(features, dtype=float) - self.mean) / self.scale

    def invert(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=float) * self.scale + self.mean


def standardize_dataset(data: LabeledDataset) -> tuple[LabeledDataset, Standardizer]:
    """Standardize features column-wise; labels pass through unchanged."""
    scaler = Standardizer.fit(data.features)
    return LabeledDataset(scaler.apply(data.features), data.labels), scaler
