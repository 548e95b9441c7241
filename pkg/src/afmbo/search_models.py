"""Parametric search distributions over the design space.

Two families cover everything the optimization loops need:

* :class:`MultivariateGaussianModel` -- full-rank multivariate normal with
  exact log-density, seeded sampling, and weighted maximum-likelihood fitting.
  This is both the search model that gets refit every iteration and the model
  of the training distribution.
* :class:`Grid1DModel` -- a nonparametric density on a fixed 1-d quadrature
  grid, used where the search distribution can be computed exactly instead of
  fit from samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .core import InvalidArgumentError, RngStream, WeightVector, log_sum_exp

_LOG_2PI = math.log(2.0 * math.pi)

# Relative diagonal jitter added before the Cholesky factorization.
JITTER_SCALE = 1e-6


class DegenerateFitError(RuntimeError):
    """Weighted MLE collapsed (too few effective points or singular covariance)."""

    def __init__(self, message: str, effective_sample_size: float = 0.0):
        super().__init__(message)
        self.effective_sample_size = float(effective_sample_size)


class EmptyDistributionError(RuntimeError):
    """A grid density with zero total mass cannot be normalized."""


@dataclass(frozen=True)
class MultivariateGaussianModel:
    """Multivariate normal with cached Cholesky factor of the covariance."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=float).ravel()
        cov = np.asarray(self.covariance, dtype=float)
        d = mean.shape[0]
        if cov.shape != (d, d):
            raise InvalidArgumentError(f"covariance shape {cov.shape} does not match d={d}")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise InvalidArgumentError("model parameters must be finite")
        if np.max(np.abs(cov - cov.T)) > 1e-10 * max(1.0, float(np.max(np.abs(cov)))):
            raise InvalidArgumentError("covariance must be symmetric")
        cov = 0.5 * (cov + cov.T)
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise DegenerateFitError(f"covariance is not positive-definite: {exc}") from exc
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "_chol", chol)
        object.__setattr__(self, "_log_det", 2.0 * float(np.sum(np.log(np.diag(chol)))))

    @property
    def d(self) -> int:
        return self.mean.shape[0]

    @property
    def cholesky_factor(self) -> np.ndarray:
        return self._chol

    def log_density(self, x: np.ndarray) -> np.ndarray | float:
        """Exact log N(x; mean, covariance) via the Cholesky factor.

        Accepts a single point of shape (d,) or a batch of shape (m, d).
        """
        arr = np.asarray(x, dtype=float)
        single = arr.ndim == 1
        pts = np.atleast_2d(arr)
        if pts.shape[1] != self.d:
            raise InvalidArgumentError(f"points have dimension {pts.shape[1]}, model has {self.d}")
        diff = pts - self.mean
        z = linalg.solve_triangular(self._chol, diff.T, lower=True)
        quad = np.sum(z * z, axis=0)
        out = -0.5 * (self.d * _LOG_2PI + self._log_det + quad)
        return float(out[0]) if single else out

    def sample(self, m: int, rng: RngStream) -> np.ndarray:
        """m i.i.d. draws mean + L z with z standard normal; deterministic in rng."""
        if m < 1:
            raise InvalidArgumentError(f"sample count must be >= 1, got {m}")
        z = rng.generator().standard_normal((int(m), self.d))
        return self.mean + z @ self._chol.T

    def to_jsonable(self) -> dict:
        return {
            "kind": "mvn",
            "mean": self.mean.tolist(),
            "covariance": self.covariance.ravel().tolist(),
        }

    @staticmethod
    def from_jsonable(doc: dict) -> "MultivariateGaussianModel":
        mean = np.asarray(doc["mean"], dtype=float)
        d = mean.shape[0]
        cov = np.asarray(doc["covariance"], dtype=float).reshape(d, d)
        return MultivariateGaussianModel(mean, cov)


def fit_mvn_weighted(
    data: np.ndarray,
    weights: WeightVector,
    shrinkage: float = 0.0,
    shrink_target: np.ndarray | None = None,
) -> MultivariateGaussianModel:
    """Weighted maximum-likelihood fit of a full-rank multivariate normal.

    mean = sum(w_i x_i) / sum(w_i); covariance is the weighted MLE (biased)
    second moment about that mean, optionally shrunk toward ``shrink_target``
    (a diagonal, e.g. the previous iterate's) and stabilized with diagonal
    jitter ``1e-6 * trace / d``.  Weights are normalized internally, so
    rescaling them by any positive constant leaves the fit unchanged.

    Raises :class:`DegenerateFitError` (carrying the effective sample size)
    when fewer than two points have nonzero weight or the covariance is not
    positive-definite even after jitter.
    """
    X = np.asarray(data, dtype=float)
    if X.ndim != 2:
        raise InvalidArgumentError(f"data must be an n x d matrix, got shape {X.shape}")
    n, d = X.shape
    w = weights.values
    if w.shape[0] != n:
        raise InvalidArgumentError(f"{w.shape[0]} weights for {n} points")
    if not (0.0 <= shrinkage <= 1.0):
        raise InvalidArgumentError(f"shrinkage must be in [0, 1], got {shrinkage}")

    total = np.sum(w)
    ess = float(total * total / np.sum(w * w))
    if int(np.count_nonzero(w)) < 2:
        raise DegenerateFitError(
            "weighted MLE needs at least 2 points with nonzero weight",
            effective_sample_size=ess,
        )
    wn = w / total
    mean = wn @ X
    diff = X - mean
    cov = (diff * wn[:, None]).T @ diff
    cov = 0.5 * (cov + cov.T)

    if shrinkage > 0.0:
        if shrink_target is None:
            target = np.eye(d) * (np.trace(cov) / d)
        else:
            target = np.diag(np.asarray(shrink_target, dtype=float).ravel())
        cov = (1.0 - shrinkage) * cov + shrinkage * target

    jitter = JITTER_SCALE * np.trace(cov) / d
    cov = cov + jitter * np.eye(d)
    try:
        return MultivariateGaussianModel(mean, cov)
    except DegenerateFitError as exc:
        raise DegenerateFitError(str(exc), effective_sample_size=ess) from exc


# ---------------------------------------------------------------------------
# 1-d quadrature-grid density
# ---------------------------------------------------------------------------

def trapezoid_weights(grid: np.ndarray) -> np.ndarray:
    """Quadrature weights of the composite trapezoid rule on ``grid``."""
    g = np.asarray(grid, dtype=float)
    tw = np.empty_like(g)
    tw[0] = 0.5 * (g[1] - g[0])
    tw[-1] = 0.5 * (g[-1] - g[-2])
    tw[1:-1] = 0.5 * (g[2:] - g[:-2])
    return tw


@dataclass(frozen=True)
class Grid1DModel:
    """Normalized density on a fixed strictly-increasing 1-d grid.

    ``log_normalizer`` records the log trapezoidal integral that was
    subtracted to normalize the input, so callers that built the density from
    an unnormalized product can recover the normalizing constant.
    """

    grid: np.ndarray
    log_density: np.ndarray
    log_normalizer: float = 0.0

    def __post_init__(self) -> None:
        g = np.asarray(self.grid, dtype=float).ravel()
        v = np.asarray(self.log_density, dtype=float).ravel()
        if g.shape != v.shape:
            raise InvalidArgumentError("grid and log_density lengths differ")
        if g.size < 64:
            raise InvalidArgumentError(f"grid needs at least 64 nodes, got {g.size}")
        if np.any(np.diff(g) <= 0):
            raise InvalidArgumentError("grid must be strictly increasing")
        if np.any(np.isnan(v)) or np.any(v == math.inf):
            raise InvalidArgumentError("log densities must be in [-inf, inf)")
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "log_density", v)

    @property
    def nodes(self) -> int:
        return self.grid.size

    def density(self) -> np.ndarray:
        return np.exp(self.log_density)

    def log_density_at(self, x) -> np.ndarray:
        """Linear interpolation of the log density; -inf outside the grid."""
        pts = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.full(pts.shape, -math.inf)
        inside = (pts >= self.grid[0]) & (pts <= self.grid[-1])
        if np.any(inside):
            out[inside] = np.interp(pts[inside], self.grid, self.log_density)
        return out

    def expectation(self, values_on_grid) -> float:
        """Trapezoidal integral of density * values over the grid."""
        vals = np.asarray(values_on_grid, dtype=float).ravel()
        if vals.shape != self.grid.shape:
            raise InvalidArgumentError(
                f"values have length {vals.size}, grid has {self.grid.size}"
            )
        return float(np.sum(trapezoid_weights(self.grid) * self.density() * vals))

    def mode(self) -> float:
        return float(self.grid[int(np.argmax(self.log_density))])

    def mean(self) -> float:
        return self.expectation(self.grid)

    def to_jsonable(self) -> dict:
        return {
            "kind": "grid1d",
            "grid": self.grid.tolist(),
            "log_density": self.log_density.tolist(),
        }

    @staticmethod
    def from_jsonable(doc: dict) -> "Grid1DModel":
        return grid1d_from_unnormalized(
            np.asarray(doc["grid"], dtype=float),
            np.asarray(doc["log_density"], dtype=float),
        )


def grid1d_from_unnormalized(grid, log_values) -> Grid1DModel:
    """Normalize unnormalized log-density values on a grid.

    Subtracts the log trapezoidal integral (computed in log space, so spikes
    cannot overflow) so that the resulting density integrates to one.
    """
    g = np.asarray(grid, dtype=float).ravel()
    v = np.asarray(log_values, dtype=float).ravel()
    if g.shape != v.shape:
        raise InvalidArgumentError("grid and log_values lengths differ")
    if np.all(v == -math.inf):
        raise EmptyDistributionError("all log values are -inf; no mass to normalize")
    log_tw = np.log(trapezoid_weights(g))
    log_integral = log_sum_exp(v + log_tw)
    return Grid1DModel(g, v - log_integral, log_normalizer=log_integral)


def grid1d_expectation(model: Grid1DModel, values_on_grid) -> float:
    return model.expectation(values_on_grid)
