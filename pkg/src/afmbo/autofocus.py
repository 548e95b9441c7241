"""Importance-weighted oracle retraining and its variance diagnostics.

The retraining step reweights the fixed training set by the density ratio
between the current search distribution and the training distribution, then
refits the oracle by weighted maximum likelihood.  Because those ratios can
have high (even infinite) variance, the step carries flattening and
self-normalization controls, an effective-sample-size gate, and per-iteration
diagnostics computed from the raw ratios.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    InvalidArgumentError,
    InvalidStateError,
    LabeledDataset,
    RngStream,
    WeightVector,
    log_sum_exp,
)


@dataclass(frozen=True)
class AutofocusConfig:
    """Variance-control knobs for the retraining step.

    flatten_alpha raises raw weights to a power in [0, 1]: 1 keeps the
    unbiased ratios, 0 collapses them to all-ones (no reweighting at all).
    min_effective_sample_size of 0 disables the retrain gate.  weight_clip,
    when set, caps raw ratios; it is an extension and off by default.
    """

    flatten_alpha: float = 1.0
    self_normalize: bool = False
    min_effective_sample_size: float = 0.0
    weight_clip: float | None = None

    def __post_init__(self) -> None:
        if not (0.0 <= self.flatten_alpha <= 1.0):
            raise InvalidArgumentError(f"flatten alpha must be in [0, 1], got {self.flatten_alpha}")
        if self.min_effective_sample_size < 0:
            raise InvalidArgumentError("min effective sample size must be >= 0")
        if self.weight_clip is not None and not (self.weight_clip > 0):
            raise InvalidArgumentError("weight clip must be positive when set")


@dataclass(frozen=True)
class WeightDiagnostics:
    """Summary of the raw importance weights at one retraining step.

    renyi2_plugin is the plug-in estimate (1/n) sum w_i^2 of the exponentiated
    Renyi-2 divergence; the population quantity is >= 1 but the finite-sample
    plug-in may fall below it.
    """

    effective_sample_size: float
    renyi2_plugin: float
    max_weight_share: float


def importance_log_weights(search_model, training_model, points: np.ndarray) -> np.ndarray:
    """log(p_search(x_i) / p_train(x_i)) for each row of ``points``.

    Raises :class:`InvalidStateError` if the training model assigns zero
    density to any training point (the ratio is undefined there), or if the
    search model assigns zero density to all of them.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    log_p_search = np.asarray(search_model.log_density(pts), dtype=float)
    log_p_train = np.asarray(training_model.log_density(pts), dtype=float)
    if np.any(log_p_train == -math.inf):
        raise InvalidStateError("training distribution has zero density at a training point")
    logw = log_p_search - log_p_train
    if np.all(logw == -math.inf):
        raise InvalidStateError("search model assigns zero density to every training point")
    return logw


def importance_weights(
    search_model,
    training_model,
    points: np.ndarray,
    weight_clip: float | None = None,
) -> WeightVector:
    """Density-ratio weights w_i = p_search(x_i) / p_train(x_i), in weight space."""
    logw = importance_log_weights(search_model, training_model, points)
    w = np.exp(logw)
    if weight_clip is not None:
        w = np.minimum(w, weight_clip)
    return WeightVector(w)


def flatten_weights(weights: WeightVector, alpha: float) -> WeightVector:
    """Elementwise w_i^alpha for alpha in [0, 1]; alpha=0 gives all ones."""
    if not (0.0 <= alpha <= 1.0):
        raise InvalidArgumentError(f"alpha must be in [0, 1], got {alpha}")
    if alpha == 0.0:
        return WeightVector(np.ones(weights.n))
    return WeightVector(np.power(weights.values, alpha))


def self_normalize(weights: WeightVector) -> WeightVector:
    """Rescale to mean one (sum n), preserving the n-point-average loss scale."""
    return WeightVector(weights.values * (weights.n / weights.total()))


def effective_sample_size(weights: WeightVector) -> float:
    """(sum w)^2 / sum w^2: the equally-weighted-equivalent sample count.

    Computed on weights normalized by their maximum; the value is invariant
    to positive rescaling, and this way the uniform-weights identity
    (ESS = n) holds exactly in floating point.
    """
    w = weights.values
    r = w / np.max(w)
    s = np.sum(r)
    return float(s * s / np.sum(r * r))


def renyi2_plugin(weights: WeightVector) -> float:
    """Plug-in estimate (1/n) sum w_i^2 of the exponentiated Renyi-2 divergence."""
    w = weights.values
    return float(np.sum(w * w) / w.shape[0])


def max_weight_share(weights: WeightVector) -> float:
    """Largest single weight as a fraction of the total weight."""
    w = weights.values
    return float(np.max(w) / np.sum(w))


def chebyshev_loss_bound(loss_bound: float, delta: float, n: int, d2: float) -> float:
    """Half-width L * sqrt(d2 / (n * delta)) of the Chebyshev confidence bound
    on an importance-sampled estimate of a loss bounded by L."""
    if loss_bound <= 0:
        raise InvalidArgumentError("loss bound must be positive")
    if not (0.0 < delta <= 1.0):
        raise InvalidArgumentError(f"delta must be in (0, 1], got {delta}")
    if n < 1:
        raise InvalidArgumentError("n must be >= 1")
    if d2 < 0:
        raise InvalidArgumentError("d2 must be nonnegative")
    return loss_bound * math.sqrt(d2 / (n * delta))


def cbas_weight_variance(p0_of_s: float) -> float:
    """Importance-weight variance 1/P0(S) - 1 when the search target is the
    training distribution conditioned on the constraint set S."""
    if not (0.0 < p0_of_s <= 1.0):
        raise InvalidArgumentError(f"P0(S) must be in (0, 1], got {p0_of_s}")
    return 1.0 / p0_of_s - 1.0


def population_ess(n: int, p0_of_s: float) -> float:
    """Population counterpart n * P0(S) of the effective sample size."""
    if not (0.0 < p0_of_s <= 1.0):
        raise InvalidArgumentError(f"P0(S) must be in (0, 1], got {p0_of_s}")
    return float(n) * p0_of_s


def diagnostics_from_log_weights(logw: np.ndarray) -> WeightDiagnostics:
    """Diagnostics of raw weights given in log space.

    ESS and the max share are scale-invariant, so they are computed from
    shifted logs and never under- or overflow.  The Renyi-2 plug-in is not
    scale-invariant; it is reported at face value and may underflow to zero
    when every ratio is astronomically small.
    """
    logw = np.asarray(logw, dtype=float)
    n = logw.shape[0]
    lse1 = log_sum_exp(logw)
    lse2 = log_sum_exp(2.0 * logw)
    ess = float(np.exp(2.0 * lse1 - lse2))
    share = float(np.exp(np.max(logw) - lse1))
    renyi2 = float(np.exp(lse2 - math.log(n)))
    return WeightDiagnostics(
        effective_sample_size=ess,
        renyi2_plugin=renyi2,
        max_weight_share=share,
    )


def training_weights_from_log(logw: np.ndarray, config: AutofocusConfig) -> np.ndarray:
    """Apply clipping, flattening, then optional self-normalization in log space."""
    logw = np.asarray(logw, dtype=float)
    if config.weight_clip is not None:
        logw = np.minimum(logw, math.log(config.weight_clip))
    if config.flatten_alpha == 0.0:
        log_used = np.zeros_like(logw)
    else:
        log_used = config.flatten_alpha * logw
    if config.self_normalize:
        return np.exp(log_used - log_sum_exp(log_used) + math.log(logw.shape[0]))
    return np.exp(log_used)


def autofocus_step(
    oracle,
    data: LabeledDataset,
    search_model,
    training_model,
    config: AutofocusConfig,
    rng: RngStream,
):
    """One oracle-retraining step against the current search distribution.

    Computes raw density-ratio weights for the training points, records
    diagnostics from them, applies flattening and optional self-normalization,
    and retrains the oracle by weighted MLE unless the effective sample size
    of the weights actually used for training falls below the configured gate
    (diagnostics always describe the raw shift magnitude; the gate protects
    the fit that would actually be performed).

    Returns ``(oracle, diagnostics, retrained)``; the input oracle is returned
    unchanged whenever the gate closes.
    """
    logw = importance_log_weights(search_model, training_model, data.features)
    if config.weight_clip is not None:
        logw = np.minimum(logw, math.log(config.weight_clip))
    diagnostics = diagnostics_from_log_weights(logw)

    used = training_weights_from_log(logw, config)
    if not np.any(used > 0):
        # Every flattened ratio underflowed; there is nothing to fit on.
        return oracle, diagnostics, False
    used_vector = WeightVector(used)
    if effective_sample_size(used_vector) < config.min_effective_sample_size:
        return oracle, diagnostics, False
    new_oracle = oracle.refit_weighted(data, used_vector, rng)
    return new_oracle, diagnostics, True
