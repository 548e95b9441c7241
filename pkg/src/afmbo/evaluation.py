"""Scoring a finished run: pick the most promising iteration by oracle
percentile, then judge its best samples against the ground truth.

The procedure mirrors how design candidates would actually be triaged with a
limited experimental budget: rank iterations by the Q-th percentile of their
oracle expectations, take the best iteration's above-percentile samples, and
measure what the ground truth thinks of them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import InvalidArgumentError, InvalidStateError, RngStream, percentile
from .eda import Trajectory
from .search_models import MultivariateGaussianModel


@dataclass(frozen=True)
class EvalReport:
    median_gt: float
    max_gt: float
    pci: float
    spearman_rho: float
    rmse: float
    best_iteration: int

    def __post_init__(self) -> None:
        if self.median_gt > self.max_gt:
            raise InvalidArgumentError("median cannot exceed max")
        if not (0.0 <= self.pci <= 100.0):
            raise InvalidArgumentError("PCI must be a percentage")

    def to_jsonable(self) -> dict:
        return {
            "median_gt": self.median_gt,
            "max_gt": self.max_gt,
            "pci": self.pci,
            "spearman_rho": self.spearman_rho,
            "rmse": self.rmse,
            "best_iteration": self.best_iteration,
        }

    @staticmethod
    def from_jsonable(doc: dict) -> "EvalReport":
        return EvalReport(
            median_gt=float(doc["median_gt"]),
            max_gt=float(doc["max_gt"]),
            pci=float(doc["pci"]),
            spearman_rho=float(doc["spearman_rho"]),
            rmse=float(doc["rmse"]),
            best_iteration=int(doc["best_iteration"]),
        )


class UndefinedCorrelationError(ValueError):
    """Rank correlation is undefined when one input has no rank variance."""


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """Ranks starting at 1, with ties sharing the mean of their rank range."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.shape[0], dtype=float)
    sorted_vals = values[order]
    i = 0
    while i < values.shape[0]:
        j = i
        while j + 1 < values.shape[0] and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(a, b) -> float:
    """Spearman rank correlation: Pearson correlation of average ranks."""
    x = np.asarray(a, dtype=float).ravel()
    y = np.asarray(b, dtype=float).ravel()
    if x.shape != y.shape or x.size < 2:
        raise InvalidArgumentError("spearman needs two equal-length vectors of size >= 2")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    sx = rx - rx.mean()
    sy = ry - ry.mean()
    denom = math.sqrt(float(np.sum(sx * sx)) * float(np.sum(sy * sy)))
    if denom == 0.0:
        raise UndefinedCorrelationError("an input has zero rank variance")
    return float(np.sum(sx * sy) / denom)


def score_best_iteration(
    samples: np.ndarray,
    oracle_means: np.ndarray,
    gt,
    q_best: float,
    train_max_label: float,
    best_iteration: int,
) -> EvalReport:
    """Metrics for one iteration's samples given its selection percentile.

    Correlation and RMSE cover all samples; median/max/PCI cover the selected
    subset (oracle mean >= q_best).
    """
    mu_oracle = np.asarray(oracle_means, dtype=float)
    mu_gt = np.asarray(gt.expectation(samples), dtype=float)
    if np.any(~np.isfinite(mu_gt)):
        raise InvalidStateError("ground-truth expectations are not finite")
    selected = mu_oracle >= q_best
    gt_selected = mu_gt[selected]
    return EvalReport(
        median_gt=percentile(gt_selected, 50.0),
        max_gt=float(np.max(gt_selected)),
        pci=100.0 * float(np.mean(gt_selected > train_max_label)),
        spearman_rho=spearman(mu_gt, mu_oracle),
        rmse=float(np.sqrt(np.mean((mu_gt - mu_oracle) ** 2))),
        best_iteration=best_iteration,
    )


def best_iteration_index(per_iteration_means: list[np.ndarray], q_eval: float) -> tuple[int, float]:
    """Index (0-based) of the iteration maximizing the q_eval-th percentile of
    oracle means, earliest on ties, together with that percentile value."""
    qs = [percentile(means, q_eval) for means in per_iteration_means]
    best = int(np.argmax(qs))
    return best, qs[best]


def evaluate_run(trajectory: Trajectory, gt, train_max_label: float, q_eval: float = 80.0) -> EvalReport:
    """Score a trajectory against the ground truth.

    The best iteration maximizes the q_eval-th percentile of oracle means
    (earliest iteration on ties).  Spearman correlation and RMSE between
    oracle means and ground-truth expectations are computed over *all* of
    that iteration's samples; the median, max, and percent chance of
    improvement over ``train_max_label`` are computed over the selected
    samples (oracle mean >= the percentile).
    """
    if not trajectory.records:
        raise InvalidArgumentError("trajectory has no iterations to evaluate")
    for rec in trajectory.records:
        if rec.oracle_means is None or rec.samples is None or rec.oracle_means.size < 2:
            raise InvalidArgumentError("evaluation needs sample-level records")
    best_index, q_best = best_iteration_index(
        [rec.oracle_means for rec in trajectory.records], q_eval
    )
    best = trajectory.records[best_index]
    return score_best_iteration(
        best.samples, best.oracle_means, gt, q_best, train_max_label, best.iteration
    )


def naive_baseline_pci(
    training_model: MultivariateGaussianModel,
    gt,
    n: int,
    train_max_label: float,
    rng: RngStream,
) -> float:
    """PCI of simply re-drawing n points from the training distribution."""
    if n < 1:
        raise InvalidArgumentError("n must be >= 1")
    draws = training_model.sample(n, rng)
    values = np.asarray(gt.expectation(draws), dtype=float)
    return 100.0 * float(np.mean(values > train_max_label))
