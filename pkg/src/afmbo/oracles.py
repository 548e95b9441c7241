"""Probabilistic regression oracles with weighted maximum-likelihood refitting.

An oracle maps a design point to a normal predictive distribution
N(mu(x), sigma^2(x)) and can be retrained on importance-reweighted data.  Two
families are provided: RBF kernel ridge regression with a constant noise
variance estimated by (importance-weighted) cross-validation, and an ensemble
of small feed-forward networks trained on the weighted Gaussian negative
log-likelihood with per-point predictive variance.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg

from .core import (
    GaussianPrediction,
    InvalidArgumentError,
    LabeledDataset,
    RngStream,
    WeightVector,
)

# Weights at or below this fraction of the mean weight are dropped from the
# kernel ridge dual system instead of inverting a near-singular W.
KRR_WEIGHT_DROP = 1e-12

NOISE_VARIANCE_FLOOR = 1e-8


class OracleFitError(RuntimeError):
    """The oracle fit could not be completed."""


class OracleTrainingError(OracleFitError):
    """Iterative training diverged; records which member and epoch failed."""

    def __init__(self, message: str, member: int, epoch: int):
        super().__init__(message)
        self.member = member
        self.epoch = epoch


def rbf_kernel(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    """K[i, j] = exp(-gamma * ||a_i - b_j||^2)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    sq = (
        np.sum(a * a, axis=1)[:, None]
        - 2.0 * (a @ b.T)
        + np.sum(b * b, axis=1)[None, :]
    )
    return np.exp(-gamma * np.maximum(sq, 0.0))


def _fingerprint(*arrays) -> str:
    h = hashlib.sha256()
    for arr in arrays:
        h.update(np.ascontiguousarray(np.asarray(arr, dtype=float)).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Kernel ridge regression
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KernelRidgeOracle:
    """RBF kernel ridge mean function with a constant predictive variance."""

    support_points: np.ndarray
    dual_coefficients: np.ndarray
    rbf_gamma: float
    ridge: float
    noise_variance: float
    iwcv_folds: int = 4

    def __post_init__(self) -> None:
        pts = np.atleast_2d(np.asarray(self.support_points, dtype=float))
        coef = np.asarray(self.dual_coefficients, dtype=float).ravel()
        if pts.shape[0] != coef.shape[0]:
            raise InvalidArgumentError("support points and dual coefficients disagree")
        if not (self.noise_variance > 0 and math.isfinite(self.noise_variance)):
            raise InvalidArgumentError("noise variance must be positive and finite")
        object.__setattr__(self, "support_points", pts)
        object.__setattr__(self, "dual_coefficients", coef)

    @property
    def d(self) -> int:
        return self.support_points.shape[1]

    def mean_at(self, x: np.ndarray) -> np.ndarray:
        K = rbf_kernel(np.atleast_2d(np.asarray(x, dtype=float)), self.support_points, self.rbf_gamma)
        return K @ self.dual_coefficients

    def mean_from_kernel(self, kernel_matrix: np.ndarray) -> np.ndarray:
        """Mean predictions from a precomputed kernel against the support set."""
        return np.asarray(kernel_matrix, dtype=float) @ self.dual_coefficients

    def predict(self, x: np.ndarray) -> GaussianPrediction:
        mean = float(self.mean_at(np.asarray(x, dtype=float).reshape(1, -1))[0])
        return GaussianPrediction(mean, self.noise_variance)

    def predict_many(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        means = self.mean_at(x)
        return means, np.full_like(means, self.noise_variance)

    def refit_weighted(self, data: LabeledDataset, weights: WeightVector, rng: RngStream) -> "KernelRidgeOracle":
        """Same hyperparameters, new weighted fit and IWCV noise variance."""
        return fit_krr_oracle(
            data,
            weights,
            rng,
            ridge=self.ridge,
            rbf_gamma=self.rbf_gamma,
            folds=self.iwcv_folds,
        )

    def fingerprint(self) -> str:
        return _fingerprint(
            self.support_points,
            self.dual_coefficients,
            [self.rbf_gamma, self.ridge, self.noise_variance],
        )

    def to_jsonable(self) -> dict:
        return {
            "kind": "krr",
            "support_points": self.support_points.tolist(),
            "dual_coefficients": self.dual_coefficients.tolist(),
            "rbf_gamma": self.rbf_gamma,
            "ridge": self.ridge,
            "noise_variance": self.noise_variance,
            "iwcv_folds": self.iwcv_folds,
        }

    @staticmethod
    def from_jsonable(doc: dict) -> "KernelRidgeOracle":
        return KernelRidgeOracle(
            support_points=np.asarray(doc["support_points"], dtype=float),
            dual_coefficients=np.asarray(doc["dual_coefficients"], dtype=float),
            rbf_gamma=float(doc["rbf_gamma"]),
            ridge=float(doc["ridge"]),
            noise_variance=float(doc["noise_variance"]),
            iwcv_folds=int(doc["iwcv_folds"]),
        )


def fit_krr_weighted(
    data: LabeledDataset,
    weights: WeightVector,
    ridge: float = 1.0,
    rbf_gamma: float = 1.0,
    noise_variance: float = 1.0,
) -> KernelRidgeOracle:
    """Weighted kernel ridge fit: minimize sum w_i (f(x_i) - y_i)^2 + ridge ||f||^2.

    Weights are normalized to mean one so the fit is invariant to rescaling
    them; points whose normalized weight falls below ``KRR_WEIGHT_DROP`` are
    dropped (equivalent objective, finite arithmetic).  The retained dual
    system is (K + ridge * W^{-1}) alpha = y.
    """
    if ridge <= 0:
        raise InvalidArgumentError(f"ridge must be positive, got {ridge}")
    if rbf_gamma <= 0:
        raise InvalidArgumentError(f"rbf gamma must be positive, got {rbf_gamma}")
    if weights.n != data.n:
        raise InvalidArgumentError(f"{weights.n} weights for {data.n} points")

    w = weights.values * (data.n / weights.total())
    keep = w > KRR_WEIGHT_DROP
    if int(np.count_nonzero(keep)) < 2:
        raise OracleFitError("kernel ridge fit needs at least 2 points with usable weight")
    X = data.features[keep]
    y = data.labels[keep]
    K = rbf_kernel(X, X, rbf_gamma)
    A = K + ridge * np.diag(1.0 / w[keep])
    try:
        coef = linalg.solve(A, y, assume_a="pos")
    except np.linalg.LinAlgError as exc:
        raise OracleFitError(f"kernel ridge dual solve failed: {exc}") from exc
    if not np.all(np.isfinite(coef)):
        raise OracleFitError("kernel ridge dual solve produced non-finite coefficients")
    return KernelRidgeOracle(
        support_points=X,
        dual_coefficients=coef,
        rbf_gamma=rbf_gamma,
        ridge=ridge,
        noise_variance=noise_variance,
    )


def krr_noise_variance_iwcv(
    data: LabeledDataset,
    weights: WeightVector,
    rng: RngStream,
    folds: int = 4,
    ridge: float = 1.0,
    rbf_gamma: float = 1.0,
) -> float:
    """Importance-weighted K-fold CV estimate of the residual variance.

    Folds are contiguous blocks of one seeded shuffle.  Each fold is predicted
    by a weighted fit on the remaining points; the estimate is the total
    weighted squared error over all held-out points divided by the total
    weight, floored at ``NOISE_VARIANCE_FLOOR``.
    """
    if folds < 2:
        raise InvalidArgumentError(f"need at least 2 folds, got {folds}")
    if data.n < folds:
        raise InvalidArgumentError(f"{data.n} points cannot fill {folds} folds")
    if weights.n != data.n:
        raise InvalidArgumentError(f"{weights.n} weights for {data.n} points")

    perm = rng.generator().permutation(data.n)
    blocks = np.array_split(perm, folds)
    w = weights.values
    sse = 0.0
    for held_out in blocks:
        train = np.setdiff1d(perm, held_out, assume_unique=True)
        sub = LabeledDataset(data.features[train], data.labels[train])
        oracle = fit_krr_weighted(
            sub, WeightVector(w[train]), ridge=ridge, rbf_gamma=rbf_gamma
        )
        resid = oracle.mean_at(data.features[held_out]) - data.labels[held_out]
        sse += float(np.sum(w[held_out] * resid * resid))
    return max(sse / float(np.sum(w)), NOISE_VARIANCE_FLOOR)


def fit_krr_oracle(
    data: LabeledDataset,
    weights: WeightVector,
    rng: RngStream,
    ridge: float = 1.0,
    rbf_gamma: float = 1.0,
    folds: int = 4,
) -> KernelRidgeOracle:
    """Weighted kernel ridge fit plus IWCV noise variance, as one oracle."""
    noise = krr_noise_variance_iwcv(
        data, weights, rng, folds=folds, ridge=ridge, rbf_gamma=rbf_gamma
    )
    fitted = fit_krr_weighted(data, weights, ridge=ridge, rbf_gamma=rbf_gamma, noise_variance=noise)
    return replace(fitted, iwcv_folds=folds)


# ---------------------------------------------------------------------------
# MLP ensemble with Gaussian negative log-likelihood
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MlpTrainingConfig:
    hidden_sizes: tuple[int, ...] = (64, 64, 16)
    learning_rate: float = 5e-4
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 10
    validation_fraction: float = 0.1
    variance_floor: float = 1e-6

    def __post_init__(self) -> None:
        if not (0.0 < self.validation_fraction <= 0.5):
            raise InvalidArgumentError("validation fraction must be in (0, 0.5]")
        if self.max_epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise InvalidArgumentError("epochs, batch size, and patience must be >= 1")


def _init_params(gen: np.random.Generator, sizes: list[int]) -> list[np.ndarray]:
    """Glorot-normal weights and zero biases, flattened as [W1, b1, W2, b2, ...].

    The output layer starts at zero so every network begins at the neutral
    prediction (standardized mean 0, variance softplus(0)); hidden layers
    still break symmetry through their random initialization.
    """
    params: list[np.ndarray] = []
    last = len(sizes) - 2
    for layer, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        if layer == last:
            params.append(np.zeros((fan_in, fan_out)))
        else:
            std = math.sqrt(2.0 / (fan_in + fan_out))
            params.append(gen.normal(0.0, std, size=(fan_in, fan_out)))
        params.append(np.zeros(fan_out))
    return params


def _elu(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))


def _forward(params: list[np.ndarray], x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Network output: (mean, softplus variance); callers add the floor."""
    a = x
    n_layers = len(params) // 2
    for layer in range(n_layers - 1):
        a = _elu(a @ params[2 * layer] + params[2 * layer + 1])
    out = a @ params[-2] + params[-1]
    mean = out[:, 0]
    variance = np.logaddexp(0.0, out[:, 1])  # softplus
    return mean, variance


def gaussian_nll_loss_and_grad(
    params: list[np.ndarray],
    x: np.ndarray,
    y: np.ndarray,
    w: np.ndarray,
    variance_floor: float = 1e-6,
) -> tuple[float, list[np.ndarray]]:
    """Weighted Gaussian NLL over a batch and its gradient in the parameters.

    loss = mean_i w_i * [ 0.5 log v_i + (y_i - mu_i)^2 / (2 v_i) ]
    with v = softplus(raw) + floor.  The backward pass is hand-rolled so the
    training loop has no framework dependency and gradients can be checked
    against finite differences.
    """
    n_layers = len(params) // 2
    batch = x.shape[0]

    activations = [x]
    pre = []
    a = x
    for layer in range(n_layers - 1):
        z = a @ params[2 * layer] + params[2 * layer + 1]
        pre.append(z)
        a = _elu(z)
        activations.append(a)
    out = a @ params[-2] + params[-1]
    mean = out[:, 0]
    raw_v = out[:, 1]
    variance = np.logaddexp(0.0, raw_v) + variance_floor

    resid = y - mean
    with np.errstate(over="ignore"):  # inf loss is caught by the trainer
        nll = 0.5 * np.log(variance) + resid * resid / (2.0 * variance)
        loss = float(np.mean(w * nll))

    scale = w / batch
    d_mean = scale * (-resid / variance)
    d_var = scale * (0.5 / variance - resid * resid / (2.0 * variance * variance))
    d_raw_v = d_var * _sigmoid(raw_v)
    d_out = np.stack([d_mean, d_raw_v], axis=1)

    grads: list[np.ndarray] = [np.empty(0)] * len(params)
    grads[-2] = activations[-1].T @ d_out
    grads[-1] = d_out.sum(axis=0)
    d_a = d_out @ params[-2].T
    for layer in range(n_layers - 2, -1, -1):
        z = pre[layer]
        d_z = d_a * np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0)))
        grads[2 * layer] = activations[layer].T @ d_z
        grads[2 * layer + 1] = d_z.sum(axis=0)
        if layer > 0:
            d_a = d_z @ params[2 * layer].T
    return loss, grads


def _sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic sigmoid."""
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass(frozen=True)
class MlpMember:
    """One trained network; predictions are in raw label units."""

    params: tuple[np.ndarray, ...]
    label_mean: float
    label_scale: float
    variance_floor: float

    def predict_many(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mean_std, var_std = _forward(list(self.params), np.atleast_2d(np.asarray(x, dtype=float)))
        var_std = var_std + self.variance_floor
        mean = mean_std * self.label_scale + self.label_mean
        variance = var_std * self.label_scale * self.label_scale
        return mean, variance


def _fit_member(
    data: LabeledDataset,
    w: np.ndarray,
    rng: RngStream,
    config: MlpTrainingConfig,
    member_index: int,
) -> MlpMember:
    gen = rng.generator()
    n = data.n

    label_mean = float(np.mean(data.labels))
    label_scale = float(np.std(data.labels))
    if label_scale <= 0:
        label_scale = 1.0
    y = (data.labels - label_mean) / label_scale
    x = data.features

    perm = gen.permutation(n)
    n_val = max(1, int(round(config.validation_fraction * n)))
    val_idx = perm[:n_val]
    tr_idx = perm[n_val:]

    sizes = [data.d, *config.hidden_sizes, 2]
    params = _init_params(gen, sizes)
    m_state = [np.zeros_like(p) for p in params]
    v_state = [np.zeros_like(p) for p in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0

    def val_loss() -> float:
        mean, variance = _forward(params, x[val_idx])
        variance = variance + config.variance_floor
        resid = y[val_idx] - mean
        with np.errstate(over="ignore"):
            nll = 0.5 * np.log(variance) + resid * resid / (2.0 * variance)
            return float(np.mean(w[val_idx] * nll))

    best = val_loss()
    best_params = [p.copy() for p in params]
    stale = 0
    n_tr = tr_idx.size
    for epoch in range(config.max_epochs):
        order = gen.permutation(n_tr)
        for start in range(0, n_tr, config.batch_size):
            batch = tr_idx[order[start : start + config.batch_size]]
            loss, grads = gaussian_nll_loss_and_grad(
                params, x[batch], y[batch], w[batch], config.variance_floor
            )
            if not math.isfinite(loss):
                raise OracleTrainingError(
                    f"non-finite loss in member {member_index} at epoch {epoch}",
                    member=member_index,
                    epoch=epoch,
                )
            step += 1
            lr_t = config.learning_rate * math.sqrt(1.0 - beta2 ** step) / (1.0 - beta1 ** step)
            for k, g in enumerate(grads):
                m_state[k] = beta1 * m_state[k] + (1.0 - beta1) * g
                v_state[k] = beta2 * v_state[k] + (1.0 - beta2) * g * g
                params[k] = params[k] - lr_t * m_state[k] / (np.sqrt(v_state[k]) + eps)
        current = val_loss()
        if current < best:
            best = current
            best_params = [p.copy() for p in params]
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return MlpMember(
        params=tuple(best_params),
        label_mean=label_mean,
        label_scale=label_scale,
        variance_floor=config.variance_floor,
    )


@dataclass(frozen=True)
class MlpEnsembleOracle:
    """Ensemble of independently initialized networks, moment-matched."""

    members: tuple[MlpMember, ...]
    config: MlpTrainingConfig
    ensemble_variance_floor: float = 1e-6

    def __post_init__(self) -> None:
        if len(self.members) < 1:
            raise InvalidArgumentError("ensemble needs at least one member")

    def predict_many(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        means = []
        variances = []
        for member in self.members:
            mean, variance = member.predict_many(x)
            means.append(mean)
            variances.append(variance)
        mean_stack = np.stack(means)
        var_stack = np.stack(variances)
        mean = mean_stack.mean(axis=0)
        variance = (var_stack + mean_stack * mean_stack).mean(axis=0) - mean * mean
        return mean, np.maximum(variance, self.ensemble_variance_floor)

    def predict(self, x: np.ndarray) -> GaussianPrediction:
        mean, variance = self.predict_many(np.asarray(x, dtype=float).reshape(1, -1))
        return GaussianPrediction(float(mean[0]), float(variance[0]))

    def refit_weighted(self, data: LabeledDataset, weights: WeightVector, rng: RngStream) -> "MlpEnsembleOracle":
        return fit_mlp_ensemble_weighted(
            data, weights, rng, config=self.config, n_members=len(self.members)
        )

    def fingerprint(self) -> str:
        arrays = []
        for member in self.members:
            arrays.extend(member.params)
            arrays.append([member.label_mean, member.label_scale])
        return _fingerprint(*arrays)

    def to_jsonable(self) -> dict:
        return {
            "kind": "mlp_ensemble",
            "hidden_sizes": list(self.config.hidden_sizes),
            "variance_floor": self.config.variance_floor,
            "members": [
                {
                    "params": [p.tolist() for p in member.params],
                    "label_mean": member.label_mean,
                    "label_scale": member.label_scale,
                }
                for member in self.members
            ],
        }

    @staticmethod
    def from_jsonable(doc: dict, config: MlpTrainingConfig | None = None) -> "MlpEnsembleOracle":
        config = config or MlpTrainingConfig(
            hidden_sizes=tuple(doc["hidden_sizes"]), variance_floor=doc["variance_floor"]
        )
        members = tuple(
            MlpMember(
                params=tuple(np.asarray(p, dtype=float) for p in m["params"]),
                label_mean=float(m["label_mean"]),
                label_scale=float(m["label_scale"]),
                variance_floor=float(doc["variance_floor"]),
            )
            for m in doc["members"]
        )
        return MlpEnsembleOracle(members=members, config=config)


def ensemble_predict(oracle: MlpEnsembleOracle, x: np.ndarray) -> GaussianPrediction:
    """Moment-matched ensemble prediction at a single point."""
    return oracle.predict(x)


def fit_mlp_ensemble_weighted(
    data: LabeledDataset,
    weights: WeightVector,
    rng: RngStream,
    config: MlpTrainingConfig = MlpTrainingConfig(),
    n_members: int = 3,
) -> MlpEnsembleOracle:
    """Train ``n_members`` networks on the weighted Gaussian NLL.

    Members differ only in their rng child stream (initialization, the
    train/validation split, and minibatch shuffling); training is Adam with
    early stopping on the re-weighted validation NLL.  Labels are standardized
    internally (a constant shift of the objective for any fixed weights), and
    predictions are mapped back to label units.
    """
    if data.n < 50:
        raise InvalidArgumentError(f"ensemble training expects n >= 50, got {data.n}")
    if weights.n != data.n:
        raise InvalidArgumentError(f"{weights.n} weights for {data.n} points")
    if n_members < 1:
        raise InvalidArgumentError("need at least one ensemble member")
    members = tuple(
        _fit_member(data, weights.values, rng.child(j), config, j)
        for j in range(n_members)
    )
    return MlpEnsembleOracle(members=members, config=config)
