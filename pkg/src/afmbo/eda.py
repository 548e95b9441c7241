"""Estimation-of-distribution drivers: the ascent half of the optimization.

One generic loop hosts six methods (CbAS, DbAS, RWR, FB, CEM-PI, CMA-ES) that
differ only in how oracle predictions become sample weights for the weighted
maximum-likelihood refit of the search model (CMA-ES replaces the refit with
its own covariance adaptation).  Oracle retraining, when enabled, is appended
to every iteration through :func:`afmbo.autofocus.autofocus_step` and never
changes the method itself.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .autofocus import (
    AutofocusConfig,
    WeightDiagnostics,
    autofocus_step,
    diagnostics_from_log_weights,
    importance_log_weights,
)
from .core import (
    InvalidArgumentError,
    LabeledDataset,
    RngStream,
    WeightVector,
    log_sum_exp,
    log_survival_values,
    percentile,
    survival_values,
)
from .search_models import DegenerateFitError, MultivariateGaussianModel, fit_mvn_weighted

METHODS = ("CbAS", "DbAS", "RWR", "FB", "CEM-PI", "CMA-ES")

# Child-stream ids under a run's RngStream.
SAMPLING_STREAM = 1
ORACLE_STREAM = 2


def oracle_training_stream(rng: RngStream) -> RngStream:
    """The stream a run re-materializes for every oracle retrain.

    Train the initial oracle on this same stream: then retraining with
    all-equal weights reproduces the initial parameters bit for bit, which is
    what makes a flatten-to-zero autofocus run literally identical to a
    fixed-oracle run.
    """
    return rng.child(ORACLE_STREAM)


@dataclass(frozen=True)
class EdaConfig:
    method: str
    iterations: int
    samples_per_iter: int
    percentile: float = 90.0
    rwr_gamma: float = 0.01
    cmaes_step_size: float = 0.01
    autofocus: AutofocusConfig | None = None

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise InvalidArgumentError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.iterations < 1:
            raise InvalidArgumentError("iterations must be >= 1")
        if self.samples_per_iter < 2:
            raise InvalidArgumentError("samples per iteration must be >= 2")
        if not (0.0 < self.percentile < 100.0):
            raise InvalidArgumentError("percentile must be in (0, 100)")
        if self.rwr_gamma <= 0:
            raise InvalidArgumentError("RWR gamma must be positive")
        if self.cmaes_step_size <= 0:
            raise InvalidArgumentError("CMA-ES step size must be positive")


@dataclass
class IterationRecord:
    """Everything one iteration produced; arrays are None where a driver has
    no per-sample state (the quadrature toy loop records scalars only)."""

    iteration: int
    gamma: float
    q_oracle: float
    samples: np.ndarray | None
    oracle_means: np.ndarray | None
    oracle_variances: np.ndarray | None
    eda_weights: np.ndarray | None
    search_snapshot: dict
    diagnostics: WeightDiagnostics | None
    retrained: bool
    extras: dict = field(default_factory=dict)


@dataclass
class Trajectory:
    """Per-iteration records of one run plus the shared initialization state."""

    records: list[IterationRecord]
    initial_snapshot: dict
    termination_reason: str | None = None
    extra_columns: tuple[str, ...] = ()

    CSV_COLUMNS = (
        "iteration",
        "gamma",
        "q_oracle",
        "ess",
        "renyi2",
        "max_weight_share",
        "retrained",
        "mu_p10",
        "mu_p50",
        "mu_p80",
        "mu_p90",
        "mu_max",
    )

    def iterations(self) -> int:
        return len(self.records)

    def csv_header(self) -> list[str]:
        return list(self.CSV_COLUMNS) + list(self.extra_columns)

    def csv_rows(self) -> list[list[str]]:
        rows = []
        for rec in self.records:
            if rec.oracle_means is not None and rec.oracle_means.size:
                mu = rec.oracle_means
                summary = [percentile(mu, q) for q in (10, 50, 80, 90)] + [float(np.max(mu))]
            else:
                summary = [math.nan] * 5
            diag = rec.diagnostics
            row = [
                str(rec.iteration),
                repr(float(rec.gamma)),
                repr(float(rec.q_oracle)),
                repr(diag.effective_sample_size) if diag else "nan",
                repr(diag.renyi2_plugin) if diag else "nan",
                repr(diag.max_weight_share) if diag else "nan",
                "true" if rec.retrained else "false",
                *[repr(float(v)) for v in summary],
            ]
            row.extend(repr(float(rec.extras[k])) for k in self.extra_columns)
            rows.append(row)
        return rows

    def write_csv(self, path) -> None:
        lines = [",".join(self.csv_header())]
        lines.extend(",".join(row) for row in self.csv_rows())
        if self.termination_reason:
            lines.append(f"# terminated: {self.termination_reason}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    def content_hash(self) -> str:
        """Hash of the scientific state of the run: samples, predictions, EDA
        weights, thresholds, and search-model snapshots.  Retrain bookkeeping
        (the diagnostics and retrained flag) is deliberately excluded so runs
        that differ only in whether a no-op retrain happened compare equal."""
        h = hashlib.sha256()
        h.update(json.dumps(self.initial_snapshot, sort_keys=True).encode())
        for rec in self.records:
            h.update(np.float64(rec.gamma).tobytes())
            h.update(np.float64(rec.q_oracle).tobytes())
            for arr in (rec.samples, rec.oracle_means, rec.oracle_variances, rec.eda_weights):
                if arr is not None:
                    h.update(np.ascontiguousarray(arr, dtype=float).tobytes())
            h.update(json.dumps(rec.search_snapshot, sort_keys=True).encode())
            for key in sorted(rec.extras):
                h.update(key.encode())
                h.update(np.float64(rec.extras[key]).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# Method-specific weight transforms
# ---------------------------------------------------------------------------

def anneal_threshold(previous_gamma: float, oracle_means, q: float) -> float:
    """max(previous threshold, Q-th percentile of the oracle means)."""
    return max(previous_gamma, percentile(oracle_means, q))


def cbas_weights(
    samples: np.ndarray,
    oracle,
    training_model,
    search_model_prev,
    gamma_t: float,
) -> WeightVector:
    """Density-ratio trust region times constraint probability, in log space:
    v_i = (p_train / p_search_prev)(x_i) * P(y >= gamma | x_i)."""
    means, variances = oracle.predict_many(samples)
    log_ratio = -importance_log_weights(search_model_prev, training_model, samples)
    logv = log_ratio + log_survival_values(gamma_t, means, variances)
    finite = logv[logv > -math.inf]
    peak = float(np.max(finite)) if finite.size else 0.0
    # Rescale only when exp() would under- or overflow outright; the weighted
    # MLE downstream is invariant to a common factor.
    shift = peak if abs(peak) > 600.0 else 0.0
    return WeightVector(np.exp(logv - shift))


def dbas_weights(samples: np.ndarray, oracle, gamma_t: float) -> WeightVector:
    """v_i = P(y >= gamma | x_i) under the oracle."""
    means, variances = oracle.predict_many(samples)
    return WeightVector(survival_values(gamma_t, means, variances))


def rwr_weights(samples: np.ndarray, oracle, gamma: float) -> WeightVector:
    """Softmax of gamma times the oracle means (weights sum to one)."""
    if gamma <= 0:
        raise InvalidArgumentError("RWR gamma must be positive")
    means, _ = oracle.predict_many(samples)
    logits = gamma * means
    return WeightVector(np.exp(logits - log_sum_exp(logits)))


@dataclass
class FbPool:
    """Retained promising samples (with the oracle means recorded when kept)."""

    samples: np.ndarray
    means: np.ndarray

    @staticmethod
    def empty(d: int) -> "FbPool":
        return FbPool(samples=np.empty((0, d)), means=np.empty(0))


def fb_update(
    pool: FbPool,
    new_samples: np.ndarray,
    new_means: np.ndarray,
    q: float,
    capacity: int,
) -> tuple[np.ndarray, FbPool]:
    """Keep new samples at or above this iteration's Q-th percentile of oracle
    means, top the refit set up to ``capacity`` with the best pool members,
    and make that refit set the new pool."""
    threshold = percentile(new_means, q)
    keep = new_means >= threshold
    kept_samples = new_samples[keep]
    kept_means = new_means[keep]
    slots = capacity - kept_samples.shape[0]
    if slots > 0 and pool.samples.shape[0] > 0:
        order = np.argsort(-pool.means, kind="stable")[:slots]
        kept_samples = np.concatenate([kept_samples, pool.samples[order]])
        kept_means = np.concatenate([kept_means, pool.means[order]])
    new_pool = FbPool(samples=kept_samples.copy(), means=kept_means.copy())
    return kept_samples, new_pool


def cempi_weights(
    samples: np.ndarray,
    oracle,
    y_max: float,
    q: float,
    previous_gamma: float = -math.inf,
) -> tuple[WeightVector, float]:
    """Thresholded probability of improvement.

    PI_i = P(y >= y_max | x_i); the threshold anneals as
    gamma_t = max(previous, Q-th percentile of PI) and v_i = 1[PI_i >= gamma].
    If annealing leaves nothing selected, the single best sample is kept so
    the run can continue (logged by the caller).
    """
    means, variances = oracle.predict_many(samples)
    pi = survival_values(y_max, means, variances)
    gamma_t = max(previous_gamma, percentile(pi, q))
    v = (pi >= gamma_t).astype(float)
    if not np.any(v > 0):
        v[int(np.argmax(pi))] = 1.0
    return WeightVector(v), gamma_t


# ---------------------------------------------------------------------------
# CMA-ES
# ---------------------------------------------------------------------------

@dataclass
class CmaesState:
    """Dynamic state of CMA-ES with the standard default strategy constants."""

    mean: np.ndarray
    sigma: float
    cov: np.ndarray
    path_sigma: np.ndarray
    path_cov: np.ndarray
    generation: int = 0
    events: list = field(default_factory=list)

    @staticmethod
    def initial(mean: np.ndarray, sigma: float) -> "CmaesState":
        mean = np.asarray(mean, dtype=float).ravel()
        d = mean.shape[0]
        return CmaesState(
            mean=mean.copy(),
            sigma=float(sigma),
            cov=np.eye(d),
            path_sigma=np.zeros(d),
            path_cov=np.zeros(d),
        )

    def model(self) -> MultivariateGaussianModel:
        return MultivariateGaussianModel(self.mean, self.sigma ** 2 * self.cov)


def _cmaes_constants(d: int, lam: int) -> dict:
    mu = lam // 2
    raw = np.log(lam / 2 + 0.5) - np.log(np.arange(1, mu + 1))
    weights = raw / np.sum(raw)
    mueff = float(np.sum(weights) ** 2 / np.sum(weights ** 2))
    cc = (4 + mueff / d) / (d + 4 + 2 * mueff / d)
    cs = (mueff + 2) / (d + mueff + 5)
    c1 = 2 / ((d + 1.3) ** 2 + mueff)
    cmu = min(1 - c1, 2 * (mueff - 2 + 1 / mueff) / ((d + 2) ** 2 + mueff))
    damps = 1 + 2 * max(0.0, math.sqrt((mueff - 1) / (d + 1)) - 1) + cs
    chi_n = math.sqrt(d) * (1 - 1 / (4 * d) + 1 / (21 * d * d))
    return {
        "mu": mu,
        "weights": weights,
        "mueff": mueff,
        "cc": cc,
        "cs": cs,
        "c1": c1,
        "cmu": cmu,
        "damps": damps,
        "chi_n": chi_n,
    }


def cmaes_step(state: CmaesState, samples: np.ndarray, fitness: np.ndarray) -> CmaesState:
    """One CMA-ES generation maximizing ``fitness`` over ``samples``.

    Rank-based recombination over the top half, cumulative step-size control,
    and rank-one plus rank-mu covariance adaptation, all with the published
    default constants for the dimension.  An all-tied fitness vector carries
    no ranking information, so the mean and covariance stay put while the
    paths decay.  If the covariance ever loses positive-definiteness it is
    reset to the identity and the event recorded.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    f = np.asarray(fitness, dtype=float).ravel()
    lam, d = X.shape
    if f.shape[0] != lam:
        raise InvalidArgumentError(f"{f.shape[0]} fitness values for {lam} samples")
    if lam < 4:
        raise InvalidArgumentError("CMA-ES needs at least 4 samples per generation")
    par = _cmaes_constants(d, lam)
    mu, weights, mueff = par["mu"], par["weights"], par["mueff"]
    cc, cs, c1, cmu, damps, chi_n = (
        par["cc"], par["cs"], par["c1"], par["cmu"], par["damps"], par["chi_n"],
    )

    old_mean = state.mean
    sigma = state.sigma
    generation = state.generation + 1
    events = list(state.events)

    if np.all(f == f[0]):
        new_mean = old_mean.copy()
    else:
        order = np.argsort(-f, kind="stable")[:mu]
        new_mean = weights @ X[order]

    try:
        chol = np.linalg.cholesky(state.cov)
    except np.linalg.LinAlgError:
        events.append({"generation": generation, "event": "covariance_reset"})
        chol = np.eye(d)
        state = CmaesState(
            mean=old_mean,
            sigma=sigma,
            cov=np.eye(d),
            path_sigma=state.path_sigma,
            path_cov=state.path_cov,
            generation=state.generation,
            events=events,
        )

    y = (new_mean - old_mean) / sigma
    inv_sqrt_y = np.linalg.solve(chol, y)  # C^{-1/2} y up to the Cholesky convention
    ps = (1 - cs) * state.path_sigma + math.sqrt(cs * (2 - cs) * mueff) * inv_sqrt_y
    hsig = float(
        np.sum(ps * ps) / d / (1 - (1 - cs) ** (2 * generation)) < 2 + 4.0 / (d + 1)
    )
    pc = (1 - cc) * state.path_cov + hsig * math.sqrt(cc * (2 - cc) * mueff) * y

    cov = state.cov.copy()
    c1a = c1 * (1 - (1 - hsig ** 2) * cc * (2 - cc))
    cov *= 1 - c1a - cmu
    cov += c1 * np.outer(pc, pc)
    if np.all(f == f[0]):
        cov += cmu * state.cov  # no ranking signal: rank-mu term keeps C
    else:
        order = np.argsort(-f, kind="stable")[:mu]
        Z = (X[order] - old_mean) / sigma
        cov += cmu * (Z.T * weights) @ Z
    cov = 0.5 * (cov + cov.T)

    new_sigma = sigma * math.exp((cs / damps) * (np.linalg.norm(ps) / chi_n - 1))

    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        events.append({"generation": generation, "event": "covariance_reset"})
        cov = np.eye(d)

    return CmaesState(
        mean=np.asarray(new_mean, dtype=float),
        sigma=float(new_sigma),
        cov=cov,
        path_sigma=ps,
        path_cov=pc,
        generation=generation,
        events=events,
    )


# ---------------------------------------------------------------------------
# The generic loop
# ---------------------------------------------------------------------------

def run_eda(
    config: EdaConfig,
    data: LabeledDataset,
    oracle,
    training_model: MultivariateGaussianModel,
    rng: RngStream,
) -> Trajectory:
    """Run one EDA trajectory from the training distribution.

    Each iteration samples from the current search model, turns oracle
    predictions into method-specific weights, refits the search model by
    weighted MLE (or a CMA-ES update), and, when autofocusing is enabled,
    retrains the oracle on density-ratio-reweighted training data.  With
    autofocusing disabled the oracle object is never touched; the same
    raw-weight diagnostics are still logged so paired runs stay comparable.

    A degenerate search-model fit truncates the trajectory at that iteration
    with the reason recorded.
    """
    search = training_model
    gamma = -math.inf
    y_max = float(np.max(data.labels))
    pool = FbPool.empty(data.d)
    cma = CmaesState.initial(training_model.mean, config.cmaes_step_size) \
        if config.method == "CMA-ES" else None

    rng_sampling = rng.child(SAMPLING_STREAM)
    # One fixed stream for every retrain: refitting with equal weights must
    # reproduce the initial training run exactly.
    rng_oracle = rng.child(ORACLE_STREAM)

    initial_snapshot = {
        "search_model": training_model.to_jsonable(),
        "oracle_fingerprint": oracle.fingerprint(),
    }

    records: list[IterationRecord] = []
    termination = None
    for t in range(1, config.iterations + 1):
        samples = search.sample(config.samples_per_iter, rng_sampling.child(t))
        means, variances = oracle.predict_many(samples)
        q_t = percentile(means, config.percentile)
        gamma_record = math.nan
        try:
            if config.method == "CbAS":
                gamma = anneal_threshold(gamma, means, config.percentile)
                gamma_record = gamma
                v = cbas_weights(samples, oracle, training_model, search, gamma)
                search = fit_mvn_weighted(samples, v)
                weights_record = v.values
            elif config.method == "DbAS":
                gamma = anneal_threshold(gamma, means, config.percentile)
                gamma_record = gamma
                v = dbas_weights(samples, oracle, gamma)
                search = fit_mvn_weighted(samples, v)
                weights_record = v.values
            elif config.method == "RWR":
                v = rwr_weights(samples, oracle, config.rwr_gamma)
                search = fit_mvn_weighted(samples, v)
                weights_record = v.values
            elif config.method == "FB":
                selected, pool = fb_update(
                    pool, samples, means, config.percentile, config.samples_per_iter
                )
                gamma_record = q_t
                search = fit_mvn_weighted(selected, WeightVector.ones(selected.shape[0]))
                weights_record = (means >= percentile(means, config.percentile)).astype(float)
            elif config.method == "CEM-PI":
                v, gamma = cempi_weights(samples, oracle, y_max, config.percentile, gamma)
                gamma_record = gamma
                search = fit_mvn_weighted(samples, v)
                weights_record = v.values
            else:  # CMA-ES
                fitness = survival_values(y_max, means, variances)
                cma = cmaes_step(cma, samples, fitness)
                search = cma.model()
                weights_record = fitness
        except DegenerateFitError as exc:
            termination = f"degenerate search-model fit at iteration {t}: {exc}"
            break

        if config.autofocus is not None:
            oracle, diagnostics, retrained = autofocus_step(
                oracle, data, search, training_model, config.autofocus, rng_oracle
            )
        else:
            logw = importance_log_weights(search, training_model, data.features)
            diagnostics = diagnostics_from_log_weights(logw)
            retrained = False

        records.append(
            IterationRecord(
                iteration=t,
                gamma=gamma_record,
                q_oracle=q_t,
                samples=samples,
                oracle_means=means,
                oracle_variances=variances,
                eda_weights=np.asarray(weights_record, dtype=float),
                search_snapshot=search.to_jsonable(),
                diagnostics=diagnostics,
                retrained=retrained,
            )
        )
    return Trajectory(
        records=records,
        initial_snapshot=initial_snapshot,
        termination_reason=termination,
    )
