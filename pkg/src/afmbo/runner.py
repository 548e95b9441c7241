"""Run orchestration: config files, paired runs, persistence, reports.

A run configuration describes one synthetic design problem plus one EDA
method; executing it produces, for every seed, an autofocused arm and a
fixed-oracle arm that share the training set, the initial oracle, and the
initial search model.  Per-seed artifacts are a trajectory CSV and a model
JSON per arm plus one report JSON, all written with deterministic formatting
so identical configurations reproduce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .autofocus import AutofocusConfig
from .benchmarks import (
    SyntheticHighDimConfig,
    build_training_distribution,
    synthetic_ground_truth,
)
from .core import InvalidArgumentError, LabeledDataset, RngStream, WeightVector
from .eda import EdaConfig, Trajectory, oracle_training_stream, run_eda
from .evaluation import (
    EvalReport,
    best_iteration_index,
    evaluate_run,
    naive_baseline_pci,
    score_best_iteration,
)
from .oracles import MlpTrainingConfig, fit_mlp_ensemble_weighted

SCHEMA_VERSION = 1

# Child-stream ids under a seed's base stream.
GROUND_TRUTH_STREAM = 10
TRAINING_DATA_STREAM = 11
RUN_STREAM = 13
BASELINE_STREAM = 14


class ConfigError(ValueError):
    """The run configuration document is malformed."""


def _check_keys(doc: dict, allowed: set[str], where: str) -> None:
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")


@dataclass(frozen=True)
class RunConfig:
    problem: SyntheticHighDimConfig
    eda: EdaConfig  # autofocus field unset; arms attach it
    autofocus: AutofocusConfig
    oracle: MlpTrainingConfig
    oracle_members: int
    seeds: tuple[int, ...]
    eval_percentile: float
    raw: dict

    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.raw, sort_keys=True, separators=(",", ":")).encode()
        ).hexdigest()


def parse_run_config(doc: dict) -> RunConfig:
    """Validate a run-config document; unknown keys are rejected."""
    if not isinstance(doc, dict):
        raise ConfigError("run config must be a JSON object")
    _check_keys(
        doc,
        {"schema_version", "problem", "eda", "autofocus", "oracle", "seeds", "eval_percentile"},
        "run config",
    )
    if doc.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {doc.get('schema_version')}")

    try:
        problem_doc = dict(doc.get("problem", {}))
        _check_keys(
            problem_doc,
            {
                "kind",
                "dimension",
                "fourier_features",
                "output_high",
                "training_percentile",
                "n_train",
                "label_noise_sd",
                "lengthscale",
            },
            "problem",
        )
        kind = problem_doc.pop("kind", "synthetic")
        if kind != "synthetic":
            raise ConfigError(
                f"unsupported problem kind {kind!r}; evaluation requires the "
                "synthetic ground truth"
            )
        problem = SyntheticHighDimConfig(**problem_doc)

        eda_doc = dict(doc.get("eda", {}))
        _check_keys(
            eda_doc,
            {"method", "iterations", "samples_per_iter", "percentile", "rwr_gamma", "cmaes_step_size"},
            "eda",
        )
        eda_doc.setdefault("method", "CbAS")
        eda_doc.setdefault("iterations", 50)
        if eda_doc.get("samples_per_iter") is None:
            eda_doc["samples_per_iter"] = problem.n_train
        eda = EdaConfig(**eda_doc)

        af_doc = dict(doc.get("autofocus", {}))
        _check_keys(
            af_doc,
            {"flatten_alpha", "self_normalize", "min_effective_sample_size", "weight_clip"},
            "autofocus",
        )
        af_doc.setdefault("flatten_alpha", 0.2)
        af_doc.setdefault("self_normalize", True)
        autofocus = AutofocusConfig(**af_doc)

        oracle_doc = dict(doc.get("oracle", {}))
        _check_keys(
            oracle_doc,
            {
                "hidden_sizes",
                "members",
                "learning_rate",
                "batch_size",
                "max_epochs",
                "patience",
                "validation_fraction",
            },
            "oracle",
        )
        members = int(oracle_doc.pop("members", 3))
        if "hidden_sizes" in oracle_doc:
            oracle_doc["hidden_sizes"] = tuple(int(h) for h in oracle_doc["hidden_sizes"])
        oracle = MlpTrainingConfig(**oracle_doc)

        seeds = tuple(int(s) for s in doc.get("seeds", [0]))
        if not seeds or len(set(seeds)) != len(seeds):
            raise ConfigError("seeds must be a non-empty list of distinct integers")
        eval_percentile = float(doc.get("eval_percentile", 80.0))
        if not (0.0 < eval_percentile < 100.0):
            raise ConfigError("eval_percentile must be in (0, 100)")
    except (TypeError, InvalidArgumentError) as exc:
        raise ConfigError(str(exc)) from exc

    return RunConfig(
        problem=problem,
        eda=eda,
        autofocus=autofocus,
        oracle=oracle,
        oracle_members=members,
        seeds=seeds,
        eval_percentile=eval_percentile,
        raw=doc,
    )


def load_run_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    return parse_run_config(doc)


# ---------------------------------------------------------------------------
# Serialization helpers (deterministic float formatting via json/repr)
# ---------------------------------------------------------------------------

def _dump_json(doc: dict, path: Path) -> None:
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def _dataset_sha(data: LabeledDataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(data.features).tobytes())
    h.update(np.ascontiguousarray(data.labels).tobytes())
    return h.hexdigest()


def _problem_doc(problem: SyntheticHighDimConfig) -> dict:
    return {
        "kind": "synthetic",
        "dimension": problem.dimension,
        "fourier_features": problem.fourier_features,
        "output_high": problem.output_high,
        "training_percentile": problem.training_percentile,
        "n_train": problem.n_train,
        "label_noise_sd": problem.label_noise_sd,
        "lengthscale": problem.lengthscale,
    }


def trajectory_json_doc(
    trajectory: Trajectory,
    *,
    seed: int,
    arm: str,
    method: str,
    config_hash: str,
    problem: SyntheticHighDimConfig,
    eval_percentile: float,
    dataset_sha: str,
    train_max_label: float,
) -> dict:
    """Persistable document: per-iteration snapshots and oracle means, plus
    the best iteration's samples (enough to re-run the evaluation at the
    recorded percentile without re-running the optimization)."""
    best_index, _ = best_iteration_index(
        [rec.oracle_means for rec in trajectory.records], eval_percentile
    )
    best = trajectory.records[best_index]
    return {
        "schema_version": SCHEMA_VERSION,
        "seed": seed,
        "arm": arm,
        "method": method,
        "config_hash": config_hash,
        "problem": _problem_doc(problem),
        "eval_percentile": eval_percentile,
        "train_max_label": train_max_label,
        "initial": {
            "search_model": trajectory.initial_snapshot["search_model"],
            "oracle_fingerprint": trajectory.initial_snapshot["oracle_fingerprint"],
            "dataset_sha": dataset_sha,
        },
        "iterations": [
            {
                "iteration": rec.iteration,
                "gamma": rec.gamma,
                "q_oracle": rec.q_oracle,
                "search_model": rec.search_snapshot,
                "oracle_means": rec.oracle_means.tolist(),
            }
            for rec in trajectory.records
        ],
        "best_iteration": best.iteration,
        "best_iteration_samples": best.samples.tolist(),
        "termination_reason": trajectory.termination_reason,
        "content_hash": trajectory.content_hash(),
    }


def evaluate_persisted(doc: dict) -> EvalReport:
    """Recompute the evaluation report from a persisted trajectory document.

    The ground truth is rebuilt from the recorded problem config and seed; the
    evaluation runs at the document's recorded percentile (samples are stored
    only for the best iteration at that level).
    """
    problem_doc = dict(doc["problem"])
    problem_doc.pop("kind", None)
    problem = SyntheticHighDimConfig(**problem_doc)
    base = RngStream(int(doc["seed"]))
    gt = synthetic_ground_truth(problem, base.child(GROUND_TRUTH_STREAM))
    means = [np.asarray(it["oracle_means"], dtype=float) for it in doc["iterations"]]
    best_index, q_best = best_iteration_index(means, float(doc["eval_percentile"]))
    stored_best = int(doc["best_iteration"])
    if doc["iterations"][best_index]["iteration"] != stored_best:
        raise InvalidArgumentError(
            "stored samples belong to a different best iteration; the document "
            f"was persisted at eval percentile {doc['eval_percentile']}"
        )
    samples = np.asarray(doc["best_iteration_samples"], dtype=float)
    return score_best_iteration(
        samples,
        means[best_index],
        gt,
        q_best,
        float(doc["train_max_label"]),
        stored_best,
    )


# ---------------------------------------------------------------------------
# Seed execution
# ---------------------------------------------------------------------------

def _arm_name(af: bool) -> str:
    return "af" if af else "noaf"


def _method_slug(method: str) -> str:
    return method.lower()


@dataclass
class SeedArtifacts:
    seed: int
    trajectory_paths: dict
    json_paths: dict
    report_path: Path
    reports: dict
    figure_paths: list


def run_seed(config: RunConfig, seed: int, out_dir: Path, figures: bool = True) -> SeedArtifacts:
    """Run the AF and fixed-oracle arms for one seed and persist artifacts."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = RngStream(seed)
    gt = synthetic_ground_truth(config.problem, base.child(GROUND_TRUTH_STREAM))
    p0, data = build_training_distribution(
        gt, config.problem, base.child(TRAINING_DATA_STREAM)
    )
    run_rng = base.child(RUN_STREAM)
    oracle0 = fit_mlp_ensemble_weighted(
        data,
        WeightVector.ones(data.n),
        oracle_training_stream(run_rng),
        config=config.oracle,
        n_members=config.oracle_members,
    )
    y_max = float(np.max(data.labels))
    dataset_sha = _dataset_sha(data)
    config_hash = config.config_hash()
    slug = _method_slug(config.eda.method)

    trajectory_paths: dict = {}
    json_paths: dict = {}
    reports: dict = {}
    trajectories: dict = {}
    for af in (False, True):
        arm = _arm_name(af)
        eda_cfg = replace(config.eda, autofocus=config.autofocus if af else None)
        trajectory = run_eda(eda_cfg, data, oracle0, p0, run_rng)
        trajectories[arm] = trajectory
        reports[arm] = evaluate_run(trajectory, gt, y_max, config.eval_percentile)

        csv_path = out_dir / f"{slug}_{arm}_{seed}.csv"
        trajectory.write_csv(csv_path)
        json_path = out_dir / f"{slug}_{arm}_{seed}.json"
        _dump_json(
            trajectory_json_doc(
                trajectory,
                seed=seed,
                arm=arm,
                method=config.eda.method,
                config_hash=config_hash,
                problem=config.problem,
                eval_percentile=config.eval_percentile,
                dataset_sha=dataset_sha,
                train_max_label=y_max,
            ),
            json_path,
        )
        trajectory_paths[arm] = csv_path
        json_paths[arm] = json_path

    baseline = naive_baseline_pci(p0, gt, data.n, y_max, base.child(BASELINE_STREAM))
    report_doc = {
        "schema_version": SCHEMA_VERSION,
        "seed": seed,
        "method": config.eda.method,
        "config_hash": config_hash,
        "eval_percentile": config.eval_percentile,
        "train_max_label": y_max,
        "baseline_pci": baseline,
        "af": reports["af"].to_jsonable(),
        "noaf": reports["noaf"].to_jsonable(),
        "initial_oracle_fingerprint": trajectories["af"].initial_snapshot["oracle_fingerprint"],
        "dataset_sha": dataset_sha,
    }
    report_path = out_dir / f"report_{seed}.json"
    _dump_json(report_doc, report_path)

    figure_paths = []
    if figures:
        from .plots import trajectory_figure

        fig_path = out_dir / f"trajectory_{slug}_{seed}.png"
        trajectory_figure(trajectories["noaf"], trajectories["af"], gt, fig_path)
        figure_paths.append(fig_path)

    return SeedArtifacts(
        seed=seed,
        trajectory_paths=trajectory_paths,
        json_paths=json_paths,
        report_path=report_path,
        reports=reports,
        figure_paths=figure_paths,
    )


def run_all(config: RunConfig, out_dir, threads: int | None = None, figures: bool = True):
    """Execute every seed (optionally in a thread pool); returns artifacts
    sorted by seed.  Each seed writes a disjoint set of files, so scheduling
    cannot affect outputs."""
    out = Path(out_dir)
    if threads is None or threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [
                pool.submit(run_seed, config, seed, out, figures) for seed in config.seeds
            ]
            results = [f.result() for f in futures]
    else:
        results = [run_seed(config, seed, out, figures) for seed in config.seeds]
    return sorted(results, key=lambda a: a.seed)


# ---------------------------------------------------------------------------
# Paired comparison
# ---------------------------------------------------------------------------

COMPARE_METRICS = ("median_gt", "max_gt", "pci", "spearman_rho", "rmse")


def compare_reports(report_docs: list[dict]) -> tuple[list[dict], dict]:
    """Per-seed AF-minus-fixed differences and their means across seeds."""
    if not report_docs:
        raise InvalidArgumentError("no reports to compare")
    rows = []
    for doc in sorted(report_docs, key=lambda d: d["seed"]):
        row = {"seed": doc["seed"]}
        for metric in COMPARE_METRICS:
            row[metric] = float(doc["af"][metric]) - float(doc["noaf"][metric])
        rows.append(row)
    means = {
        metric: float(np.mean([row[metric] for row in rows])) for metric in COMPARE_METRICS
    }
    return rows, means


def write_compare_csv(rows: list[dict], means: dict, path) -> None:
    header = ["seed"] + [f"diff_{m}" for m in COMPARE_METRICS]
    lines = [",".join(header)]
    for row in rows:
        lines.append(
            ",".join([str(row["seed"])] + [repr(row[m]) for m in COMPARE_METRICS])
        )
    lines.append(",".join(["mean"] + [repr(means[m]) for m in COMPARE_METRICS]))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Toy sweep (the 1-d improvement grid)
# ---------------------------------------------------------------------------

DEFAULT_TOY_SIGMA0 = (1.2, 1.4, 1.6, 1.8, 2.0, 2.2)
DEFAULT_TOY_SIGMA_EPS = (0.0, 0.1, 0.2, 0.38)


@dataclass(frozen=True)
class ToySweepConfig:
    sigma0_values: tuple[float, ...] = DEFAULT_TOY_SIGMA0
    sigma_eps_values: tuple[float, ...] = DEFAULT_TOY_SIGMA_EPS
    trials: int = 50
    n_train: int = 50
    grid_nodes: int = 2001
    scoring: str = "initial"


def parse_toy_sweep_config(doc: dict) -> ToySweepConfig:
    _check_keys(
        doc,
        {"schema_version", "sigma0", "sigma_eps", "trials", "n_train", "grid_nodes", "scoring"},
        "toy sweep config",
    )
    try:
        return ToySweepConfig(
            sigma0_values=tuple(float(v) for v in doc.get("sigma0", DEFAULT_TOY_SIGMA0)),
            sigma_eps_values=tuple(float(v) for v in doc.get("sigma_eps", DEFAULT_TOY_SIGMA_EPS)),
            trials=int(doc.get("trials", 50)),
            n_train=int(doc.get("n_train", 50)),
            grid_nodes=int(doc.get("grid_nodes", 2001)),
            scoring=str(doc.get("scoring", "initial")),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _toy_cell(sweep: ToySweepConfig, cell_index: int, sigma0: float, sigma_eps: float, seed: int):
    from .benchmarks import ToyProblemConfig, toy_improvement

    cfg = ToyProblemConfig(
        sigma0=sigma0,
        sigma_eps=sigma_eps,
        n_train=sweep.n_train,
        grid_nodes=sweep.grid_nodes,
        scoring=sweep.scoring,
    )
    diffs = []
    for trial in range(sweep.trials):
        af, noaf = toy_improvement(cfg, RngStream(seed).child(cell_index, trial))
        diffs.append(af.objective - noaf.objective)
    diffs = np.asarray(diffs)
    return {
        "sigma0": sigma0,
        "sigma_eps": sigma_eps,
        "mean_improvement": float(np.mean(diffs)),
        "std_error": float(np.std(diffs, ddof=1) / math.sqrt(len(diffs))) if len(diffs) > 1 else 0.0,
        "n_trials": len(diffs),
    }


def toy_sweep(sweep: ToySweepConfig, seed: int, threads: int | None = None) -> list[dict]:
    """Paired AF / fixed-oracle trials over the (sigma0, sigma_eps) grid.

    Every (cell, trial) derives its own stream from the base seed, so results
    do not depend on scheduling or on which other cells run.
    """
    cells = [
        (idx, s0, se)
        for idx, (se, s0) in enumerate(
            (se, s0) for se in sweep.sigma_eps_values for s0 in sweep.sigma0_values
        )
    ]
    if threads is None or threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [
                pool.submit(_toy_cell, sweep, idx, s0, se, seed) for idx, s0, se in cells
            ]
            return [f.result() for f in futures]
    return [_toy_cell(sweep, idx, s0, se, seed) for idx, s0, se in cells]


def write_toy_sweep_csv(rows: list[dict], path) -> None:
    lines = ["sigma0,sigma_eps,mean_improvement,std_error,n_trials"]
    for row in rows:
        lines.append(
            ",".join(
                [
                    repr(float(row["sigma0"])),
                    repr(float(row["sigma_eps"])),
                    repr(row["mean_improvement"]),
                    repr(row["std_error"]),
                    str(row["n_trials"]),
                ]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")
