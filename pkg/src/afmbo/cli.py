"""Command-line runner.

Subcommands:

* ``run``        -- execute a run config (paired autofocused / fixed-oracle
                    arms per seed) and write trajectories, reports, figures.
* ``toy-sweep``  -- the 1-d improvement grid over (sigma0, sigma_eps).
* ``evaluate``   -- recompute an evaluation report from a persisted
                    trajectory JSON.
* ``compare``    -- paired per-seed metric differences across report files.

Exit codes: 0 success, 1 configuration/usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .runner import (
    ConfigError,
    compare_reports,
    evaluate_persisted,
    load_run_config,
    parse_run_config,
    parse_toy_sweep_config,
    run_all,
    toy_sweep,
    write_compare_csv,
    write_toy_sweep_csv,
)


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on usage errors, per the CLI contract."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="afmbo", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, needs_config=False):
        p.add_argument("--config", type=Path, required=needs_config, help="config JSON path")
        p.add_argument("--seed", type=int, help="override the seed(s)")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        p.add_argument("--threads", type=int, default=None, help="worker threads")
        p.add_argument("--no-figures", action="store_true", help="skip figure rendering")

    run_p = sub.add_parser("run", help="run paired arms for every seed of a run config")
    common(run_p, needs_config=True)

    toy_p = sub.add_parser("toy-sweep", help="1-d improvement grid with paired trials")
    common(toy_p)

    eval_p = sub.add_parser("evaluate", help="recompute a report from a trajectory JSON")
    eval_p.add_argument("--trajectory", type=Path, required=True, help="persisted run JSON")
    eval_p.add_argument("--out", type=Path, default=None, help="write the report here")

    cmp_p = sub.add_parser("compare", help="paired AF-minus-fixed differences per metric")
    cmp_p.add_argument("--reports", type=Path, required=True, help="directory of report_*.json")
    cmp_p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    cmp_p.add_argument("--no-figures", action="store_true", help="skip figure rendering")
    return parser


def _cmd_run(args) -> int:
    config = load_run_config(args.config)
    if args.seed is not None:
        doc = dict(config.raw)
        doc["seeds"] = [args.seed]
        config = parse_run_config(doc)
    artifacts = run_all(config, args.out, threads=args.threads, figures=not args.no_figures)
    for art in artifacts:
        af = art.reports["af"]
        noaf = art.reports["noaf"]
        print(
            f"seed {art.seed}: median_gt fixed {noaf.median_gt:.2f} -> "
            f"autofocused {af.median_gt:.2f} (report: {art.report_path})"
        )
    return 0


def _cmd_toy_sweep(args) -> int:
    doc = {}
    if args.config is not None:
        with open(args.config) as fh:
            doc = json.load(fh)
    sweep = parse_toy_sweep_config(doc)
    seed = args.seed if args.seed is not None else 0
    rows = toy_sweep(sweep, seed, threads=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "toy_improvement.csv"
    write_toy_sweep_csv(rows, csv_path)
    print(f"wrote {csv_path}")
    if not args.no_figures:
        from .plots import toy_improvement_heatmap

        fig_path = toy_improvement_heatmap(rows, out / "toy_improvement_heatmap.png")
        print(f"wrote {fig_path}")
    return 0


def _cmd_evaluate(args) -> int:
    with open(args.trajectory) as fh:
        doc = json.load(fh)
    report = evaluate_persisted(doc)
    payload = {
        "schema_version": doc["schema_version"],
        "seed": doc["seed"],
        "arm": doc["arm"],
        "method": doc["method"],
        "config_hash": doc["config_hash"],
        "report": report.to_jsonable(),
    }
    text = json.dumps(payload, sort_keys=True, indent=1)
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text + "\n")
        print(f"wrote {args.out}")
    else:
        print(text)
    return 0


def _cmd_compare(args) -> int:
    report_paths = sorted(Path(args.reports).glob("report_*.json"))
    if not report_paths:
        raise ConfigError(f"no report_*.json files under {args.reports}")
    docs = [json.loads(p.read_text()) for p in report_paths]
    rows, means = compare_reports(docs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "compare.csv"
    write_compare_csv(rows, means, csv_path)
    print(f"wrote {csv_path}")
    for metric, value in means.items():
        print(f"mean diff {metric}: {value:+.4f}")
    if not args.no_figures:
        from .plots import compare_figure

        fig_path = compare_figure(rows, means, out / "compare.png")
        print(f"wrote {fig_path}")
    return 0


_COMMANDS = {
    "run": _cmd_run,
    "toy-sweep": _cmd_toy_sweep,
    "evaluate": _cmd_evaluate,
    "compare": _cmd_compare,
}


def cli_main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, json.JSONDecodeError) as exc:
        print(f"afmbo: config error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"afmbo: config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"afmbo: error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
