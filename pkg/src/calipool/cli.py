"""Command-line interface: analyze pooled data, run simulation experiments.

Commands
--------
analyze   Estimate the pooled biomarker effect from a subject-level CSV.
simulate  Operating characteristics of the methods on generated data.
fig1      Bias of calibration lines fit among cases+controls vs controls only.
fig2      Method comparison as the calibration subset grows.

Every command writes a machine-readable CSV, a human-readable table, a
rendered figure, and a run manifest into --out.  Exit codes: 0 success,
2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from pathlib import Path

from . import figures, io
from .aggregate import estimate_all
from .data import DesignSpec
from .demo import demo_csv_path
from .errors import CalipoolError, DataError
from .methods import AGGREGATED_METHODS, PoolingMethod
from .simulate import (
    DEFAULT_RR_GRID,
    ScenarioInteraction,
    ScenarioMain,
    calibration_size_experiment,
    controls_only_bias_experiment,
    run_replicates,
)
from .twostage import estimate_twostage

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

METHOD_CHOICES = ("naive", "internalized", "full", "twostage", "all")
FORMAT_CHOICES = ("csv", "table")


class ConfigError(Exception):
    pass


def _selected_methods(name: str) -> tuple[PoolingMethod, ...]:
    if name == "all":
        return AGGREGATED_METHODS + (PoolingMethod.TWO_STAGE,)
    return (PoolingMethod(name),)


def _prepare_out(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _formats(args) -> tuple[str, ...]:
    return tuple(args.format) if args.format else FORMAT_CHOICES


def _scenario_from_args(args) -> ScenarioMain:
    """Build the scenario from an optional config file plus flag overrides."""
    config: dict = {}
    if args.scenario:
        with open(args.scenario, encoding="utf-8") as fh:
            config = json.load(fh)
        if not isinstance(config, dict):
            raise ConfigError("scenario file must hold a JSON object")
    interaction = bool(config.pop("interaction", False)) or args.interaction
    cls = ScenarioInteraction if interaction else ScenarioMain

    if args.rr is not None and "beta_x" in config:
        raise ConfigError("give either --rr or beta_x in the scenario file")
    if "beta_x" not in config:
        config["beta_x"] = math.log(args.rr if args.rr is not None else 1.5)
    if interaction:
        if args.beta_v is not None:
            config["beta_v"] = args.beta_v
        if args.beta_xv is not None:
            config["beta_xv"] = args.beta_xv
    elif args.beta_v is not None or args.beta_xv is not None:
        raise ConfigError("--beta-v/--beta-xv require --interaction")
    for key in ("a", "b"):
        if key in config:
            config[key] = tuple(config[key])
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(config) - known
    if unknown:
        raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
    try:
        return cls(**config)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid scenario: {err}") from None


def _scenario_config(scenario: ScenarioMain) -> dict:
    out = dataclasses.asdict(scenario)
    out["interaction"] = scenario.interaction
    out["a"] = list(out["a"])
    out["b"] = list(out["b"])
    return out


def cmd_analyze(args) -> int:
    out = _prepare_out(args.out)
    formats = _formats(args)
    input_path = args.input if args.input != "demo" else str(demo_csv_path())
    dataset = io.ingest_csv(
        input_path,
        include_interaction=args.interaction,
        exposure_scale=args.exposure_scale,
    )
    methods = _selected_methods(args.method)
    aggregated = {}
    agg_methods = tuple(m for m in methods if m.is_aggregated)
    if agg_methods:
        aggregated = estimate_all(dataset, agg_methods)
    twostage = None
    if PoolingMethod.TWO_STAGE in methods:
        twostage = estimate_twostage(dataset)
    report = io.analysis_report(input_path, dataset.design, aggregated, twostage)
    if not report.estimates:
        raise ConfigError("no methods selected")

    outputs = []
    if "csv" in formats:
        io.write_analysis_csv(out / "estimates.csv", report)
        outputs.append("estimates.csv")
    if "table" in formats:
        io.write_analysis_table(out / "table.txt", report)
        outputs.append("table.txt")
    figures.save_figure(
        figures.coefficient_forest(report.estimates, dataset.design),
        out / "estimates.png",
    )
    outputs.append("estimates.png")
    config = {
        "command": "analyze",
        "input": input_path,
        "method": args.method,
        "interaction": args.interaction,
        "exposure_scale": args.exposure_scale,
        "formats": list(formats),
    }
    io.write_manifest(out / "manifest.json", "analyze", config,
                      outputs + ["manifest.json"], seed=None)
    print(f"analyze: wrote {len(outputs) + 1} files to {out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    out = _prepare_out(args.out)
    formats = _formats(args)
    scenario = _scenario_from_args(args)
    methods = _selected_methods(args.method)
    rr_list = args.rr_list or [math.exp(scenario.beta_x)]

    results = []
    all_records = []
    for rr in rr_list:
        sc = dataclasses.replace(scenario, beta_x=math.log(rr))
        oc = run_replicates(sc, methods, args.replicates, args.seed,
                            n_jobs=args.jobs)
        results.append((rr, oc))
        all_records.append((rr, oc.records))
    report = io.SimulationReport(scenario=scenario, results=tuple(results))

    outputs = []
    if "csv" in formats:
        io.write_simulation_summary_csv(out / "summary.csv", report)
        outputs.append("summary.csv")
        with (out / "records.csv").open("w", newline="", encoding="utf-8") as fh:
            import csv as _csv

            writer = _csv.writer(fh)
            writer.writerow(["rr", "replicate", "method", "coefficient",
                             "true_value", "estimate", "se", "model_se", "covered"])
            for rr, records in all_records:
                for rec in records:
                    writer.writerow([
                        repr(float(rr)), rec.replicate, rec.method, rec.coef,
                        repr(rec.true_value), repr(rec.estimate), repr(rec.se),
                        repr(rec.model_se), "1" if rec.covered else "0",
                    ])
        outputs.append("records.csv")
    if "table" in formats:
        io.write_simulation_table(out / "table.txt", report)
        outputs.append("table.txt")
    if len(results) > 1:
        fig = figures.bias_vs_rr(results)
    else:
        fig = figures.bias_bars(results[0][1], scenario.design().coefficient_names())
    figures.save_figure(fig, out / "bias.png")
    outputs.append("bias.png")

    config = {
        "command": "simulate",
        "scenario": _scenario_config(scenario),
        "rr_list": [float(r) for r in rr_list],
        "method": args.method,
        "replicates": args.replicates,
        "formats": list(formats),
    }
    io.write_manifest(out / "manifest.json", "simulate", config,
                      outputs + ["manifest.json"], seed=args.seed)
    print(f"simulate: wrote {len(outputs) + 1} files to {out}")
    return EXIT_OK


def cmd_fig1(args) -> int:
    out = _prepare_out(args.out)
    formats = _formats(args)
    rr_grid = tuple(args.rr_list or DEFAULT_RR_GRID)
    result = controls_only_bias_experiment(
        a_s=args.a, b_s=args.b, rr_grid=rr_grid,
        n_replicates=args.replicates, seed=args.seed,
        sigma2_e=args.sigma2_e,
    )
    outputs = []
    if "csv" in formats:
        io.write_calibration_bias_csv(out / "calibration_bias.csv", result)
        outputs.append("calibration_bias.csv")
    if "table" in formats:
        lines = [f"{'rr':>6} {'fit_pool':>14} {'param':>6} {'bias%':>10}"]
        for row in result.rows:
            lines.append(f"{row.rr:>6g} {row.fit_pool:>14} {row.param:>6} "
                         f"{row.mean_percent_bias:>10.6g}")
        (out / "table.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        outputs.append("table.txt")
    figures.save_figure(figures.calibration_bias_curves(result),
                        out / "calibration_bias.png")
    outputs.append("calibration_bias.png")
    config = {
        "command": "fig1", "a": args.a, "b": args.b,
        "rr_grid": [float(r) for r in rr_grid],
        "replicates": args.replicates, "sigma2_e": args.sigma2_e,
        "formats": list(formats),
    }
    io.write_manifest(out / "manifest.json", "fig1", config,
                      outputs + ["manifest.json"], seed=args.seed)
    print(f"fig1: wrote {len(outputs) + 1} files to {out}")
    return EXIT_OK


def cmd_fig2(args) -> int:
    out = _prepare_out(args.out)
    formats = _formats(args)
    result = calibration_size_experiment(
        n_cal_grid=tuple(args.ncal),
        rr=args.rr if args.rr is not None else 1.5,
        n_replicates=args.replicates,
        seed=args.seed,
        n_jobs=args.jobs,
    )
    outputs = []
    if "csv" in formats:
        io.write_calibration_size_csv(out / "calibration_size.csv", result)
        outputs.append("calibration_size.csv")
    if "table" in formats:
        lines = [f"{'n_cal':>6} {'method':>14} {'bias%':>10} {'emp_se':>10} {'coverage':>9}"]
        for row in result.rows:
            lines.append(f"{row.n_cal:>6} {row.method:>14} "
                         f"{row.mean_percent_bias:>10.6g} {row.empirical_se:>10.6g} "
                         f"{row.coverage_rate:>9.6g}")
        (out / "table.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        outputs.append("table.txt")
    figures.save_figure(figures.calibration_size_curves(result),
                        out / "calibration_size.png")
    outputs.append("calibration_size.png")
    config = {
        "command": "fig2", "n_cal_grid": list(args.ncal),
        "rr": args.rr if args.rr is not None else 1.5,
        "replicates": args.replicates, "formats": list(formats),
    }
    io.write_manifest(out / "manifest.json", "fig2", config,
                      outputs + ["manifest.json"], seed=args.seed)
    print(f"fig2: wrote {len(outputs) + 1} files to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="calipool",
        description="Calibration and pooling of biomarker data from matched "
                    "nested case-control studies.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_seed):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--format", action="append", choices=FORMAT_CHOICES,
                       help="output formats (repeatable; default: both)")
        if needs_seed:
            p.add_argument("--seed", type=int, required=True,
                           help="RNG seed (required for stochastic commands)")

    p = sub.add_parser("analyze", help="estimate pooled effects from a CSV")
    p.add_argument("--input", required=True,
                   help="subject-level CSV path, or 'demo' for the bundled dataset")
    p.add_argument("--method", choices=METHOD_CHOICES, default="all")
    p.add_argument("--interaction", action="store_true",
                   help="include the exposure-modifier interaction")
    p.add_argument("--exposure-scale", type=float, default=1.0,
                   help="exposure increment for reported relative risks")
    add_common(p, needs_seed=False)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("simulate", help="operating characteristics on generated data")
    p.add_argument("--scenario", help="JSON file of scenario fields")
    p.add_argument("--rr", dest="rr_list", type=float, action="append",
                   help="true exposure relative risk (repeatable)")
    p.add_argument("--interaction", action="store_true")
    p.add_argument("--beta-v", type=float, default=None)
    p.add_argument("--beta-xv", type=float, default=None)
    p.add_argument("--method", choices=METHOD_CHOICES, default="all")
    p.add_argument("--replicates", type=int, default=1000)
    p.add_argument("--jobs", type=int, default=1)
    add_common(p, needs_seed=True)
    p.set_defaults(func=cmd_simulate, rr=None)

    p = sub.add_parser("fig1", help="calibration-line bias: cases+controls vs controls only")
    p.add_argument("--a", type=float, default=3.0, help="true calibration intercept")
    p.add_argument("--b", type=float, default=0.8, help="true calibration slope")
    p.add_argument("--rr", dest="rr_list", type=float, action="append")
    p.add_argument("--sigma2-e", type=float, default=0.4)
    p.add_argument("--replicates", type=int, default=1000)
    add_common(p, needs_seed=True)
    p.set_defaults(func=cmd_fig1)

    p = sub.add_parser("fig2", help="method comparison across calibration sizes")
    p.add_argument("--ncal", type=int, nargs="+", default=[30, 50, 150])
    p.add_argument("--rr", type=float, default=None)
    p.add_argument("--replicates", type=int, default=1000)
    p.add_argument("--jobs", type=int, default=1)
    add_common(p, needs_seed=True)
    p.set_defaults(func=cmd_fig2)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return EXIT_CONFIG if err.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except CalipoolError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
