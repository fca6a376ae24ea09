"""Command-line entry point: ``epialloc <subcommand> --config PATH [options]``.

Exit codes: 0 success, 1 validation or usage error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import report
from .calibrate import write_validation_report
from .config import ConfigError, RunConfig, load_config
from .curves import write_curves_csv
from .dataio import DataError
from .lasso import write_regression_csv, write_training_csv
from .milp import MilpInfeasible, write_instance, write_solution
from .pipeline import (
    Runner, SettingConfig, StageError, fit_stages, make_instance, model_seed, sensitivity_sweep,
    window_cutoff,
)
from .simulator import replicate, write_trajectory_csv

logger = logging.getLogger("epialloc")

COMMANDS = ("simulate", "calibrate", "fit-curves", "gen-training", "regress", "optimize",
            "reoptimize", "run-setting", "sensitivity", "report")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _u64(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must lie in [0, 2^64)")
    return v


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", required=True, type=Path, help="run configuration (INI)")
    common.add_argument("--seed", type=_u64, help="master seed (overrides [run] seed)")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--setting", type=int, choices=(1, 2, 3), default=3,
                        help="information setting (default 3)")
    common.add_argument("--reps", type=_positive,
                        help="replications (simulate: trajectories; otherwise evaluation reps)")
    common.add_argument("--format", choices=report.FORMATS, default="csv",
                        help="figure output format")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")
    parser = _Parser(prog="epialloc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    helps = {
        "simulate": "stochastic trajectories with the configured parameters and baseline beds",
        "calibrate": "calibrate the model on the setting's data window",
        "fit-curves": "calibrate, then fit the two-stage logistic curves",
        "gen-training": "as fit-curves, then generate the plateau training set",
        "regress": "as gen-training, then fit the lasso plateau regressions",
        "optimize": "solve the two-stage allocation program for the setting",
        "reoptimize": "setting 2: re-optimize second-stage beds with updated data at tau",
        "run-setting": "plan and evaluate one setting against the baseline",
        "sensitivity": "first-stage budget sweep (uses all data)",
        "report": "all settings, summary tables, figures and the budget sweep",
    }
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common], help=helps[name], description=helps[name])
        if name == "reoptimize":
            sp.set_defaults(setting=2)
    return parser


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.reps is not None and args.command != "simulate":
        changes["eval_reps"] = args.reps
        changes["sensitivity_reps"] = args.reps
    return dataclasses.replace(cfg, **changes) if changes else cfg


def _window(runner: Runner, setting: int) -> int | None:
    scfg = SettingConfig.from_run(runner.cfg, setting)
    return window_cutoff(runner.ds, scfg.cutoff)


def cmd_simulate(runner: Runner, args, out: Path) -> None:
    cfg, ds = runner.cfg, runner.ds
    params = cfg.guess(ds.meta.size)
    reps = args.reps or 1
    ens = replicate(ds.initial, params, ds.meta, ds.baseline, cfg.T, reps, cfg.seed)
    width = len(str(reps - 1))
    for r, tr in enumerate(ens.replications):
        write_trajectory_csv(out / f"trajectory_{r:0{width}d}.csv", tr, ds.meta)
    mean = ens.mean_C
    report._write_rows(out / "mean_cumulative.csv", ["t", *ds.meta.names],
                       [[int(ds.initial.t + k), *(float(v) for v in mean[k])]
                        for k in range(mean.shape[0])])
    logger.info("wrote %d trajectories to %s", reps, out)


def cmd_fit(runner: Runner, args, out: Path) -> None:
    cfg, ds = runner.cfg, runner.ds
    cutoff = _window(runner, args.setting)
    label = report.window_label(cutoff)
    f = fit_stages(ds, cfg, cutoff, model_seed(cfg, cutoff), upto=args.command)
    write_validation_report(out / f"calibration_{label}.txt", out / f"calibration_{label}.csv",
                            f["validation"], f["calibration"])
    if "curves" in f:
        write_curves_csv(out / f"curves_{label}.csv", f["curves"])
        fit = f["fit"]
        report._write_rows(out / f"curve_fit_{label}.csv", ["population", "pct_tau", "pct_T"],
                           [[n, float(fit.pct_tau[i]), float(fit.pct_T[i])]
                            for i, n in enumerate(ds.meta.names)]
                           + [["POOLED", fit.pooled_tau, fit.pooled_T]])
    if "samples" in f:
        write_training_csv(out / f"training_{label}.csv", f["samples"], ds.meta.names)
    if "kreg1" in f:
        write_regression_csv(out / f"regression_{label}.csv", [f["kreg1"], f["kreg2"]])


def cmd_optimize(runner: Runner, args, out: Path) -> None:
    cfg = runner.cfg
    setting = 1 if args.setting == 2 else args.setting
    model = runner.model(_window(runner, setting))
    sol = runner.planned_solution(setting)
    instance = make_instance(runner.ds, model, cfg.budget, cfg.scenarios)
    report.write_model(out, model, runner.ds.meta.names)
    write_instance(out / f"instance_setting{args.setting}.txt", instance)
    write_solution(out / f"solution_setting{args.setting}.txt",
                   out / f"solution_setting{args.setting}.csv", instance, sol)


def cmd_reoptimize(runner: Runner, args, out: Path) -> None:
    if args.setting != 2:
        raise UsageError("reoptimize applies to --setting 2 only")
    res = runner.run_setting(2, evaluate=False)
    for mdl in (res.model, res.update):
        report.write_model(out, mdl, runner.ds.meta.names)
    report.write_setting(out, res, runner.ds, runner.cfg.budget, runner.cfg.scenarios)


def cmd_run_setting(runner: Runner, args, out: Path) -> None:
    cfg, ds = runner.cfg, runner.ds
    res = runner.run_setting(args.setting)
    svg = args.format in ("svg", "both")
    csv_out = args.format in ("csv", "both")
    for mdl in (res.model, res.update):
        if mdl is not None:
            report.write_model(out, mdl, ds.meta.names)
    report.write_setting(out, res, ds, cfg.budget, cfg.scenarios)
    report.table_improvement(out, [res])
    report.figure_allocations(out, [res], ds.meta.names, cfg.scenarios, svg, csv_out)
    report.figure_vs_baseline(out, res, ds, runner.baseline_finals(cfg.eval_reps),
                              cfg.scenarios, svg, csv_out)
    ev = res.evaluation
    print(f"setting {res.setting}: improvement {ev.improvement_pct:.3f}% "
          f"(se {ev.improvement_se:.3f}), averted {ev.averted:.1f} of {ev.baseline_mean:.1f}")


def cmd_sensitivity(runner: Runner, args, out: Path) -> None:
    rows = sensitivity_sweep(runner, runner.cfg.sensitivity_budgets)
    report.figure_sensitivity(out, rows, runner.cfg.scenarios,
                              args.format in ("svg", "both"), args.format in ("csv", "both"))


def cmd_report(runner: Runner, args, out: Path) -> None:
    res = report.run_all(runner, out, args.format)
    for r in res["results"]:
        ev = r.evaluation
        print(f"setting {r.setting}: improvement {ev.improvement_pct:.3f}% "
              f"(se {ev.improvement_se:.3f})")


HANDLERS = {
    "simulate": cmd_simulate, "calibrate": cmd_fit, "fit-curves": cmd_fit,
    "gen-training": cmd_fit, "regress": cmd_fit, "optimize": cmd_optimize,
    "reoptimize": cmd_reoptimize, "run-setting": cmd_run_setting,
    "sensitivity": cmd_sensitivity, "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("epialloc: error: a subcommand is required")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        runner = Runner(cfg)
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](runner, args, out)
    except (StageError, MilpInfeasible, FloatingPointError, ArithmeticError,
            RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, DataError, UsageError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
