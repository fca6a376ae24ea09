"""Report files: per-window model artifacts, per-setting results, summary tables, figures.

Every number is written with ``repr`` and no file carries a timestamp, so a
rerun with the same inputs and seed reproduces the directory byte for byte.
"""

from __future__ import annotations

import csv
import logging
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from . import plots
from .calibrate import write_validation_report
from .curves import write_curves_csv
from .lasso import write_regression_csv, write_training_csv
from .milp import write_instance, write_solution
from .pipeline import (
    Dataset, PlanningModel, Runner, SensitivityRow, SettingResult, make_instance,
    sensitivity_sweep,
)

logger = logging.getLogger(__name__)

FORMATS = ("csv", "svg", "both")


def window_label(cutoff: int | None) -> str:
    return "all" if cutoff is None else f"day{cutoff}"


def scenario_labels(n: int) -> tuple[str, ...]:
    return ("low", "medium", "high") if n == 3 else tuple(f"s{w}" for w in range(n))


def _r(v) -> str:
    return repr(float(v))


def _write_rows(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_r(v) if isinstance(v, (float, np.floating)) else v for v in row])


# ---------------------------------------------------------------------------
# per window and per setting


def write_model(out: Path, model: PlanningModel, names: Sequence[str]) -> None:
    label = window_label(model.cutoff)
    write_validation_report(out / f"calibration_{label}.txt", out / f"calibration_{label}.csv",
                            model.validation, model.calibration)
    write_curves_csv(out / f"curves_{label}.csv", model.curves)
    write_training_csv(out / f"training_{label}.csv", model.samples, names)
    write_regression_csv(out / f"regression_{label}.csv", [model.kreg1, model.kreg2])


def write_setting(out: Path, res: SettingResult, ds: Dataset, budget: float,
                  scenarios) -> None:
    k = res.setting
    instance = make_instance(ds, res.model, budget, scenarios)
    write_instance(out / f"instance_setting{k}.txt", instance)
    write_solution(out / f"solution_setting{k}.txt", out / f"solution_setting{k}.csv",
                   instance, res.solution)
    labels = scenario_labels(len(scenarios))
    if res.reoptimized is not None:
        rows = []
        for w, (b, p) in enumerate(scenarios):
            rows.append([labels[w], float(b), float(p), float(res.hedged_values[w]),
                         float(res.reopt_values[w]),
                         float(res.hedged_values[w] - res.reopt_values[w]),
                         " ".join(str(int(v)) for v in res.reoptimized[w])])
        _write_rows(out / "setting2_reoptimization.csv",
                    ["scenario", "extra_budget", "probability", "hedged_value", "reoptimized_value",
                     "improvement", "m_tilde"], rows)
    ev = res.evaluation
    if ev is None:
        return
    rows = [[labels[w], float(scenarios[w][0]), float(ev.probabilities[w]),
             float(ev.scenario_means[w]), float(ev.scenario_se[w])]
            for w in range(len(scenarios))]
    rows.append(["expected", math.nan, 1.0, ev.expected, math.nan])
    rows.append(["baseline", math.nan, math.nan, ev.baseline_mean, math.nan])
    _write_rows(out / f"evaluation_setting{k}.csv",
                ["scenario", "extra_budget", "probability", "mean_C_T", "se"], rows)


# ---------------------------------------------------------------------------
# summary tables


def table_calibration(out: Path, models: Sequence[PlanningModel], names) -> None:
    rows, per = [], []
    for mdl in models:
        v = mdl.validation
        val = v.validation
        rows.append([window_label(mdl.cutoff), mdl.calibration.outer_iterations,
                     v.train.national, math.nan if val is None else val.national,
                     v.train.unweighted, math.nan if val is None else val.unweighted,
                     v.train.population_weighted,
                     math.nan if val is None else val.population_weighted])
        per.append((v.train.per_population,
                    np.full(len(names), np.nan) if val is None else val.per_population))
    _write_rows(out / "calibration_summary.csv",
                ["window", "outer_iterations", "calibration_national_pct",
                 "validation_national_pct", "calibration_unweighted_pct",
                 "validation_unweighted_pct", "calibration_weighted_pct",
                 "validation_weighted_pct"], rows)
    header = ["population"]
    for mdl in models:
        lab = window_label(mdl.cutoff)
        header += [f"{lab}_calibration_pct", f"{lab}_validation_pct"]
    _write_rows(out / "calibration_by_population.csv", header,
                [[n, *(float(x) for tr, va in per for x in (tr[i], va[i]))]
                 for i, n in enumerate(names)])


def table_curve_fit(out: Path, models: Sequence[PlanningModel], names) -> None:
    _write_rows(out / "curve_fit_summary.csv", ["window", "pct_tau", "pct_T"],
                [[window_label(m.cutoff), m.fit.pooled_tau, m.fit.pooled_T] for m in models])
    header = ["population"]
    for m in models:
        header += [f"{window_label(m.cutoff)}_pct_tau", f"{window_label(m.cutoff)}_pct_T"]
    _write_rows(out / "curve_fit_by_population.csv", header,
                [[n, *(float(x) for m in models for x in (m.fit.pct_tau[i], m.fit.pct_T[i]))]
                 for i, n in enumerate(names)])


def table_r2(out: Path, models: Sequence[PlanningModel], names) -> None:
    _write_rows(out / "r2_summary.csv", ["window", "mean_r2_stage1", "mean_r2_stage2"],
                [[window_label(m.cutoff), float(np.nanmean(m.kreg1.r2)),
                  float(np.nanmean(m.kreg2.r2))] for m in models])
    header = ["population"]
    for m in models:
        header += [f"{window_label(m.cutoff)}_r2_stage1", f"{window_label(m.cutoff)}_r2_stage2"]
    _write_rows(out / "r2_by_population.csv", header,
                [[n, *(float(x) for m in models for x in (m.kreg1.r2[i], m.kreg2.r2[i]))]
                 for i, n in enumerate(names)])


def table_improvement(out: Path, results: Sequence[SettingResult]) -> None:
    rows = []
    for res in results:
        ev = res.evaluation
        rows.append([res.setting, ev.baseline_mean, ev.expected, ev.averted,
                     ev.improvement_pct, ev.improvement_se, res.solution.objective,
                     res.solution.bound, res.solution.status])
    _write_rows(out / "improvement.csv",
                ["setting", "baseline_mean_C_T", "expected_mean_C_T", "averted",
                 "improvement_pct", "improvement_se", "predicted_objective", "milp_bound",
                 "milp_status"], rows)
    by = {r.setting: r.evaluation for r in results}
    pairs = [(a, b) for a, b in ((1, 2), (2, 3), (1, 3)) if a in by and b in by]
    if pairs:
        rows = []
        for a, b in pairs:
            d = by[b].diffs - by[a].diffs
            diff = by[b].improvement_pct - by[a].improvement_pct
            # independent-sample pooled error, and the paired error under common seeds
            pooled = math.hypot(by[a].improvement_se, by[b].improvement_se)
            paired = float(d.std(ddof=1) / math.sqrt(d.size)) / by[a].baseline_mean * 100 \
                if d.size > 1 and by[a].baseline_mean > 0 else 0.0
            rows.append([f"{a}<={b}", diff, pooled, paired,
                         "yes" if diff >= -3 * pooled else "no"])
        _write_rows(out / "setting_ordering.csv",
                    ["comparison", "improvement_difference_pct", "pooled_se", "paired_se",
                     "holds_within_3se"], rows)


def figure_allocations(out: Path, results: Sequence[SettingResult], names, scenarios,
                       svg: bool, csv_out: bool = True) -> None:
    labels = scenario_labels(len(scenarios))
    rows = []
    for res in results:
        for w in range(len(scenarios)):
            for i, n in enumerate(names):
                rows.append([res.setting, labels[w], n, int(res.schedules[w].m[i]),
                             int(res.schedules[w].m_tilde[i])])
    if csv_out:
        _write_rows(out / "allocations.csv",
                    ["setting", "scenario", "population", "m", "m_tilde"], rows)
    if svg:
        w = _main_scenario(scenarios)
        values = [[[int(v) for v in r.schedules[w].m], [int(v) for v in r.schedules[w].m_tilde]]
                  for r in results]
        plots.stacked_bars(out / "allocations.svg",
                           f"Bed allocation by setting ({labels[w]} second-stage budget)",
                           list(names), [f"S{r.setting}" for r in results],
                           ["stage 1", "stage 2"], values)


def _main_scenario(scenarios) -> int:
    probs = [p for _, p in scenarios]
    return int(np.argmax(probs))


def figure_vs_baseline(out: Path, res: SettingResult, ds: Dataset, baseline_finals,
                       scenarios, svg: bool, csv_out: bool = True) -> None:
    labels = scenario_labels(len(scenarios))
    ev = res.evaluation
    base_pop = baseline_finals.mean(axis=0)
    pol_pop = ev.probabilities @ ev.population_means
    rows = []
    for i, n in enumerate(ds.meta.names):
        pct = (pol_pop[i] - base_pop[i]) / base_pop[i] * 100 if base_pop[i] > 0 else math.nan
        rows.append([n, int(ds.baseline.m[i]), int(ds.baseline.m_tilde[i]),
                     int(res.schedules[0].m[i]),
                     *(int(res.schedules[w].m_tilde[i]) for w in range(len(scenarios))),
                     float(base_pop[i]), float(pol_pop[i]), float(pct)])
    if csv_out:
        _write_rows(out / "vs_baseline.csv",
                    ["population", "baseline_m", "baseline_m_tilde", f"setting{res.setting}_m",
                     *(f"setting{res.setting}_m_tilde_{l}" for l in labels),
                     "baseline_mean_C_T", f"setting{res.setting}_mean_C_T", "pct_change"], rows)
    if svg:
        w = _main_scenario(scenarios)
        values = [[[int(v) for v in ds.baseline.m], [int(v) for v in ds.baseline.m_tilde]],
                  [[int(v) for v in res.schedules[w].m],
                   [int(v) for v in res.schedules[w].m_tilde]]]
        plots.stacked_bars(out / "vs_baseline.svg",
                           f"Setting {res.setting} vs baseline ({labels[w]} second-stage budget)",
                           list(ds.meta.names), ["baseline", f"S{res.setting}"],
                           ["stage 1", "stage 2"], values)


def figure_sensitivity(out: Path, rows: Sequence[SensitivityRow], scenarios, svg: bool,
                       csv_out: bool = True) -> None:
    labels = scenario_labels(len(scenarios))
    if csv_out:
        _write_rows(out / "sensitivity.csv",
                    ["scenario", "extra_budget", "first_stage_budget", "predicted_C_T",
                     "simulated_C_T", "simulated_se", "marginal_predicted_decrease",
                     "marginal_simulated_decrease", "marginal_pooled_se", "milp_status",
                     "m", "m_tilde"],
                    [[labels[r.level], r.extra_budget, r.budget, r.predicted, r.simulated,
                      r.simulated_se, r.marginal_predicted, r.marginal_simulated, r.pooled_se,
                      r.status, " ".join(str(int(v)) for v in r.m),
                      " ".join(str(int(v)) for v in r.m_tilde)] for r in rows])
    if svg:
        budgets = sorted({r.budget for r in rows})
        sim, pred, err = {}, {}, {}
        for w, lab in enumerate(labels):
            by = {r.budget: r for r in rows if r.level == w}
            sim[f"{lab} simulated"] = [by[b].simulated for b in budgets]
            err[f"{lab} simulated"] = [by[b].simulated_se for b in budgets]
            pred[f"{lab} predicted"] = [by[b].predicted for b in budgets]
        plots.lines(out / "sensitivity.svg", "Cumulative infected at T vs first-stage budget",
                    budgets, {**sim, **pred}, "first-stage budget", "C(T)", err)


def solver_table(out: Path, entries) -> None:
    _write_rows(out / "solver_status.csv",
                ["problem", "status", "nodes", "objective", "bound", "gap"],
                [[name, s.status, s.nodes, s.objective, s.bound, s.gap] for name, s in entries])


# ---------------------------------------------------------------------------


def run_all(runner: Runner, out, fmt: str = "csv", settings: Sequence[int] = (1, 2, 3),
            sensitivity: bool = True) -> dict:
    """Run every setting (and the budget sweep) and write the full report directory."""
    if fmt not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg, ds = runner.cfg, runner.ds
    svg = fmt in ("svg", "both")
    csv_out = fmt in ("csv", "both")
    results = [runner.run_setting(k) for k in sorted(settings)]
    cutoffs: list[int | None] = []
    for res in results:
        for mdl in (res.model, res.update):
            if mdl is not None and mdl.cutoff not in cutoffs:
                cutoffs.append(mdl.cutoff)
    models = sorted((runner.model(c) for c in cutoffs),
                    key=lambda m: math.inf if m.cutoff is None else m.cutoff)
    names = ds.meta.names
    for mdl in models:
        write_model(out, mdl, names)
    table_calibration(out, models, names)
    table_curve_fit(out, models, names)
    table_r2(out, models, names)
    solver = []
    for res in results:
        write_setting(out, res, ds, cfg.budget, cfg.scenarios)
        if res.setting != 2:
            solver.append((f"setting{res.setting}", res.solution))
    table_improvement(out, results)
    figure_allocations(out, results, names, cfg.scenarios, svg, csv_out)
    final = [r for r in results if r.setting == 3]
    if final:
        figure_vs_baseline(out, final[0], ds, runner.baseline_finals(cfg.eval_reps),
                           cfg.scenarios, svg, csv_out)
    rows = []
    if sensitivity:
        rows = sensitivity_sweep(runner, cfg.sensitivity_budgets)
        figure_sensitivity(out, rows, cfg.scenarios, svg, csv_out)
    solver_table(out, solver)
    return {"results": results, "models": models, "sensitivity": rows}
