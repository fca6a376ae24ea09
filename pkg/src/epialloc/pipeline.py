"""The three information settings, policy evaluation and the budget sweep.

Setting 1 plans both stages from the first ``cutoff_1`` days of data.
Setting 2 keeps Setting 1's first stage, then at ``tau`` recalibrates on
``cutoff_2`` days, refits the stage-2 curves and plateau regressions, and
re-optimizes the second-stage beds for the realized budget.  Setting 3 plans
with all data.  Every policy is scored by simulating the system calibrated on
all data (the "true" system) and comparing with the baseline allocation on
common random numbers.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .calibrate import (
    CalibrationResult, CaseSeries, ValidationReport, calibrate, initial_state,
    split_train_validate, validation_report,
)
from .config import RunConfig
from .curves import FitReport, TwoStageCurves, eval_report, fit_two_stage
from .dataio import build_costs, load_baseline, load_case_data, load_metapopulation
from .lasso import (
    KRegression, TrainingSample, fit_k_regression, generate_training_set, mean_cumulative,
)
from .milp import (
    AllocationInstance, AllocationSolution, MilpInfeasible, reoptimize_second_stage,
    solve_allocation, stage2_value,
)
from .model import BedSchedule, CompartmentState, DiseaseParams, Metapopulation
from .simulator import replicate

logger = logging.getLogger(__name__)

SCENARIO_LABELS = ("low", "medium", "high")


class StageError(RuntimeError):
    """A pipeline stage failed; the message names the stage."""


def scenario_set_default():
    """Second-stage budgets (low, medium, high) with probabilities, and the first-stage budget."""
    medium = 470_000.0
    scenarios = ((0.5 * medium, 0.25), (medium, 0.5), (1.5 * medium, 0.25))
    return scenarios, 505_000.0


@dataclass(frozen=True)
class Dataset:
    meta: Metapopulation
    cases: CaseSeries
    baseline: BedSchedule
    o: np.ndarray
    h: np.ndarray
    r: np.ndarray

    @property
    def initial(self) -> CompartmentState:
        return initial_state(self.cases, self.meta)


def load_dataset(cfg: RunConfig) -> Dataset:
    meta = load_metapopulation(cfg.metapopulation, cfg.distances)
    cases = load_case_data(cfg.cases, meta.names, exclude=cfg.exclude)
    if cases.names != meta.names:
        meta = meta.subset(cases.names)
    baseline = load_baseline(cfg.baseline, meta.names, cfg.tau)
    c = cfg.costs
    o, h = build_costs(meta, c.reference_cost, c.reference_population, c.medical_cost,
                       c.fuel_cost, c.depots)
    return Dataset(meta, cases, baseline, o, h, cfg.fairness_rates(meta.P))


@dataclass(frozen=True)
class SettingConfig:
    setting: int
    cutoff: int | None  # days of data used; None means all
    tau: int
    T: int
    budget: float
    scenarios: tuple[tuple[float, float], ...]
    eval_reps: int
    seed: int
    reopt_cutoff: int | None = None

    def __post_init__(self):
        if self.setting not in (1, 2, 3):
            raise ValueError("setting: must be 1, 2 or 3")
        if self.cutoff is not None and self.cutoff > self.T:
            raise ValueError("cutoff: must not exceed T")
        if self.setting == 2 and self.reopt_cutoff is None:
            raise ValueError("setting 2 needs a re-optimization cutoff at tau")

    @classmethod
    def from_run(cls, cfg: RunConfig, setting: int) -> "SettingConfig":
        cutoff = {1: cfg.cutoffs[0], 2: cfg.cutoffs[0], 3: None}[setting]
        return cls(setting, cutoff, cfg.tau, cfg.T, cfg.budget, cfg.scenarios, cfg.eval_reps,
                   cfg.seed, cfg.cutoffs[1] if setting == 2 else None)


@dataclass(frozen=True)
class PlanningModel:
    """Everything fitted from one data window."""

    cutoff: int | None
    calibration: CalibrationResult
    validation: ValidationReport
    mean_C: np.ndarray
    curves: TwoStageCurves
    fit: FitReport
    samples: tuple[TrainingSample, ...]
    kreg1: KRegression
    kreg2: KRegression


def _stage(name):
    def wrap(fn):
        def run(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except (ValueError, FloatingPointError, ArithmeticError, MilpInfeasible) as exc:
                raise StageError(f"{name} failed: {exc}") from exc
        run.__name__ = fn.__name__
        run.__doc__ = fn.__doc__
        return run
    return wrap


STAGES = ("calibrate", "fit-curves", "gen-training", "regress")


def fit_stages(ds: Dataset, cfg: RunConfig, cutoff: int | None, seed: int,
               upto: str = "regress") -> dict:
    """Run the model-fitting stages on one data window, stopping after ``upto``.

    Returns a dict with the outputs produced so far (``calibration``,
    ``validation``, ``mean_C``, ``curves``, ``fit``, ``samples``, ``kreg1``,
    ``kreg2``).  Seeds depend only on ``seed``, so stopping early never
    changes the earlier outputs.
    """
    if upto not in STAGES:
        raise ValueError(f"upto must be one of {STAGES}")
    last = STAGES.index(upto)
    out: dict = {"cutoff": cutoff}
    series = ds.cases if cutoff is None else ds.cases.head(cutoff)
    train, validate = _stage("train/validate split")(split_train_validate)(
        series, cfg.train_fraction)
    logger.info("calibrating on %d days (%d for training)", len(series), len(train))
    out["calibration"] = _stage("calibration")(calibrate)(
        train, ds.meta, cfg.guess(ds.meta.size), beds=ds.baseline,
        tolerance=cfg.calib_tolerance, max_outer=cfg.calib_max_outer,
        ensemble_reps=cfg.calib_ensemble_reps, n_restarts=cfg.calib_restarts, seed=seed)
    params = out["calibration"].params
    out["validation"] = validation_report(params, ds.meta, train, validate, ds.baseline)
    if last < 1:
        return out
    out["mean_C"] = mean_C = mean_cumulative(ds.meta, params, ds.initial, ds.baseline, cfg.T,
                                             cfg.training_reps, seed + 1)
    out["curves"] = curves = _stage("curve fitting")(fit_two_stage)(
        mean_C, cfg.tau, cfg.T, ds.meta.names, seed)
    out["fit"] = eval_report(curves, mean_C)
    if last < 2:
        return out
    samples = _stage("training-set generation")(generate_training_set)(
        ds.meta, params, ds.initial.I, ds.baseline, curves, cfg.n_samples,
        cfg.noise_sd, seed + 2, cfg.training_reps)
    if len(samples) < cfg.folds:
        raise StageError(f"training-set generation failed: only {len(samples)} samples")
    out["samples"] = tuple(samples)
    if last < 3:
        return out
    regress = _stage("plateau regression")(fit_k_regression)
    out["kreg1"] = regress(samples, 1, ds.meta.names, cfg.lasso_grid, cfg.folds, seed + 3)
    out["kreg2"] = regress(samples, 2, ds.meta.names, cfg.lasso_grid, cfg.folds, seed + 4)
    return out


def fit_planning_model(ds: Dataset, cfg: RunConfig, cutoff: int | None, seed: int) -> PlanningModel:
    """Calibrate on a data window, fit the curves, and regress the plateaus."""
    f = fit_stages(ds, cfg, cutoff, seed)
    return PlanningModel(cutoff, f["calibration"], f["validation"], f["mean_C"], f["curves"],
                         f["fit"], f["samples"], f["kreg1"], f["kreg2"])


def window_cutoff(ds: Dataset, cutoff: int | None) -> int | None:
    """Cutoffs covering every observed day collapse to None (all data)."""
    return None if cutoff is not None and cutoff >= len(ds.cases) else cutoff


def model_seed(cfg: RunConfig, cutoff: int | None) -> int:
    return cfg.seed + 10_000 * (0 if cutoff is None else cutoff)


def make_instance(ds: Dataset, model: PlanningModel, budget: float,
                  scenarios: Sequence[tuple[float, float]]) -> AllocationInstance:
    return AllocationInstance(ds.meta.names, ds.o, ds.h, ds.r, budget, tuple(scenarios),
                              model.curves, model.kreg1, model.kreg2, ds.initial.I)


def _log_negative_plateaus(instance: AllocationInstance, sol: AllocationSolution) -> None:
    k1 = instance.kreg1.predict(instance.I0, sol.m)
    if np.any(k1 < 0):
        logger.warning("stage-1 plateau prediction negative for %s",
                       [instance.names[i] for i in np.flatnonzero(k1 < 0)])


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class PolicyEvaluation:
    label: str
    schedules: tuple[BedSchedule, ...]
    probabilities: np.ndarray
    scenario_means: np.ndarray  # (W,) mean total C(T) per scenario
    population_means: np.ndarray  # (W, N)
    baseline_mean: float
    improvement_pct: float
    improvement_se: float
    scenario_se: np.ndarray  # (W,) standard error of each scenario mean
    diffs: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))

    @property
    def expected(self) -> float:
        return float(self.probabilities @ self.scenario_means)

    @property
    def averted(self) -> float:
        return self.baseline_mean - self.expected


def simulate_finals(schedule: BedSchedule, params: DiseaseParams, meta: Metapopulation,
                    initial: CompartmentState, T: int, n_reps: int, seed: int) -> np.ndarray:
    """(n_reps, N) cumulative infections at T, replication r seeded ``seed + r``."""
    return replicate(initial, params, meta, schedule, T, n_reps, seed, keep=False).final_C


def evaluate_allocation(schedules: Sequence[BedSchedule], probabilities, params: DiseaseParams,
                        meta: Metapopulation, initial: CompartmentState, T: int, n_reps: int,
                        seed: int, baseline_finals: np.ndarray, label: str = "policy",
                        common_random_numbers: bool = True) -> PolicyEvaluation:
    """Score one schedule per scenario against precomputed baseline replications.

    With common random numbers each scenario reuses the baseline's seeds, so
    the per-replication differences are paired; the standard error of the
    improvement is that of the probability-weighted paired difference.
    """
    if n_reps < 1:
        raise ValueError("n_reps must be at least 1")
    probs = np.asarray(probabilities, dtype=float)
    base_tot = baseline_finals.sum(axis=1).astype(float)
    if base_tot.size != n_reps:
        raise ValueError("baseline replications do not match n_reps")
    finals = []
    for w, sched in enumerate(schedules):
        s = seed if common_random_numbers else seed + 1_000_003 * (w + 1)
        finals.append(simulate_finals(sched, params, meta, initial, T, n_reps, s))
    tot = np.array([f.sum(axis=1) for f in finals], dtype=float)  # (W, R)
    base_mean = float(base_tot.mean())
    diffs = base_tot - probs @ tot
    if base_mean > 0:
        imp = float(diffs.mean()) / base_mean * 100
        se = float(diffs.std(ddof=1) / math.sqrt(n_reps)) / base_mean * 100 if n_reps > 1 else 0.0
    else:
        imp, se = 0.0, 0.0
    scen_se = tot.std(axis=1, ddof=1) / math.sqrt(n_reps) if n_reps > 1 else np.zeros(len(tot))
    return PolicyEvaluation(label, tuple(schedules), probs, tot.mean(axis=1),
                            np.array([f.mean(axis=0) for f in finals]), base_mean, imp, se,
                            scen_se, diffs)


def pooled_se(*evals: PolicyEvaluation) -> float:
    return math.sqrt(sum(e.improvement_se ** 2 for e in evals))


# ---------------------------------------------------------------------------
# settings


@dataclass(frozen=True)
class SettingResult:
    setting: int
    model: PlanningModel
    solution: AllocationSolution
    schedules: tuple[BedSchedule, ...]
    evaluation: PolicyEvaluation | None
    update: PlanningModel | None = None
    reoptimized: np.ndarray | None = None  # (W, N) second-stage beds after re-optimization
    reopt_values: np.ndarray | None = None  # (W,) re-optimized stage-2 values, updated model
    hedged_values: np.ndarray | None = None  # (W,) hedged plan's values, updated model


class Runner:
    """Shares fitted models, the true system and baseline replications across settings."""

    def __init__(self, cfg: RunConfig, ds: Dataset | None = None):
        self.cfg = cfg
        self.ds = load_dataset(cfg) if ds is None else ds
        self._models: dict[int | None, PlanningModel] = {}
        self._solutions: dict[int, AllocationSolution] = {}
        self._baseline: dict[tuple[int, int], np.ndarray] = {}

    def model(self, cutoff: int | None) -> PlanningModel:
        cutoff = window_cutoff(self.ds, cutoff)
        if cutoff not in self._models:
            self._models[cutoff] = fit_planning_model(self.ds, self.cfg, cutoff,
                                                      model_seed(self.cfg, cutoff))
        return self._models[cutoff]

    @property
    def truth(self) -> DiseaseParams:
        return self.model(None).calibration.params

    def eval_seed(self) -> int:
        return self.cfg.seed + 7_000_000

    def baseline_finals(self, n_reps: int) -> np.ndarray:
        key = (n_reps, self.eval_seed())
        if key not in self._baseline:
            self._baseline[key] = simulate_finals(self.ds.baseline, self.truth, self.ds.meta,
                                                  self.ds.initial, self.cfg.T, n_reps,
                                                  self.eval_seed())
        return self._baseline[key]

    def solve(self, model: PlanningModel, budget: float, scenarios,
              incumbent: AllocationSolution | None = None) -> AllocationSolution:
        instance = make_instance(self.ds, model, budget, scenarios)
        sol = _stage("optimization")(solve_allocation)(
            instance, abs_gap=self.cfg.abs_gap, node_limit=self.cfg.node_limit,
            incumbent=incumbent)
        if sol.status != "optimal":
            logger.warning("MILP stopped with status %s, gap %.6g", sol.status, sol.gap)
        _log_negative_plateaus(instance, sol)
        return sol

    def planned_solution(self, setting: int) -> AllocationSolution:
        if setting not in self._solutions:
            cutoff = self.cfg.cutoffs[0] if setting in (1, 2) else None
            if setting == 2:
                self._solutions[2] = self.planned_solution(1)
            else:
                self._solutions[setting] = self.solve(self.model(cutoff), self.cfg.budget,
                                                      self.cfg.scenarios)
        return self._solutions[setting]

    def evaluate(self, schedules, label, n_reps=None) -> PolicyEvaluation:
        n_reps = self.cfg.eval_reps if n_reps is None else n_reps
        probs = [p for _, p in self.cfg.scenarios]
        return evaluate_allocation(schedules, probs, self.truth, self.ds.meta, self.ds.initial,
                                   self.cfg.T, n_reps, self.eval_seed(),
                                   self.baseline_finals(n_reps), label,
                                   self.cfg.common_random_numbers)

    def run_setting(self, setting: int, evaluate: bool = True) -> SettingResult:
        cfg = self.cfg
        scfg = SettingConfig.from_run(cfg, setting)
        model = self.model(scfg.cutoff)
        sol = self.planned_solution(setting)
        extra = [b for b, _ in cfg.scenarios]
        if setting != 2:
            schedules = tuple(BedSchedule(sol.m, sol.m_tilde[w], cfg.tau)
                              for w in range(len(extra)))
            ev = self.evaluate(schedules, f"setting {setting}") if evaluate else None
            return SettingResult(setting, model, sol, schedules, ev)

        update = self.model(scfg.reopt_cutoff)
        instance = make_instance(self.ds, model, cfg.budget, cfg.scenarios)
        I_tau = self.ds.cases.head(scfg.reopt_cutoff).values[-1]
        reopt, values, hedged = [], [], []
        for w, b in enumerate(extra):
            mt, value = _stage("second-stage re-optimization")(reoptimize_second_stage)(
                instance, sol.y, sol.m, b, curves=update.curves, kreg2=update.kreg2,
                I_tau=I_tau, abs_gap=cfg.abs_gap, node_limit=cfg.node_limit,
                incumbent=sol.m_tilde[w])
            reopt.append(mt)
            values.append(value)
            hedged.append(stage2_value(instance, sol.m, sol.m_tilde[w], update.curves,
                                       update.kreg2, I_tau))
        schedules = tuple(BedSchedule(sol.m, mt, cfg.tau) for mt in reopt)
        ev = self.evaluate(schedules, "setting 2") if evaluate else None
        return SettingResult(2, model, sol, schedules, ev, update, np.array(reopt),
                             np.array(values), np.array(hedged))


# ---------------------------------------------------------------------------
# sensitivity


@dataclass(frozen=True)
class SensitivityRow:
    budget: float
    level: int
    extra_budget: float
    predicted: float
    simulated: float
    simulated_se: float
    status: str
    m: np.ndarray
    m_tilde: np.ndarray
    marginal_predicted: float = math.nan
    marginal_simulated: float = math.nan
    pooled_se: float = math.nan


def sensitivity_sweep(runner: Runner, budgets: Sequence[float], n_reps: int | None = None,
                      model: PlanningModel | None = None) -> list[SensitivityRow]:
    """Optimal plan and simulated C(T) for every (first-stage budget, second-stage level).

    Each level is solved as a single-scenario program.  Budgets are solved in
    increasing order with the previous plan as incumbent; a larger budget keeps
    that plan feasible, so predicted objectives cannot increase.
    """
    cfg = runner.cfg
    if any(b <= 0 for b in budgets):
        raise ValueError("budgets must be positive")
    n_reps = cfg.sensitivity_reps if n_reps is None else n_reps
    model = runner.model(None) if model is None else model
    ordered = sorted(set(float(b) for b in budgets))
    base = runner.baseline_finals(n_reps)
    solved: dict[tuple[float, int], SensitivityRow] = {}
    for level, (extra, _) in enumerate(cfg.scenarios):
        prev_sol = None
        prev_row = None
        for b in ordered:
            try:
                sol = runner.solve(model, b, ((extra, 1.0),), incumbent=prev_sol)
            except StageError as exc:
                logger.warning("budget %s level %d flagged: %s", b, level, exc)
                solved[(b, level)] = SensitivityRow(b, level, extra, math.nan, math.nan,
                                                    math.nan, "infeasible",
                                                    np.zeros(0, np.int64), np.zeros(0, np.int64))
                continue
            sched = BedSchedule(sol.m, sol.m_tilde[0], cfg.tau)
            ev = evaluate_allocation([sched], [1.0], runner.truth, runner.ds.meta,
                                     runner.ds.initial, cfg.T, n_reps, runner.eval_seed(), base,
                                     common_random_numbers=cfg.common_random_numbers)
            sim = float(ev.scenario_means[0])
            se = float(ev.scenario_se[0])
            row = SensitivityRow(b, level, extra, sol.objective, sim, se, sol.status,
                                 sol.m, sol.m_tilde[0])
            if prev_row is not None:
                row = SensitivityRow(**{**row.__dict__,
                                        "marginal_predicted": prev_row.predicted - row.predicted,
                                        "marginal_simulated": prev_row.simulated - row.simulated,
                                        "pooled_se": math.hypot(prev_row.simulated_se, se)})
            solved[(b, level)] = row
            prev_sol, prev_row = sol, row
    return [solved[(float(b), level)] for level in range(len(cfg.scenarios)) for b in budgets]
