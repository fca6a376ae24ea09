"""Run configuration: an INI file with one section per concern.

Relative file paths are resolved against the config file's directory.  Every
validation error names the offending ``section.key``.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import DiseaseParams

DEFAULT_BUDGETS = (250_000.0, 375_000.0, 505_000.0, 625_000.0)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CostConfig:
    reference_cost: float
    reference_population: float
    medical_cost: float
    fuel_cost: float
    depots: tuple[str, ...]


@dataclass(frozen=True)
class RunConfig:
    path: Path
    metapopulation: Path
    distances: Path
    cases: Path
    baseline: Path
    exclude: tuple[str, ...]
    costs: CostConfig
    disease: dict
    tau: int
    T: int
    budget: float
    scenarios: tuple[tuple[float, float], ...]
    fairness: str | tuple[float, ...]
    fairness_multiplier: float
    sensitivity_budgets: tuple[float, ...]
    cutoffs: tuple[int, int]
    train_fraction: float
    calib_tolerance: float
    calib_max_outer: int
    calib_ensemble_reps: int
    calib_restarts: int
    n_samples: int
    noise_sd: float
    training_reps: int
    lasso_grid: tuple[float, ...]
    folds: int
    eval_reps: int
    sensitivity_reps: int
    common_random_numbers: bool
    node_limit: int
    abs_gap: float
    seed: int

    def guess(self, n: int) -> DiseaseParams:
        """Initial guess for calibration; also carries the fixed clinical parameters."""
        d = dict(self.disease)
        for key in ("xi_I", "xi_H", "xi_F", "psi"):
            v = np.asarray(d[key], dtype=float)
            if v.ndim == 0:
                v = np.full(n, float(v))
            elif v.shape != (n,):
                raise ConfigError(f"disease.{key}: expected 1 or {n} values, got {v.size}")
            d[key] = v
        try:
            return DiseaseParams(**d)
        except ValueError as exc:
            raise ConfigError(f"disease: {exc}") from exc

    def fairness_rates(self, P) -> np.ndarray:
        P = np.asarray(P, dtype=float)
        if self.fairness == "population":
            r = self.fairness_multiplier * P / P.sum()
        else:
            r = np.asarray(self.fairness, dtype=float)
            if r.shape != P.shape:
                raise ConfigError(f"budget.fairness: expected {P.size} values")
        return np.minimum(r, 1.0)


class _Section:
    def __init__(self, parser: configparser.ConfigParser, name: str):
        if not parser.has_section(name):
            raise ConfigError(f"missing section [{name}]")
        self.name = name
        self.sec = parser[name]

    def _raw(self, key, default):
        if key in self.sec:
            return self.sec[key].strip()
        if default is None:
            raise ConfigError(f"{self.name}.{key}: required")
        return default

    def float(self, key, default=None, lo=-math.inf, hi=math.inf, lo_open=False):
        raw = self._raw(key, default)
        try:
            v = float(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"{self.name}.{key}: {raw!r} is not a number") from None
        if not math.isfinite(v) or v < lo or v > hi or (lo_open and v == lo):
            bound = f"({lo}, {hi}]" if lo_open else f"[{lo}, {hi}]"
            raise ConfigError(f"{self.name}.{key}: {v} outside {bound}")
        return v

    def int(self, key, default=None, lo=-math.inf, hi=math.inf):
        raw = self._raw(key, default)
        try:
            v = int(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"{self.name}.{key}: {raw!r} is not an integer") from None
        if v < lo or v > hi:
            raise ConfigError(f"{self.name}.{key}: {v} outside [{lo}, {hi}]")
        return v

    def bool(self, key, default=None):
        raw = str(self._raw(key, default)).lower()
        if raw in ("1", "true", "yes", "on"):
            return True
        if raw in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{self.name}.{key}: {raw!r} is not a boolean")

    def list(self, key, default=None):
        raw = self._raw(key, default)
        return tuple(x.strip() for x in raw.replace("\n", ",").split(",") if x.strip())

    def floats(self, key, default=None):
        out = []
        for x in self.list(key, default):
            try:
                out.append(float(x))
            except ValueError:
                raise ConfigError(f"{self.name}.{key}: {x!r} is not a number") from None
        return tuple(out)

    def path(self, key, base: Path, must_exist=True):
        p = Path(self._raw(key, None))
        p = p if p.is_absolute() else base / p
        if must_exist and not p.is_file():
            raise ConfigError(f"{self.name}.{key}: file {p} does not exist")
        return p


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    base = path.parent

    data = _Section(parser, "data")
    costs = _Section(parser, "costs")
    dis = _Section(parser, "disease")
    hor = _Section(parser, "horizon")
    bud = _Section(parser, "budget")
    st = _Section(parser, "settings")
    cal = _Section(parser, "calibration")
    tr = _Section(parser, "training")
    ev = _Section(parser, "evaluation")
    sol = _Section(parser, "solver")
    run = _Section(parser, "run")

    disease = {}
    for key in ("alpha", "theta", "delta", "gamma_H", "gamma_DH", "gamma_F", "gamma_I",
                "gamma_IH"):
        disease[key] = dis.float(key, lo=0.0)
    for key in ("xi_I", "xi_H", "xi_F", "psi"):
        vals = dis.floats(key)
        if not vals:
            raise ConfigError(f"disease.{key}: required")
        disease[key] = vals[0] if len(vals) == 1 else vals

    tau = hor.int("tau", lo=1)
    T = hor.int("T", lo=2)
    if tau >= T:
        raise ConfigError(f"horizon.tau: must be < horizon.T ({tau} >= {T})")

    scenarios = []
    for item in bud.list("scenarios"):
        try:
            b, p = (float(x) for x in item.split(":"))
        except ValueError:
            raise ConfigError(f"budget.scenarios: {item!r} is not budget:probability") from None
        if b < 0 or not 0 <= p <= 1:
            raise ConfigError(f"budget.scenarios: {item!r} needs budget >= 0, 0 <= p <= 1")
        scenarios.append((b, p))
    if not scenarios:
        raise ConfigError("budget.scenarios: at least one scenario is required")
    total_p = sum(p for _, p in scenarios)
    if abs(total_p - 1) > 1e-12:
        raise ConfigError(f"budget.scenarios: probabilities sum to {total_p!r}, not 1")
    fair_raw = bud.list("fairness", "population")
    fairness: str | tuple[float, ...]
    if fair_raw == ("population",):
        fairness = "population"
    else:
        fairness = bud.floats("fairness")
        if any(not 0 < r <= 1 for r in fairness):
            raise ConfigError("budget.fairness: rates must lie in (0, 1]")
    sens = bud.floats("sensitivity", ",".join(str(b) for b in DEFAULT_BUDGETS))
    if not sens or any(b <= 0 for b in sens):
        raise ConfigError("budget.sensitivity: budgets must be positive")

    cut1 = st.int("cutoff_1", "20", lo=2)
    cut2 = st.int("cutoff_2", str(tau), lo=2)
    if cut1 > cut2:
        raise ConfigError("settings.cutoff_1: must not exceed settings.cutoff_2")

    grid = tr.floats("lasso_grid", "0, 0.001, 0.003, 0.01, 0.03, 0.1")
    if not grid or any(g < 0 for g in grid):
        raise ConfigError("training.lasso_grid: fractions must be nonnegative")

    cost_cfg = CostConfig(
        reference_cost=costs.float("reference_cost", lo=0.0, lo_open=True),
        reference_population=costs.float("reference_population", lo=0.0, lo_open=True),
        medical_cost=costs.float("medical_cost", lo=0.0),
        fuel_cost=costs.float("fuel_cost_per_km", lo=0.0),
        depots=costs.list("depots", ""),
    )
    if not cost_cfg.depots:
        raise ConfigError("costs.depots: at least one depot is required")

    train_fraction = st.float("train_fraction", "0.8", lo=0.0, hi=1.0, lo_open=True)
    if train_fraction >= 1:
        raise ConfigError("settings.train_fraction: must be < 1 to leave a validation window")

    return RunConfig(
        path=path,
        metapopulation=data.path("metapopulation", base),
        distances=data.path("distances", base),
        cases=data.path("cases", base),
        baseline=data.path("baseline", base),
        exclude=data.list("exclude", ""),
        costs=cost_cfg,
        disease=disease,
        tau=tau,
        T=T,
        budget=bud.float("first_stage", lo=0.0),
        scenarios=tuple(scenarios),
        fairness=fairness,
        fairness_multiplier=bud.float("fairness_multiplier", "1.0", lo=0.0, lo_open=True),
        sensitivity_budgets=sens,
        cutoffs=(cut1, cut2),
        train_fraction=train_fraction,
        calib_tolerance=cal.float("tolerance", "1e-3", lo=0.0),
        calib_max_outer=cal.int("max_outer", "20", lo=1),
        calib_ensemble_reps=cal.int("ensemble_reps", "20", lo=0),
        calib_restarts=cal.int("restarts", "3", lo=0),
        n_samples=tr.int("samples", "200", lo=1),
        noise_sd=tr.float("noise_sd", "50", lo=0.0),
        training_reps=tr.int("reps", "0", lo=0),
        lasso_grid=grid,
        folds=tr.int("folds", "5", lo=2),
        eval_reps=ev.int("reps", "1000", lo=1),
        sensitivity_reps=ev.int("sensitivity_reps", "300", lo=1),
        common_random_numbers=ev.bool("common_random_numbers", "true"),
        node_limit=sol.int("node_limit", "500", lo=1),
        abs_gap=sol.float("abs_gap", "1e-6", lo=0.0),
        seed=run.int("seed", "0", lo=0, hi=2**64 - 1),
    )
