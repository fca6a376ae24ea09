"""Lasso models for logistic plateaus, and the randomized data they are fit on.

The plateau of each population's stage-1 curve is modelled as linear in the
initial infected vector and first-stage beds; the stage-2 plateau as linear in
cumulative infections at tau and total beds.  Coefficients come from cyclic
coordinate descent on standardized columns with an unpenalized intercept.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .curves import TwoStageCurves, fit_plateau
from .model import C_, BedSchedule, CompartmentState, DiseaseParams, Metapopulation, deterministic_path
from .simulator import make_rng, replicate

logger = logging.getLogger(__name__)

CD_TOL = 1e-8
CD_MAX_SWEEPS = 200_000


def soft_threshold(z, lam):
    return np.sign(z) * np.maximum(np.abs(z) - lam, 0.0)


@dataclass(frozen=True)
class LassoFit:
    intercept: float
    coef: np.ndarray
    lam: float
    sweeps: int

    def predict(self, X) -> np.ndarray:
        return self.intercept + np.asarray(X, dtype=float) @ self.coef


def _prepare(X, y):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise ValueError("X must be (m, p) and y of length m")
    if X.shape[0] < 2:
        raise ValueError("need at least 2 rows")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("X and y must be finite")
    return X, y


def lasso_fit(X, y, lam: float, standardize: bool = True, tol: float = CD_TOL,
              max_sweeps: int = CD_MAX_SWEEPS) -> LassoFit:
    """Minimise (1/2m)||y - b0 - X b||^2 + lam ||b||_1.

    With ``standardize`` the penalty applies to coefficients of the centred,
    unit-variance columns; the result is mapped back to the original scale.
    """
    X, y = _prepare(X, y)
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    m, p = X.shape
    x_mean = X.mean(axis=0)
    y_mean = y.mean()
    Z = X - x_mean
    scale = Z.std(axis=0) if standardize else np.ones(p)
    const = Z.std(axis=0) == 0
    if np.any(const):
        logger.warning("constant column(s) %s: coefficients forced to 0",
                       np.flatnonzero(const).tolist())
    scale = np.where(const, 1.0, scale)
    Z = Z / scale
    Z[:, const] = 0.0

    gram = Z.T @ Z / m
    zy = Z.T @ (y - y_mean) / m
    col_sq = np.diag(gram).copy()
    beta = np.zeros(p)
    active = np.flatnonzero(~const)
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        max_change = 0.0
        for j in active:
            rho = zy[j] - gram[j] @ beta + col_sq[j] * beta[j]
            new = np.sign(rho) * max(abs(rho) - lam, 0.0) / col_sq[j]
            change = abs(new - beta[j])
            if change:
                beta[j] = new
                max_change = max(max_change, change)
        if max_change < tol:
            break
    else:
        logger.warning("coordinate descent hit %d sweeps without converging", max_sweeps)
    coef = beta / scale
    return LassoFit(float(y_mean - x_mean @ coef), coef, float(lam), sweeps)


def lambda_max(X, y, standardize: bool = True) -> float:
    """Smallest penalty at which every coefficient is zero."""
    X, y = _prepare(X, y)
    Z = X - X.mean(axis=0)
    if standardize:
        sd = Z.std(axis=0)
        Z = Z / np.where(sd == 0, 1.0, sd)
    return float(np.max(np.abs(Z.T @ (y - y.mean()))) / X.shape[0])


def kkt_residual(fit: LassoFit, X, y, standardize: bool = True) -> float:
    """Largest violation of the lasso subgradient conditions, in the penalized scale."""
    X, y = _prepare(X, y)
    m = X.shape[0]
    Z = X - X.mean(axis=0)
    sd = Z.std(axis=0) if standardize else np.ones(X.shape[1])
    keep = Z.std(axis=0) > 0
    sd = np.where(keep, sd, 1.0)
    Z = Z / sd
    beta = fit.coef * sd
    r = (y - y.mean()) - Z @ beta
    grad = Z.T @ r / m
    viol = np.where(beta != 0, np.abs(grad - fit.lam * np.sign(beta)),
                    np.maximum(np.abs(grad) - fit.lam, 0.0))
    return float(np.max(viol[keep])) if keep.any() else 0.0


def r_squared(model: LassoFit, X, y) -> float:
    X, y = _prepare(X, y)
    sst = float(np.sum((y - y.mean()) ** 2))
    if sst == 0:
        raise ValueError("response has zero variance; R^2 undefined")
    resid = y - model.predict(X)
    return 1.0 - float(resid @ resid) / sst


def select_lambda(X, y, grid: Sequence[float], k_folds: int = 5, seed: int = 0,
                  standardize: bool = True) -> float:
    """K-fold CV choice of penalty; ties go to the larger value."""
    X, y = _prepare(X, y)
    grid = sorted({float(g) for g in grid}, reverse=True)
    if not grid:
        raise ValueError("lambda grid is empty")
    if k_folds < 2:
        raise ValueError("need at least 2 folds")
    m = X.shape[0]
    if m < k_folds:
        raise ValueError(f"{m} rows cannot be split into {k_folds} folds")
    if len(grid) == 1:
        return grid[0]
    order = np.random.default_rng(seed).permutation(m)
    folds = np.array_split(order, k_folds)
    errors = np.zeros(len(grid))
    for hold in folds:
        train = np.setdiff1d(order, hold)
        for i, lam in enumerate(grid):
            fit = lasso_fit(X[train], y[train], lam, standardize=standardize)
            resid = y[hold] - fit.predict(X[hold])
            errors[i] += float(resid @ resid)
    errors /= m
    best = 0
    for i in range(1, len(grid)):
        if errors[i] < errors[best]:
            best = i
    return grid[best]


@dataclass(frozen=True)
class KRegression:
    """Per-population plateau model for one stage.

    ``K_n = intercept[n] + coef_inf[n] @ infections + coef_beds[n] @ beds``
    """

    names: tuple[str, ...]
    stage: int
    intercept: np.ndarray
    coef_inf: np.ndarray
    coef_beds: np.ndarray
    lam: np.ndarray
    r2: np.ndarray

    def __post_init__(self):
        n = len(self.names)
        if self.intercept.shape != (n,) or self.coef_inf.shape != (n, n) \
                or self.coef_beds.shape != (n, n):
            raise ValueError("coefficient arrays must be (N,), (N, N), (N, N)")

    def predict(self, infections, beds) -> np.ndarray:
        return (self.intercept + self.coef_inf @ np.asarray(infections, dtype=float)
                + self.coef_beds @ np.asarray(beds, dtype=float))


@dataclass(frozen=True)
class TrainingSample:
    initial_infected: np.ndarray
    beds_stage1: np.ndarray
    beds_stage2: np.ndarray
    infected_tau: np.ndarray
    response1: np.ndarray
    response2: np.ndarray


def split_beds(total: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Random split: districts in random order each take Uniform{0..remaining}."""
    out = np.zeros(n, dtype=np.int64)
    remaining = int(total)
    for k in rng.permutation(n):
        draw = int(rng.integers(0, remaining + 1))
        out[k] = draw
        remaining -= draw
    return out


def perturb_inputs(base_infected, base_m, base_mt, P, noise_sd: float,
                   rng: np.random.Generator):
    n = len(base_infected)
    infected = np.rint(np.maximum(np.asarray(base_infected, float)
                                  + rng.normal(0.0, noise_sd, n), 0.0))
    infected = np.minimum(infected, P).astype(np.int64)
    if noise_sd == 0:
        return infected, np.asarray(base_m, np.int64).copy(), np.asarray(base_mt, np.int64).copy()
    beds = []
    for base in (base_m, base_mt):
        total = int(np.rint(max(float(np.sum(base)) + rng.normal(0.0, noise_sd), 0.0)))
        beds.append(split_beds(total, n, rng))
    return infected, beds[0], beds[1]


def mean_cumulative(meta, params, initial, beds, T, reps, seed):
    """(T+1, N) mean cumulative infections; ``reps == 0`` uses the expected-value recursion."""
    if reps == 0:
        return deterministic_path(initial, params, meta, beds, T)[:, C_, :]
    return replicate(initial, params, meta, beds, T, reps, seed, keep=False).mean_C


def plateau_responses(mean_C, curves: TwoStageCurves):
    """Refit only K per stage, with each population's (a, b) frozen at ``curves``."""
    tau, T = curves.tau, curves.T
    t1 = np.arange(tau + 1)
    t2 = np.arange(tau + 1, T + 1)
    a1, b1, a2, b2 = curves.a(1), curves.b(1), curves.a(2), curves.b(2)
    n = mean_C.shape[1]
    k1 = np.array([fit_plateau(t1, mean_C[t1, i], a1[i], b1[i]) for i in range(n)])
    k2 = np.array([fit_plateau(t2 - tau, mean_C[t2, i], a2[i], b2[i]) for i in range(n)])
    return k1, k2


def generate_training_set(meta: Metapopulation, params: DiseaseParams, base_infected,
                          base_beds: BedSchedule, curves: TwoStageCurves, n_samples: int,
                          noise_sd: float = 50.0, seed: int = 0, reps: int = 0,
                          simulator: Callable | None = None,
                          curve_fitter: Callable | None = None) -> list[TrainingSample]:
    """Perturb initial infections and bed totals, simulate, and record plateau responses.

    ``simulator(initial, beds, seed) -> (T+1, N) mean cumulative series`` and
    ``curve_fitter(mean_C) -> (K1, K2)`` may be swapped out; the defaults run
    the model with ``reps`` replications (0 = expected-value recursion) and
    refit plateaus against the frozen shapes in ``curves``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    if noise_sd < 0:
        raise ValueError("noise_sd must be nonnegative")
    tau, T = curves.tau, curves.T
    if simulator is None:
        def simulator(initial, beds, s):
            return mean_cumulative(meta, params, initial, beds, T, reps, s)
    if curve_fitter is None:
        def curve_fitter(mean_C):
            return plateau_responses(mean_C, curves)

    samples = []
    failures = 0
    for i in range(n_samples):
        rng = make_rng(seed + i)
        inf, m, mt = perturb_inputs(base_infected, base_beds.m, base_beds.m_tilde,
                                    meta.P, noise_sd, rng)
        initial = CompartmentState.initial(meta.P, inf)
        beds = BedSchedule(m, mt, tau)
        try:
            mean_C = simulator(initial, beds, int(rng.integers(0, 2**62)))
            k1, k2 = curve_fitter(mean_C)
        except (ValueError, FloatingPointError) as exc:
            failures += 1
            logger.debug("training sample %d failed: %s", i, exc)
            continue
        samples.append(TrainingSample(inf, m, mt, np.asarray(mean_C[tau], float),
                                      np.asarray(k1, float), np.asarray(k2, float)))
    if failures:
        logger.warning("skipped %d of %d training samples after simulation failures",
                       failures, n_samples)
    return samples


def design(samples: Sequence[TrainingSample], stage: int):
    """Feature table and response table for one stage."""
    if stage == 1:
        X = np.array([np.concatenate([s.initial_infected, s.beds_stage1]) for s in samples], float)
        Y = np.array([s.response1 for s in samples], float)
    elif stage == 2:
        X = np.array([np.concatenate([s.infected_tau, s.beds_stage1 + s.beds_stage2])
                      for s in samples], float)
        Y = np.array([s.response2 for s in samples], float)
    else:
        raise ValueError("stage must be 1 or 2")
    return X, Y


def fit_k_regression(samples: Sequence[TrainingSample], stage: int, names: Sequence[str],
                     grid: Sequence[float] | None = None, k_folds: int = 5,
                     seed: int = 0) -> KRegression:
    """Lasso plateau model per population, penalty chosen by CV on ``grid``.

    ``grid`` entries are fractions of each population's lambda_max.
    """
    X, Y = design(samples, stage)
    n = len(names)
    if X.shape[1] != 2 * n:
        raise ValueError(f"expected {2 * n} features, got {X.shape[1]}")
    grid = (0.0, 1e-3, 3e-3, 1e-2, 3e-2, 0.1) if grid is None else tuple(grid)
    intercept = np.zeros(n)
    coef = np.zeros((n, 2 * n))
    lams = np.zeros(n)
    r2 = np.full(n, np.nan)
    for i in range(n):
        y = Y[:, i]
        if np.ptp(y) == 0:
            intercept[i] = y[0]
            logger.warning("stage %d population %s: constant response, intercept-only model",
                           stage, names[i])
            continue
        lmax = lambda_max(X, y)
        lam = select_lambda(X, y, [g * lmax for g in grid], k_folds=k_folds, seed=seed + i)
        fit = lasso_fit(X, y, lam)
        intercept[i], coef[i], lams[i] = fit.intercept, fit.coef, lam
        r2[i] = r_squared(fit, X, y)
    return KRegression(tuple(names), stage, intercept, coef[:, :n].copy(), coef[:, n:].copy(),
                       lams, r2)


def write_training_csv(path, samples: Sequence[TrainingSample], names: Sequence[str]) -> None:
    cols = [f"{p}_{n}" for p in ("I0", "m", "mt", "Itau", "K1", "K2") for n in names]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for s in samples:
            w.writerow([_num(v) for v in np.concatenate([
                s.initial_infected, s.beds_stage1, s.beds_stage2,
                s.infected_tau, s.response1, s.response2])])


def read_training_csv(path, names: Sequence[str]) -> list[TrainingSample]:
    n = len(names)
    out = []
    with open(Path(path), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if len(header) != 6 * n:
            raise ValueError(f"{path}: expected {6 * n} columns, got {len(header)}")
        for row in reader:
            v = np.array([float(x) for x in row])
            parts = [v[k * n:(k + 1) * n] for k in range(6)]
            out.append(TrainingSample(parts[0].astype(np.int64), parts[1].astype(np.int64),
                                      parts[2].astype(np.int64), parts[3], parts[4], parts[5]))
    return out


def write_regression_csv(path, models: Sequence[KRegression]) -> None:
    names = models[0].names
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "population", "lambda", "r2", "intercept",
                    *(f"inf_{n}" for n in names), *(f"beds_{n}" for n in names)])
        for mdl in models:
            for i, name in enumerate(names):
                w.writerow([mdl.stage, name, repr(float(mdl.lam[i])), repr(float(mdl.r2[i])),
                            repr(float(mdl.intercept[i])),
                            *(repr(float(x)) for x in mdl.coef_inf[i]),
                            *(repr(float(x)) for x in mdl.coef_beds[i])])


def read_regression_csv(path) -> dict[int, KRegression]:
    rows = list(csv.DictReader(open(Path(path), newline="")))
    if not rows:
        raise ValueError(f"{path}: no coefficient rows")
    out = {}
    for stage in sorted({int(r["stage"]) for r in rows}):
        sub = [r for r in rows if int(r["stage"]) == stage]
        names = tuple(r["population"] for r in sub)
        out[stage] = KRegression(
            names, stage,
            np.array([float(r["intercept"]) for r in sub]),
            np.array([[float(r[f"inf_{n}"]) for n in names] for r in sub]),
            np.array([[float(r[f"beds_{n}"]) for n in names] for r in sub]),
            np.array([float(r["lambda"]) for r in sub]),
            np.array([float(r["r2"]) for r in sub]),
        )
    return out


def _num(v) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() else repr(v)
