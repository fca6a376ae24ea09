"""Two-piece logistic curves for cumulative infections.

Stage 1 covers ``0 <= t <= tau`` with ``K1 / (1 + exp(-(a1 t + b1)))``; stage
2 covers ``tau < t <= T`` with the same form in the shifted time ``t - tau``.
Fitting is Levenberg-Marquardt on the three parameters with a logit-linear
initial guess plus seeded random restarts.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

logger = logging.getLogger(__name__)

MAX_ITER = 500
STEP_TOL = 1e-10
N_RANDOM_STARTS = 3


@dataclass(frozen=True)
class LogisticCurve:
    K: float
    a: float
    b: float

    def __post_init__(self):
        if not self.K > 0 or not np.isfinite(self.K):
            raise ValueError(f"K must be a positive finite plateau, got {self.K!r}")
        if not (np.isfinite(self.a) and np.isfinite(self.b)):
            raise ValueError("a and b must be finite")

    def __call__(self, t):
        return self.K * expit(self.a * np.asarray(t, dtype=float) + self.b)

    def denominator(self, t: float) -> float:
        """1 + exp(-(a t + b)), the divisor applied to the plateau at time t."""
        return 1.0 + float(np.exp(-(self.a * t + self.b)))


@dataclass(frozen=True)
class FitResult:
    curve: LogisticCurve
    sse: float
    iterations: int
    converged: bool


def _sse(p, t, v):
    r = p[0] * expit(p[1] * t + p[2]) - v
    return float(r @ r)


def _lm(p0, t, v):
    """Levenberg-Marquardt from ``p0``; returns (params, sse, iters, converged)."""
    p = np.array(p0, dtype=float)
    mu = 1e-3
    s = expit(p[1] * t + p[2])
    r = p[0] * s - v
    sse = float(r @ r)
    for it in range(1, MAX_ITER + 1):
        ds = p[0] * s * (1 - s)
        J = np.column_stack([s, ds * t, ds])
        g = J.T @ r
        A = J.T @ J
        diag = np.diag(A).copy()
        diag[diag <= 0] = 1e-12
        while True:
            try:
                step = np.linalg.solve(A + mu * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                step = None
            if step is not None and np.all(np.isfinite(step)):
                trial = p + step
                if trial[0] > 0:
                    st = expit(trial[1] * t + trial[2])
                    rt = trial[0] * st - v
                    sse_t = float(rt @ rt)
                    if sse_t <= sse:
                        break
            mu *= 10
            if mu > 1e20:
                return p, sse, it, True
        small = np.linalg.norm(step) < STEP_TOL * (1 + np.linalg.norm(p))
        p, s, r, sse = trial, st, rt, sse_t
        mu = max(mu / 10, 1e-15)
        if small or sse == 0.0:
            return p, sse, it, True
    return p, sse, MAX_ITER, False


def _logit_guess(t, v, K0):
    mask = (v > 0) & (v < K0)
    if mask.sum() >= 2 and np.ptp(t[mask]) > 0:
        z = np.log(v[mask] / (K0 - v[mask]))
        a, b = np.polyfit(t[mask], z, 1)
    elif mask.any():
        a, b = 0.0, float(np.mean(np.log(v[mask] / (K0 - v[mask]))))
    else:
        a, b = 0.0, 0.0
    return np.array([K0, a, b])


def fit_logistic(t: Sequence[float], values: Sequence[float], seed: int = 0,
                 n_starts: int = N_RANDOM_STARTS) -> FitResult:
    """Least-squares logistic fit; best of a logit-linear start and ``n_starts`` random ones."""
    t = np.asarray(t, dtype=float)
    v = np.asarray(values, dtype=float)
    if t.shape != v.shape or t.ndim != 1:
        raise ValueError("t and values must be vectors of equal length")
    if t.size < 4:
        raise ValueError("need at least 4 points to fit a logistic curve")
    if np.any(v < 0) or np.any(~np.isfinite(v)):
        raise ValueError("values must be finite and nonnegative")
    if np.any(np.diff(v) < -1e-9 * max(1.0, v.max())):
        raise ValueError("values must be nondecreasing")
    vmax = float(v.max())
    if vmax <= 0:
        raise ValueError("all-zero series has no positive plateau")

    starts = [_logit_guess(t, v, 1.05 * vmax)]
    rng = np.random.default_rng(seed)
    for _ in range(n_starts):
        K0 = vmax * float(np.exp(rng.uniform(0.02, 1.5)))
        p = _logit_guess(t, v, K0)
        p[1] *= float(np.exp(rng.normal(0, 0.5)))
        p[2] += float(rng.normal(0, 1.0))
        starts.append(p)

    best = None
    for p0 in starts:
        p, sse, it, ok = _lm(p0, t, v)
        if best is None or sse < best[1]:
            best = (p, sse, it, ok)
    p, sse, it, ok = best
    if not ok:
        logger.warning("logistic fit did not converge in %d iterations (SSE %.6g)",
                       MAX_ITER, sse)
    return FitResult(LogisticCurve(float(p[0]), float(p[1]), float(p[2])), sse, it, ok)


def fit_plateau(t, values, a: float, b: float) -> float:
    """Least-squares K for a curve whose shape (a, b) is held fixed."""
    g = expit(a * np.asarray(t, dtype=float) + b)
    den = float(g @ g)
    if den == 0:
        return 0.0
    return float(g @ np.asarray(values, dtype=float)) / den


@dataclass(frozen=True)
class TwoStageCurves:
    names: tuple[str, ...]
    stage1: tuple[LogisticCurve, ...]
    stage2: tuple[LogisticCurve, ...]
    tau: int
    T: int

    def __post_init__(self):
        if not 0 < self.tau < self.T:
            raise ValueError("need 0 < tau < T")
        if not len(self.names) == len(self.stage1) == len(self.stage2):
            raise ValueError("one stage-1 and one stage-2 curve per population")

    def _params(self, stage, attr):
        curves = self.stage1 if stage == 1 else self.stage2
        return np.array([getattr(c, attr) for c in curves])

    def K(self, stage: int) -> np.ndarray:
        return self._params(stage, "K")

    def a(self, stage: int) -> np.ndarray:
        return self._params(stage, "a")

    def b(self, stage: int) -> np.ndarray:
        return self._params(stage, "b")

    def D1(self) -> np.ndarray:
        """Divisor turning a stage-1 plateau into the value at tau."""
        return 1 + np.exp(-(self.a(1) * self.tau + self.b(1)))

    def D2(self) -> np.ndarray:
        """Divisor turning a stage-2 plateau into the value at T."""
        return 1 + np.exp(-(self.a(2) * (self.T - self.tau) + self.b(2)))

    def evaluate(self, t) -> np.ndarray:
        """(len(t), N) curve values on integer days, switching pieces after tau."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.empty((t.size, len(self.names)))
        early = t <= self.tau
        for n, (c1, c2) in enumerate(zip(self.stage1, self.stage2)):
            out[early, n] = c1(t[early])
            out[~early, n] = c2(t[~early] - self.tau)
        return out

    def with_stage2(self, stage2: Sequence[LogisticCurve]) -> "TwoStageCurves":
        return TwoStageCurves(self.names, self.stage1, tuple(stage2), self.tau, self.T)


def fit_two_stage(mean_C, tau: int, T: int, names: Sequence[str] | None = None,
                  seed: int = 0) -> TwoStageCurves:
    """Fit both pieces per population from a (T+1, N) cumulative series starting at t=0."""
    mean_C = np.asarray(mean_C, dtype=float)
    if not 0 < tau < T:
        raise ValueError("need 0 < tau < T")
    if mean_C.ndim != 2 or mean_C.shape[0] < T + 1:
        raise ValueError(f"series must cover days 0..{T}")
    n_pop = mean_C.shape[1]
    names = tuple(names) if names is not None else tuple(str(i) for i in range(n_pop))
    t1 = np.arange(0, tau + 1)
    t2 = np.arange(tau + 1, T + 1)
    s1, s2 = [], []
    for n in range(n_pop):
        try:
            s1.append(fit_logistic(t1, mean_C[t1, n], seed=seed).curve)
            s2.append(fit_logistic(t2 - tau, mean_C[t2, n], seed=seed).curve)
        except ValueError as exc:
            raise ValueError(f"population {names[n]}: {exc}") from exc
    return TwoStageCurves(names, tuple(s1), tuple(s2), tau, T)


@dataclass(frozen=True)
class FitReport:
    names: tuple[str, ...]
    pct_tau: np.ndarray
    pct_T: np.ndarray
    pooled_tau: float
    pooled_T: float


def _pct(fitted, simulated):
    fitted = np.asarray(fitted, dtype=float)
    simulated = np.asarray(simulated, dtype=float)
    out = np.full(fitted.shape, np.nan)
    ok = simulated != 0
    out[ok] = (fitted[ok] - simulated[ok]) / simulated[ok] * 100
    return out


def eval_report(curves: TwoStageCurves, mean_C) -> FitReport:
    """Percent difference (fitted - simulated)/simulated at tau and T.

    Entries with a zero simulated value are NaN.  Pooled values sum over
    populations before differencing.
    """
    mean_C = np.asarray(mean_C, dtype=float)
    fit_tau = curves.evaluate(curves.tau)[0]
    fit_T = curves.evaluate(curves.T)[0]
    sim_tau = mean_C[curves.tau]
    sim_T = mean_C[curves.T]
    pooled_tau = float(_pct(fit_tau.sum(), sim_tau.sum()))
    pooled_T = float(_pct(fit_T.sum(), sim_T.sum()))
    return FitReport(curves.names, _pct(fit_tau, sim_tau), _pct(fit_T, sim_T),
                     pooled_tau, pooled_T)


def write_curves_csv(path, curves: TwoStageCurves) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["population", "stage", "K", "a", "b"])
        for stage, group in ((1, curves.stage1), (2, curves.stage2)):
            for name, c in zip(curves.names, group):
                w.writerow([name, stage, repr(c.K), repr(c.a), repr(c.b)])


def read_curves_csv(path, tau: int, T: int) -> TwoStageCurves:
    stages: dict[int, dict[str, LogisticCurve]] = {1: {}, 2: {}}
    order: list[str] = []
    with open(Path(path), newline="") as fh:
        for row in csv.DictReader(fh):
            stage = int(row["stage"])
            if stage not in stages:
                raise ValueError(f"{path}: stage must be 1 or 2, got {stage}")
            name = row["population"]
            if stage == 1:
                order.append(name)
            stages[stage][name] = LogisticCurve(float(row["K"]), float(row["a"]), float(row["b"]))
    if set(stages[1]) != set(stages[2]):
        raise ValueError(f"{path}: stage 1 and stage 2 populations differ")
    return TwoStageCurves(tuple(order), tuple(stages[1][n] for n in order),
                          tuple(stages[2][n] for n in order), tau, T)
