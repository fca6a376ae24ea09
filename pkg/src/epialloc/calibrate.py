"""Calibration of per-population transmission and behaviour-change parameters.

The free parameters are ``xi_I``, ``xi_H``, ``xi_F`` (each in [0, 1]) and
``psi`` (in [0, psi_max]) for every population.  Each outer iteration runs a
stochastic ensemble at the current parameters and then minimises the sum of
squared errors between the expected-value recursion's cumulative infections
and the observed series.  The inner search starts with derivative-free
golden-section line searches along every coordinate axis (all axes evaluated
together as one batch) plus a line search along the combined displacement,
then refines with bounded least squares on a finite-difference Jacobian,
since the SSE surface has long, narrow valleys that coordinate moves crawl
along.  Random restarts guard against poor local minima.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import least_squares

from .model import C_, BedSchedule, CompartmentState, DiseaseParams, Metapopulation, \
    deterministic_path
from .simulator import replicate

logger = logging.getLogger(__name__)

GOLDEN = (math.sqrt(5) - 1) / 2
PSI_MAX = 0.2


@dataclass(frozen=True, eq=False)
class CaseSeries:
    """Cumulative reported cases on a shared grid of days: ``values[k, n]`` at ``days[k]``."""

    names: tuple[str, ...]
    days: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        days = np.asarray(self.days, dtype=np.int64)
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "names", tuple(self.names))
        if days.ndim != 1 or values.shape != (days.size, len(self.names)):
            raise ValueError("values must be (len(days), populations)")
        if days.size == 0:
            raise ValueError("no observations")
        if np.any(np.diff(days) <= 0):
            raise ValueError("days must be strictly increasing")
        if np.any(values < 0):
            raise ValueError("cumulative cases must be nonnegative")
        bad = np.argwhere(np.diff(values, axis=0) < 0)
        if bad.size:
            k, n = bad[0]
            raise ValueError(f"cumulative cases decrease for {self.names[n]} "
                             f"between days {days[k]} and {days[k + 1]}")
        days.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "days", days)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.days.size

    def head(self, n_days: int) -> "CaseSeries":
        return CaseSeries(self.names, self.days[:n_days], self.values[:n_days])

    def until(self, day: int) -> "CaseSeries":
        keep = self.days <= day
        return CaseSeries(self.names, self.days[keep], self.values[keep])

    def select(self, names: Sequence[str]) -> "CaseSeries":
        idx = [self.names.index(n) for n in names]
        return CaseSeries(tuple(names), self.days, self.values[:, idx])


def split_train_validate(series: CaseSeries, train_fraction: float):
    """Chronological prefix/suffix split; the prefix holds floor(fraction * len) days."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    n = len(series)
    if n < 2:
        raise ValueError("need at least 2 observations per population to split")
    k = min(max(int(math.floor(train_fraction * n)), 1), n - 1)
    return (CaseSeries(series.names, series.days[:k], series.values[:k]),
            CaseSeries(series.names, series.days[k:], series.values[k:]))


def initial_state(series: CaseSeries, meta: Metapopulation) -> CompartmentState:
    """Seed at the first observed day: reported cases infectious, everyone else susceptible."""
    return CompartmentState.initial(meta.P, series.values[0])


# ---------------------------------------------------------------------------
# batched expected-value recursion over candidate parameter sets


class _Recursion:
    def __init__(self, meta: Metapopulation, base: DiseaseParams, x0: np.ndarray,
                 beds: BedSchedule, days: np.ndarray, observed: np.ndarray,
                 psi_max: float):
        self.meta = meta
        self.rates = base.rates()
        self.x0 = x0.astype(float)
        self.beds = beds
        self.t_index = days - days[0]
        self.steps = int(self.t_index[-1])
        self.observed = observed
        self.psi_max = psi_max
        self.n = meta.size
        self.evaluations = 0

    def decode(self, u: np.ndarray):
        n = self.n
        u = np.atleast_2d(u)
        return u[:, :n], u[:, n:2 * n], u[:, 2 * n:3 * n], u[:, 3 * n:] * self.psi_max

    def cumulative(self, u: np.ndarray, steps: int | None = None) -> np.ndarray:
        """(steps + 1, B, N) cumulative infections for a batch of encoded parameters."""
        xi_I, xi_H, xi_F, psi = self.decode(u)
        steps = self.steps if steps is None else steps
        r = self.rates
        meta = self.meta
        cT = meta.c.T
        B = xi_I.shape[0]
        S, E, I, H, F, Rm, C = (np.tile(v, (B, 1)) for v in self.x0)
        out = np.empty((steps + 1, B, self.n))
        out[0] = C
        with np.errstate(over="ignore", invalid="ignore"):
            for t in range(steps):
                cap = self.beds.capacity(t)
                lam = np.exp(-psi * t) * (((xi_I * I + xi_H * H + xi_F * F) / meta.P) @ cT)
                lam = np.clip(lam, 0.0, 1.0)
                se = S * lam
                ei = E * r["EI"]
                ih = np.minimum(I * r["IH"], np.maximum(cap - H, 0.0))
                i_r = I * r["IR"]
                i_f = I * r["IF"]
                h_f = H * r["HF"]
                h_r = H * r["HR"]
                f_r = F * r["FR"]
                S = S - se
                E = E + se - ei
                I = I + ei - ih - i_r - i_f
                H = H + ih - h_f - h_r
                F = F + i_f + h_f - f_r
                Rm = Rm + i_r + h_r + f_r
                C = C + ei
                out[t + 1] = C
        return out

    def residuals(self, u: np.ndarray) -> np.ndarray:
        """(B, days * N) simulated minus observed cumulative infections."""
        u = np.atleast_2d(u)
        self.evaluations += u.shape[0]
        C = self.cumulative(u)[self.t_index]  # (days, B, N)
        resid = C - self.observed[:, None, :]
        return resid.transpose(1, 0, 2).reshape(u.shape[0], -1)

    def sse(self, u: np.ndarray) -> np.ndarray:
        resid = self.residuals(u)
        return np.einsum("bk,bk->b", resid, resid)

    def jacobian(self, u: np.ndarray, h: float = 1e-6) -> np.ndarray:
        """Central-difference Jacobian of the residuals, one-sided at the box edges."""
        p = u.size
        up = np.minimum(u + h, 1.0)
        dn = np.maximum(u - h, 0.0)
        U = np.vstack([np.where(np.eye(p, dtype=bool), up, u),
                       np.where(np.eye(p, dtype=bool), dn, u)])
        R = self.residuals(U)
        return ((R[:p] - R[p:]) / (up - dn)[:, None]).T


def _golden_batch(f, x, dirs, lo, hi, iters):
    """Golden-section search on x + t * dirs[k] for t in [lo[k], hi[k]], all k at once."""
    a, b = lo.copy(), hi.copy()
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc = f(x + c[:, None] * dirs)
    fd = f(x + d[:, None] * dirs)
    for _ in range(iters):
        left = fc < fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        new_c = b - GOLDEN * (b - a)
        new_d = a + GOLDEN * (b - a)
        # one of the two interior points carries over; evaluate the other
        carry_c = np.where(left, new_c, d)
        carry_d = np.where(left, c, new_d)
        fcarry = np.where(left, fc, fd)
        probe = np.where(left, new_c, new_d)
        fprobe = f(x + probe[:, None] * dirs)
        c = np.where(left, probe, carry_c)
        d = np.where(left, carry_d, probe)
        fc = np.where(left, fprobe, fcarry)
        fd = np.where(left, fcarry, fprobe)
    t = np.where(fc < fd, c, d)
    ft = np.minimum(fc, fd)
    return t, ft


def _axis_limits(u, dirs, width):
    """Feasible step range along each direction within [0, 1]^p, capped at ``width``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        to_hi = np.where(dirs > 0, (1 - u) / dirs, np.where(dirs < 0, -u / dirs, np.inf))
        to_lo = np.where(dirs > 0, -u / dirs, np.where(dirs < 0, (1 - u) / dirs, -np.inf))
    hi = np.min(np.where(dirs != 0, to_hi, np.inf), axis=1)
    lo = np.max(np.where(dirs != 0, to_lo, -np.inf), axis=1)
    return np.maximum(lo, -width), np.minimum(hi, width)


def refine(rec: _Recursion, u0: np.ndarray, max_nfev: int = 200):
    """Bounded least-squares refinement from ``u0``; returns (u, sse), never worse than ``u0``."""
    f0 = float(rec.sse(u0)[0])
    try:
        sol = least_squares(lambda v: rec.residuals(v)[0], u0, jac=rec.jacobian,
                            bounds=(0.0, 1.0), method="trf", x_scale="jac",
                            xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=max_nfev)
    except (ValueError, np.linalg.LinAlgError) as exc:
        logger.warning("least-squares refinement failed: %s", exc)
        return u0, f0
    u = np.clip(sol.x, 0.0, 1.0)
    f = float(rec.sse(u)[0])
    return (u, f) if f < f0 else (u0, f0)


def local_search(rec: _Recursion, u0: np.ndarray, max_sweeps: int = 60,
                 golden_iters: int = 30, rtol: float = 1e-12):
    """Minimise SSE from ``u0``; returns (u, sse).  Never returns a worse point than ``u0``."""
    u = np.clip(u0.astype(float), 0.0, 1.0)
    f_u = float(rec.sse(u)[0])
    p = u.size
    width = np.full(p, 0.25)
    eye = np.eye(p)
    for _ in range(max_sweeps):
        lo, hi = _axis_limits(np.tile(u, (p, 1)), eye, 1.0)
        lo = np.maximum(lo, -width)
        hi = np.minimum(hi, width)
        t, ft = _golden_batch(rec.sse, u, eye, lo, hi, golden_iters)
        improve = ft < f_u
        step = np.where(improve, t, 0.0)
        candidates = [(f_u, u)]
        if improve.any():
            k = int(np.argmin(ft))
            candidates.append((float(ft[k]), u + step[k] * eye[k]))
            combined = step
            lo_c, hi_c = _axis_limits(u[None, :], combined[None, :], 2.0)
            tc, fc = _golden_batch(rec.sse, u, combined[None, :], lo_c, hi_c, golden_iters)
            candidates.append((float(fc[0]), np.clip(u + tc[0] * combined, 0.0, 1.0)))
        f_new, u_new = min(candidates, key=lambda c: c[0])
        # adapt per-axis search widths to the size of recent moves
        width = np.clip(np.where(improve, 4 * np.abs(step), width / 4), 1e-6, 0.5)
        if f_new < f_u:
            gain = f_u - f_new
            u, f_u = u_new, f_new
            if gain <= rtol * max(f_u, 1.0):
                break
        elif np.all(width <= 1e-6):
            break
    return u, f_u


def _search(rec: _Recursion, u0: np.ndarray, max_sweeps: int):
    u, f = local_search(rec, u0, max_sweeps=max_sweeps)
    return refine(rec, u)


@dataclass(frozen=True)
class CalibrationResult:
    params: DiseaseParams
    sse_trace: tuple[float, ...]
    ensemble_sse_trace: tuple[float, ...]
    outer_iterations: int
    converged: bool
    start_day: int
    report: "ValidationReport | None" = None


def encode(params: DiseaseParams, psi_max: float = PSI_MAX) -> np.ndarray:
    return np.concatenate([params.xi_I, params.xi_H, params.xi_F,
                           np.minimum(params.psi / psi_max, 1.0)])


def decode(u: np.ndarray, base: DiseaseParams, psi_max: float = PSI_MAX) -> DiseaseParams:
    n = base.size
    u = np.clip(u, 0.0, 1.0)
    return base.with_free(u[:n], u[n:2 * n], u[2 * n:3 * n], u[3 * n:] * psi_max)


def calibrate(observed: CaseSeries, meta: Metapopulation, guess: DiseaseParams,
              beds: BedSchedule | None = None, tolerance: float = 1e-3, max_outer: int = 20,
              ensemble_reps: int = 20, n_restarts: int = 3, seed: int = 0,
              max_sweeps: int = 10, psi_max: float = PSI_MAX) -> CalibrationResult:
    """Fit xi_I, xi_H, xi_F and psi to observed cumulative cases.

    ``guess`` supplies both the starting free parameters and the fixed
    clinical parameters.  Time zero is the first observed day.
    """
    if guess.size != meta.size or observed.names != meta.names:
        raise ValueError("observed series, metapopulation and parameters must share populations")
    if np.any(guess.psi > psi_max):
        raise ValueError(f"initial psi exceeds the search bound {psi_max}")
    if len(observed) < 2:
        raise ValueError("need at least 2 observed days to calibrate")
    beds = BedSchedule.none(meta.size) if beds is None else beds
    x0 = initial_state(observed, meta)
    rec = _Recursion(meta, guess, x0.as_array(), beds, observed.days, observed.values, psi_max)
    rng = np.random.default_rng(seed)

    u = encode(guess, psi_max)
    sse_prev = float(rec.sse(u)[0])
    if not np.isfinite(sse_prev):
        raise FloatingPointError("initial guess yields a non-finite SSE")
    trace = [sse_prev]
    ens_trace = []
    converged = False
    outer = 0
    for outer in range(1, max_outer + 1):
        if ensemble_reps > 0:
            ens = replicate(x0, decode(u, guess, psi_max), meta, beds, rec.steps, ensemble_reps,
                            seed + 1_000_003 * outer, keep=False)
            resid = ens.mean_C[rec.t_index] - observed.values
            ens_trace.append(float(np.sum(resid ** 2)))
        best_u, best_f = _search(rec, u, max_sweeps)
        for restart in range(n_restarts):
            start = np.clip(u * np.exp(rng.normal(0.0, 0.3, u.size)), 0.0, 1.0)
            cand_u, cand_f = _search(rec, start, max_sweeps)
            # strict improvement only: ties keep the lowest restart index
            if cand_f < best_f:
                best_u, best_f = cand_u, cand_f
        if not np.isfinite(best_f):
            raise FloatingPointError(f"non-finite SSE in outer iteration {outer}")
        if best_f > sse_prev:
            best_u, best_f = u, sse_prev
        u = best_u
        trace.append(best_f)
        if abs(best_f - sse_prev) / max(sse_prev, 1.0) < tolerance:
            converged = True
            break
        sse_prev = best_f
    params = decode(u, guess, psi_max)
    logger.info("calibration finished after %d outer iterations, SSE %.6g (%d evaluations)",
                outer, trace[-1], rec.evaluations)
    return CalibrationResult(params, tuple(trace), tuple(ens_trace), outer, converged,
                             int(observed.days[0]))


def simulate_cumulative(params: DiseaseParams, meta: Metapopulation, series: CaseSeries,
                        days: np.ndarray, beds: BedSchedule | None = None, reps: int = 0,
                        seed: int = 0) -> np.ndarray:
    """Simulated cumulative infections at ``days``, started from ``series`` at its first day.

    ``reps == 0`` uses the expected-value recursion; otherwise the mean of a
    stochastic ensemble.
    """
    beds = BedSchedule.none(meta.size) if beds is None else beds
    x0 = initial_state(series, meta)
    start = int(series.days[0])
    steps = int(np.max(days)) - start
    if reps == 0:
        C = deterministic_path(x0, params, meta, beds, steps)[:, C_, :]
    else:
        C = replicate(x0, params, meta, beds, steps, reps, seed, keep=False).mean_C
    return C[np.asarray(days) - start]


@dataclass(frozen=True)
class WindowReport:
    per_population: np.ndarray
    unweighted: float
    population_weighted: float
    national: float
    excluded_zero: int


@dataclass(frozen=True)
class ValidationReport:
    names: tuple[str, ...]
    train: WindowReport
    validation: WindowReport | None


def percent_difference(simulated, observed, P=None) -> WindowReport:
    """Mean over days of (simulated - observed) / observed * 100.

    Days where a population observed zero cases are left out of its mean.
    ``national`` sums populations first; ``population_weighted`` weights the
    per-population means by ``P``.
    """
    sim = np.asarray(simulated, dtype=float)
    obs = np.asarray(observed, dtype=float)
    ok = obs != 0
    excluded = int(np.sum(~ok))
    if excluded:
        logger.info("excluded %d zero-observation entries from percent differences", excluded)
    ratio = np.where(ok, (sim - obs) / np.where(ok, obs, 1.0) * 100, 0.0)
    counts = ok.sum(axis=0)
    per = np.where(counts > 0, ratio.sum(axis=0) / np.maximum(counts, 1), np.nan)
    valid = ~np.isnan(per)
    unweighted = float(np.mean(per[valid])) if valid.any() else math.nan
    if P is not None and valid.any():
        w = np.asarray(P, dtype=float)[valid]
        weighted = float(np.sum(per[valid] * w) / np.sum(w))
    else:
        weighted = unweighted
    nat_obs = obs.sum(axis=1)
    nat_ok = nat_obs != 0
    national = float(np.mean((sim.sum(axis=1)[nat_ok] - nat_obs[nat_ok]) / nat_obs[nat_ok] * 100)) \
        if nat_ok.any() else math.nan
    return WindowReport(per, unweighted, weighted, national, excluded)


def validation_report(params: DiseaseParams, meta: Metapopulation, train: CaseSeries,
                      validate: CaseSeries | None, beds: BedSchedule | None = None,
                      reps: int = 0, seed: int = 0) -> ValidationReport:
    """Percent differences over the training and validation windows.

    The simulation starts at the first training day and runs through the last
    validation day.
    """
    days = train.days if validate is None else np.concatenate([train.days, validate.days])
    sim = simulate_cumulative(params, meta, train, days, beds, reps, seed)
    k = len(train)
    tr = percent_difference(sim[:k], train.values, meta.P)
    va = None if validate is None else percent_difference(sim[k:], validate.values, meta.P)
    return ValidationReport(meta.names, tr, va)


def write_validation_report(path_txt, path_csv, report: ValidationReport,
                            result: CalibrationResult | None = None) -> None:
    windows = [("calibration", report.train)]
    if report.validation is not None:
        windows.append(("validation", report.validation))
    with open(path_csv, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["population", *(name for name, _ in windows)])
        for i, name in enumerate(report.names):
            w.writerow([name, *(repr(float(win.per_population[i])) for _, win in windows)])
        for label, attr in (("POOLED_UNWEIGHTED", "unweighted"),
                            ("POOLED_POPULATION_WEIGHTED", "population_weighted"),
                            ("NATIONAL", "national")):
            w.writerow([label, *(repr(float(getattr(win, attr))) for _, win in windows)])
    with open(path_txt, "w") as fh:
        fh.write("# calibration report\n")
        if result is not None:
            p = result.params
            fh.write(f"outer_iterations = {result.outer_iterations}\n")
            fh.write(f"converged = {str(result.converged).lower()}\n")
            fh.write(f"sse_trace = {' '.join(repr(v) for v in result.sse_trace)}\n")
            fh.write(f"ensemble_sse_trace = {' '.join(repr(v) for v in result.ensemble_sse_trace)}\n")
            for name in ("xi_I", "xi_H", "xi_F", "psi"):
                vals = getattr(p, name)
                for pop, v in zip(report.names, vals):
                    fh.write(f"{name}.{pop} = {float(v)!r}\n")
        for label, win in windows:
            fh.write(f"{label}.pooled_unweighted_pct = {win.unweighted!r}\n")
            fh.write(f"{label}.pooled_population_weighted_pct = {win.population_weighted!r}\n")
            fh.write(f"{label}.national_pct = {win.national!r}\n")
            fh.write(f"{label}.excluded_zero_observations = {win.excluded_zero}\n")


def read_calibrated_params(path, base: DiseaseParams, names: Sequence[str]) -> DiseaseParams:
    """Read ``xi_*.<population>`` / ``psi.<population>`` lines written by the report."""
    values: dict[str, float] = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line and not line.startswith("#"):
            k, v = line.split("=", 1)
            values[k.strip()] = v.strip()
    out = {}
    for name in ("xi_I", "xi_H", "xi_F", "psi"):
        out[name] = np.array([float(values[f"{name}.{pop}"]) for pop in names])
    return base.with_free(**out)
