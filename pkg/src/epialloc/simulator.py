"""Stochastic replication engine.

Every flow is binomial around the expected-value recursion in
:mod:`epialloc.model`.  Competing exits from one compartment are drawn as a
total first and then split by sequential conditional binomials, so a
compartment can never be over-drained.

Random streams use numpy's ``Philox`` counter-based bit generator keyed by the
64-bit seed; replication ``r`` of an ensemble uses ``base_seed + r`` and is
therefore reproducible on its own.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import (
    COMPARTMENTS, C_, E_, F_, H_, I_, R_, S_,
    BedSchedule, CompartmentState, DiseaseParams, Metapopulation, _force,
)

SEED_MASK = (1 << 64) - 1


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed) & SEED_MASK))


def _split(rng, total, weights):
    """Split ``total`` draws among destinations with the given weights."""
    parts = []
    remaining = total
    left = float(sum(weights))
    for w in weights[:-1]:
        if left <= 0:
            x = np.zeros_like(remaining)
        else:
            x = rng.binomial(remaining, min(w / left, 1.0))
        parts.append(x)
        remaining = remaining - x
        left -= w
    parts.append(remaining)
    return parts


def _stochastic_flows(x, params, meta, capacity, t, rng, rates):
    S, E, I, H, F = x[S_], x[E_], x[I_], x[H_], x[F_]
    lam = _force(I, H, F, params, meta, t)
    se = rng.binomial(S, lam)
    ei = rng.binomial(E, rates["EI"])

    p_i = rates["IH"] + rates["IR"] + rates["IF"]
    i_out = rng.binomial(I, min(p_i, 1.0))
    ih, ir, if_ = _split(rng, i_out, (rates["IH"], rates["IR"], rates["IF"]))
    # triage: admissions beyond free beds stay infectious in the community
    free = np.maximum(capacity - H, 0)
    ih = np.minimum(ih, free)

    p_h = rates["HF"] + rates["HR"]
    h_out = rng.binomial(H, min(p_h, 1.0))
    hf, hr = _split(rng, h_out, (rates["HF"], rates["HR"]))
    fr = rng.binomial(F, rates["FR"])
    return se, ei, ih, ir, if_, hf, hr, fr


def _advance(x, flows):
    se, ei, ih, ir, if_, hf, hr, fr = flows
    out = np.empty_like(x)
    out[S_] = x[S_] - se
    out[E_] = x[E_] + se - ei
    out[I_] = x[I_] + ei - ih - ir - if_
    out[H_] = x[H_] + ih - hf - hr
    out[F_] = x[F_] + if_ + hf - fr
    out[R_] = x[R_] + ir + hr + fr
    out[C_] = x[C_] + ei
    return out


def _integer_array(state: CompartmentState) -> np.ndarray:
    if not state.is_integer:
        raise ValueError("stochastic simulation requires integer compartment counts")
    return state.as_array().astype(np.int64)


def stochastic_step(state: CompartmentState, params: DiseaseParams, meta: Metapopulation,
                    beds: BedSchedule, rng: np.random.Generator) -> CompartmentState:
    x = _integer_array(state)
    state.check_conservation(meta.P, atol=0)
    flows = _stochastic_flows(x, params, meta, beds.capacity(state.t), state.t, rng,
                              params.rates())
    return CompartmentState.from_array(_advance(x, flows), t=state.t + 1)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Packed trajectory: ``counts[k]`` is the (7, N) state at ``t0 + k``."""

    counts: np.ndarray
    seed: int | None = None
    t0: int = 0

    @property
    def horizon(self) -> int:
        return self.counts.shape[0] - 1

    def __len__(self):
        return self.counts.shape[0]

    def state(self, k: int) -> CompartmentState:
        return CompartmentState.from_array(self.counts[k], t=self.t0 + k)

    @property
    def states(self) -> list[CompartmentState]:
        return [self.state(k) for k in range(len(self))]

    @property
    def C(self) -> np.ndarray:
        return self.counts[:, C_, :]


def simulate(initial: CompartmentState, params: DiseaseParams, meta: Metapopulation,
             beds: BedSchedule, T: int, seed: int) -> Trajectory:
    """One stochastic trajectory of ``T`` days from ``initial``."""
    if T < 0:
        raise ValueError("horizon T must be nonnegative")
    x = _integer_array(initial)
    initial.check_conservation(meta.P, atol=0)
    rng = make_rng(seed)
    rates = params.rates()
    out = np.empty((T + 1,) + x.shape, dtype=np.int64)
    out[0] = x
    t = initial.t
    for k in range(T):
        x = _advance(x, _stochastic_flows(x, params, meta, beds.capacity(t + k), t + k,
                                          rng, rates))
        out[k + 1] = x
    return Trajectory(out, seed=int(seed), t0=t)


@dataclass(frozen=True, eq=False)
class TrajectoryEnsemble:
    """Replications plus exact per-time means of C.

    ``sum_C`` keeps the integer sum so that aggregation is independent of the
    order replications were evaluated in.  ``replications`` is empty when the
    ensemble was built with ``keep=False``; ``final_C`` is always available.
    """

    replications: tuple[Trajectory, ...]
    sum_C: np.ndarray
    final_C: np.ndarray
    seeds: tuple[int, ...]

    @property
    def n_reps(self) -> int:
        return len(self.seeds)

    @property
    def mean_C(self) -> np.ndarray:
        return self.sum_C / self.n_reps

    def mean_counts(self) -> np.ndarray:
        if not self.replications:
            raise ValueError("ensemble was built without keeping trajectories")
        total = np.zeros(self.replications[0].counts.shape, dtype=np.int64)
        for tr in self.replications:
            total += tr.counts
        return total / self.n_reps


def _simulate_job(args):
    return simulate(*args)


def worker_count() -> int:
    raw = os.environ.get("EPIALLOC_THREADS", "1").strip() or "1"
    n = int(raw)
    if n < 0:
        raise ValueError("EPIALLOC_THREADS must be >= 0")
    if n == 0:
        return os.cpu_count() or 1
    return n


def replicate(initial: CompartmentState, params: DiseaseParams, meta: Metapopulation,
              beds: BedSchedule, T: int, n_reps: int, base_seed: int,
              keep: bool = True, workers: int | None = None) -> TrajectoryEnsemble:
    """Run ``n_reps`` trajectories seeded ``base_seed + r``."""
    if n_reps < 1:
        raise ValueError("n_reps must be at least 1")
    workers = worker_count() if workers is None else workers
    jobs = [(initial, params, meta, beds, T, base_seed + r) for r in range(n_reps)]
    if workers > 1 and n_reps > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reps = pool.map(_simulate_job, jobs, chunksize=max(1, n_reps // (4 * workers)))
            return _collect(reps, keep)
    return _collect(map(_simulate_job, jobs), keep)


def _collect(reps, keep: bool) -> TrajectoryEnsemble:
    total = None
    finals, seeds, kept = [], [], []
    for tr in reps:
        total = tr.C.copy() if total is None else total + tr.C
        finals.append(tr.C[-1])
        seeds.append(tr.seed)
        if keep:
            kept.append(tr)
    return TrajectoryEnsemble(tuple(kept), total, np.stack(finals), tuple(seeds))


def write_trajectory_csv(path, trajectory: Trajectory, meta: Metapopulation) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "population", *COMPARTMENTS])
        for k in range(len(trajectory)):
            for n, name in enumerate(meta.names):
                w.writerow([trajectory.t0 + k, name,
                            *(_fmt(v) for v in trajectory.counts[k, :, n])])


def read_trajectory_csv(path, meta: Metapopulation) -> Trajectory:
    rows = list(csv.DictReader(open(Path(path), newline="")))
    if not rows:
        raise ValueError(f"{path}: no trajectory rows")
    times = sorted({int(r["t"]) for r in rows})
    t0 = times[0]
    counts = np.zeros((len(times), 7, meta.size))
    for r in rows:
        k = int(r["t"]) - t0
        n = meta.index(r["population"])
        counts[k, :, n] = [float(r[c]) for c in COMPARTMENTS]
    if np.all(np.mod(counts, 1) == 0):
        counts = counts.astype(np.int64)
    return Trajectory(counts, t0=t0)


def _fmt(v) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() else repr(v)
