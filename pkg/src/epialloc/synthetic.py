"""Illustrative 11-district dataset in the same schema as real inputs.

Every number here is made up.  Geography, populations, travel rates,
costs and the "true" transmission parameters are drawn from a seeded
generator; the case series is one stochastic trajectory of the model under a
baseline bed allocation.  ``write_bundle`` regenerates the files shipped in
``epialloc/data/synthetic``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .calibrate import CaseSeries
from .dataio import write_baseline, write_case_data, write_metapopulation
from .model import BedSchedule, CompartmentState, DiseaseParams, Metapopulation
from .simulator import simulate

DATA_DIR = Path(__file__).parent / "data" / "synthetic"

NAMES = ("D01", "D02", "D03", "D04", "D05", "D06", "D07", "D08", "D09", "D10", "D11")
POPULATION = (1_450_000, 620_000, 560_000, 500_000, 470_000, 410_000,
              360_000, 330_000, 300_000, 270_000, 240_000)
INITIAL_CASES = (25, 10, 6, 4, 14, 2, 5, 2, 8, 3, 1)
# baseline: many small units in stage 1, most pending beds to the largest district
BASE_M = (120, 40, 30, 30, 40, 20, 30, 20, 30, 20, 20)
BASE_MT = (300, 80, 60, 40, 60, 30, 40, 20, 30, 20, 20)
DEPOTS = ("D03", "D05", "D08")
CLINICAL = dict(alpha=10.0, theta=0.6, delta=0.6, gamma_H=1 / 4, gamma_DH=1 / 8,
                gamma_F=1 / 2, gamma_I=1 / 10, gamma_IH=1 / 15)
TAU, T_DATA = 60, 188


@dataclass(frozen=True)
class SyntheticTruth:
    meta: Metapopulation
    params: DiseaseParams
    initial: CompartmentState
    baseline: BedSchedule
    cases: CaseSeries


def make_truth(seed: int = 2014, xi_scale: float = 1.0) -> SyntheticTruth:
    rng = np.random.default_rng(seed)
    n = len(NAMES)
    P = np.array(POPULATION, dtype=float)
    xy = rng.uniform(0.0, 250.0, (n, 2))
    d = np.sqrt(((xy[:, None] - xy[None]) ** 2).sum(-1))
    # gravity mixing: 6% of contacts happen away from home
    g = np.where(np.eye(n, dtype=bool), 0.0, P[None, :] / (d + 10.0) ** 2)
    c = 0.06 * g / g.sum(axis=1, keepdims=True) + np.diag(np.full(n, 0.94))
    meta = Metapopulation(NAMES, P, c, np.round(d, 1))
    params = DiseaseParams(
        xi_I=xi_scale * rng.uniform(0.17, 0.26, n),
        xi_H=rng.uniform(0.02, 0.08, n),
        xi_F=rng.uniform(0.25, 0.45, n),
        psi=rng.uniform(0.006, 0.012, n),
        **CLINICAL,
    )
    initial = CompartmentState.initial(P, INITIAL_CASES)
    baseline = BedSchedule(BASE_M, BASE_MT, TAU)
    traj = simulate(initial, params, meta, baseline, T_DATA - 1, seed)
    cases = CaseSeries(NAMES, np.arange(T_DATA), traj.C.astype(float))
    return SyntheticTruth(meta, params, initial, baseline, cases)


CONFIG_TEMPLATE = """\
# Illustrative synthetic 11-district bundle.  All values are invented.
[data]
metapopulation = metapopulation.csv
distances = distances.csv
cases = cases.csv
baseline = baseline.csv
exclude =

[costs]
reference_cost = 40000
reference_population = 1450000
medical_cost = 600
fuel_cost_per_km = 1.2
depots = {depots}

[disease]
alpha = 10
theta = 0.6
delta = 0.6
gamma_H = 0.25
gamma_DH = 0.125
gamma_F = 0.5
gamma_I = 0.1
gamma_IH = 0.0666666666666667
# initial guesses for the calibrated parameters (one value or one per population)
xi_I = 0.2
xi_H = 0.05
xi_F = 0.35
psi = 0.01

[horizon]
tau = {tau}
T = {T}

[budget]
first_stage = 505000
scenarios = 235000:0.25, 470000:0.5, 705000:0.25
fairness = population
fairness_multiplier = 2.5
sensitivity = 250000, 375000, 505000, 625000

[settings]
cutoff_1 = 20
cutoff_2 = {tau}
train_fraction = 0.8

[calibration]
tolerance = 1e-3
max_outer = 20
ensemble_reps = 20
restarts = 3

[training]
samples = 200
noise_sd = 50
reps = 0
lasso_grid = 0, 0.001, 0.003, 0.01, 0.03, 0.1
folds = 5

[evaluation]
reps = 1000
sensitivity_reps = 300
common_random_numbers = true

[solver]
node_limit = 500
abs_gap = 1e-6

[run]
seed = 2014
"""


def write_bundle(out_dir=DATA_DIR, seed: int = 2014) -> SyntheticTruth:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    truth = make_truth(seed)
    write_metapopulation(out / "metapopulation.csv", truth.meta, out / "distances.csv")
    write_case_data(out / "cases.csv", truth.cases)
    write_baseline(out / "baseline.csv", NAMES, truth.baseline)
    (out / "config.ini").write_text(CONFIG_TEMPLATE.format(depots=", ".join(DEPOTS),
                                                            tau=TAU, T=T_DATA))
    p = truth.params
    with open(out / "truth.csv", "w") as fh:
        fh.write("population,xi_I,xi_H,xi_F,psi\n")
        for i, name in enumerate(NAMES):
            fh.write(",".join([name, *(repr(float(v[i])) for v in (p.xi_I, p.xi_H, p.xi_F, p.psi))]) + "\n")
    return truth


def config_path() -> Path:
    return DATA_DIR / "config.ini"
