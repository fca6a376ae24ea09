import math

import numpy as np
import pytest

from epialloc.milp import build_objective, build_problem, pack
from epialloc.model import BedSchedule
from epialloc.pipeline import (
    Runner, SettingConfig, evaluate_allocation, make_instance, scenario_set_default,
    sensitivity_sweep, simulate_finals,
)
from epialloc.synthetic import make_truth

from conftest import fast_config

T = 120


@pytest.fixture(scope="module")
def truth():
    return make_truth()


@pytest.fixture(scope="module")
def runner():
    r = Runner(fast_config())
    r.results = {k: r.run_setting(k) for k in (1, 2, 3)}
    return r


def base_finals(truth, reps, seed=5, schedule=None):
    sched = truth.baseline if schedule is None else schedule
    return simulate_finals(sched, truth.params, truth.meta, truth.initial, T, reps, seed)


def test_scenario_defaults():
    scenarios, budget = scenario_set_default()
    assert [b for b, _ in scenarios] == [235_000.0, 470_000.0, 705_000.0]
    assert [p for _, p in scenarios] == [0.25, 0.5, 0.25]
    medium = scenarios[1][0]
    assert scenarios[0][0] == 0.5 * medium and scenarios[2][0] == 1.5 * medium
    assert budget == 505_000.0


def test_setting_config_invariants():
    with pytest.raises(ValueError):
        SettingConfig(4, 20, 60, 188, 1.0, ((1.0, 1.0),), 10, 0)
    with pytest.raises(ValueError):
        SettingConfig(1, 200, 60, 188, 1.0, ((1.0, 1.0),), 10, 0)
    with pytest.raises(ValueError, match="re-optimization"):
        SettingConfig(2, 20, 60, 188, 1.0, ((1.0, 1.0),), 10, 0)
    cfg = fast_config()
    s2 = SettingConfig.from_run(cfg, 2)
    assert (s2.cutoff, s2.reopt_cutoff) == (cfg.cutoffs[0], cfg.cutoffs[1])
    assert SettingConfig.from_run(cfg, 3).cutoff is None


def test_baseline_policy_scores_exactly_zero(truth):
    reps = 40
    ev = evaluate_allocation([truth.baseline] * 3, [0.25, 0.5, 0.25], truth.params, truth.meta,
                             truth.initial, T, reps, 5, base_finals(truth, reps))
    assert ev.improvement_pct == 0.0 and ev.improvement_se == 0.0
    assert ev.averted == 0.0


def test_expected_value_is_probability_weighted(truth):
    reps = 30
    more = BedSchedule(truth.baseline.m * 2, truth.baseline.m_tilde * 2, truth.baseline.tau)
    fewer = BedSchedule(truth.baseline.m // 2, truth.baseline.m_tilde // 2, truth.baseline.tau)
    probs = [0.2, 0.3, 0.5]
    scheds = [fewer, truth.baseline, more]
    ev = evaluate_allocation(scheds, probs, truth.params, truth.meta, truth.initial, T, reps, 5,
                             base_finals(truth, reps))
    per = [base_finals(truth, reps, schedule=s).sum(axis=1).mean() for s in scheds]
    np.testing.assert_allclose(ev.scenario_means, per, rtol=1e-12)
    assert ev.expected == pytest.approx(sum(p * v for p, v in zip(probs, per)), rel=1e-12)
    want = (ev.baseline_mean - ev.expected) / ev.baseline_mean * 100
    assert ev.improvement_pct == pytest.approx(want, rel=1e-9)


def test_more_beds_everywhere_never_hurts(truth):
    reps = 100
    more = BedSchedule(truth.baseline.m + 20, truth.baseline.m_tilde + 20, truth.baseline.tau)
    ev = evaluate_allocation([more], [1.0], truth.params, truth.meta, truth.initial, T, reps, 5,
                             base_finals(truth, reps))
    assert ev.improvement_pct >= -3 * ev.improvement_se


def test_evaluation_rejects_mismatched_reps(truth):
    with pytest.raises(ValueError):
        evaluate_allocation([truth.baseline], [1.0], truth.params, truth.meta, truth.initial,
                            T, 5, 5, base_finals(truth, 4))


def random_feasible(instance, problem, rng, n):
    """Random integer points accepted by the constraint rows."""
    N, W = instance.n, instance.n_scenarios
    out = []
    while len(out) < n:
        y = (rng.random(N) < rng.uniform(0.3, 1.0)).astype(float)
        share = instance.r * y
        m = np.floor(rng.uniform(0, 1.2) * instance.B / instance.h.sum() * share / share.max()
                     if share.max() > 0 else np.zeros(N))
        mt = np.array([np.floor(rng.uniform(0, 1.2) * b / instance.h.sum() * y)
                       for b in instance.extra_budgets])
        x = pack(y, m, mt)
        if problem.is_feasible(x):
            out.append((y, m, mt))
    return out


def test_planned_objective_beats_random_allocations(runner):
    sol = runner.planned_solution(3)
    instance = make_instance(runner.ds, runner.model(None), runner.cfg.budget,
                             runner.cfg.scenarios)
    problem = build_problem(instance)
    obj = build_objective(instance)
    assert problem.is_feasible(pack(sol.y, sol.m, sol.m_tilde))
    assert obj(sol.y, sol.m, sol.m_tilde) == pytest.approx(sol.objective, rel=1e-9)
    points = random_feasible(instance, problem, np.random.default_rng(0), 100)
    worst_gap = min(obj(*p) - sol.objective for p in points)
    assert worst_gap >= -1e-9


def test_setting_results_are_consistent(runner):
    r1, r2, r3 = (runner.results[k] for k in (1, 2, 3))
    np.testing.assert_array_equal(r2.solution.m, r1.solution.m)
    for sched in r2.schedules:
        np.testing.assert_array_equal(sched.m, r1.solution.m)
    assert np.all(r2.reopt_values <= r2.hedged_values + 1e-9)
    assert r3.model.cutoff is None
    for res in (r1, r2, r3):
        ev = res.evaluation
        assert ev.baseline_mean == r1.evaluation.baseline_mean
        assert math.isfinite(ev.improvement_pct)


def test_sensitivity_duplicates_and_monotone_predictions(runner):
    budgets = (250_000.0, 505_000.0, 505_000.0, 625_000.0)
    rows = sensitivity_sweep(runner, budgets, n_reps=10)
    assert len(rows) == len(budgets) * len(runner.cfg.scenarios)
    for level in range(len(runner.cfg.scenarios)):
        lvl = [r for r in rows if r.level == level]
        a, b = lvl[1], lvl[2]
        assert (a.predicted, a.simulated) == (b.predicted, b.simulated)
        np.testing.assert_array_equal(a.m, b.m)
        preds = [r.predicted for r in lvl]
        assert all(y <= x + 1e-9 for x, y in zip(preds, preds[1:]))


def test_sensitivity_rejects_nonpositive_budget(runner):
    with pytest.raises(ValueError):
        sensitivity_sweep(runner, (0.0, 1.0), n_reps=2)
