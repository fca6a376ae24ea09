import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linprog

from epialloc.curves import LogisticCurve, TwoStageCurves
from epialloc.lasso import KRegression
from epialloc.lp import solve_lp
from epialloc.milp import (
    AllocationInstance, AllocationSolution, MilpInfeasible, MilpProblem, build_constraints,
    build_objective, build_problem, check_solution, pack, read_instance, read_solution_csv,
    relaxation_bound, reoptimize_second_stage, solve_allocation, solve_milp, stage2_value,
    write_instance, write_solution,
)

TAU, T = 60, 188


def rand_instance(seed, N=None, W=None, M=5, r=None):
    rng = np.random.default_rng(seed)
    N = N or int(rng.integers(1, 4))
    W = W or int(rng.integers(1, 3))
    names = tuple(f"p{i}" for i in range(N))

    def curve():
        return LogisticCurve(float(rng.uniform(100, 1000)), float(rng.uniform(0.02, 0.2)),
                             float(rng.uniform(-4, 0)))

    curves = TwoStageCurves(names, tuple(curve() for _ in range(N)),
                            tuple(curve() for _ in range(N)), TAU, T)

    def kreg(stage):
        return KRegression(names, stage, rng.uniform(100, 500, N), rng.uniform(-0.5, 2, (N, N)),
                           rng.uniform(-30, 5, (N, N)), np.zeros(N), np.ones(N))

    h = rng.uniform(1, 10, N)
    o = rng.uniform(1, 20, N)
    B = float(rng.uniform(0, M * h.min()))
    p = rng.dirichlet(np.ones(W))
    p[-1] = 1 - p[:-1].sum()
    scen = tuple((float(rng.uniform(0, 40)), float(q)) for q in p)
    r = rng.uniform(0.3, 1, N) if r is None else np.full(N, r)
    return AllocationInstance(names, o, h, r, B, scen, curves, kreg(1), kreg(2),
                              rng.uniform(0, 50, N), M=M)


def divisors(inst):
    c1, c2 = inst.curves.stage1, inst.curves.stage2
    D1 = [1 + math.exp(-(c.a * TAU + c.b)) for c in c1]
    D2 = [1 + math.exp(-(c.a * (T - TAU) + c.b)) for c in c2]
    return D1, D2


def nested_I_tau(inst, m):
    """I_n(tau) from the stage-1 plateau model, written as plain loops."""
    D1, _ = divisors(inst)
    k1 = inst.kreg1
    N = inst.n
    out = []
    for n in range(N):
        K = k1.intercept[n]
        for j in range(N):
            K += k1.coef_inf[n, j] * inst.I0[j] + k1.coef_beds[n, j] * m[j]
        out.append(K / D1[n])
    return out


def nested_objective(inst, m, mt):
    _, D2 = divisors(inst)
    k2 = inst.kreg2
    I_tau = nested_I_tau(inst, m)
    N = inst.n
    total = 0.0
    for w, (_, p) in enumerate(inst.scenarios):
        for n in range(N):
            K = k2.intercept[n]
            for j in range(N):
                K += k2.coef_inf[n, j] * I_tau[j] + k2.coef_beds[n, j] * (m[j] + mt[w][j])
            total += p * K / D2[n]
    return total


def brute_force(inst):
    """Exhaustive search over (y, m, mt) with the untightened big-M."""
    N, M = inst.n, int(inst.M[0])
    _, D2 = divisors(inst)
    D2 = np.array(D2)
    k2 = inst.kreg2
    grid = np.array(list(itertools.product(range(M + 1), repeat=N)), dtype=float)
    best = math.inf
    for y in itertools.product((0, 1), repeat=N):
        y = np.array(y, dtype=float)
        for m in grid:
            if inst.o @ y + inst.h @ m > inst.B + 1e-9:
                continue
            if np.any(m > M * y) or np.any(m > inst.r * m.sum() + 1e-9):
                continue
            I_tau = np.array(nested_I_tau(inst, m))
            val = 0.0
            for extra, p in inst.scenarios:
                tot = grid + m
                ok = (grid @ inst.h <= extra + 1e-9) & np.all(grid <= M * y, axis=1)
                ok &= np.all(tot <= inst.r * tot.sum(axis=1, keepdims=True) + 1e-9, axis=1)
                K = k2.intercept + k2.coef_inf @ I_tau + tot[ok] @ k2.coef_beds.T
                val += p * float(np.min((K / D2).sum(axis=1)))
            best = min(best, val)
    return best


def hand_constraints_ok(inst, sol, tol=1e-9):
    """The allocation constraints checked one by one against the plain big-M."""
    y, m, mt = sol.y, sol.m, sol.m_tilde
    M = inst.M
    checks = [inst.o @ y + inst.h @ m - inst.B]
    checks += list(m - M * y)
    checks += list(m - inst.r * m.sum())
    for w, (extra, _) in enumerate(inst.scenarios):
        checks.append(inst.h @ mt[w] - extra)
        checks += list(mt[w] - M * y)
        tot = m + mt[w]
        checks += list(tot - inst.r * tot.sum())
    ints = np.concatenate([y, m, mt.ravel()])
    return (max(checks) <= tol and np.all(ints >= 0) and np.all(ints == np.rint(ints))
            and set(np.unique(y)) <= {0, 1})


# ---------------------------------------------------------------------------
# objective substitution


def test_substitution_matches_nested_closed_forms():
    rng = np.random.default_rng(0)
    for seed in range(100):
        inst = rand_instance(seed, N=int(rng.integers(1, 5)), W=int(rng.integers(1, 4)))
        problem = build_problem(inst)
        m = rng.integers(0, 50, inst.n)
        mt = rng.integers(0, 50, (inst.n_scenarios, inst.n))
        y = rng.integers(0, 2, inst.n)
        got = problem.objective(pack(y, m, mt))
        want = nested_objective(inst, m, mt)
        assert got == pytest.approx(want, rel=1e-12, abs=1e-9)


def test_single_population_coefficient_by_hand():
    names = ("x",)
    c1, c2 = LogisticCurve(400, 0.08, -2.0), LogisticCurve(900, 0.03, 0.5)
    curves = TwoStageCurves(names, (c1,), (c2,), TAU, T)
    rho1 = (120.0, 1.7, -4.0)   # intercept, infections, beds
    rho2 = (300.0, 0.9, -11.0)
    k1 = KRegression(names, 1, np.array([rho1[0]]), np.array([[rho1[1]]]),
                     np.array([[rho1[2]]]), np.zeros(1), np.ones(1))
    k2 = KRegression(names, 2, np.array([rho2[0]]), np.array([[rho2[1]]]),
                     np.array([[rho2[2]]]), np.zeros(1), np.ones(1))
    inst = AllocationInstance(names, [5.0], [2.0], [1.0], 100.0, ((30.0, 1.0),), curves, k1, k2,
                              [25.0])
    D1 = 1 + math.exp(-(0.08 * 60 - 2.0))
    D2 = 1 + math.exp(-(0.03 * 128 + 0.5))
    form = build_objective(inst)
    assert form.coef_m[0] == pytest.approx((rho2[1] * rho1[2] / D1 + rho2[2]) / D2, rel=1e-12)
    assert form.coef_mt[0, 0] == pytest.approx(rho2[2] / D2, rel=1e-12)
    want_const = (rho2[0] + rho2[1] * (rho1[0] + rho1[1] * 25.0) / D1) / D2
    assert form.constant == pytest.approx(want_const, rel=1e-12)


def test_decision_free_objective_is_constant():
    inst = rand_instance(4, N=3, W=2)
    zero = lambda k: KRegression(k.names, k.stage, k.intercept, k.coef_inf,
                                 np.zeros_like(k.coef_beds), k.lam, k.r2)
    flat = AllocationInstance(inst.names, inst.o, inst.h, inst.r, inst.B, inst.scenarios,
                              inst.curves, zero(inst.kreg1), zero(inst.kreg2), inst.I0, M=inst.M)
    form = build_objective(flat)
    assert np.all(form.coef_m == 0) and np.all(form.coef_mt == 0)
    sol = solve_allocation(flat)
    assert sol.objective == pytest.approx(form.constant, rel=1e-12)
    assert hand_constraints_ok(flat, sol)


# ---------------------------------------------------------------------------
# constraints


def test_row_count_eleven_populations_three_scenarios():
    inst = rand_instance(1, N=11, W=3, M=50)
    A, senses, b, names = build_constraints(inst)
    assert A.shape[0] == 1 + 11 + 11 + 3 + 33 + 33 == 92
    assert len(names) == len(set(names)) == 92


def test_zero_budget_forces_closed_first_stage():
    inst = rand_instance(2, N=3, W=2)
    zero = AllocationInstance(inst.names, inst.o, inst.h, inst.r, 0.0, inst.scenarios,
                              inst.curves, inst.kreg1, inst.kreg2, inst.I0, M=inst.M)
    sol = solve_allocation(zero)
    assert np.all(sol.y == 0) and np.all(sol.m == 0) and np.all(sol.m_tilde == 0)
    assert sol.objective == pytest.approx(build_objective(zero).constant, rel=1e-12)


def test_budget_below_opening_cost():
    inst = rand_instance(3, N=2, W=1)
    B = 0.5 * float(inst.o.min())
    low = AllocationInstance(inst.names, inst.o, inst.h, inst.r, B, inst.scenarios, inst.curves,
                             inst.kreg1, inst.kreg2, inst.I0, M=inst.M)
    sol = solve_allocation(low)
    assert np.all(sol.y == 0) and np.all(sol.m == 0)


def drop_fairness(problem: MilpProblem) -> MilpProblem:
    keep = [i for i, n in enumerate(problem.row_names) if not n.startswith("fair")]
    return MilpProblem(problem.names, problem.c, problem.constant, problem.A[keep],
                       tuple(problem.senses[i] for i in keep), problem.b[keep],
                       tuple(problem.row_names[i] for i in keep), problem.lower,
                       problem.upper, problem.integer)


@pytest.mark.parametrize("seed", [5, 6, 7])
def test_unit_fairness_is_vacuous(seed):
    inst = rand_instance(seed, N=3, W=2, r=1.0)
    problem = build_problem(inst)
    a = solve_milp(problem)
    b = solve_milp(drop_fairness(problem))
    assert a.objective == pytest.approx(b.objective, abs=1e-9)


# ---------------------------------------------------------------------------
# exact solution


@pytest.mark.parametrize("block", range(4))
def test_brute_force_agreement(block):
    for seed in range(block * 25, block * 25 + 25):
        inst = rand_instance(seed)
        sol = solve_allocation(inst)
        assert sol.status == "optimal"
        assert sol.objective == pytest.approx(brute_force(inst), abs=1e-6, rel=1e-9), seed
        assert check_solution(inst, sol) <= 1e-9
        assert hand_constraints_ok(inst, sol)
        assert sol.objective == pytest.approx(
            nested_objective(inst, sol.m, sol.m_tilde), rel=1e-12, abs=1e-9)
        assert relaxation_bound(inst) <= sol.objective + 1e-9


def test_two_population_hand_instance():
    inst = rand_instance(99, N=2, W=2, M=5)
    sol = solve_allocation(inst)
    assert sol.objective == pytest.approx(brute_force(inst), abs=1e-6)
    assert sol.gap <= 1e-6


def test_budget_monotonicity():
    base = rand_instance(12, N=3, W=2, M=8)
    values = []
    for B in np.linspace(0, 8 * base.h.min(), 6):
        inst = AllocationInstance(base.names, base.o, base.h, base.r, float(B), base.scenarios,
                                  base.curves, base.kreg1, base.kreg2, base.I0, M=base.M)
        values.append(solve_allocation(inst).objective)
    assert all(b <= a + 1e-9 for a, b in zip(values, values[1:]))


def test_duplicate_scenarios_equal_single_scenario():
    base = rand_instance(21, N=3, W=1)
    extra = base.scenarios[0][0]
    twin = AllocationInstance(base.names, base.o, base.h, base.r, base.B,
                              ((extra, 0.5), (extra, 0.5)), base.curves, base.kreg1, base.kreg2,
                              base.I0, M=base.M)
    assert solve_allocation(twin).objective == pytest.approx(solve_allocation(base).objective,
                                                             abs=1e-9)


def test_incumbent_is_never_worsened():
    inst = rand_instance(30, N=3, W=2)
    opt = solve_allocation(inst)
    again = solve_allocation(inst, incumbent=opt, node_limit=0)
    assert again.objective <= opt.objective + 1e-12


def test_infeasible_problem_certificate():
    problem = MilpProblem(("x",), np.array([1.0]), 0.0, np.array([[1.0], [-1.0]]),
                          ("<=", "<="), np.array([1.0, -2.0]), ("a", "b"), np.zeros(1),
                          np.array([5.0]), np.array([True]))
    with pytest.raises(MilpInfeasible) as err:
        solve_milp(problem)
    assert err.value.infeasibility > 0


def test_integer_infeasible_problem():
    # 0.2 <= x <= 0.8 has LP points but no integer point
    problem = MilpProblem(("x",), np.array([1.0]), 0.0, np.array([[1.0], [-1.0]]),
                          ("<=", "<="), np.array([0.8, -0.2]), ("a", "b"), np.zeros(1),
                          np.array([5.0]), np.array([True]))
    with pytest.raises(MilpInfeasible):
        solve_milp(problem)


# ---------------------------------------------------------------------------
# second-stage re-optimization


def test_reoptimize_zero_budget():
    inst = rand_instance(40, N=3, W=2)
    sol = solve_allocation(inst)
    mt, _ = reoptimize_second_stage(inst, sol.y, sol.m, 0.0)
    assert np.all(mt == 0)


@pytest.mark.parametrize("seed", [41, 42, 43])
def test_reoptimize_never_worse_than_hedged(seed):
    inst = rand_instance(seed, N=3, W=2)
    sol = solve_allocation(inst)
    for w, (extra, _) in enumerate(inst.scenarios):
        mt, value = reoptimize_second_stage(inst, sol.y, sol.m, extra)
        assert value <= stage2_value(inst, sol.m, sol.m_tilde[w]) + 1e-9
        assert value == pytest.approx(stage2_value(inst, sol.m, mt), rel=1e-12)


def test_reoptimize_single_open_district():
    inst = rand_instance(44, N=3, W=1, M=20, r=1.0)
    y = np.array([0, 1, 0])
    m = np.array([0, 0, 0])
    mt, _ = reoptimize_second_stage(inst, y, m, 1e6)
    assert mt[0] == 0 and mt[2] == 0
    if inst.kreg2.coef_beds[:, 1].sum() < 0:
        assert mt[1] == inst.M[1]


def test_reoptimize_rejects_infeasible_first_stage():
    inst = rand_instance(45, N=2, W=1)
    with pytest.raises(ValueError):
        reoptimize_second_stage(inst, [0, 0], [1, 0], 10.0)


# ---------------------------------------------------------------------------
# instance validation and files


def test_instance_invariants():
    inst = rand_instance(50, N=2, W=2)
    kw = dict(names=inst.names, o=inst.o, h=inst.h, r=inst.r, B=inst.B, scenarios=inst.scenarios,
              curves=inst.curves, kreg1=inst.kreg1, kreg2=inst.kreg2, I0=inst.I0)
    with pytest.raises(ValueError, match="probabilities"):
        AllocationInstance(**{**kw, "scenarios": ((1.0, 0.5), (2.0, 0.4))})
    with pytest.raises(ValueError, match="costs"):
        AllocationInstance(**{**kw, "h": np.array([1.0, 0.0])})
    with pytest.raises(ValueError, match="big-M"):
        AllocationInstance(**{**kw, "B": 1000.0, "M": 1})


def test_instance_and_solution_round_trip(tmp_path):
    inst = rand_instance(60, N=3, W=2)
    write_instance(tmp_path / "i.txt", inst)
    back = read_instance(tmp_path / "i.txt")
    problem, again = build_problem(inst), build_problem(back)
    np.testing.assert_array_equal(problem.c, again.c)
    np.testing.assert_array_equal(problem.A, again.A)
    np.testing.assert_array_equal(problem.b, again.b)
    assert problem.constant == again.constant
    sol = solve_allocation(inst)
    write_solution(tmp_path / "s.txt", tmp_path / "s.csv", inst, sol)
    names, y, m, mt = read_solution_csv(tmp_path / "s.csv", 2)
    assert names == inst.names
    np.testing.assert_array_equal(y, sol.y)
    np.testing.assert_array_equal(m, sol.m)
    np.testing.assert_array_equal(mt, sol.m_tilde)
    assert "status = optimal" in (tmp_path / "s.txt").read_text()


def test_solution_gap_is_nonnegative():
    sol = AllocationSolution(np.zeros(1), np.zeros(1), np.zeros((1, 1)), 5.0, 6.0)
    assert sol.gap == 0.0


# ---------------------------------------------------------------------------
# LP relaxations against an external solver


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31))
def test_lp_matches_highs(seed):
    rng = np.random.default_rng(seed)
    n, k = int(rng.integers(1, 6)), int(rng.integers(1, 6))
    c = rng.normal(size=n)
    A = rng.normal(size=(k, n))
    x0 = rng.uniform(0, 3, n)
    senses = tuple(rng.choice(["<=", ">=", "="], size=k))
    b = A @ x0 + np.where(np.array(senses) == "<=", 1.0, np.where(np.array(senses) == ">=", -1.0, 0.0))
    lo, up = np.zeros(n), np.full(n, 5.0)
    ours = solve_lp(c, A, senses, b, lo, up)
    ub = [A[i] if s == "<=" else -A[i] for i, s in enumerate(senses) if s != "="]
    ubv = [b[i] if s == "<=" else -b[i] for i, s in enumerate(senses) if s != "="]
    eq = [i for i, s in enumerate(senses) if s == "="]
    ref = linprog(c, A_ub=np.array(ub) if ub else None, b_ub=ubv if ub else None,
                  A_eq=A[eq] if eq else None, b_eq=b[eq] if eq else None,
                  bounds=list(zip(lo, up)), method="highs")
    assert ours.status == "optimal" and ref.status == 0
    assert ours.objective == pytest.approx(ref.fun, rel=1e-7, abs=1e-7)


def test_lp_detects_infeasibility():
    res = solve_lp(np.ones(1), np.array([[1.0], [1.0]]), ("<=", ">="), np.array([1.0, 2.0]),
                   np.zeros(1), np.full(1, 10.0))
    assert res.status == "infeasible" and res.infeasibility > 0
