"""Two-stage stochastic bed-allocation MILP and its branch-and-bound solver.

Decision variables: ``y_n`` (open a treatment unit), ``m_n`` (first-stage
beds) and ``mt_{w,n}`` (second-stage beds under budget scenario ``w``).  The
objective is the expected cumulative infected count at ``T`` predicted by the
logistic curves with lasso plateaus; substituting the stage-1 prediction of
cumulative infections at ``tau`` into the stage-2 plateau keeps it linear.
"""

from __future__ import annotations

import csv
import heapq
import itertools
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .curves import LogisticCurve, TwoStageCurves
from .lasso import KRegression
from .lp import LPResult, solve_lp

logger = logging.getLogger(__name__)

INT_TOL = 1e-6
RESIDUAL_TOL = 1e-9


class MilpInfeasible(Exception):
    """The LP relaxation at the root has no feasible point.

    ``infeasibility`` is the optimal phase-1 value (sum of artificial
    variables), a positive number certifying that no relaxed point exists.
    """

    def __init__(self, message: str, infeasibility: float):
        super().__init__(message)
        self.infeasibility = infeasibility


@dataclass(frozen=True, eq=False)
class MilpProblem:
    names: tuple[str, ...]
    c: np.ndarray
    constant: float
    A: np.ndarray
    senses: tuple[str, ...]
    b: np.ndarray
    row_names: tuple[str, ...]
    lower: np.ndarray
    upper: np.ndarray
    integer: np.ndarray

    def __post_init__(self):
        n = len(self.names)
        if self.c.shape != (n,) or self.A.shape[1:] != (n,):
            raise ValueError("objective and constraint columns must match the variables")
        if not len(self.senses) == len(self.b) == len(self.row_names) == self.A.shape[0]:
            raise ValueError("each constraint row needs a sense, rhs, and name")
        if any(s not in ("<=", ">=", "=") for s in self.senses):
            raise ValueError("constraint senses must be '<=', '>=' or '='")

    @property
    def n_vars(self) -> int:
        return len(self.names)

    @property
    def n_rows(self) -> int:
        return self.A.shape[0]

    def objective(self, x) -> float:
        return float(self.c @ np.asarray(x, dtype=float)) + self.constant

    def residuals(self, x) -> np.ndarray:
        """Scaled constraint violations (0 where satisfied), bounds included."""
        x = np.asarray(x, dtype=float)
        ax = self.A @ x
        scale = np.maximum(1.0, np.abs(self.A) @ np.abs(x) + np.abs(self.b))
        diff = ax - self.b
        s = np.array(self.senses)
        viol = np.where(s == "<=", np.maximum(diff, 0),
                        np.where(s == ">=", np.maximum(-diff, 0), np.abs(diff)))
        bound = np.maximum(self.lower - x, 0) + np.maximum(x - self.upper, 0)
        return np.concatenate([viol / scale, bound])

    def is_feasible(self, x, tol: float = RESIDUAL_TOL) -> bool:
        x = np.asarray(x, dtype=float)
        if np.any(self.integer & (np.abs(x - np.rint(x)) > 0)):
            return False
        return bool(np.all(self.residuals(x) <= tol))

    def lp_relaxation(self, lower=None, upper=None):
        lower = self.lower if lower is None else lower
        upper = self.upper if upper is None else upper
        res = solve_lp(self.c, self.A, self.senses, self.b, lower, upper)
        if res.status == "optimal":
            res = LPResult(res.status, res.x, res.objective + self.constant)
        return res


@dataclass(frozen=True)
class MilpResult:
    x: np.ndarray
    objective: float
    bound: float
    status: str  # "optimal" | "node_limit" | "time_limit"
    nodes: int

    @property
    def gap(self) -> float:
        return max(self.objective - self.bound, 0.0)


def _round_candidates(problem: MilpProblem, x: np.ndarray):
    xi = x.copy()
    ints = problem.integer
    yield np.where(ints, np.rint(xi), xi)
    down = np.where(ints, np.floor(xi + INT_TOL), xi)
    yield down
    # binaries up, everything else down: keeps linking rows satisfied
    binary = ints & (problem.lower == 0) & (problem.upper == 1)
    up_bin = np.where(binary, np.ceil(xi - INT_TOL), down)
    yield up_bin
    if all(sn == "<=" for sn in problem.senses) and np.all(ints):
        fixed = _repair(problem, up_bin)
        if fixed is not None:
            yield _improve(problem, fixed)


def _repair(problem: MilpProblem, x: np.ndarray, max_iter: int = 10_000):
    """Shrink variables in violated rows until every ``<=`` row holds.

    Only lowers variables, so it terminates; returns None if it gets stuck.
    """
    A, b, lo = problem.A, problem.b, problem.lower
    x = np.clip(x, lo, problem.upper)
    for _ in range(max_iter):
        over = A @ x - b
        tol = RESIDUAL_TOL * np.maximum(1.0, np.abs(A) @ np.abs(x) + np.abs(b))
        i = int(np.argmax(over - tol))
        if over[i] <= tol[i]:
            return x
        room = x - lo
        cand = np.flatnonzero((A[i] > 0) & (room > 0))
        if cand.size == 0:
            return None
        j = cand[np.argmax(A[i, cand] * room[cand])]
        x = x.copy()
        x[j] -= min(room[j], max(1.0, math.ceil(over[i] / A[i, j] - 1e-9)))
    return None


def _improve(problem: MilpProblem, x: np.ndarray, max_passes: int = 200):
    """Greedy passes raising variables with negative cost as far as the rows allow."""
    A, b, c, up = problem.A, problem.b, problem.c, problem.upper
    order = np.argsort(c, kind="stable")
    order = order[c[order] < 0]
    x = x.copy()
    for _ in range(max_passes):
        moved = False
        for j in order:
            slack = b - A @ x
            pos = A[:, j] > 0
            limit = up[j] - x[j]
            if pos.any():
                limit = min(limit, float(np.min(np.maximum(slack[pos], 0.0) / A[pos, j])))
            step = math.floor(limit + 1e-9)
            if step >= 1:
                trial = x.copy()
                trial[j] += step
                if problem.is_feasible(trial):
                    x = trial
                    moved = True
        if not moved:
            break
    return x


def _dive(problem: MilpProblem, lo, up, x, max_restarts: int = 20):
    """Fractional diving: fix the least fractional variable to its nearest integer, re-solve.

    Falls back to the other rounding direction when the nearest one is
    infeasible.  When both are, the remaining variables are rounded down and
    repaired, and the dive restarts from ``x`` with that variable moved to the
    front of the fixing order.  Returns the best point found, or None.
    """
    first: list[int] = []
    best, best_obj = None, math.inf
    for _ in range(max_restarts + 1):
        cand, stuck = _dive_once(problem, lo, up, x, first)
        if cand is not None and problem.is_feasible(cand) and problem.objective(cand) < best_obj:
            best, best_obj = cand, problem.objective(cand)
        if stuck is None or stuck in first:
            break
        first.append(stuck)
    return best


def _dive_once(problem, lo, up, x, first):
    lo, up = lo.copy(), up.copy()
    while True:
        frac = np.where(problem.integer, np.abs(x - np.rint(x)), 0.0)
        open_ = problem.integer & (frac > INT_TOL)
        if not open_.any():
            cand = np.where(problem.integer, np.rint(x), x)
            return (_improve(problem, cand) if problem.is_feasible(cand) else None), None
        pri = [j for j in first if open_[j]]
        j = pri[0] if pri else int(np.flatnonzero(open_)[np.argmin(frac[open_])])
        near, far = np.rint(x[j]), (np.floor(x[j]) if np.rint(x[j]) > x[j] else np.ceil(x[j]))
        for v in (near, far):
            tlo, tup = lo.copy(), up.copy()
            tlo[j] = tup[j] = v
            res = problem.lp_relaxation(tlo, tup)
            if res.status == "optimal":
                lo, up, x = tlo, tup, res.x
                break
        else:
            # dead end: round the rest down from the last feasible relaxed point
            fixed = _repair(problem, np.where(problem.integer, np.floor(x + INT_TOL), x))
            return (None if fixed is None else _improve(problem, fixed)), j


class _BinaryFixing:
    """Primal heuristic: fix the binaries, solve the LP over the rest, round and repair.

    Only used when every row is ``<=`` and every variable is integer, which
    is what :func:`_repair` needs.  Results are cached per binary pattern.
    """

    def __init__(self, problem: MilpProblem):
        self.problem = problem
        self.binary = problem.integer & (problem.lower == 0) & (problem.upper == 1)
        self.enabled = (bool(self.binary.any()) and bool(np.all(problem.integer))
                        and all(s == "<=" for s in problem.senses))
        self.cache: dict[bytes, tuple[float, np.ndarray | None]] = {}

    def evaluate(self, pattern: np.ndarray):
        key = pattern.astype(np.int8).tobytes()
        if key in self.cache:
            return self.cache[key]
        p = self.problem
        lo = np.where(self.binary, pattern, p.lower)
        up = np.where(self.binary, pattern, p.upper)
        out: tuple[float, np.ndarray | None] = (math.inf, None)
        res = p.lp_relaxation(lo, up)
        if res.status == "optimal":
            cands = [_dive(p, lo, up, res.x)]
            fixed = _repair(p, np.where(p.integer, np.floor(res.x + INT_TOL), res.x))
            if fixed is not None:
                cands.append(_improve(p, fixed))
            for cand in cands:
                if cand is not None and p.is_feasible(cand):
                    obj = p.objective(cand)
                    if obj < out[0]:
                        out = (obj, cand)
        self.cache[key] = out
        return out

    def pattern(self, x: np.ndarray) -> np.ndarray:
        return np.ceil(x[self.binary] - INT_TOL).clip(0, 1)

    def _full(self, bits):
        full = np.zeros(self.problem.n_vars)
        full[self.binary] = bits
        return full

    def at_node(self, x: np.ndarray):
        return self.evaluate(self._full(self.pattern(x)))

    def local_search(self, x: np.ndarray, max_evals: int = 200):
        """First-improvement search over single-bit flips of the rounded pattern."""
        bits = self.pattern(x)
        best = self.evaluate(self._full(bits))
        evals = 0
        improved = True
        while improved and evals < max_evals:
            improved = False
            for j in range(bits.size):
                trial = bits.copy()
                trial[j] = 1 - trial[j]
                evals += 1
                cand = self.evaluate(self._full(trial))
                if cand[0] < best[0] - 1e-9:
                    bits, best, improved = trial, cand, True
                if evals >= max_evals:
                    break
        return best


def solve_milp(problem: MilpProblem, time_limit: float | None = None, abs_gap: float = 1e-6,
               node_limit: int | None = None, incumbent=None) -> MilpResult:
    """Best-bound branch and bound over LP relaxations.

    Branches on the most fractional integer variable (lowest index on ties).
    ``incumbent`` seeds the upper bound with a known feasible point; the
    returned objective never exceeds its value.
    """
    start = time.monotonic()
    root = problem.lp_relaxation()
    if root.status == "infeasible":
        raise MilpInfeasible("LP relaxation is infeasible at the root", root.infeasibility)
    if root.status != "optimal":
        raise RuntimeError(f"LP relaxation is {root.status} at the root")

    best_x = None
    best_obj = math.inf
    if incumbent is not None:
        inc = np.asarray(incumbent, dtype=float)
        if not problem.is_feasible(inc):
            raise ValueError("supplied incumbent violates the problem constraints")
        best_x, best_obj = inc, problem.objective(inc)

    fixing = _BinaryFixing(problem)
    if fixing.enabled:
        obj, cand = fixing.local_search(root.x)
        if cand is not None and obj < best_obj:
            best_x, best_obj = cand, obj

    counter = itertools.count()
    heap = [(root.objective, next(counter), problem.lower.copy(), problem.upper.copy(), root.x)]
    nodes = 0
    status = "optimal"
    bound = root.objective
    while heap:
        node_bound, _, lo, up, x = heap[0]
        bound = node_bound
        if node_bound >= best_obj - abs_gap:
            break
        if node_limit is not None and nodes >= node_limit:
            status = "node_limit"
            break
        if time_limit is not None and time.monotonic() - start > time_limit:
            status = "time_limit"
            break
        heapq.heappop(heap)
        nodes += 1

        frac = np.where(problem.integer, np.abs(x - np.rint(x)), 0.0)
        candidates = list(_round_candidates(problem, x))
        if fixing.enabled:
            candidates.append(fixing.at_node(x)[1])
        for cand in candidates:
            if cand is not None and problem.is_feasible(cand):
                obj = problem.objective(cand)
                if obj < best_obj:
                    best_x, best_obj = cand, obj
        if np.all(frac <= INT_TOL):
            if np.all(frac == 0) or problem.is_feasible(np.where(problem.integer, np.rint(x), x)):
                continue
        # most fractional; nearly-integral but infeasible points branch on the largest offset
        dist = np.where(problem.integer, np.minimum(x - np.floor(x), np.ceil(x) - x), -1.0)
        j = int(np.argmax(dist))
        if dist[j] <= 0:
            continue
        for child_lo, child_up in (
            (lo, np.where(np.arange(len(up)) == j, math.floor(x[j]), up)),
            (np.where(np.arange(len(lo)) == j, math.ceil(x[j]), lo), up),
        ):
            res = problem.lp_relaxation(child_lo, child_up)
            if res.status == "optimal" and res.objective < best_obj - abs_gap:
                heapq.heappush(heap, (res.objective, next(counter), child_lo, child_up, res.x))
    else:
        bound = best_obj

    if best_x is None:
        if status == "optimal":
            raise MilpInfeasible("no integer-feasible point exists", 0.0)
        raise RuntimeError(f"{status} reached before any integer-feasible point was found")
    bound = min(bound, best_obj)
    return MilpResult(best_x, best_obj, bound, status, nodes)


# ---------------------------------------------------------------------------
# Two-stage allocation model


@dataclass(frozen=True, eq=False)
class AllocationInstance:
    names: tuple[str, ...]
    o: np.ndarray
    h: np.ndarray
    r: np.ndarray
    B: float
    scenarios: tuple[tuple[float, float], ...]
    curves: TwoStageCurves
    kreg1: KRegression
    kreg2: KRegression
    I0: np.ndarray
    M: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.names)
        for name in ("o", "h", "r", "I0"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (n,):
                raise ValueError(f"{name}: expected a vector of length {n}")
            object.__setattr__(self, name, arr)
        if np.any(self.o <= 0) or np.any(self.h <= 0):
            raise ValueError("o, h: costs must be positive")
        if np.any(self.r <= 0) or np.any(self.r > 1):
            raise ValueError("r: fairness fractions must lie in (0, 1]")
        if not self.scenarios:
            raise ValueError("scenarios: at least one scenario required")
        scen = tuple((float(b), float(p)) for b, p in self.scenarios)
        object.__setattr__(self, "scenarios", scen)
        probs = np.array([p for _, p in scen])
        if np.any(probs < 0) or np.any(probs > 1) or abs(probs.sum() - 1) > 1e-12:
            raise ValueError("scenarios: probabilities must lie in [0, 1] and sum to 1")
        if self.kreg1.names != tuple(self.names) or self.kreg2.names != tuple(self.names):
            raise ValueError("regressions must cover every population, in order")
        if tuple(self.curves.names) != tuple(self.names):
            raise ValueError("curves must cover every population, in order")
        max_extra = max(b for b, _ in scen)
        if self.M is None:
            M = np.floor((max(self.B, 0) + max(max_extra, 0)) / self.h)
        else:
            M = np.broadcast_to(np.asarray(self.M, dtype=float), (n,)).copy()
            need = np.floor(max(self.B, 0) / self.h)
            if np.any(M < need):
                raise ValueError("M: big-M must cover every budget-feasible bed count "
                                 f"(need >= {need.tolist()})")
        object.__setattr__(self, "M", M)

    @property
    def n(self) -> int:
        return len(self.names)

    @property
    def n_scenarios(self) -> int:
        return len(self.scenarios)

    @property
    def probabilities(self) -> np.ndarray:
        return np.array([p for _, p in self.scenarios])

    @property
    def extra_budgets(self) -> np.ndarray:
        return np.array([b for b, _ in self.scenarios])


@dataclass(frozen=True)
class LinearForm:
    """Objective ``constant + coef_y @ y + coef_m @ m + sum_w coef_mt[w] @ mt[w]``."""

    constant: float
    coef_y: np.ndarray
    coef_m: np.ndarray
    coef_mt: np.ndarray

    def __call__(self, y, m, mt) -> float:
        return float(self.constant + self.coef_y @ np.asarray(y, float)
                     + self.coef_m @ np.asarray(m, float)
                     + np.sum(self.coef_mt * np.asarray(mt, float)))


def stage1_linear(instance: AllocationInstance):
    """Cumulative infected at tau as ``const + lin @ m`` per population."""
    D1 = instance.curves.D1()
    k = instance.kreg1
    const = (k.intercept + k.coef_inf @ instance.I0) / D1
    lin = k.coef_beds / D1[:, None]
    return const, lin


def build_objective(instance: AllocationInstance) -> LinearForm:
    D2 = instance.curves.D2()
    k2 = instance.kreg2
    const1, lin1 = stage1_linear(instance)
    per_pop_const = (k2.intercept + k2.coef_inf @ const1) / D2
    per_pop_m = (k2.coef_inf @ lin1 + k2.coef_beds) / D2[:, None]
    per_pop_mt = k2.coef_beds / D2[:, None]
    p = instance.probabilities
    return LinearForm(
        constant=float(per_pop_const.sum()),
        coef_y=np.zeros(instance.n),
        coef_m=per_pop_m.sum(axis=0),
        coef_mt=p[:, None] * per_pop_mt.sum(axis=0)[None, :],
    )


def variable_names(instance: AllocationInstance) -> tuple[str, ...]:
    names = [f"y[{n}]" for n in instance.names] + [f"m[{n}]" for n in instance.names]
    names += [f"mt[{w}][{n}]" for w in range(instance.n_scenarios) for n in instance.names]
    return tuple(names)


def linking_bounds(instance: AllocationInstance):
    """Per-variable big-M for the linking rows, tightened by implied limits.

    Any feasible point has ``h_n m_n <= B`` and, through fairness,
    ``m_n <= r_n sum(m) <= r_n B / min(h)``; the same holds in stage 2 with
    the scenario budget added.  Capping ``M`` by these leaves the integer
    feasible set unchanged but tightens the relaxation considerably.
    """
    eps = 1e-9
    B = max(instance.B, 0.0)
    hmin = float(instance.h.min())
    M1 = np.minimum(instance.M, np.floor(np.minimum(B / instance.h, instance.r * B / hmin) + eps))
    M2 = np.array([np.minimum(instance.M, np.floor(np.minimum(
        max(e, 0.0) / instance.h, instance.r * (B + max(e, 0.0)) / hmin) + eps))
        for e in instance.extra_budgets])
    return M1, M2


def build_constraints(instance: AllocationInstance):
    """Rows of the first- and second-stage budget, linking, and fairness constraints.

    Returns ``(A, senses, b, row_names)`` over the variable order of
    :func:`variable_names`.
    """
    N, W = instance.n, instance.n_scenarios
    nv = 2 * N + W * N
    iy = np.arange(N)
    im = N + np.arange(N)

    def imt(w):
        return 2 * N + w * N + np.arange(N)

    M1, M2 = linking_bounds(instance)
    rows, b, names = [], [], []

    def add(coefs, rhs, name):
        row = np.zeros(nv)
        for idx, val in coefs:
            row[idx] += val
        rows.append(row)
        b.append(rhs)
        names.append(name)

    add([(iy, instance.o), (im, instance.h)], instance.B, "budget1")
    for n in range(N):
        add([(im[n], 1.0), (iy[n], -M1[n])], 0.0, f"open1[{instance.names[n]}]")
    for n in range(N):
        add([(im, -instance.r[n]), (im[n], 1.0)], 0.0, f"fair1[{instance.names[n]}]")
    for w, (extra, _) in enumerate(instance.scenarios):
        add([(imt(w), instance.h)], extra, f"budget2[{w}]")
    for w in range(W):
        for n in range(N):
            add([(imt(w)[n], 1.0), (iy[n], -M2[w, n])], 0.0,
                f"open2[{w}][{instance.names[n]}]")
    for w in range(W):
        for n in range(N):
            add([(im, -instance.r[n]), (imt(w), -instance.r[n]),
                 (im[n], 1.0), (imt(w)[n], 1.0)], 0.0, f"fair2[{w}][{instance.names[n]}]")
    A = np.array(rows)
    return A, ("<=",) * len(rows), np.array(b, dtype=float), tuple(names)


def build_problem(instance: AllocationInstance) -> MilpProblem:
    N = instance.n
    form = build_objective(instance)
    A, senses, b, row_names = build_constraints(instance)
    c = np.concatenate([form.coef_y, form.coef_m, form.coef_mt.ravel()])
    M1, M2 = linking_bounds(instance)
    upper = np.concatenate([np.ones(N), M1, M2.ravel()])
    return MilpProblem(variable_names(instance), c, form.constant, A, senses, b, row_names,
                       np.zeros(c.size), upper, np.ones(c.size, dtype=bool))


@dataclass(frozen=True)
class AllocationSolution:
    y: np.ndarray
    m: np.ndarray
    m_tilde: np.ndarray  # (scenarios, N)
    objective: float
    bound: float
    status: str = "optimal"
    nodes: int = 0
    per_scenario: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def gap(self) -> float:
        return max(self.objective - self.bound, 0.0)


def unpack(instance: AllocationInstance, x):
    N, W = instance.n, instance.n_scenarios
    x = np.rint(np.asarray(x, dtype=float)).astype(np.int64)
    return x[:N], x[N:2 * N], x[2 * N:].reshape(W, N)


def pack(y, m, mt) -> np.ndarray:
    return np.concatenate([np.asarray(y, float), np.asarray(m, float),
                           np.asarray(mt, float).ravel()])


def predict_final(instance: AllocationInstance, m, mt_w) -> np.ndarray:
    """Predicted cumulative infected at T per population for one scenario's beds."""
    const1, lin1 = stage1_linear(instance)
    I_tau = const1 + lin1 @ np.asarray(m, float)
    return stage2_prediction(instance.kreg2, instance.curves, I_tau,
                             np.asarray(m, float) + np.asarray(mt_w, float))


def stage2_prediction(kreg2: KRegression, curves: TwoStageCurves, I_tau, total_beds):
    return kreg2.predict(I_tau, total_beds) / curves.D2()


def solve_allocation(instance: AllocationInstance, time_limit: float | None = None,
                     abs_gap: float = 1e-6, node_limit: int | None = None,
                     incumbent: AllocationSolution | None = None) -> AllocationSolution:
    problem = build_problem(instance)
    inc = None if incumbent is None else pack(incumbent.y, incumbent.m, incumbent.m_tilde)
    res = solve_milp(problem, time_limit=time_limit, abs_gap=abs_gap, node_limit=node_limit,
                     incumbent=inc)
    y, m, mt = unpack(instance, res.x)
    per = np.array([predict_final(instance, m, mt[w]).sum() for w in range(instance.n_scenarios)])
    return AllocationSolution(y, m, mt, res.objective, res.bound, res.status, res.nodes, per)


def check_solution(instance: AllocationInstance, sol: AllocationSolution) -> float:
    """Largest scaled constraint residual of a solution (0 when feasible)."""
    problem = build_problem(instance)
    x = pack(sol.y, sol.m, sol.m_tilde)
    if np.any(np.abs(x - np.rint(x)) > 0):
        return math.inf
    if np.any((sol.y != 0) & (sol.y != 1)):
        return math.inf
    return float(np.max(problem.residuals(x), initial=0.0))


def reoptimize_second_stage(instance: AllocationInstance, y, m, realized_budget: float,
                            curves: TwoStageCurves | None = None,
                            kreg2: KRegression | None = None, I_tau=None,
                            abs_gap: float = 1e-6, node_limit: int | None = None,
                            incumbent=None):
    """Re-solve the recourse for one realized budget with first-stage beds fixed.

    ``curves``/``kreg2`` default to the instance's stage-2 model and ``I_tau``
    to its stage-1 prediction; an observed ``I_tau`` enters as constants.
    Returns ``(m_tilde, value)`` where value is the predicted total
    cumulative infected at T.
    """
    y = np.asarray(y, dtype=float)
    m = np.asarray(m, dtype=float)
    if not first_stage_feasible(instance, y, m):
        raise ValueError("first-stage decisions (y, m) violate the stage-1 constraints")
    if realized_budget < 0:
        raise ValueError("realized budget must be nonnegative")
    curves = instance.curves if curves is None else curves
    kreg2 = instance.kreg2 if kreg2 is None else kreg2
    if I_tau is None:
        const1, lin1 = stage1_linear(instance)
        I_tau = const1 + lin1 @ m
    I_tau = np.asarray(I_tau, dtype=float)
    N = instance.n
    D2 = curves.D2()
    const = float(((kreg2.intercept + kreg2.coef_inf @ I_tau + kreg2.coef_beds @ m) / D2).sum())
    c = (kreg2.coef_beds / D2[:, None]).sum(axis=0)

    rows = [instance.h]
    b = [float(realized_budget)]
    names = ["budget2"]
    total_m = m.sum()
    for n in range(N):
        row = -instance.r[n] * np.ones(N)
        row[n] += 1.0
        rows.append(row)
        b.append(instance.r[n] * total_m - m[n])
        names.append(f"fair2[{instance.names[n]}]")
    upper = instance.M * y
    problem = MilpProblem(tuple(f"mt[{n}]" for n in instance.names), c, const, np.array(rows),
                          ("<=",) * len(rows), np.array(b), tuple(names), np.zeros(N), upper,
                          np.ones(N, dtype=bool))
    zero = np.zeros(N)
    assert problem.is_feasible(zero), "m_tilde = 0 must be feasible for a feasible first stage"
    if incumbent is None:
        incumbent = zero
    res = solve_milp(problem, abs_gap=abs_gap, node_limit=node_limit, incumbent=incumbent)
    return np.rint(res.x).astype(np.int64), res.objective


def first_stage_feasible(instance: AllocationInstance, y, m) -> bool:
    y = np.asarray(y, dtype=float)
    m = np.asarray(m, dtype=float)
    if np.any((y != 0) & (y != 1)) or np.any(m < 0) or np.any(m != np.rint(m)):
        return False
    tol = RESIDUAL_TOL * max(1.0, instance.B)
    return bool(instance.o @ y + instance.h @ m <= instance.B + tol
                and np.all(m <= instance.M * y)
                and np.all(m <= instance.r * m.sum() + RESIDUAL_TOL * max(1.0, m.sum())))


def stage2_value(instance: AllocationInstance, m, mt_w, curves=None, kreg2=None, I_tau=None):
    """Predicted total cumulative infected at T for fixed beds under a stage-2 model."""
    curves = instance.curves if curves is None else curves
    kreg2 = instance.kreg2 if kreg2 is None else kreg2
    m = np.asarray(m, float)
    if I_tau is None:
        const1, lin1 = stage1_linear(instance)
        I_tau = const1 + lin1 @ m
    return float(stage2_prediction(kreg2, curves, I_tau, m + np.asarray(mt_w, float)).sum())


def relaxation_bound(instance: AllocationInstance) -> float:
    res = build_problem(instance).lp_relaxation()
    if res.status != "optimal":
        raise MilpInfeasible("LP relaxation is infeasible", res.infeasibility)
    return res.objective


def write_solution(path_txt, path_csv, instance: AllocationInstance,
                   sol: AllocationSolution) -> None:
    with open(path_txt, "w") as fh:
        fh.write(f"objective = {sol.objective!r}\n")
        fh.write(f"bound = {sol.bound!r}\n")
        fh.write(f"gap = {sol.gap!r}\n")
        fh.write(f"status = {sol.status}\n")
        fh.write(f"y = {' '.join(str(int(v)) for v in sol.y)}\n")
        fh.write(f"m = {' '.join(str(int(v)) for v in sol.m)}\n")
        for w in range(instance.n_scenarios):
            fh.write(f"m_tilde[{w}] = {' '.join(str(int(v)) for v in sol.m_tilde[w])}\n")
    with open(path_csv, "w") as fh:
        fh.write("population,y,m," + ",".join(f"m_tilde_{w}" for w in range(instance.n_scenarios))
                 + "\n")
        for n, name in enumerate(instance.names):
            fh.write(",".join([name, str(int(sol.y[n])), str(int(sol.m[n])),
                               *(str(int(sol.m_tilde[w, n])) for w in range(instance.n_scenarios))])
                     + "\n")


def read_solution_csv(path, n_scenarios: int):
    rows = list(csv.DictReader(open(path, newline="")))
    names = tuple(r["population"] for r in rows)
    y = np.array([int(r["y"]) for r in rows])
    m = np.array([int(r["m"]) for r in rows])
    mt = np.array([[int(r[f"m_tilde_{w}"]) for r in rows] for w in range(n_scenarios)])
    return names, y, m, mt


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in np.ravel(values))


def write_instance(path, instance: AllocationInstance) -> None:
    """Flat ``key = values`` text; vectors are space separated in population order."""
    cv = instance.curves
    lines = ["# allocation instance",
             f"names = {' '.join(instance.names)}",
             f"B = {float(instance.B)!r}",
             f"scenarios = {' '.join(f'{b!r}:{p!r}' for b, p in instance.scenarios)}",
             f"o = {_fmt(instance.o)}", f"h = {_fmt(instance.h)}", f"r = {_fmt(instance.r)}",
             f"M = {_fmt(instance.M)}", f"I0 = {_fmt(instance.I0)}",
             f"tau = {cv.tau}", f"T = {cv.T}"]
    for stage, group in ((1, cv.stage1), (2, cv.stage2)):
        for key in ("K", "a", "b"):
            lines.append(f"curve{stage}.{key} = {_fmt([getattr(c, key) for c in group])}")
    for k in (instance.kreg1, instance.kreg2):
        pre = f"kreg{k.stage}"
        lines += [f"{pre}.intercept = {_fmt(k.intercept)}", f"{pre}.lambda = {_fmt(k.lam)}",
                  f"{pre}.r2 = {_fmt(k.r2)}"]
        for i, name in enumerate(instance.names):
            lines.append(f"{pre}.inf.{name} = {_fmt(k.coef_inf[i])}")
            lines.append(f"{pre}.beds.{name} = {_fmt(k.coef_beds[i])}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_instance(path) -> AllocationInstance:
    kv: dict[str, str] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}: line {lineno}: expected key = value")
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()

    def get(key):
        if key not in kv:
            raise ValueError(f"{path}: missing {key}")
        return kv[key]

    def vec(key):
        return np.array([float(x) for x in get(key).split()])

    names = tuple(get("names").split())
    scenarios = tuple(tuple(float(x) for x in item.split(":")) for item in get("scenarios").split())
    tau, T = int(get("tau")), int(get("T"))
    stages = []
    for stage in (1, 2):
        K, a, b = (vec(f"curve{stage}.{key}") for key in ("K", "a", "b"))
        stages.append(tuple(LogisticCurve(float(K[i]), float(a[i]), float(b[i]))
                            for i in range(len(names))))
    curves = TwoStageCurves(names, stages[0], stages[1], tau, T)
    kregs = []
    for stage in (1, 2):
        pre = f"kreg{stage}"
        kregs.append(KRegression(
            names, stage, vec(f"{pre}.intercept"),
            np.array([vec(f"{pre}.inf.{n}") for n in names]),
            np.array([vec(f"{pre}.beds.{n}") for n in names]),
            vec(f"{pre}.lambda"), vec(f"{pre}.r2")))
    return AllocationInstance(names, vec("o"), vec("h"), vec("r"), float(get("B")), scenarios,
                              curves, kregs[0], kregs[1], vec("I0"), M=vec("M"))
