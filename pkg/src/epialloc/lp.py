"""Dense two-phase tableau simplex for small bounded LPs.

Solves ``min c x  s.t.  A_i x (<=, >=, =) b_i,  lo <= x <= up``.  Finite
upper bounds become explicit rows; every variable is shifted to start at 0.
Pricing is Dantzig's rule, switching to Bland's rule after a run of
degenerate pivots; the ratio test uses a Harris-style two-pass tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PIVOT_TOL = 1e-9
OPT_TOL = 1e-9
FEAS_TOL = 1e-7
HARRIS_TOL = 1e-9
DEGENERATE_RUN = 50
MAX_PIVOTS = 50_000


@dataclass(frozen=True)
class LPResult:
    status: str  # "optimal" | "infeasible" | "unbounded"
    x: np.ndarray | None
    objective: float
    infeasibility: float = 0.0


class _Tableau:
    def __init__(self, T: np.ndarray, basis: np.ndarray):
        self.T = T
        self.basis = basis

    def pivot(self, r: int, k: int) -> None:
        T = self.T
        T[r] /= T[r, k]
        col = T[:, k].copy()
        col[r] = 0.0
        nz = np.flatnonzero(col)
        if nz.size:
            T[nz] -= np.outer(col[nz], T[r])
        self.basis[r] = k

    def run(self, n_cols: int) -> str:
        """Minimise the objective in the last row over the first ``n_cols`` columns."""
        T = self.T
        m = T.shape[0] - 1
        bland = False
        degenerate = 0
        if n_cols == 0:
            return "optimal"
        for _ in range(MAX_PIVOTS):
            d = T[m, :n_cols]
            if bland:
                cand = np.flatnonzero(d < -OPT_TOL)
                if cand.size == 0:
                    return "optimal"
                k = int(cand[0])
            else:
                k = int(np.argmin(d))
                if d[k] >= -OPT_TOL:
                    return "optimal"
            col = T[:m, k]
            rhs = T[:m, -1]
            pos = col > PIVOT_TOL
            if not pos.any():
                return "unbounded"
            rows = np.flatnonzero(pos)
            ratios = np.maximum(rhs[rows], 0.0) / col[rows]
            if bland:
                best = ratios.min()
                ties = rows[ratios <= best + 1e-12]
                r = int(ties[np.argmin(self.basis[ties])])
            else:
                limit = np.min((np.maximum(rhs[rows], 0.0) + HARRIS_TOL) / col[rows])
                ok = rows[ratios <= limit]
                r = int(ok[np.argmax(col[ok])])
            step = max(rhs[r], 0.0) / col[r]
            degenerate = degenerate + 1 if step <= 1e-12 else 0
            if degenerate > DEGENERATE_RUN:
                bland = True
            self.pivot(r, k)
        raise RuntimeError("simplex pivot limit reached")


def solve_lp(c, A, senses, b, lo, up) -> LPResult:
    c = np.asarray(c, dtype=float)
    A = np.asarray(A, dtype=float).reshape(-1, c.size)
    b = np.asarray(b, dtype=float)
    lo = np.asarray(lo, dtype=float)
    up = np.asarray(up, dtype=float)
    if np.any(up < lo - 1e-12):
        return LPResult("infeasible", None, np.inf, float(np.max(lo - up)))

    fixed = up - lo <= 0
    free_idx = np.flatnonzero(~fixed)
    # substitute x = lo + x'
    shift_b = b - A @ lo
    Af = A[:, free_idx]
    span = (up - lo)[free_idx]
    rows = [Af]
    rhs = [shift_b]
    sense = list(senses)
    bounded = np.flatnonzero(np.isfinite(span))
    if bounded.size:
        E = np.zeros((bounded.size, free_idx.size))
        E[np.arange(bounded.size), bounded] = 1.0
        rows.append(E)
        rhs.append(span[bounded])
        sense += ["<="] * bounded.size
    M = np.vstack(rows) if free_idx.size else np.zeros((sum(r.shape[0] for r in rows), 0))
    rhs = np.concatenate(rhs)
    sense = np.array(sense)

    # drop rows with no free variables after checking them directly
    empty = ~np.any(M != 0, axis=1)
    for i in np.flatnonzero(empty):
        s, v = sense[i], rhs[i]
        bad = (s == "<=" and v < -FEAS_TOL) or (s == ">=" and v > FEAS_TOL) or \
              (s == "=" and abs(v) > FEAS_TOL)
        if bad:
            return LPResult("infeasible", None, np.inf, float(abs(v)))
    M, rhs, sense = M[~empty], rhs[~empty], sense[~empty]

    scale = np.max(np.abs(M), axis=1) if M.size else np.ones(0)
    M = M / scale[:, None]
    rhs = rhs / scale
    flip = rhs < 0
    M[flip] *= -1
    rhs[flip] *= -1
    sense = np.where(flip & (sense == "<="), ">=", np.where(flip & (sense == ">="), "<=", sense))

    m, nf = M.shape
    n_slack = int(np.sum(sense != "="))
    needs_art = sense != "<="
    n_art = int(np.sum(needs_art))
    width = nf + n_slack + n_art
    T = np.zeros((m + 1, width + 1))
    T[:m, :nf] = M
    T[:m, -1] = rhs
    basis = np.empty(m, dtype=np.int64)
    s_col, a_col = nf, nf + n_slack
    for i in range(m):
        if sense[i] != "=":
            T[i, s_col] = 1.0 if sense[i] == "<=" else -1.0
            if sense[i] == "<=":
                basis[i] = s_col
            s_col += 1
        if needs_art[i]:
            T[i, a_col] = 1.0
            basis[i] = a_col
            a_col += 1
    tab = _Tableau(T, basis)

    if n_art:
        T[m, :] = 0.0
        T[m, nf + n_slack:width] = 1.0
        for i in np.flatnonzero(needs_art):
            T[m] -= T[i]
        tab.run(width)
        infeas = -T[m, -1]
        if infeas > FEAS_TOL * max(1.0, np.max(rhs, initial=0.0)):
            return LPResult("infeasible", None, np.inf, float(infeas))
        # pivot remaining zero-level artificials out of the basis
        for i in range(m):
            if basis[i] >= nf + n_slack:
                cand = np.flatnonzero(np.abs(T[i, :nf + n_slack]) > PIVOT_TOL)
                if cand.size:
                    tab.pivot(i, int(cand[0]))
        keep = basis < nf + n_slack
        T = np.vstack([T[:m][keep], T[m:]])
        T = np.delete(T, np.arange(nf + n_slack, width), axis=1)
        basis = basis[keep]
        tab = _Tableau(T, basis)
        m = T.shape[0] - 1

    cf = c[free_idx]
    T[m, :] = 0.0
    T[m, :nf] = cf
    for i in range(m):
        j = basis[i]
        if j < nf and cf[j] != 0:
            T[m] -= cf[j] * T[i]
    status = tab.run(nf + n_slack)
    if status != "optimal":
        return LPResult(status, None, -np.inf)

    xf = np.zeros(nf + n_slack)
    xf[basis] = T[:m, -1]
    x = lo.copy()
    x[free_idx] += np.clip(xf[:nf], 0.0, None)
    x = np.minimum(x, up)
    return LPResult("optimal", x, float(c @ x))
