"""Domain types and the expected-value SEIHFR recursion.

Compartments per population: S (susceptible), E (exposed), I (infectious in
the community), H (isolated in a treatment unit), F (dead, infectious during a
traditional funeral), R (removed).  C counts cumulative E->I onsets.

One step is one day.  The eight flows are

    S->E  S * lambda_n(t)
    E->I  E / alpha
    I->H  I * gamma_H * theta              (capped by free beds)
    I->R  I * gamma_I * (1 - theta) * (1 - delta)
    I->F  I * gamma_I * (1 - theta) * delta
    H->F  H * gamma_DH * delta
    H->R  H * gamma_IH * (1 - delta)
    F->R  F * gamma_F
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

COMPARTMENTS = ("S", "E", "I", "H", "F", "R", "C")
# row indices into a packed (7, N) state array
S_, E_, I_, H_, F_, R_, C_ = range(7)


def _as_vector(values, n: int | None = None, name: str = "value") -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.ndim == 0 and n is not None:
        arr = np.full(n, float(arr))
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    if n is not None and arr.shape[0] != n:
        raise ValueError(f"{name} has length {arr.shape[0]}, expected {n}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Metapopulation:
    """Interacting populations coupled by a travel-rate table.

    ``c[n, k]`` is the probability that a resident of ``n`` mixes in ``k``;
    ``d`` holds distances in km and is only used to build costs.
    """

    names: tuple[str, ...]
    P: np.ndarray
    c: np.ndarray
    d: np.ndarray | None = None

    def __post_init__(self):
        names = tuple(str(x) for x in self.names)
        object.__setattr__(self, "names", names)
        n = len(names)
        if n == 0:
            raise ValueError("names: at least one population required")
        if len(set(names)) != n:
            raise ValueError("names: population identifiers must be unique")
        P = _as_vector(self.P, n, "P")
        if np.any(P <= 0):
            raise ValueError("P: population sizes must be positive")
        c = np.array(self.c, dtype=float)
        if c.shape != (n, n):
            raise ValueError(f"c: expected shape {(n, n)}, got {c.shape}")
        if np.any(c < 0) or np.any(c > 1):
            raise ValueError("c: travel rates must lie in [0, 1]")
        rows = c.sum(axis=1)
        if np.any(rows <= 0) or np.any(rows > 1 + 1e-12):
            raise ValueError("c: each row sum must lie in (0, 1]")
        c.setflags(write=False)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "c", c)
        if self.d is not None:
            d = np.array(self.d, dtype=float)
            if d.shape != (n, n):
                raise ValueError(f"d: expected shape {(n, n)}, got {d.shape}")
            if not np.allclose(d, d.T) or np.any(np.diag(d) != 0) or np.any(d < 0):
                raise ValueError("d: distances must be symmetric, nonnegative, zero diagonal")
            d.setflags(write=False)
            object.__setattr__(self, "d", d)

    @property
    def size(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown population {name!r}") from None

    def subset(self, keep: Sequence[str]) -> "Metapopulation":
        idx = [self.index(k) for k in keep]
        c = self.c[np.ix_(idx, idx)]
        d = None if self.d is None else self.d[np.ix_(idx, idx)]
        return Metapopulation(tuple(keep), self.P[idx], c, d)


@dataclass(frozen=True, eq=False)
class DiseaseParams:
    xi_I: np.ndarray
    xi_H: np.ndarray
    xi_F: np.ndarray
    psi: np.ndarray
    alpha: float
    theta: float
    delta: float
    gamma_H: float
    gamma_DH: float
    gamma_F: float
    gamma_I: float
    gamma_IH: float

    def __post_init__(self):
        n = np.size(self.xi_I) if np.ndim(self.xi_I) else None
        for name in ("xi_I", "xi_H", "xi_F", "psi"):
            vec = _as_vector(getattr(self, name), n, name)
            if np.any(~np.isfinite(vec)) or np.any(vec < 0):
                raise ValueError(f"{name}: must be finite and nonnegative")
            if name != "psi" and np.any(vec > 1):
                raise ValueError(f"{name}: infection probabilities must lie in [0, 1]")
            object.__setattr__(self, name, vec)
            n = vec.shape[0]
        for name in ("alpha", "theta", "delta", "gamma_H", "gamma_DH", "gamma_F",
                     "gamma_I", "gamma_IH"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name}: must be finite and nonnegative")
            object.__setattr__(self, name, v)
        if self.alpha <= 0:
            raise ValueError("alpha: incubation period must be positive")
        for name in ("theta", "delta"):
            if getattr(self, name) > 1:
                raise ValueError(f"{name}: must lie in [0, 1]")
        rates = self.rates()
        exits = {
            "E": rates["EI"],
            "I": rates["IH"] + rates["IR"] + rates["IF"],
            "H": rates["HF"] + rates["HR"],
            "F": rates["FR"],
        }
        for comp, total in exits.items():
            if total > 1 + 1e-12:
                raise ValueError(
                    f"exit probability from {comp} is {total:.6g} > 1 per step")

    @property
    def size(self) -> int:
        return self.xi_I.shape[0]

    def rates(self) -> dict[str, float]:
        """Per-step transition probabilities for every flow except S->E."""
        return {
            "EI": 1.0 / self.alpha,
            "IH": self.gamma_H * self.theta,
            "IR": self.gamma_I * (1 - self.theta) * (1 - self.delta),
            "IF": self.gamma_I * (1 - self.theta) * self.delta,
            "HF": self.gamma_DH * self.delta,
            "HR": self.gamma_IH * (1 - self.delta),
            "FR": self.gamma_F,
        }

    def with_free(self, xi_I=None, xi_H=None, xi_F=None, psi=None) -> "DiseaseParams":
        """Copy with some of the calibrated per-population parameters replaced."""
        return DiseaseParams(
            xi_I=self.xi_I if xi_I is None else xi_I,
            xi_H=self.xi_H if xi_H is None else xi_H,
            xi_F=self.xi_F if xi_F is None else xi_F,
            psi=self.psi if psi is None else psi,
            alpha=self.alpha, theta=self.theta, delta=self.delta,
            gamma_H=self.gamma_H, gamma_DH=self.gamma_DH, gamma_F=self.gamma_F,
            gamma_I=self.gamma_I, gamma_IH=self.gamma_IH,
        )

    def take(self, idx) -> "DiseaseParams":
        return self.with_free(self.xi_I[idx], self.xi_H[idx], self.xi_F[idx], self.psi[idx])


@dataclass(frozen=True, eq=False)
class CompartmentState:
    S: np.ndarray
    E: np.ndarray
    I: np.ndarray
    H: np.ndarray
    F: np.ndarray
    R: np.ndarray
    C: np.ndarray
    t: int = 0

    def __post_init__(self):
        n = np.size(self.S)
        for name in COMPARTMENTS:
            arr = np.array(getattr(self, name))
            if arr.ndim != 1 or arr.shape[0] != n:
                raise ValueError(f"{name}: expected a vector of length {n}")
            if np.any(arr < 0):
                raise ValueError(f"{name}: counts must be nonnegative")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if int(self.t) != self.t or self.t < 0:
            raise ValueError("t: must be a nonnegative integer")
        object.__setattr__(self, "t", int(self.t))

    @classmethod
    def from_array(cls, packed: np.ndarray, t: int = 0) -> "CompartmentState":
        return cls(*packed, t=t)

    @classmethod
    def initial(cls, P, infected, exposed=None, integer: bool = True) -> "CompartmentState":
        """Seed state: ``infected`` in I (and counted in C), the rest susceptible."""
        P = np.asarray(P, dtype=float)
        infected = np.asarray(infected, dtype=float)
        exposed = np.zeros_like(P) if exposed is None else np.asarray(exposed, dtype=float)
        if np.any(infected + exposed > P):
            raise ValueError("initial infected/exposed exceed population size")
        zeros = np.zeros_like(P)
        arrays = [P - infected - exposed, exposed, infected, zeros, zeros, zeros, infected.copy()]
        if integer:
            arrays = [np.rint(a).astype(np.int64) for a in arrays]
        return cls(*arrays, t=0)

    def as_array(self) -> np.ndarray:
        return np.stack([getattr(self, k) for k in COMPARTMENTS])

    @property
    def size(self) -> int:
        return self.S.shape[0]

    @property
    def total(self) -> np.ndarray:
        return self.S + self.E + self.I + self.H + self.F + self.R

    @property
    def is_integer(self) -> bool:
        if all(np.issubdtype(getattr(self, k).dtype, np.integer) for k in COMPARTMENTS):
            return True
        return all(np.all(np.mod(getattr(self, k), 1) == 0) for k in COMPARTMENTS)

    def check_conservation(self, P, atol: float = 1e-9) -> None:
        diff = np.abs(self.total - np.asarray(P, dtype=float))
        if np.any(diff > atol):
            n = int(np.argmax(diff))
            raise ValueError(
                f"state violates population conservation at index {n}: "
                f"compartments sum to {self.total[n]!r}, population is {P[n]!r}")


@dataclass(frozen=True, eq=False)
class BedSchedule:
    m: np.ndarray
    m_tilde: np.ndarray
    tau: int

    def __post_init__(self):
        m = np.array(self.m)
        mt = np.array(self.m_tilde)
        if m.shape != mt.shape or m.ndim != 1:
            raise ValueError("m and m_tilde must be vectors of equal length")
        for name, arr in (("m", m), ("m_tilde", mt)):
            if np.any(arr < 0) or np.any(np.mod(arr, 1) != 0):
                raise ValueError(f"{name}: bed counts must be nonnegative integers")
        m = m.astype(np.int64)
        mt = mt.astype(np.int64)
        m.setflags(write=False)
        mt.setflags(write=False)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "m_tilde", mt)
        if self.tau < 0:
            raise ValueError("tau: must be nonnegative")

    @classmethod
    def none(cls, n: int, tau: int = 0) -> "BedSchedule":
        return cls(np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64), tau)

    def capacity(self, t: int) -> np.ndarray:
        return self.m if t < self.tau else self.m + self.m_tilde


def _force(I, H, F, params: DiseaseParams, meta: Metapopulation, t) -> np.ndarray:
    # I, H, F may carry a leading batch axis; mixing acts on the last axis
    pressure = (params.xi_I * I + params.xi_H * H + params.xi_F * F) / meta.P
    lam = np.exp(-params.psi * t) * (pressure @ meta.c.T)
    if np.any(lam > 1) or np.any(lam < 0):
        logger.warning("force of infection outside [0, 1] at t=%s; clamping", t)
        lam = np.clip(lam, 0.0, 1.0)
    return lam


def force_of_infection(state: CompartmentState, params: DiseaseParams,
                       meta: Metapopulation, t: int | None = None) -> np.ndarray:
    """Per-susceptible exposure probability lambda_n(t) for one day."""
    state.check_conservation(meta.P)
    t = state.t if t is None else t
    if t < 0:
        raise ValueError("t must be nonnegative")
    return _force(state.I, state.H, state.F, params, meta, t)


def expected_flows(x: np.ndarray, params: DiseaseParams, meta: Metapopulation,
                   capacity: np.ndarray, t: int) -> dict[str, np.ndarray]:
    """Expected one-day flows from a packed (7, ..., N) state."""
    r = params.rates()
    S, E, I, H, F = x[S_], x[E_], x[I_], x[H_], x[F_]
    lam = _force(I, H, F, params, meta, t)
    free = np.maximum(capacity - H, 0.0)
    return {
        "SE": S * lam,
        "EI": E * r["EI"],
        "IH": np.minimum(I * r["IH"], free),
        "IR": I * r["IR"],
        "IF": I * r["IF"],
        "HF": H * r["HF"],
        "HR": H * r["HR"],
        "FR": F * r["FR"],
    }


def apply_flows(x: np.ndarray, f: dict[str, np.ndarray]) -> np.ndarray:
    out = np.empty(x.shape, dtype=np.result_type(x, f["SE"]))
    out[S_] = x[S_] - f["SE"]
    out[E_] = x[E_] + f["SE"] - f["EI"]
    out[I_] = x[I_] + f["EI"] - f["IH"] - f["IR"] - f["IF"]
    out[H_] = x[H_] + f["IH"] - f["HF"] - f["HR"]
    out[F_] = x[F_] + f["IF"] + f["HF"] - f["FR"]
    out[R_] = x[R_] + f["IR"] + f["HR"] + f["FR"]
    out[C_] = x[C_] + f["EI"]
    return out


def deterministic_step(state: CompartmentState, params: DiseaseParams,
                       meta: Metapopulation, beds: BedSchedule) -> CompartmentState:
    """Advance one day along expected flows; compartments become real-valued."""
    state.check_conservation(meta.P)
    x = state.as_array().astype(float)
    flows = expected_flows(x, params, meta, beds.capacity(state.t), state.t)
    return CompartmentState.from_array(apply_flows(x, flows), t=state.t + 1)


def deterministic_path(initial: CompartmentState | np.ndarray, params: DiseaseParams,
                       meta: Metapopulation, beds: BedSchedule, steps: int,
                       t0: int | None = None) -> np.ndarray:
    """Run the recursion for ``steps`` days.

    Returns an array of shape (steps + 1, 7, ..., N).  ``initial`` may be a
    packed array with a batch axis between the compartment and population
    axes, in which case ``params`` may carry matching (B, N) arrays.
    """
    if isinstance(initial, CompartmentState):
        initial.check_conservation(meta.P)
        t0 = initial.t if t0 is None else t0
        x = initial.as_array().astype(float)
    else:
        x = np.asarray(initial, dtype=float)
        t0 = 0 if t0 is None else t0
    out = np.empty((steps + 1,) + x.shape)
    out[0] = x
    for k in range(steps):
        t = t0 + k
        x = apply_flows(x, expected_flows(x, params, meta, beds.capacity(t), t))
        out[k + 1] = x
    return out
