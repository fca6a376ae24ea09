import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from epialloc.model import (
    BedSchedule, CompartmentState, Metapopulation, deterministic_path, deterministic_step,
    force_of_infection,
)
from epialloc.synthetic import make_truth

from conftest import make_params


def one_pop(P=100.0):
    return Metapopulation(("x",), [P], [[1.0]])


def direct_force(state, params, meta, t):
    """Straight double loop over the mixing sum."""
    n = meta.size
    out = np.zeros(n)
    for i in range(n):
        total = 0.0
        for k in range(n):
            total += meta.c[i, k] * (params.xi_I[k] * state.I[k] + params.xi_H[k] * state.H[k]
                                     + params.xi_F[k] * state.F[k]) / meta.P[k]
        out[i] = min(max(math.exp(-params.psi[i] * t) * total, 0.0), 1.0)
    return out


def straight_recursion(x0, params, meta, beds, steps):
    """Independent scalar re-implementation of the expected-value recursion."""
    S, E, I, H, F, R, C = (list(map(float, row)) for row in x0)
    n = len(S)
    th, de = params.theta, params.delta
    for t in range(steps):
        cap = [beds.m[i] + (beds.m_tilde[i] if t >= beds.tau else 0) for i in range(n)]
        lam = []
        for i in range(n):
            acc = sum(meta.c[i, k] * (params.xi_I[k] * I[k] + params.xi_H[k] * H[k]
                                      + params.xi_F[k] * F[k]) / meta.P[k] for k in range(n))
            lam.append(min(max(math.exp(-params.psi[i] * t) * acc, 0.0), 1.0))
        new = [[0.0] * n for _ in range(7)]
        for i in range(n):
            se = S[i] * lam[i]
            ei = E[i] / params.alpha
            ih = min(I[i] * params.gamma_H * th, max(cap[i] - H[i], 0.0))
            ir = I[i] * params.gamma_I * (1 - th) * (1 - de)
            if_ = I[i] * params.gamma_I * (1 - th) * de
            hf = H[i] * params.gamma_DH * de
            hr = H[i] * params.gamma_IH * (1 - de)
            fr = F[i] * params.gamma_F
            vals = (S[i] - se, E[i] + se - ei, I[i] + ei - ih - ir - if_, H[i] + ih - hf - hr,
                    F[i] + if_ + hf - fr, R[i] + ir + hr + fr, C[i] + ei)
            for k in range(7):
                new[k][i] = vals[k]
        S, E, I, H, F, R, C = new
    return np.array(C)


def test_force_zero_without_infectious_mass(toy3):
    meta, params, _, _ = toy3
    state = CompartmentState.initial(meta.P, [0, 0, 0])
    assert np.all(force_of_infection(state, params, meta) == 0)


def test_force_single_population_formula():
    meta = one_pop()
    params = make_params([0.2], [0.0], [0.0], [0.0])
    state = CompartmentState.initial([100], [10])
    assert force_of_infection(state, params, meta) == pytest.approx([0.02], rel=1e-15)


def test_force_matches_direct_sum(toy3):
    meta, params, _, _ = toy3
    state = CompartmentState([19_900, 11_950, 7_900], [40, 20, 30], [30, 20, 40], [10, 5, 15],
                             [20, 5, 15], [0, 0, 0], [30, 20, 40], t=17)
    got = force_of_infection(state, params, meta)
    want = direct_force(state, params, meta, 17)
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_force_rejects_unconserved_state(toy3):
    meta, params, _, _ = toy3
    bad = CompartmentState([1, 1, 1], [0, 0, 0], [0, 0, 0], [0, 0, 0], [0, 0, 0], [0, 0, 0],
                           [0, 0, 0])
    with pytest.raises(ValueError, match="conservation"):
        force_of_infection(bad, params, meta)


def test_force_dampening_monotone(toy3):
    meta, params, initial, _ = toy3
    lams = np.array([force_of_infection(initial, params, meta, t) for t in range(0, 100, 7)])
    damp = params.psi > 0
    assert np.all(np.diff(lams[:, damp], axis=0) <= 0)
    assert np.all(np.diff(lams[:, ~damp], axis=0) == 0)


def test_disease_free_state_is_absorbing(toy3):
    meta, params, _, beds = toy3
    state = CompartmentState.initial(meta.P, [0, 0, 0])
    nxt = deterministic_step(state, params, meta, beds)
    assert nxt.t == 1
    np.testing.assert_array_equal(nxt.as_array(), state.as_array())


def test_single_term_susceptible_decrease():
    meta = one_pop()
    params = make_params([0.3], [0.3], [0.3], [0.0])
    state = CompartmentState.initial([100], [1])
    nxt = deterministic_step(state, params, meta, BedSchedule.none(1))
    assert state.S[0] - nxt.S[0] == pytest.approx(99 * 0.003, rel=1e-12)


def test_eleven_population_recursion_matches_straight_line_oracle():
    truth = make_truth()
    path = deterministic_path(truth.initial, truth.params, truth.meta, truth.baseline, 60)
    want = straight_recursion(truth.initial.as_array(), truth.params, truth.meta,
                              truth.baseline, 60)
    np.testing.assert_allclose(path[-1, 6], want, rtol=1e-9)


def test_deterministic_conservation_and_bed_cap(toy3):
    meta, params, initial, beds = toy3
    path = deterministic_path(initial, params, meta, beds, 150)
    np.testing.assert_allclose(path[:, :6].sum(axis=1), np.broadcast_to(meta.P, (151, 3)),
                               atol=1e-9)
    cap = np.array([beds.capacity(t) for t in range(151)])
    assert np.all(path[:, 3] <= cap + 1e-9)
    assert np.all(np.diff(path[:, 6], axis=0) >= 0)


def test_zero_capacity_means_no_admissions(toy3):
    meta, params, initial, _ = toy3
    path = deterministic_path(initial, params, meta, BedSchedule.none(3), 60)
    assert np.all(path[:, 3] == 0)


def test_exit_fractions_above_one_rejected():
    with pytest.raises(ValueError, match="exit probability from I"):
        make_params([0.2], gamma_H=1.5, theta=0.9)


@pytest.mark.parametrize("field,value", [("theta", 1.2), ("alpha", 0.0), ("delta", -0.1)])
def test_invalid_clinical_parameters(field, value):
    with pytest.raises(ValueError, match=field):
        make_params([0.2], **{field: value})


def test_invalid_infection_probability():
    with pytest.raises(ValueError, match="xi_I"):
        make_params([1.2])


def test_metapopulation_invariants():
    with pytest.raises(ValueError):
        Metapopulation(("a",), [0.0], [[1.0]])
    with pytest.raises(ValueError):
        Metapopulation(("a", "b"), [1.0, 1.0], [[0.7, 0.5], [0.0, 1.0]])
    with pytest.raises(ValueError):
        Metapopulation(("a", "b"), [1.0, 1.0], np.eye(2), [[0, 1], [2, 0]])


def test_bed_schedule_capacity_switch():
    beds = BedSchedule([1, 2], [3, 4], 5)
    np.testing.assert_array_equal(beds.capacity(4), [1, 2])
    np.testing.assert_array_equal(beds.capacity(5), [4, 6])
    with pytest.raises(ValueError):
        BedSchedule([1.5, 2], [0, 0], 5)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=2),
       st.lists(st.integers(0, 500), min_size=2, max_size=2),
       st.integers(0, 60))
def test_conservation_property(xi, infected, steps):
    P = np.array([5_000.0, 3_000.0])
    meta = Metapopulation(("a", "b"), P, [[0.9, 0.1], [0.2, 0.8]])
    params = make_params(xi, psi=[0.01, 0.0])
    state = CompartmentState.initial(P, infected)
    path = deterministic_path(state, params, meta, BedSchedule([3, 0], [1, 5], 10), steps)
    assert np.allclose(path[:, :6].sum(axis=1), P, atol=1e-9)
    assert np.all(path >= -1e-9)
