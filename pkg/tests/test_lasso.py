import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import epialloc.lasso as lasso_mod
from epialloc.curves import fit_two_stage
from epialloc.lasso import (
    KRegression, design, fit_k_regression, generate_training_set, kkt_residual, lambda_max,
    lasso_fit, perturb_inputs, r_squared, read_regression_csv, read_training_csv,
    select_lambda, soft_threshold, split_beds, write_regression_csv, write_training_csv,
)
from epialloc.model import C_, BedSchedule, CompartmentState, deterministic_path
from epialloc.simulator import make_rng


def standardized(X):
    Z = X - X.mean(axis=0)
    return Z / Z.std(axis=0)


def kkt_oracle(fit, X, y):
    """Subgradient check written out directly on the standardized problem."""
    m = X.shape[0]
    sd = (X - X.mean(axis=0)).std(axis=0)
    Z = standardized(X)
    beta = fit.coef * sd
    r = (y - y.mean()) - Z @ beta
    worst = 0.0
    for j in range(X.shape[1]):
        g = Z[:, j] @ r / m
        if beta[j] != 0:
            worst = max(worst, abs(g - fit.lam * np.sign(beta[j])))
        else:
            worst = max(worst, abs(g) - fit.lam)
    return worst


def random_problem(seed, m=50, p=22):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(m, p)) * rng.uniform(0.5, 50, p) + rng.uniform(-10, 10, p)
    truth = np.where(rng.random(p) < 0.3, rng.normal(0, 2, p), 0.0)
    y = X @ truth + rng.normal(0, 5, m) + 3.0
    return X, y


@pytest.mark.parametrize("seed", range(10))
def test_kkt_on_random_problems(seed):
    X, y = random_problem(seed)
    lam = lambda_max(X, y) * np.random.default_rng(seed).uniform(0.01, 0.6)
    fit = lasso_fit(X, y, lam)
    assert kkt_oracle(fit, X, y) <= 1e-6
    assert kkt_residual(fit, X, y) <= 1e-6


def test_zero_penalty_matches_normal_equations():
    X, y = random_problem(42)
    fit = lasso_fit(X, y, 0.0)
    A = np.column_stack([np.ones(len(y)), X])
    sol = np.linalg.solve(A.T @ A, A.T @ y)
    np.testing.assert_allclose(fit.coef, sol[1:], rtol=1e-6, atol=1e-9)
    assert fit.intercept == pytest.approx(sol[0], rel=1e-6)


def test_penalty_at_lambda_max_kills_everything():
    X, y = random_problem(7)
    lmax = lambda_max(X, y)
    Z = standardized(X)
    assert lmax == pytest.approx(np.max(np.abs(Z.T @ (y - y.mean()))) / len(y), rel=1e-12)
    for lam in (lmax, 2 * lmax):
        fit = lasso_fit(X, y, lam)
        assert np.all(fit.coef == 0)
        assert fit.intercept == pytest.approx(y.mean())


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=5, max_size=30), st.floats(0, 5),
       st.floats(0.1, 10), st.integers(0, 2**31))
def test_one_dimensional_closed_form(xs, lam, slope, seed):
    x = np.asarray(xs)
    if np.ptp(x) < 1e-3:
        return
    rng = np.random.default_rng(seed)
    y = slope * x + rng.normal(0, 1, x.size)
    fit = lasso_fit(x[:, None], y, lam)
    zc = (x - x.mean()) / x.std()
    z = zc @ (y - y.mean()) / x.size
    want = float(soft_threshold(z, lam)) / x.std()
    assert fit.coef[0] == pytest.approx(want, rel=1e-12, abs=1e-12)


def test_row_permutation_invariance():
    X, y = random_problem(3)
    lam = 0.1 * lambda_max(X, y)
    a = lasso_fit(X, y, lam)
    perm = np.random.default_rng(0).permutation(len(y))
    b = lasso_fit(X[perm], y[perm], lam)
    np.testing.assert_allclose(a.coef, b.coef, rtol=1e-6, atol=1e-8)


def test_sparsity_is_monotone_along_the_path():
    X, y = random_problem(11)
    lmax = lambda_max(X, y)
    counts = [np.count_nonzero(lasso_fit(X, y, f * lmax).coef)
              for f in (0.001, 0.01, 0.05, 0.1, 0.2, 0.4, 0.7, 1.0)]
    assert all(b <= a for a, b in zip(counts, counts[1:]))
    assert counts[-1] == 0


def test_constant_column_forced_to_zero():
    X, y = random_problem(5, p=4)
    X[:, 2] = 7.0
    fit = lasso_fit(X, y, 0.0)
    assert fit.coef[2] == 0.0


@pytest.mark.parametrize("X,y", [
    (np.ones((1, 2)), np.ones(1)),
    (np.array([[1.0, np.nan], [2.0, 3.0]]), np.ones(2)),
])
def test_bad_inputs_rejected(X, y):
    with pytest.raises(ValueError):
        lasso_fit(X, y, 0.1)


def test_negative_lambda_rejected():
    X, y = random_problem(1)
    with pytest.raises(ValueError):
        lasso_fit(X, y, -1.0)


def test_select_exact_linear_picks_small_penalty():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(40, 5))
    y = 3 * X[:, 1] + 2
    lam = select_lambda(X, y, [0.0, 10.0], k_folds=5)
    assert lam == 0.0
    fit = lasso_fit(X, y, lam)
    assert r_squared(fit, X, y) == pytest.approx(1.0, abs=1e-9)


def test_select_pure_noise_prefers_largest_penalty():
    wins = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(60, 8))
        y = rng.normal(size=60)
        grid = [0.0, 0.01, 0.1, 1.0 * lambda_max(X, y)]
        wins += select_lambda(X, y, grid, k_folds=5, seed=seed) == grid[-1]
    assert wins > 10


def test_select_edge_cases():
    X, y = random_problem(0)
    assert select_lambda(X, y, [0.25]) == 0.25
    with pytest.raises(ValueError):
        select_lambda(X[:3], y[:3], [0.0, 1.0], k_folds=5)
    with pytest.raises(ValueError):
        select_lambda(X, y, [], k_folds=5)


def test_r_squared_values():
    X, y = random_problem(2)
    exact = lasso_mod.LassoFit(0.0, np.zeros(X.shape[1]), 0.0, 0)
    mean_only = lasso_mod.LassoFit(float(y.mean()), np.zeros(X.shape[1]), 0.0, 0)
    assert r_squared(mean_only, X, y) == pytest.approx(0.0, abs=1e-12)
    y_lin = X[:, 0] * 2.0
    perfect = lasso_mod.LassoFit(0.0, np.eye(X.shape[1])[0] * 2.0, 0.0, 0)
    assert r_squared(perfect, X, y_lin) == 1.0
    with pytest.raises(ValueError):
        r_squared(exact, X, np.ones(len(y)))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 500), st.integers(1, 12), st.integers(0, 2**32))
def test_split_beds_property(total, n, seed):
    out = split_beds(total, n, np.random.default_rng(seed))
    assert out.shape == (n,) and np.all(out >= 0) and out.sum() <= total


def test_perturbed_total_mean(monkeypatch):
    totals = []

    def spy(total, n, rng):
        totals.append(total)
        return np.zeros(n, dtype=np.int64)

    monkeypatch.setattr(lasso_mod, "split_beds", spy)
    base_m = np.array([100, 200, 200])
    for i in range(10_000):
        perturb_inputs([10, 10, 10], base_m, base_m, [1e6] * 3, 50.0, make_rng(i))
    first = np.array(totals[0::2], dtype=float)
    se = first.std(ddof=1) / np.sqrt(first.size)
    assert abs(first.mean() - 500) < 4 * se


@pytest.fixture(scope="module")
def toy_training():
    from epialloc.synthetic import make_truth
    truth = make_truth()
    tau, T = 30, 80
    C = deterministic_path(truth.initial, truth.params, truth.meta, truth.baseline, T)[:, C_, :]
    curves = fit_two_stage(C, tau, T, truth.meta.names)
    base = BedSchedule(truth.baseline.m, truth.baseline.m_tilde, tau)
    return truth, curves, base


def test_zero_noise_repeats_the_base(toy_training):
    truth, curves, base = toy_training
    samples = generate_training_set(truth.meta, truth.params, truth.initial.I, base, curves,
                                    4, noise_sd=0.0, seed=1)
    for s in samples[1:]:
        np.testing.assert_array_equal(s.initial_infected, samples[0].initial_infected)
        np.testing.assert_array_equal(s.beds_stage1, base.m)
        np.testing.assert_array_equal(s.response1, samples[0].response1)
        np.testing.assert_array_equal(s.response2, samples[0].response2)


def test_training_samples_and_round_trip(tmp_path, toy_training):
    truth, curves, base = toy_training
    samples = generate_training_set(truth.meta, truth.params, truth.initial.I, base, curves,
                                    80, noise_sd=50.0, seed=9)
    assert len(samples) == 80
    for s in samples:
        assert np.all(s.initial_infected >= 0) and np.all(s.beds_stage1 >= 0)
        x0 = CompartmentState.initial(truth.meta.P, s.initial_infected)
        np.testing.assert_array_equal(x0.S + x0.I, truth.meta.P)
    names = truth.meta.names
    write_training_csv(tmp_path / "t.csv", samples, names)
    back = read_training_csv(tmp_path / "t.csv", names)
    for a, b in zip(samples, back):
        for field in ("initial_infected", "beds_stage1", "beds_stage2", "infected_tau",
                      "response1", "response2"):
            np.testing.assert_array_equal(getattr(a, field), getattr(b, field))
    grid = (1e-3, 1e-2, 0.1)
    k1 = fit_k_regression(samples, 1, names, grid, seed=0)
    k2 = fit_k_regression(samples, 2, names, grid, seed=1)
    X, Y = design(samples, 1)
    np.testing.assert_allclose(np.array([k1.predict(x[:11], x[11:]) for x in X]),
                               (k1.intercept + X[:, :11] @ k1.coef_inf.T
                                + X[:, 11:] @ k1.coef_beds.T), rtol=1e-12)
    write_regression_csv(tmp_path / "r.csv", [k1, k2])
    models = read_regression_csv(tmp_path / "r.csv")
    for k in (k1, k2):
        got = models[k.stage]
        np.testing.assert_array_equal(got.coef_inf, k.coef_inf)
        np.testing.assert_array_equal(got.coef_beds, k.coef_beds)
        np.testing.assert_array_equal(got.intercept, k.intercept)


def test_failing_simulations_are_skipped(toy_training):
    truth, curves, base = toy_training
    calls = {"n": 0}

    def flaky(initial, beds, seed):
        calls["n"] += 1
        if calls["n"] % 2:
            raise FloatingPointError("boom")
        return deterministic_path(initial, truth.params, truth.meta, beds, 80)[:, C_, :]

    samples = generate_training_set(truth.meta, truth.params, truth.initial.I, base, curves,
                                    6, seed=0, simulator=flaky)
    assert len(samples) == 3


def test_k_regression_shape_check():
    with pytest.raises(ValueError):
        KRegression(("a", "b"), 1, np.zeros(2), np.zeros((2, 2)), np.zeros((2, 3)),
                    np.zeros(2), np.zeros(2))
