import numpy as np
import pytest

from epialloc.model import BedSchedule, CompartmentState, DiseaseParams, Metapopulation

CLINICAL = dict(alpha=10.0, theta=0.6, delta=0.6, gamma_H=1 / 4, gamma_DH=1 / 8,
                gamma_F=1 / 2, gamma_I=1 / 10, gamma_IH=1 / 15)


def make_params(xi_I, xi_H=None, xi_F=None, psi=None, **overrides) -> DiseaseParams:
    xi_I = np.atleast_1d(np.asarray(xi_I, dtype=float))
    n = xi_I.size
    fill = lambda v, d: np.full(n, d) if v is None else np.broadcast_to(v, (n,)).astype(float)
    kw = {**CLINICAL, **overrides}
    return DiseaseParams(xi_I=xi_I, xi_H=fill(xi_H, 0.05), xi_F=fill(xi_F, 0.3),
                         psi=fill(psi, 0.0), **kw)


@pytest.fixture
def toy3():
    """Three populations with asymmetric mixing."""
    P = np.array([20_000.0, 12_000.0, 8_000.0])
    c = np.array([[0.90, 0.06, 0.04],
                  [0.10, 0.85, 0.05],
                  [0.05, 0.15, 0.80]])
    d = np.array([[0.0, 40.0, 90.0], [40.0, 0.0, 60.0], [90.0, 60.0, 0.0]])
    meta = Metapopulation(("a", "b", "c"), P, c, d)
    params = make_params([0.25, 0.2, 0.3], [0.05, 0.04, 0.06], [0.3, 0.35, 0.25],
                         [0.01, 0.0, 0.02])
    initial = CompartmentState.initial(P, [30, 10, 5])
    beds = BedSchedule([5, 3, 2], [4, 2, 1], 20)
    return meta, params, initial, beds


# a reduced run configuration: same data and structure, far fewer iterations
FAST = dict(calib_max_outer=2, calib_ensemble_reps=0, calib_restarts=0, n_samples=40,
            lasso_grid=(0.01, 0.1), eval_reps=30, sensitivity_reps=20, node_limit=40)


def fast_config(**overrides):
    import dataclasses
    from epialloc.config import load_config
    from epialloc.synthetic import config_path
    return dataclasses.replace(load_config(config_path()), **{**FAST, **overrides})
