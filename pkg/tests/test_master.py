import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import C_FIX, ETA_FIX, R_FIX, SIGMA_Z, random_contraction, random_hermitian, random_state, rate_model
from qcollapse.core import ModelSpec, expm, trace_distance, validate_model
from qcollapse.master import (TruncationBudgetExceeded, contraction_semigroup, dyson_series,
                              integrate_master, master_superoperator, nonmixing_residual,
                              poisson_order, rk4_propagator)

SIGMA_FIX = np.outer(ETA_FIX, ETA_FIX.conj())


def test_identity_collapse_is_unitary():
    m = validate_model(ModelSpec(H=SIGMA_Z, C=np.eye(2), lam=3.0))
    rho = integrate_master(m, SIGMA_FIX, [0.0, 1.0]).rho[-1]
    U = expm(-1j * SIGMA_Z)
    np.testing.assert_allclose(rho, U @ SIGMA_FIX @ U.conj().T, atol=1e-9)


def test_excited_population_decays(d2_model):
    rho = integrate_master(d2_model, np.diag([0.0, 1.0]), [0.0, 1.0]).rho[-1]
    assert rho[1, 1].real == pytest.approx(np.exp(-0.36), abs=1e-9)


def test_frozen_dyson(d2_model):
    rho = dyson_series(d2_model, SIGMA_FIX, 1.0)
    off = -0.17035610643863072 - 0.37223488351843054j
    np.testing.assert_allclose(rho, [[0.5, off], [np.conj(off), 0.34883816303551546]], atol=1e-12)


def test_dyson_trivial_cases(d2_model):
    np.testing.assert_array_equal(dyson_series(d2_model, SIGMA_FIX, 0.0), SIGMA_FIX)
    m = validate_model(ModelSpec(H=SIGMA_Z, C=C_FIX, lam=0.0))
    U = expm(-0.7j * SIGMA_Z)
    np.testing.assert_allclose(dyson_series(m, SIGMA_FIX, 0.7), U @ SIGMA_FIX @ U.conj().T, atol=1e-13)


def test_dyson_reports_order(d2_model):
    _, info = dyson_series(d2_model, SIGMA_FIX, 1.0, full_output=True)
    assert info["order"] == poisson_order(1.0, 1e-12)
    with pytest.raises(TruncationBudgetExceeded):
        dyson_series(validate_model(ModelSpec(H=SIGMA_Z, C=C_FIX, lam=60.0)), SIGMA_FIX, 1.0)


@pytest.mark.parametrize("d, seed", [(2, 1), (3, 2), (3, 3)])
def test_rk4_matches_dyson(d, seed):
    rng = np.random.default_rng(seed)
    m = validate_model(ModelSpec(H=random_hermitian(rng, d), C=random_contraction(rng, d), lam=2.0))
    eta = random_state(rng, d)
    sigma = np.outer(eta, eta.conj())
    rk = integrate_master(m, sigma, [0.0, 1.0]).rho[-1]
    assert np.max(np.abs(rk - dyson_series(m, sigma, 1.0))) <= 1e-8


def test_rk4_polynomial():
    L = np.array([[0.0, 1.0], [-1.0, 0.0]])
    h = 0.1
    P = rk4_propagator(L, h)
    hl = h * L
    np.testing.assert_allclose(P, np.eye(2) + hl + hl @ hl / 2 + hl @ hl @ hl / 6 + hl @ hl @ hl @ hl / 24)


def test_superoperator_matches_commutator(d2_model):
    A = np.array([[0.3, 0.1 + 0.2j], [0.1 - 0.2j, 0.7]])
    C, H = d2_model.C, d2_model.H
    out = master_superoperator(d2_model) @ A.reshape(-1)
    expect = -1j * (H @ A - A @ H) + (C @ A @ C.conj().T - A)
    np.testing.assert_allclose(out.reshape(2, 2), expect, atol=1e-15)


@given(st.integers(0, 2**32 - 1), st.integers(1, 3), st.floats(0.1, 5.0))
def test_master_invariants(seed, d, lam):
    rng = np.random.default_rng(seed)
    m = validate_model(ModelSpec(H=random_hermitian(rng, d), C=random_contraction(rng, d), lam=lam))
    eta = random_state(rng, d)
    path = integrate_master(m, np.outer(eta, eta.conj()), np.linspace(0.0, 1.0, 6))
    assert np.all(np.diff(path.trace) <= 1e-12)
    assert path.hermiticity_defect() <= 1e-8
    assert path.min_eigenvalue() >= -1e-8


def test_semigroup_property(d2_model):
    a = integrate_master(d2_model, SIGMA_FIX, [0.0, 0.4]).rho[-1]
    b = integrate_master(d2_model, a, [0.0, 0.6]).rho[-1]
    c = integrate_master(d2_model, SIGMA_FIX, [0.0, 1.0]).rho[-1]
    assert np.max(np.abs(b - c)) <= 1e-9


def test_contraction_semigroup_limit():
    m = rate_model(10.0)
    grid = np.linspace(0.0, 2.0, 9)
    path = contraction_semigroup(m, SIGMA_FIX, grid)
    K = 1j * SIGMA_Z + R_FIX
    assert all(np.linalg.norm(expm(-K * t), 2) <= 1 + 1e-12 for t in grid)
    assert path.info["residual"] <= 1e-6
    assert nonmixing_residual(K, SIGMA_FIX, grid) <= 1e-6
    assert np.all(np.diff(path.trace) <= 1e-14)


def test_weak_collapse_lambda_sweep():
    grid = [0.0, 1.0]
    errs = []
    for lam in (10.0, 100.0, 1000.0):
        m = rate_model(lam)
        errs.append(trace_distance(integrate_master(m, SIGMA_FIX, grid).rho[-1],
                                   contraction_semigroup(m, SIGMA_FIX, grid).rho[-1]))
    ratios = [errs[0] / errs[1], errs[1] / errs[2]]
    assert all(5 <= r <= 20 for r in ratios), ratios
