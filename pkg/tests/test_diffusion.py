import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import ETA_FIX, R_FIX, SIGMA_Z
from qcollapse.core import expm
from qcollapse.diffusion import (NotDissipative, SideConditionViolated, coarsen,
                                 diffusion_ensemble, integrate_ito_schrodinger, mean_oracle,
                                 noise_operator, scalar_closed_form, scheme_mean,
                                 scheme_second_moment, second_moment_ode, wiener_increments,
                                 zeno_sweep)


def test_noise_operator():
    np.testing.assert_allclose(noise_operator(R_FIX), np.diag([0.0, math.sqrt(0.72)]), atol=1e-15)
    with pytest.raises(NotDissipative):
        noise_operator(np.diag([0.1, -0.2]))


def test_step_validation():
    with pytest.raises(ValueError):
        integrate_ito_schrodinger(SIGMA_Z, R_FIX, ETA_FIX, 2e-3, 1.0, 0)
    with pytest.raises(ValueError):
        integrate_ito_schrodinger(SIGMA_Z, R_FIX, ETA_FIX, 3e-4, 1.0, 0)
    with pytest.raises(ValueError):
        integrate_ito_schrodinger(SIGMA_Z, R_FIX, ETA_FIX, 1e-3, 1.0, 0, scheme="heun")


def test_frozen_wiener_increments():
    np.testing.assert_array_equal(wiener_increments(3, 1e-4, 5), wiener_increments(3, 1e-4, 5))
    assert not np.array_equal(wiener_increments(3, 1e-4, 5), wiener_increments(4, 1e-4, 5))


def test_coarsen_sums_groups():
    np.testing.assert_array_equal(coarsen(np.arange(6.0), 3), [3.0, 12.0])
    with pytest.raises(ValueError):
        coarsen(np.arange(5.0), 2)


@pytest.mark.parametrize("seed", range(5))
def test_quadratic_variation(seed):
    dt, t = 1e-4, 1.0
    qv = np.sum(wiener_increments(seed, dt, round(t / dt)) ** 2)
    assert abs(qv - t) <= 3 * math.sqrt(2 * dt * t)


def test_no_rate_is_noise_free():
    R = np.zeros((2, 2))
    a = integrate_ito_schrodinger(SIGMA_Z, R, ETA_FIX, 1e-3, 1.0, 0)
    b = integrate_ito_schrodinger(SIGMA_Z, R, ETA_FIX, 1e-3, 1.0, 1)
    np.testing.assert_array_equal(a.psi, b.psi)
    assert np.linalg.norm(a.psi[-1] - expm(-1j * SIGMA_Z) @ ETA_FIX) <= 1e-3


@pytest.mark.parametrize("dt", [1e-3, 1e-4])
def test_scalar_closed_form(dt):
    r = 0.5
    errs = []
    for seed in range(5):
        p = integrate_ito_schrodinger([[0.0]], [[r]], [1.0], dt, 1.0, seed)
        exact = scalar_closed_form(r, p.wiener_path())
        errs.append(np.max(np.abs(p.psi[:, 0] - exact)))
    assert np.mean(errs) <= 5 * math.sqrt(dt)


def test_scalar_closed_form_keeps_modulus():
    w = np.linspace(-3, 3, 7)
    np.testing.assert_allclose(np.abs(scalar_closed_form(0.4, w)), 1.0)


def test_norm_error_first_order():
    fine = wiener_increments(0, 1e-5, 100_000)
    a = integrate_ito_schrodinger(SIGMA_Z, R_FIX, ETA_FIX, 1e-5, 1.0, 0, increments=fine)
    b = integrate_ito_schrodinger(SIGMA_Z, R_FIX, ETA_FIX, 1e-4, 1.0, 0, increments=coarsen(fine, 10))
    assert 5 <= b.norm_defect() / a.norm_defect() <= 20


def test_renormalized_paths_stay_on_sphere():
    p = integrate_ito_schrodinger(SIGMA_Z, R_FIX, ETA_FIX, 1e-3, 1.0, 2, renormalize=True)
    assert p.norm_defect() <= 1e-12
    assert p.renormalized


def test_scheme_mean_approaches_oracle():
    exact = mean_oracle(SIGMA_Z, R_FIX, ETA_FIX, 1.0)
    e3 = np.linalg.norm(scheme_mean(SIGMA_Z, R_FIX, ETA_FIX, 1e-3, 1.0) - exact)
    e4 = np.linalg.norm(scheme_mean(SIGMA_Z, R_FIX, ETA_FIX, 1e-4, 1.0) - exact)
    assert e3 <= 1e-3 and 5 <= e3 / e4 <= 20


def test_second_moment_ode_preserves_trace():
    grid = np.linspace(0.0, 1.0, 5)
    rho = second_moment_ode(SIGMA_Z, R_FIX, ETA_FIX, grid)
    np.testing.assert_allclose(np.trace(rho, axis1=1, axis2=2).real, 1.0, atol=1e-10)
    mom = scheme_second_moment(SIGMA_Z, R_FIX, ETA_FIX, 1e-4, 1.0)
    assert np.max(np.abs(mom - rho[-1])) <= 1e-3


@given(st.integers(0, 2**32 - 1))
def test_second_moment_ode_is_psd(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
    R = 0.3 * A @ A.conj().T
    rho = second_moment_ode(SIGMA_Z, R, ETA_FIX, [0.0, 0.5])[-1]
    assert np.linalg.eigvalsh(0.5 * (rho + rho.conj().T)).min() >= -1e-10


def test_ensemble_moments():
    ens = diffusion_ensemble(SIGMA_Z, R_FIX, ETA_FIX, 2048, 1e-3, 1.0, 0)
    mean = scheme_mean(SIGMA_Z, R_FIX, ETA_FIX, 1e-3, 1.0)
    assert np.all(np.abs(ens.mean[-1] - mean) <= 3 * ens.mean_stderr[-1] + 1e-12)
    second = scheme_second_moment(SIGMA_Z, R_FIX, ETA_FIX, 1e-3, 1.0)
    assert np.all(np.abs(ens.second[-1] - second) <= 3 * ens.second_stderr[-1] + 1e-12)
    assert abs(ens.trace[-1] - np.trace(second).real) <= 3 * ens.trace_stderr[-1]
    assert ens.grid.size == 11


def test_ensemble_is_deterministic_across_workers():
    a = diffusion_ensemble(SIGMA_Z, R_FIX, ETA_FIX, 1500, 1e-3, 0.1, 4)
    b = diffusion_ensemble(SIGMA_Z, R_FIX, ETA_FIX, 1500, 1e-3, 0.1, 4, workers=2)
    np.testing.assert_array_equal(a.second, b.second)


def test_zeno_rows():
    rows = zeno_sweep(SIGMA_Z, R_FIX, [10.0, 100.0, 1000.0], ETA_FIX, 1.0, 300, 0)
    assert [r.lam for r in rows] == [10.0, 100.0, 1000.0, math.inf]
    sup = [r.sup_error for r in rows[:3]]
    assert sup[0] > sup[1] > sup[2]
    assert all(r.side_condition for r in rows)
    assert rows[-1].dist_diffusion == 0.0


def test_zeno_flags_side_condition():
    with pytest.warns(SideConditionViolated):
        rows = zeno_sweep(SIGMA_Z, R_FIX, [0.1], ETA_FIX, 0.1, 10, 0, n_diffusion=10)
    assert not rows[0].side_condition and math.isnan(rows[0].sup_error)
    assert rows[-1].lam == math.inf
