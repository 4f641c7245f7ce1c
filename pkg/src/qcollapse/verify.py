"""Cross-oracle self-check used by the ``verify`` command.

Every check compares two independent computations of the same quantity and
records the observed discrepancy next to the tolerance it must meet.  The
ensemble sizes are small enough for an interactive run; the test suite
repeats the same comparisons at full size.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .core import ValidatedModel, trace_distance
from .dilation import (FLAVORS, build_dilation, coherent_matrix_ode, compress,
                       dilated_evolve, lambda_expansion_residual)
from .diffusion import coarsen, integrate_ito_schrodinger, wiener_increments
from .genfun import StepFunction, TestFunction, dot_plus, genfun_mc, genfun_ode
from .master import dyson_series, integrate_master
from .trajectory import (ensemble_average, evolve_density, evolve_state, propagator_at,
                         sample_jumps, semigroup_deviation)

log = logging.getLogger(__name__)


@dataclass
class Check:
    name: str
    observed: float
    limit: float
    passed: bool
    detail: str = ""

    def as_dict(self) -> dict:
        return asdict(self)


def _check(name, observed, limit, passed=None, detail=""):
    passed = bool(observed <= limit) if passed is None else bool(passed)
    log.info("%s %s: %.3e (limit %.3e)", "PASS" if passed else "FAIL", name, observed, limit)
    return Check(name, float(observed), float(limit), passed, detail)


def run_checks(model: ValidatedModel, rate_model: ValidatedModel, eta0, seed: int = 0,
               n: int = 2000, workers: int = 1) -> list[Check]:
    eta0 = np.asarray(eta0, dtype=complex)
    sigma = np.outer(eta0, eta0.conj())
    checks = []

    # master equation against the Dyson series and the trajectory average
    t = 1.0
    rk = integrate_master(model, sigma, [0.0, t]).rho[-1]
    dy = dyson_series(model, sigma, t)
    checks.append(_check("master_vs_dyson", np.max(np.abs(rk - dy)), 1e-8))
    ens = ensemble_average(model, eta0, n, [0.0, t], seed, workers=workers)
    checks.append(_check("ensemble_vs_master", trace_distance(ens.rho_bar.rho[-1], rk),
                         3 * ens.q_stderr[-1]))

    # stochastic density against outer products of the pure state
    grid = np.linspace(0.0, t, 11)
    worst = 0.0
    for i in range(20):
        j = sample_jumps(model.lam, t, seed + i)
        chi = evolve_state(model, j, eta0, grid).chi
        rho = evolve_density(model, j, sigma, grid).rho
        worst = max(worst, np.max(np.abs(rho - np.einsum("ki,kj->kij", chi, chi.conj()))))
    checks.append(_check("density_vs_outer_product", worst, 1e-12))

    # generating functional: Monte Carlo against the ODE
    tf = TestFunction(np.linspace(0.0, t, 5), [-0.3 + 0.2j, -0.5, -0.1 - 0.1j, -0.2], model.lam)
    ode = genfun_ode(model, tf, eta0, [0.0, t])[-1]
    mc = genfun_mc(model, tf, eta0, n, t, seed, workers)
    checks.append(_check("genfun_mc_vs_ode", np.linalg.norm(mc.mean - ode), 3 * mc.stderr))

    # dilations
    for flavor in FLAVORS:
        Sd = build_dilation(model.C, flavor)
        checks.append(_check(f"unitarity_{flavor}", Sd.unitarity_residual(), 1e-12))
        worst = 0.0
        for i in range(20):
            j = sample_jumps(model.lam, t, seed + i)
            if j.n > 6:
                continue
            st = dilated_evolve(Sd, model.H, j, eta0, t)
            worst = max(worst, np.max(np.abs(compress(Sd, st) - propagator_at(model, j, t) @ eta0)))
        checks.append(_check(f"compression_{flavor}", worst, 1e-12))

    # weak-collapse expansion of the nonhermitian dilation
    res = [lambda_expansion_residual(rate_model.R, lam) for lam in (1e2, 1e3, 1e4)]
    ratios = [res[0] / res[1], res[1] / res[2]]
    checks.append(_check("lambda_expansion_ratio", min(ratios), 20.0,
                         passed=all(20 <= r <= 45 for r in ratios),
                         detail=f"ratios {ratios[0]:.2f}, {ratios[1]:.2f}"))

    # coherent matrix element with scalar embeddings
    zero = StepFunction(tf.grid, np.zeros(tf.values.size))
    g = TestFunction(tf.grid, [-0.2, -0.1 + 0.05j, -0.4, -0.3 + 0.1j], model.lam)
    Sd = build_dilation(model.C, "nonhermitian")
    U = coherent_matrix_ode(model, Sd, (g, zero), (tf, zero), grid, eta0)
    V = genfun_ode(model, dot_plus(g.conj(), tf), eta0, grid)
    checks.append(_check("coherent_vs_genfun", np.max(np.abs(U - V)), 1e-8))

    # diffusion: pathwise norm error is first order in the step
    H, R = rate_model.H, rate_model.R
    fine = wiener_increments(seed, 1e-5, 100_000)
    a = integrate_ito_schrodinger(H, R, eta0, 1e-5, 1.0, seed, increments=fine)
    b = integrate_ito_schrodinger(H, R, eta0, 1e-4, 1.0, seed, increments=coarsen(fine, 10))
    ratio = b.norm_defect() / a.norm_defect()
    checks.append(_check("diffusion_norm_ratio", ratio, 5.0, passed=5 <= ratio <= 20,
                         detail="dt 1e-4 vs 1e-5"))

    # weak-collapse limit along one trajectory
    devs = [semigroup_deviation(rate_model.with_lambda(lam), eta0, grid, seed)
            for lam in (10.0, 100.0, 1000.0)]
    checks.append(_check("zeno_pathwise_decrease", devs[-1], devs[0],
                         passed=devs[0] > devs[1] > devs[2],
                         detail=", ".join(f"{x:.3e}" for x in devs)))
    return checks


def all_passed(checks) -> bool:
    return all(c.passed for c in checks) and not any(math.isnan(c.observed) for c in checks)
