"""Diffusion limit of weak, frequent collapses.

As ``lam -> inf`` with ``C = I - R/lam`` the dilated dynamics of a pure state
is driven by a single real Wiener process ``w``:

    d psi + (R + iH) psi dt = i B psi dw,    B = (R + R*)^1/2.

Read in the Ito sense the drift and the noise balance, since ``K + K* = B^2``
with ``K = R + iH``, and ``||psi_t||`` is conserved pathwise.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from .core import (ModelSpec, as_operator, as_state, dagger, expm, psd_sqrt,
                   side_condition, trace_distance, validate_model, ModelError,
                   TooNegative, NotHermitian)
from .master import integrate_linear_rk4, rk4_max_step
from .parallel import block_reduce
from .rng import wiener_stream
from .trajectory import ensemble_average, semigroup_deviation

DT_MAX = 1e-3
SCHEMES = ("milstein", "euler")
PATH_BLOCK = 1024
MOMENT_LOCAL_TOL = 1e-12


class NotDissipative(ModelError):
    """``R + R*`` is not positive semidefinite."""


class SideConditionViolated(UserWarning):
    """``R*R <= lam (R + R*)`` fails for a requested intensity."""


def noise_operator(R) -> np.ndarray:
    """``(R + R*)^1/2``, rejecting rate operators with an indefinite real part."""
    R = as_operator(R, "R")
    try:
        return psd_sqrt(R + dagger(R))
    except (TooNegative, NotHermitian) as exc:
        raise NotDissipative(f"R + R* is not positive semidefinite: {exc}") from exc


def wiener_increments(seed: int, dt: float, n_steps: int) -> np.ndarray:
    """Gaussian increments of variance ``dt`` from the Wiener stream of ``seed``."""
    return wiener_stream(seed).normals(int(n_steps)) * math.sqrt(dt)


def coarsen(increments: np.ndarray, factor: int) -> np.ndarray:
    """Sum consecutive groups of ``factor`` increments (same Brownian path, larger step)."""
    increments = np.asarray(increments, dtype=float)
    if increments.shape[-1] % factor:
        raise ValueError(f"{increments.shape[-1]} increments do not split into groups of {factor}")
    return increments.reshape(increments.shape[:-1] + (-1, factor)).sum(axis=-1)


def _n_steps(dt: float, t_max: float) -> int:
    if not 0 < dt <= DT_MAX * (1 + 1e-12):
        raise ValueError(f"dt must lie in (0, {DT_MAX:g}], got {dt}")
    if t_max <= 0:
        raise ValueError("t_max must be > 0")
    n = round(t_max / dt)
    if not math.isclose(n * dt, t_max, rel_tol=1e-9):
        raise ValueError(f"t_max={t_max} is not a multiple of dt={dt}")
    return int(n)


def _step_matrices(H, R, dt: float, scheme: str):
    """One-step update ``psi <- (A0 + dw A1 + dw^2 A2) psi``."""
    if scheme not in SCHEMES:
        raise ValueError(f"scheme must be one of {SCHEMES}, got {scheme!r}")
    d = H.shape[0]
    B = noise_operator(R)
    K = R + 1j * H
    I = np.eye(d)
    A0 = I - K * dt
    A1 = 1j * B
    A2 = np.zeros_like(A0)
    if scheme == "milstein":
        # Ito-Taylor correction: -(1/2) B^2 (dw^2 - dt)
        B2 = B @ B
        A0 = A0 + 0.5 * B2 * dt
        A2 = -0.5 * B2
    return A0, A1, A2


def _run(A0, A1, A2, psi, dw, renormalize: bool, record_every: int):
    """Advance states ``psi`` of shape ``(P, d)`` over increments ``dw`` of shape ``(P, N)``."""
    P, N = dw.shape
    out = np.empty((N // record_every + 1, P, psi.shape[1]), dtype=complex)
    out[0] = psi
    T0, T1, T2 = A0.T, A1.T, A2.T
    quad = bool(np.any(A2))
    r = 1
    for k in range(N):
        w = dw[:, k:k + 1]
        new = psi @ T0 + w * (psi @ T1)
        if quad:
            new += (w * w) * (psi @ T2)
        psi = new
        if renormalize:
            psi = psi / np.linalg.norm(psi, axis=1, keepdims=True)
        if (k + 1) % record_every == 0:
            out[r] = psi
            r += 1
    return out


@dataclass
class DiffusionPath:
    """One sample path of the diffusion on a uniform grid."""

    grid: np.ndarray
    psi: np.ndarray
    wiener: np.ndarray
    seed: int
    scheme: str = "milstein"
    renormalized: bool = False

    @property
    def dt(self) -> float:
        return float(self.grid[1] - self.grid[0])

    @property
    def norm_sq(self) -> np.ndarray:
        return np.einsum("ki,ki->k", self.psi.conj(), self.psi).real

    def norm_defect(self) -> float:
        """``max_t | ||psi_t||^2 - 1 |``."""
        return float(np.max(np.abs(self.norm_sq - 1.0)))

    def wiener_path(self) -> np.ndarray:
        return np.concatenate(([0.0], np.cumsum(self.wiener)))


def integrate_ito_schrodinger(H, R, eta0, dt: float, t_max: float, seed: int,
                              scheme: str = "milstein", renormalize: bool = False,
                              increments=None) -> DiffusionPath:
    """Integrate the Ito-Schrodinger equation on ``[0, t_max]`` with step ``dt``.

    Parameters
    ----------
    scheme : {"milstein", "euler"}
        ``euler`` is Euler-Maruyama.  ``milstein`` adds the term
        ``-(1/2) B^2 psi (dw^2 - dt)``, which makes the pathwise norm error
        first order in ``dt``.
    renormalize : bool
        Project back to the unit sphere after every step.  This changes the
        process and is meant for exploration only.
    increments : array, optional
        Explicit Wiener increments (length ``t_max/dt``).  By default they
        are drawn from the Wiener stream of ``seed``.
    """
    H = as_operator(H, "H")
    R = as_operator(R, "R")
    d = H.shape[0]
    eta0 = as_state(eta0, d, "eta0")
    if not math.isclose(np.linalg.norm(eta0), 1.0, abs_tol=1e-12):
        raise ValueError("eta0 must be normalized")
    n = _n_steps(dt, t_max)
    A0, A1, A2 = _step_matrices(H, R, dt, scheme)
    if increments is None:
        dw = wiener_increments(seed, dt, n)
    else:
        dw = np.asarray(increments, dtype=float).reshape(-1)
        if dw.size != n:
            raise ValueError(f"expected {n} increments, got {dw.size}")
    psi = _run(A0, A1, A2, eta0[None, :], dw[None, :], renormalize, 1)[:, 0, :]
    grid = dt * np.arange(n + 1)
    return DiffusionPath(grid=grid, psi=psi, wiener=dw, seed=int(seed), scheme=scheme,
                         renormalized=renormalize)


def scalar_closed_form(r: float, w: np.ndarray, eta: complex = 1.0) -> np.ndarray:
    """Exact solution for ``d = 1``, ``H = 0``, ``R = r``: ``exp(i sqrt(2r) w_t) eta``.

    The Ito correction ``-(1/2)(i sqrt(2r))^2 t = r t`` cancels the decay.
    """
    return np.exp(1j * math.sqrt(2 * r) * np.asarray(w)) * eta


# -- ensembles ------------------------------------------------------------------

def _diffusion_block(A0, A1, A2, eta0, dt, n, record_every, seed_base, start, stop):
    dw = np.stack([wiener_increments(seed_base + i, dt, n) for i in range(start, stop)])
    psi = np.repeat(eta0[None, :], stop - start, axis=0)
    out = _run(A0, A1, A2, psi, dw, False, record_every)  # (G, P, d)
    s1 = out.sum(axis=1)
    a2 = (np.abs(out) ** 2).sum(axis=1)
    m2 = np.einsum("gpi,gpj->gij", out, out.conj())
    m2sq = np.einsum("gpi,gpj->gij", np.abs(out) ** 2, np.abs(out) ** 2)
    nrm = np.einsum("gpi,gpi->gp", out.conj(), out).real
    return s1, a2, m2, m2sq, nrm.sum(axis=1), (nrm ** 2).sum(axis=1)


@dataclass
class DiffusionEnsemble:
    """Moments of ``n`` diffusion paths on a recorded grid.

    ``mean_stderr`` and ``second_stderr`` are entrywise standard errors
    (modulus of the complex deviation); ``trace_stderr`` refers to
    ``||psi_t||^2``.
    """

    grid: np.ndarray
    mean: np.ndarray
    mean_stderr: np.ndarray
    second: np.ndarray
    second_stderr: np.ndarray
    trace: np.ndarray
    trace_stderr: np.ndarray
    n: int
    seed_base: int
    dt: float
    scheme: str
    info: dict = field(default_factory=dict)


def _se(s1_abs2, mean, n):
    if n < 2:
        return np.zeros(np.shape(mean))
    return np.sqrt(np.clip((s1_abs2 - n * np.abs(mean) ** 2) / (n - 1), 0.0, None) / n)


def diffusion_ensemble(H, R, eta0, n: int, dt: float, t_max: float, seed_base: int,
                       record_every: int | None = None, scheme: str = "milstein",
                       workers: int = 1) -> DiffusionEnsemble:
    """Monte Carlo mean and second moment of the diffusion, path ``i`` seeded ``seed_base + i``.

    States are recorded every ``record_every`` steps (default: 10 records
    over ``[0, t_max]`` when possible).
    """
    H = as_operator(H, "H")
    R = as_operator(R, "R")
    d = H.shape[0]
    eta0 = as_state(eta0, d, "eta0")
    steps = _n_steps(dt, t_max)
    if record_every is None:
        record_every = steps // 10 if steps % 10 == 0 and steps >= 10 else steps
    if steps % record_every:
        raise ValueError("record_every must divide the number of steps")
    A0, A1, A2 = _step_matrices(H, R, dt, scheme)
    s1, a2, m2, m2sq, t1, t2 = block_reduce(
        partial(_diffusion_block, A0, A1, A2, eta0, float(dt), steps, int(record_every),
                int(seed_base)), int(n), workers, block=PATH_BLOCK)
    mean = s1 / n
    second = m2 / n
    trace = t1 / n
    grid = dt * record_every * np.arange(steps // record_every + 1)
    return DiffusionEnsemble(
        grid=grid, mean=mean, mean_stderr=_se(a2, mean, n),
        second=second, second_stderr=_se(m2sq, second, n),
        trace=trace, trace_stderr=_se(t2, trace, n),
        n=int(n), seed_base=int(seed_base), dt=float(dt), scheme=scheme)


def scheme_mean(H, R, eta0, dt: float, t: float) -> np.ndarray:
    """Exact mean of either scheme after ``t/dt`` steps: ``(I - K dt)^N eta0``."""
    H = as_operator(H, "H")
    K = as_operator(R, "R") + 1j * H
    n = _n_steps(dt, t)
    return np.linalg.matrix_power(np.eye(H.shape[0]) - K * dt, n) @ as_state(eta0, H.shape[0])


def scheme_second_moment(H, R, sigma, dt: float, t: float, scheme: str = "milstein") -> np.ndarray:
    """Exact ``E[psi psi*]`` of the discrete scheme after ``t/dt`` steps.

    Uses ``E[dw] = E[dw^3] = 0``, ``E[dw^2] = dt`` and ``E[dw^4] = 3 dt^2``.
    """
    H = as_operator(H, "H")
    d = H.shape[0]
    sigma = np.asarray(sigma, dtype=complex)
    if sigma.ndim == 1:
        sigma = np.outer(sigma, sigma.conj())
    A0, A1, A2 = _step_matrices(H, as_operator(R, "R"), dt, scheme)
    T = (np.kron(A0, A0.conj()) + dt * np.kron(A1, A1.conj())
         + dt * (np.kron(A0, A2.conj()) + np.kron(A2, A0.conj()))
         + 3 * dt * dt * np.kron(A2, A2.conj()))
    n = _n_steps(dt, t)
    return (np.linalg.matrix_power(T, n) @ sigma.reshape(-1)).reshape(d, d)


def mean_oracle(H, R, eta0, t: float) -> np.ndarray:
    """``e^{-Kt} eta0`` with ``K = R + iH``."""
    H = as_operator(H, "H")
    K = as_operator(R, "R") + 1j * H
    return expm(-K * t) @ as_state(eta0, H.shape[0])


def second_moment_superoperator(H, R) -> np.ndarray:
    """Row-major vectorization of ``rho -> -K rho - rho K* + B rho B``."""
    H = as_operator(H, "H")
    R = as_operator(R, "R")
    B = noise_operator(R)
    K = R + 1j * H
    I = np.eye(H.shape[0])
    return -np.kron(K, I) - np.kron(I, K.conj()) + np.kron(B, B.conj())


def second_moment_ode(H, R, sigma, grid) -> np.ndarray:
    """RK4 solution of ``d rho/dt = -K rho - rho K* + B rho B`` on ``grid``."""
    H = as_operator(H, "H")
    d = H.shape[0]
    sigma = np.asarray(sigma, dtype=complex)
    if sigma.ndim == 1:
        sigma = np.outer(sigma, sigma.conj())
    L = second_moment_superoperator(H, R)
    h = rk4_max_step(np.linalg.norm(L, 2), MOMENT_LOCAL_TOL)
    x = integrate_linear_rk4(L, sigma.reshape(-1), grid, h)
    return x.reshape(-1, d, d)


# -- Zeno sweep -------------------------------------------------------------------

@dataclass
class ZenoRow:
    lam: float
    side_condition: bool
    sup_error: float
    dist_semigroup: float
    dist_diffusion: float


def zeno_sweep(H, R, lambdas, eta0, t_max: float, n: int, seed_base: int,
               grid_points: int = 11, dt: float = 1e-3, n_diffusion: int | None = None,
               workers: int = 1) -> list[ZenoRow]:
    """Convergence of weak-collapse trajectories to the diffusion limit.

    For every intensity the row reports the single-path distance
    ``sup_t ||chi_t - e^{-Kt} eta||`` (trajectory seeded ``seed_base``) and the
    largest trace distances over the grid from the trajectory average of
    ``chi chi*`` to (a) the contraction semigroup and (b) the diffusion
    second moment.  A final row with ``lam = inf`` carries the diffusion
    ensemble itself: its mean against the semigroup in ``sup_error``, its
    second moment against the semigroup in ``dist_semigroup``, and zero in
    ``dist_diffusion``.
    """
    H = as_operator(H, "H")
    R = as_operator(R, "R")
    d = H.shape[0]
    eta0 = as_state(eta0, d, "eta0")
    noise_operator(R)
    steps = _n_steps(dt, t_max)
    if steps % (grid_points - 1):
        raise ValueError("grid_points - 1 must divide t_max/dt")
    grid = np.linspace(0.0, t_max, grid_points)
    sigma = np.outer(eta0, eta0.conj())
    diff = diffusion_ensemble(H, R, eta0, n if n_diffusion is None else n_diffusion, dt, t_max,
                              seed_base, record_every=steps // (grid_points - 1),
                              workers=workers)
    K = R + 1j * H
    props = [expm(-K * t) for t in grid]
    semi = np.array([E @ sigma @ dagger(E) for E in props])
    target = np.array([E @ eta0 for E in props])
    rows = []
    for lam in lambdas:
        lam = float(lam)
        ok = side_condition(R, lam)
        if not ok:
            # equivalent to C = I - R/lam failing to be a contraction: no model exists
            warnings.warn(f"R*R <= lambda (R + R*) fails at lambda={lam:g}; row skipped",
                          SideConditionViolated, stacklevel=2)
            rows.append(ZenoRow(lam=lam, side_condition=False, sup_error=math.nan,
                                dist_semigroup=math.nan, dist_diffusion=math.nan))
            continue
        model = validate_model(ModelSpec.from_rate(H, R, lam))
        sup_err = semigroup_deviation(model, eta0, grid, seed_base)
        ens = ensemble_average(model, eta0, n, grid, seed_base, workers=workers).rho_bar.rho
        rows.append(ZenoRow(
            lam=lam, side_condition=ok, sup_error=sup_err,
            dist_semigroup=max(trace_distance(a, b) for a, b in zip(ens, semi)),
            dist_diffusion=max(trace_distance(a, b) for a, b in zip(ens, diff.second))))
    rows.append(ZenoRow(
        lam=math.inf, side_condition=True,
        sup_error=float(np.max(np.linalg.norm(diff.mean - target, axis=1))),
        dist_semigroup=max(trace_distance(a, b) for a, b in zip(diff.second, semi)),
        dist_diffusion=0.0))
    return rows
