"""Averaged (mixed-state) dynamics.

The ensemble-averaged density matrix obeys

    d rho/dt = -i[H, rho] + lam (C rho C* - rho),

whose trace (the survival probability) is non-increasing.  Three routes are
provided: fixed-step RK4 on the vectorized equation, the Dyson series in
Poisson-weighted orders, and, for the weak-collapse form ``C = I - R/lam``,
the closed-form limit ``rho(t) = e^{-Kt} sigma e^{-K*t}`` with ``K = iH + R``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import legendre

from .core import (
    InconsistentR,
    TOL_PSD,
    dagger,
    ensure_model,
    expm,
    opnorm,
    semigroup_generator,
)

PSD_FLOOR = -1e-8
HERM_DRIFT = 1e-8
RK4_LOCAL_TOL = 1e-10


class StepTooLarge(ArithmeticError):
    pass


class TruncationBudgetExceeded(ArithmeticError):
    pass


@dataclass
class DensityPath:
    """Density matrices ``rho[k]`` at ``grid[k]``."""

    grid: np.ndarray
    rho: np.ndarray
    info: dict = field(default_factory=dict)

    @property
    def trace(self) -> np.ndarray:
        return np.trace(self.rho, axis1=1, axis2=2).real

    @property
    def purity(self) -> np.ndarray:
        return np.einsum("kij,kji->k", self.rho, self.rho).real

    def hermiticity_defect(self) -> float:
        return float(np.max(np.abs(self.rho - dagger(self.rho))))

    def min_eigenvalue(self) -> float:
        herm = 0.5 * (self.rho + dagger(self.rho))
        return float(np.min(np.linalg.eigvalsh(herm)))

    def at(self, t: float) -> np.ndarray:
        k = int(np.argmin(np.abs(self.grid - t)))
        if not math.isclose(self.grid[k], t, rel_tol=1e-12, abs_tol=1e-12):
            raise KeyError(f"t={t} is not a grid point")
        return self.rho[k]


def _check_sigma(sigma, d: int) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=complex)
    if sigma.ndim == 1:
        sigma = np.outer(sigma, sigma.conj())
    if sigma.shape != (d, d):
        raise ValueError(f"sigma has shape {sigma.shape}, expected {(d, d)}")
    if opnorm(sigma - dagger(sigma)) > 1e-10:
        raise ValueError("sigma must be Hermitian")
    if np.linalg.eigvalsh(0.5 * (sigma + dagger(sigma))).min() < -TOL_PSD:
        raise ValueError("sigma must be positive semidefinite")
    if np.trace(sigma).real > 1 + 1e-10:
        raise ValueError("sigma must have trace <= 1")
    return sigma


def master_superoperator(model) -> np.ndarray:
    """Generator of the averaged dynamics acting on row-major ``vec(rho)``."""
    model = ensure_model(model)
    d = model.dim
    I = np.eye(d)
    H, C = model.H, model.C
    return (-1j * (np.kron(H, I) - np.kron(I, H.T))
            + model.lam * (np.kron(C, C.conj()) - np.eye(d * d)))


def rk4_propagator(L: np.ndarray, h: float) -> np.ndarray:
    """One classical RK4 step for the autonomous linear system ``x' = L x``."""
    A = h * L
    I = np.eye(L.shape[0], dtype=complex)
    A2 = A @ A
    return I + A + A2 / 2 + A2 @ A / 6 + A2 @ A2 / 24


def rk4_max_step(norm_L: float, local_tol: float = RK4_LOCAL_TOL) -> float:
    """Largest step whose RK4 local error bound ``(h|L|)^5/120`` meets ``local_tol``."""
    if norm_L == 0:
        return math.inf
    return (120.0 * local_tol) ** 0.2 / norm_L


class _StepCache:
    """RK4 interval propagators ``P(h)^m`` keyed by interval length."""

    def __init__(self, L: np.ndarray, h_max: float):
        self.L = L
        self.h_max = h_max
        self._memo: dict[float, tuple[int, np.ndarray]] = {}

    def over(self, span: float) -> np.ndarray:
        key = round(span, 15)
        if key not in self._memo:
            m = max(1, math.ceil(span / self.h_max - 1e-9))
            step = rk4_propagator(self.L, span / m)
            self._memo[key] = (m, np.linalg.matrix_power(step, m))
        return self._memo[key][1]


def integrate_linear_rk4(L: np.ndarray, x0: np.ndarray, grid, h_cap: float) -> np.ndarray:
    """RK4 solution of ``x' = L x`` sampled on ``grid`` (``x(grid[0]) = x0``).

    Steps are uniform inside each grid interval and never exceed ``h_cap``
    or the local-error step for ``L``.  Repeated steps are applied as a
    power of the one-step propagator, which is algebraically the same
    iteration.
    """
    grid = np.asarray(grid, dtype=float)
    cache = _StepCache(L, min(h_cap, rk4_max_step(opnorm(L))))
    out = np.empty((len(grid),) + x0.shape, dtype=complex)
    x = np.asarray(x0, dtype=complex)
    out[0] = x
    for k in range(1, len(grid)):
        span = grid[k] - grid[k - 1]
        if span > 0:
            x = cache.over(span) @ x
        out[k] = x
    return out


def integrate_master(model, sigma, grid) -> DensityPath:
    """RK4 integration of the averaged master equation from ``sigma`` at ``grid[0]``.

    Raises
    ------
    StepTooLarge
        If the propagated matrices lose Hermiticity by more than 1e-8.
    """
    model = ensure_model(model)
    d = model.dim
    sigma = _check_sigma(sigma, d)
    grid = np.asarray(grid, dtype=float).reshape(-1)
    if grid.size == 0 or np.any(np.diff(grid) < 0):
        raise ValueError("grid must be non-empty and non-decreasing")
    L = master_superoperator(model)
    h_cap = 1e-3 / (1.0 + model.lam)
    xs = integrate_linear_rk4(L, sigma.reshape(-1), grid, h_cap)
    rho = xs.reshape(len(grid), d, d)
    path = DensityPath(grid=grid, rho=rho)
    drift = path.hermiticity_defect()
    if drift > HERM_DRIFT:
        raise StepTooLarge(f"Hermiticity drift {drift:.3e} exceeds {HERM_DRIFT:g}")
    leak = dagger(model.C) @ model.C - np.eye(d)
    path.info["trace_rate"] = np.einsum("ij,kji->k", leak, rho).real
    return path


# -- Dyson series -----------------------------------------------------------

_GL_NODES = 16


def _panel_rules(p: int):
    """Gauss-Legendre nodes/weights on [-1, 1] and the indefinite-integral matrix.

    ``Q[i, j] = int_{-1}^{x_i} l_j(x) dx`` for the Lagrange basis ``l_j`` on the
    nodes, so ``Q @ f(x)`` integrates the interpolant of ``f`` from -1 to
    each node.
    """
    x, w = legendre.leggauss(p)
    V = legendre.legvander(x, p - 1)
    coef = np.linalg.inv(V)
    Q = np.empty((p, p))
    for j in range(p):
        Q[:, j] = legendre.legval(x, legendre.legint(coef[:, j], lbnd=-1))
    return x, w, Q


def poisson_order(lam_t: float, tol: float) -> int:
    """Smallest ``n >= lam_t`` with ``(lam t)^n e^{-lam t} / n! < tol``."""
    n = max(0, math.ceil(lam_t))
    while True:
        logp = (n * math.log(lam_t) - lam_t - math.lgamma(n + 1)) if lam_t > 0 else (
            0.0 if n == 0 else -math.inf)
        if logp < math.log(tol):
            return n
        n += 1


def _dyson_sum(model, sigma_ib: np.ndarray, t: float, order: int, panels: int) -> np.ndarray:
    """Sum of ``lam^n Y_n(t)`` in the interaction picture (eigenbasis of H)."""
    x, w, Q = _panel_rules(_GL_NODES)
    e = model.h_evals
    V = model.h_evecs
    Cb = dagger(V) @ model.C @ V
    edges = np.linspace(0.0, t, panels + 1)
    half = 0.5 * np.diff(edges)
    nodes = (edges[:-1, None] + half[:, None] * (x[None, :] + 1.0)).reshape(-1)
    # interaction-picture collapse C(r) = U(r)* C U(r) with U(r) = diag(exp(-i e r))
    ph = np.exp(1j * np.outer(nodes, e))
    Chat = ph[:, :, None] * Cb[None, :, :] * ph.conj()[:, None, :]
    Chat_d = dagger(Chat)

    Y = np.broadcast_to(sigma_ib, (len(nodes),) + sigma_ib.shape)
    total = sigma_ib.copy()
    weight = 1.0
    for _ in range(order):
        Z = (Chat @ Y @ Chat_d).reshape(panels, _GL_NODES, *sigma_ib.shape)
        Ynew = np.empty_like(Z)
        start = np.zeros_like(sigma_ib)
        for j in range(panels):
            Ynew[j] = start + half[j] * np.tensordot(Q, Z[j], axes=(1, 0))
            start = start + half[j] * np.tensordot(w, Z[j], axes=(0, 0))
        Y = Ynew.reshape(len(nodes), *sigma_ib.shape)
        weight *= model.lam
        total = total + weight * start
    return total


def dyson_series(model, sigma, t: float, tol: float = 1e-12, n_cap: int = 40,
                 full_output: bool = False):
    """Averaged state at time ``t`` from the Dyson series.

    Orders are summed through ``n*``, the first order past the Poisson mode
    whose weight drops below ``tol``.  Each ordered time-simplex integral is
    done by iterated Gauss-Legendre quadrature in the interaction picture on
    a panel mesh that is refined until successive results agree to
    ``tol/10``.

    Returns
    -------
    rho : ndarray
        The averaged density matrix.  With ``full_output`` a dict with the
        order and panel count is returned as well.
    """
    model = ensure_model(model)
    if t < 0:
        raise ValueError("t must be >= 0")
    if tol <= 0:
        raise ValueError("tol must be > 0")
    d = model.dim
    sigma = _check_sigma(sigma, d)
    if t == 0:
        return (sigma.copy(), {"order": 0, "panels": 0}) if full_output else sigma.copy()
    order = poisson_order(model.lam * t, tol)
    if order > n_cap:
        raise TruncationBudgetExceeded(f"series needs order {order} > n_cap={n_cap}")
    V = model.h_evecs
    sigma_ib = dagger(V) @ sigma @ V
    panels = max(1, math.ceil(t * (np.ptp(model.h_evals) + model.lam) / 4))
    prev = _dyson_sum(model, sigma_ib, t, order, panels)
    while True:
        panels *= 2
        cur = _dyson_sum(model, sigma_ib, t, order, panels)
        if np.max(np.abs(cur - prev)) <= tol / 10 or panels >= 4096:
            break
        prev = cur
    Ut = np.exp(-1j * model.h_evals * t)
    rho_ib = math.exp(-model.lam * t) * (Ut[:, None] * cur * Ut.conj()[None, :])
    rho = V @ rho_ib @ dagger(V)
    if full_output:
        return rho, {"order": order, "panels": panels}
    return rho


# -- weak-collapse limit ----------------------------------------------------

def contraction_semigroup(model, sigma, grid) -> DensityPath:
    """Nonmixing limit ``rho(t) = e^{-Kt} sigma e^{-K*t}`` with ``K = iH + R``.

    The path's ``info['residual']`` holds the largest central-difference
    residual of ``rho' + K rho + rho K* = 0`` over the grid.
    """
    model = ensure_model(model)
    if model.R is None:
        raise InconsistentR("contraction_semigroup needs a model carrying R")
    sigma = _check_sigma(sigma, model.dim)
    grid = np.asarray(grid, dtype=float).reshape(-1)
    K = semigroup_generator(model, limit=True)
    rho = np.array([_semigroup_state(K, sigma, t) for t in grid])
    path = DensityPath(grid=grid, rho=rho)
    path.info["residual"] = nonmixing_residual(K, sigma, grid)
    return path


def _semigroup_state(K: np.ndarray, sigma: np.ndarray, t: float) -> np.ndarray:
    E = expm(-K * t)
    return E @ sigma @ dagger(E)


def nonmixing_residual(K: np.ndarray, sigma: np.ndarray, grid, h: float = 1e-4) -> float:
    """``max_t |(rho(t+h) - rho(t-h))/2h + K rho + rho K*|`` (entrywise)."""
    worst = 0.0
    for t in np.asarray(grid, dtype=float):
        r = _semigroup_state(K, sigma, t)
        deriv = (_semigroup_state(K, sigma, t + h) - _semigroup_state(K, sigma, t - h)) / (2 * h)
        worst = max(worst, float(np.max(np.abs(deriv + K @ r + r @ dagger(K)))))
    return worst
