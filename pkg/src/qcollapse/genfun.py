"""Generating functionals of Poisson collapse trajectories.

For a test function ``f`` the stochastic exponent of the compensated counting
process ``m_t = n_t - lam t`` is

    eps_t^f = exp(-sqrt(lam) int_0^t f) * prod_{r in omega_t} (1 + f(r)/sqrt(lam)),

and the generating functional of the state is ``E[chi_t eps_t^f]``.  It solves
a linear ODE whose time-ordered solution expands into the chaos kernels
computed by :func:`tilde_kernels`.
"""

from __future__ import annotations

import cmath
import math
import warnings
from bisect import bisect_right
from dataclasses import dataclass
from functools import partial
from typing import NamedTuple, Sequence

import numpy as np

from .core import as_state, ensure_model, expm, semigroup_generator
from .master import rk4_max_step, rk4_propagator
from .parallel import block_reduce
from .trajectory import JumpRecord, propagator_at, sample_jumps

ODE_LOCAL_TOL = 1e-12
ADMISSIBLE_SLACK = 1e-12


class InadmissibleTestFunction(ValueError):
    pass


class GridMismatch(ValueError):
    pass


class UnorderedTuple(ValueError):
    pass


class TruncationWarning(UserWarning):
    pass


class StepFunction:
    """Complex function constant on ``[grid[k], grid[k+1])`` and zero outside."""

    def __init__(self, grid, values):
        grid = np.asarray(grid, dtype=float).reshape(-1)
        values = np.asarray(values, dtype=complex).reshape(-1)
        if grid.size < 2 or np.any(np.diff(grid) <= 0):
            raise ValueError("grid needs at least two strictly increasing points")
        if values.size == 1 and grid.size > 2:
            values = np.full(grid.size - 1, values[0])
        if values.size != grid.size - 1:
            raise ValueError(f"{values.size} cell values for {grid.size - 1} cells")
        self.grid = grid
        self.values = values
        # scalar fast paths
        self._edges = grid.tolist()
        self._vals = values.tolist()
        self._cum = np.concatenate(([0.0], np.cumsum(values * np.diff(grid)))).tolist()

    @classmethod
    def constant(cls, value: complex, t_end: float, t_start: float = 0.0):
        return cls([t_start, t_end], [value])

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        k = np.searchsorted(self.grid, t, side="right") - 1
        inside = (k >= 0) & (k < self.values.size)
        out = np.where(inside, self.values[np.clip(k, 0, self.values.size - 1)], 0.0)
        return out if out.ndim else complex(out)

    def value_at(self, t: float) -> complex:
        k = bisect_right(self._edges, t) - 1
        return self._vals[k] if 0 <= k < len(self._vals) else 0j

    def integral(self, t: float) -> complex:
        """``int_0^t f`` (the grid is assumed to start at or after 0)."""
        k = bisect_right(self._edges, t) - 1
        if k < 0:
            return 0j
        if k >= len(self._vals):
            return complex(self._cum[-1])
        return complex(self._cum[k] + self._vals[k] * (t - self._edges[k]))

    def _same_grid(self, other: "StepFunction") -> None:
        if self.grid.shape != other.grid.shape or not np.array_equal(self.grid, other.grid):
            raise GridMismatch("test functions live on different grids")

    def times(self, other: "StepFunction") -> "StepFunction":
        self._same_grid(other)
        return StepFunction(self.grid, self.values * other.values)

    def conj(self) -> "StepFunction":
        return StepFunction(self.grid, self.values.conj())

    def scaled(self, c: complex) -> "StepFunction":
        return StepFunction(self.grid, c * self.values)


class TestFunction(StepFunction):
    """Step function with ``|1 + f/sqrt(lam)| <= 1`` on every cell."""

    __test__ = False  # not a pytest class

    def __init__(self, grid, values, lambda_ref: float):
        super().__init__(grid, values)
        if not lambda_ref > 0:
            raise ValueError("lambda_ref must be > 0")
        self.lambda_ref = float(lambda_ref)
        mod = np.abs(1.0 + self.values / math.sqrt(self.lambda_ref))
        if np.any(mod > 1.0 + ADMISSIBLE_SLACK):
            k = int(np.argmax(mod))
            raise InadmissibleTestFunction(
                f"|1 + f/sqrt(lambda)| = {mod[k]:.6g} > 1 on cell {k}")

    @classmethod
    def constant(cls, value: complex, t_end: float, lambda_ref: float, t_start: float = 0.0):
        return cls([t_start, t_end], [value], lambda_ref)

    def conj(self) -> "TestFunction":
        return TestFunction(self.grid, self.values.conj(), self.lambda_ref)


def admissible_disc_sample(rng: np.random.Generator, size: int, lam: float,
                           radius_frac: float = 1.0) -> np.ndarray:
    """Uniform samples from the disc ``|1 + z/sqrt(lam)| <= radius_frac``."""
    r = radius_frac * np.sqrt(rng.random(size))
    phi = 2 * np.pi * rng.random(size)
    return math.sqrt(lam) * (r * np.exp(1j * phi) - 1.0)


def dot_plus(f: TestFunction, g: TestFunction) -> TestFunction:
    """``f + g + f g / sqrt(lam)``, the exponent of the product ``eps^f eps^g``."""
    f._same_grid(g)
    if not math.isclose(f.lambda_ref, g.lambda_ref, rel_tol=1e-12):
        raise GridMismatch("test functions refer to different intensities")
    vals = f.values + g.values + f.values * g.values / math.sqrt(f.lambda_ref)
    # (1 + f/s)(1 + g/s) keeps the modulus <= 1 up to roundoff
    return TestFunction(f.grid, vals, f.lambda_ref)


def stochastic_exponent(f: StepFunction, jumps: JumpRecord, t: float) -> complex:
    """Closed-form ``eps_t^f`` on one counting trajectory."""
    lam = jumps.lam
    if isinstance(f, TestFunction) and not math.isclose(f.lambda_ref, lam, rel_tol=1e-12):
        raise InadmissibleTestFunction(
            f"test function built for lambda={f.lambda_ref}, trajectory has {lam}")
    s = math.sqrt(lam)
    prod = 1.0 + 0j
    for r in jumps.times[: jumps.count_before(t)].tolist():
        prod *= 1.0 + f.value_at(r) / s
    return cmath.exp(-s * f.integral(t)) * prod


# -- generating-functional ODE ---------------------------------------------

def piecewise_linear_flow(generator, breaks, x0, grid) -> np.ndarray:
    """RK4 solution of ``x' = A(t) x`` for piecewise-constant ``A``.

    ``generator(t)`` returns the matrix in force on the piece containing
    ``t``; ``breaks`` lists the times where it may change.  Results are
    sampled on ``grid`` starting from ``x0`` at ``grid[0]``.
    """
    grid = np.asarray(grid, dtype=float).reshape(-1)
    if grid.size == 0 or np.any(np.diff(grid) < 0):
        raise ValueError("grid must be non-empty and non-decreasing")
    breaks = np.asarray(breaks, dtype=float)
    inner = breaks[(breaks > grid[0]) & (breaks < grid[-1])]
    knots = np.union1d(grid, inner)
    x = np.array(x0, dtype=complex)
    out = np.empty((grid.size,) + x.shape, dtype=complex)
    out[0] = x
    gi = 1
    for a, b in zip(knots[:-1], knots[1:]):
        A = generator(0.5 * (a + b))
        span = b - a
        m = max(1, math.ceil(span / rk4_max_step(np.linalg.norm(A, 2), ODE_LOCAL_TOL) - 1e-9))
        x = np.linalg.matrix_power(rk4_propagator(A, span / m), m) @ x
        while gi < grid.size and grid[gi] <= b:
            if grid[gi] == b:
                out[gi] = x
            gi += 1
    # repeated grid points
    for k in range(1, grid.size):
        if grid[k] == grid[k - 1]:
            out[k] = out[k - 1]
    return out


def genfun_generator(model, f: StepFunction):
    """``t -> -(K + sqrt(lam) (I - C) f(t))``, the right-hand side matrix."""
    model = ensure_model(model)
    K = semigroup_generator(model)
    D = math.sqrt(model.lam) * (np.eye(model.dim) - model.C)
    return lambda t: -(K + D * f(t))


def genfun_ode(model, f: StepFunction, eta0, grid) -> np.ndarray:
    """Generating functional ``E[chi_t eps_t^f]`` along ``grid`` by RK4.

    Returns an array of shape ``(len(grid), d)``.
    """
    model = ensure_model(model)
    eta0 = as_state(eta0, model.dim, "eta0")
    return piecewise_linear_flow(genfun_generator(model, f), f.grid, eta0, grid)


class MCEstimate(NamedTuple):
    mean: np.ndarray
    stderr: float
    component_stderr: np.ndarray
    n: int


def _summarize(s1, s2, n) -> MCEstimate:
    mean = s1 / n
    if n > 1:
        var = np.clip((s2 - n * np.abs(mean) ** 2) / (n - 1), 0.0, None)
        comp = np.sqrt(var / n)
    else:
        comp = np.zeros(np.shape(s2))
    return MCEstimate(mean=mean, stderr=float(np.sqrt(np.sum(comp ** 2))),
                      component_stderr=comp, n=int(n))


def _genfun_block(model, f, eta0, t, seed_base, start, stop):
    s1 = np.zeros(model.dim, dtype=complex)
    s2 = np.zeros(model.dim)
    for i in range(start, stop):
        jumps = sample_jumps(model.lam, t, seed_base + i)
        z = (propagator_at(model, jumps, t) @ eta0) * stochastic_exponent(f, jumps, t)
        s1 += z
        s2 += np.abs(z) ** 2
    return s1, s2


def genfun_mc(model, f: StepFunction, eta0, n: int, t: float, seed_base: int,
              workers: int = 1) -> MCEstimate:
    """Monte Carlo estimate of ``E[chi_t eps_t^f]``.

    ``stderr`` is the Euclidean norm of the per-component standard errors.
    """
    model = ensure_model(model)
    eta0 = as_state(eta0, model.dim, "eta0")
    s1, s2 = block_reduce(partial(_genfun_block, model, f, eta0, float(t), int(seed_base)),
                          int(n), workers)
    return _summarize(s1, s2, n)


def _exponent_block(fs, lam, t, seed_base, start, stop):
    s1 = np.zeros(1, dtype=complex)
    s2 = np.zeros(1)
    for i in range(start, stop):
        jumps = sample_jumps(lam, t, seed_base + i)
        z = 1.0 + 0j
        for f in fs:
            z *= stochastic_exponent(f, jumps, t)
        s1 += z
        s2 += abs(z) ** 2
    return s1, s2


def exponent_product_mc(fs: Sequence[StepFunction], lam: float, n: int, t: float,
                        seed_base: int, workers: int = 1) -> MCEstimate:
    """Monte Carlo mean of ``prod_f eps_t^f`` over ``n`` trajectories."""
    s1, s2 = block_reduce(partial(_exponent_block, tuple(fs), float(lam), float(t),
                                  int(seed_base)), int(n), workers)
    est = _summarize(s1, s2, n)
    return est._replace(mean=complex(est.mean[0]))


# -- chaos kernels ------------------------------------------------------------

class _Semigroup:
    """Batched ``exp(-K s)`` through an eigendecomposition of K when it is safe."""

    def __init__(self, K: np.ndarray):
        self.K = K
        w, W = np.linalg.eig(K)
        self.spectral = np.linalg.cond(W) < 1e6
        if self.spectral:
            self.w, self.W, self.Winv = w, W, np.linalg.inv(W)

    def __call__(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if self.spectral:
            return (self.W * np.exp(-np.multiply.outer(s, self.w))[..., None, :]) @ self.Winv
        return np.array([expm(-self.K * x) for x in s.reshape(-1)]).reshape(
            s.shape + self.K.shape)


def tilde_kernels(model, times, t: float, eta0) -> np.ndarray:
    """Chaos kernel of ``chi_t`` at the ordered tuple ``times``.

    Equals the n-th functional derivative of :func:`genfun_ode` at ``f = 0``,

        lam^{n/2} e^{-(t - r_n)K} (C - I) ... (C - I) e^{-r_1 K} eta.

    ``times`` may also be a 2-D array of tuples (one per row); the result
    then has one state per row.
    """
    model = ensure_model(model)
    eta0 = as_state(eta0, model.dim, "eta0")
    tau = np.asarray(times, dtype=float)
    single = tau.ndim == 1
    tau = np.atleast_2d(tau) if tau.size else tau.reshape(1, 0)
    if tau.size and (np.any(tau[:, 0] < 0) or np.any(tau[:, -1] >= t)
                     or np.any(np.diff(tau, axis=1) <= 0)):
        raise UnorderedTuple("kernel times must satisfy 0 <= r1 < ... < rn < t")
    E = _Semigroup(semigroup_generator(model))
    n = tau.shape[1]
    edges = np.concatenate([np.zeros((tau.shape[0], 1)), tau,
                            np.full((tau.shape[0], 1), float(t))], axis=1)
    gaps = np.diff(edges, axis=1)
    jump = math.sqrt(model.lam) * (model.C - np.eye(model.dim))
    x = np.einsum("mij,j->mi", E(gaps[:, 0]), eta0)
    for k in range(1, n + 1):
        x = np.einsum("mij,mj->mi", E(gaps[:, k]), x @ jump.T)
    return x[0] if single else x


@dataclass
class KernelTable:
    """Kernel values on a collapsed-coordinate Gauss rule over ordered simplices.

    ``orders[n] = (times, weights, values)`` with ``times`` of shape
    ``(M, n)``, strictly increasing along rows.
    """

    t: float
    nodes_per_axis: int
    orders: list

    @property
    def n_max(self) -> int:
        return len(self.orders) - 1

    def compatible(self, other: "KernelTable") -> bool:
        return (math.isclose(self.t, other.t, rel_tol=1e-15)
                and self.nodes_per_axis == other.nodes_per_axis)


def simplex_rule(n: int, t: float, q: int) -> tuple[np.ndarray, np.ndarray]:
    """Quadrature over ``0 < r_1 < ... < r_n < t`` with ``q`` Gauss points per axis.

    Uses ``r_n = t u_n`` and ``r_k = r_{k+1} u_k``; the Jacobian is
    ``t^n prod_k u_k^(k-1)``.
    """
    if n == 0:
        return np.zeros((1, 0)), np.ones(1)
    x, w = np.polynomial.legendre.leggauss(q)
    u, wu = 0.5 * (x + 1.0), 0.5 * w
    grids = np.meshgrid(*([u] * n), indexing="ij")
    wgrids = np.meshgrid(*([wu] * n), indexing="ij")
    U = np.stack([g.reshape(-1) for g in grids], axis=1)
    Wt = np.prod(np.stack([g.reshape(-1) for g in wgrids], axis=1), axis=1)
    R = np.empty_like(U)
    R[:, n - 1] = t * U[:, n - 1]
    for k in range(n - 2, -1, -1):
        R[:, k] = R[:, k + 1] * U[:, k]
    jac = t ** n * np.prod(U ** np.arange(n), axis=1)
    return R, Wt * jac


def _table(t, n_max, q, evaluate) -> KernelTable:
    if n_max > 4 or q > 16:
        raise ValueError("kernel tables are limited to n_max <= 4 and 16 nodes per axis")
    orders = []
    for n in range(n_max + 1):
        times, weights = simplex_rule(n, t, q)
        orders.append((times, weights, evaluate(times)))
    return KernelTable(t=float(t), nodes_per_axis=q, orders=orders)


def state_kernel_table(model, eta0, t: float, n_max: int = 4, q: int = 12) -> KernelTable:
    """Kernels of ``chi_t`` through order ``n_max``."""
    return _table(t, n_max, q, lambda times: tilde_kernels(model, times, t, eta0))


def exponential_kernel_table(g: StepFunction, t: float, n_max: int = 4,
                             q: int = 12) -> KernelTable:
    """Kernels ``g(r_1)...g(r_n)`` of the stochastic exponent ``eps_t^g``."""
    return _table(t, n_max, q,
                  lambda times: np.prod(g(times), axis=1) if times.shape[1] else np.ones(1, complex))


class InnerProduct(NamedTuple):
    value: complex | np.ndarray
    terms: list
    truncation: float


def kernel_inner_product(phi: KernelTable, chi: KernelTable, n_max: int | None = None) -> InnerProduct:
    """``sum_n int_simplex conj(phi) chi`` through order ``n_max``.

    Scalar-valued ``phi`` against state-valued ``chi`` yields a state.  The
    truncation estimate is the size of the last order relative to the sum.
    """
    if not phi.compatible(chi):
        raise GridMismatch("kernel tables use different quadrature grids")
    top = min(phi.n_max, chi.n_max) if n_max is None else n_max
    if top > min(phi.n_max, chi.n_max):
        raise ValueError("n_max exceeds the tables")
    terms = []
    for n in range(top + 1):
        _, w, a = phi.orders[n]
        _, _, b = chi.orders[n]
        a = np.conj(a)
        if a.ndim == 2 and b.ndim == 2:
            term = np.sum(w * np.einsum("mi,mi->m", a, b))
        elif a.ndim == 1 and b.ndim == 2:
            term = np.einsum("m,mi->i", w * a, b)
        elif a.ndim == 2 and b.ndim == 1:
            term = np.einsum("mi,m->i", a, w * b)
        else:
            term = np.sum(w * a * b)
        terms.append(term)
    total = sum(terms)
    scale = np.linalg.norm(np.atleast_1d(total))
    last = np.linalg.norm(np.atleast_1d(terms[-1]))
    trunc = float(last / scale) if scale > 0 else (0.0 if last == 0 else math.inf)
    if top > 0 and trunc > 1e-3:
        warnings.warn(f"kernel series truncated at order {top} with last-term ratio {trunc:.2e}",
                      TruncationWarning, stacklevel=2)
    return InnerProduct(value=total, terms=terms, truncation=trunc)
