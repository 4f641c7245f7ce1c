"""Poisson collapse trajectories.

Between collapse events a pure state evolves under ``exp(-iHt)``; at each
event ``t_k`` it is reduced by the contraction ``C``.  Increments are forward:
a jump at ``t_k`` acts on states at times strictly after ``t_k``, so a grid
point that coincides with a jump time reports the pre-jump value.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import partial

import numpy as np

from .core import as_state, dagger, ensure_model, expm, semigroup_generator
from .master import DensityPath
from .parallel import block_reduce
from .rng import jump_stream

Q_FLOOR = 1e-14


class DegenerateStateWarning(RuntimeWarning):
    """Survival fell below ``Q_FLOOR``; the a-posteriori state is undefined."""


@dataclass(frozen=True)
class JumpRecord:
    """Collapse times in ``[0, t_max)`` for one trajectory."""

    t_max: float
    times: np.ndarray
    lam: float
    seed: int

    @property
    def n(self) -> int:
        return len(self.times)

    def count_before(self, t) -> np.ndarray:
        """Number of jumps strictly before ``t`` (vectorized)."""
        return np.searchsorted(self.times, t, side="left")

    @classmethod
    def fixed(cls, times, t_max: float, lam: float = 0.0) -> "JumpRecord":
        """A hand-written record (used for fixtures and tests)."""
        times = np.asarray(sorted(times), dtype=float)
        if len(times) and (times[0] < 0 or times[-1] >= t_max
                           or np.any(np.diff(times) <= 0)):
            raise ValueError("jump times must be strictly increasing in [0, t_max)")
        return cls(t_max=float(t_max), times=times, lam=float(lam), seed=-1)


def sample_jumps(lam: float, t_max: float, seed: int) -> JumpRecord:
    """Poisson event times by exponential inter-arrivals.

    Arrivals are accumulated sequentially, ``t_k = t_{k-1} + E_k`` with
    ``E_k = -log(u_k)/lam`` read from the jump stream of ``seed``.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if t_max <= 0:
        raise ValueError("t_max must be > 0")
    if lam == 0:
        return JumpRecord(float(t_max), np.empty(0), 0.0, int(seed))
    stream = jump_stream(seed)
    mean = lam * t_max
    batch = max(8, int(mean + 4.0 * math.sqrt(mean) + 8))
    chunks = []
    last = 0.0
    while True:
        arrivals = np.cumsum(np.concatenate(([last], stream.exponentials(batch, lam))))[1:]
        inside = arrivals[arrivals < t_max]
        chunks.append(inside)
        if len(inside) < batch:
            break
        last = arrivals[-1]
    times = chunks[0] if len(chunks) == 1 else np.concatenate(chunks)
    return JumpRecord(float(t_max), times, float(lam), int(seed))


def counting_increments(jumps: JumpRecord, grid) -> np.ndarray:
    """Jump counts on the cells ``[grid[k], grid[k+1])``."""
    return np.diff(jumps.count_before(np.asarray(grid, dtype=float)))


def _check_grid(grid, t_max: float | None = None) -> np.ndarray:
    grid = np.asarray(grid, dtype=float).reshape(-1)
    if grid.size == 0 or grid[0] < 0 or np.any(np.diff(grid) < 0):
        raise ValueError("grid must be non-empty, non-negative and non-decreasing")
    if t_max is not None and grid[-1] > t_max * (1 + 1e-12):
        raise ValueError(f"grid extends to {grid[-1]} beyond t_max={t_max}")
    return grid


def propagator_at(model, jumps: JumpRecord, t: float) -> np.ndarray:
    """Stochastic propagator ``V_t = e^{-iH(t-t_n)} C ... C e^{-iH t_1}``."""
    model = ensure_model(model)
    if t > jumps.t_max * (1 + 1e-12):
        raise ValueError("t beyond the sampled horizon")
    V, e = model.h_evecs, model.h_evals
    Cb = dagger(V) @ model.C @ V
    M = np.eye(model.dim, dtype=complex)
    last = 0.0
    for s in jumps.times[: jumps.count_before(t)]:
        M = Cb @ (np.exp(-1j * e * (s - last))[:, None] * M)
        last = s
    M = np.exp(-1j * e * (t - last))[:, None] * M
    return V @ M @ dagger(V)


@dataclass
class TrajectoryPath:
    """Pure-state record along a grid.

    ``eta`` rows are NaN where the survival ``q`` is at or below ``Q_FLOOR``.
    """

    grid: np.ndarray
    chi: np.ndarray
    q: np.ndarray
    eta: np.ndarray
    jumps: JumpRecord

    @property
    def eta_mask(self) -> np.ndarray:
        return self.q > Q_FLOOR


def _post_jump_states(x0, times, free, collapse):
    """States just after each jump, preceded by ``x0`` at time zero."""
    out = [x0]
    x = x0
    last = 0.0
    for s in times:
        x = collapse(free(x, s - last))
        out.append(x)
        last = s
    return out


def _anchors(jumps: JumpRecord, grid: np.ndarray):
    """Index of the latest jump before each grid point and its time (0 if none)."""
    idx = jumps.count_before(grid)
    base = np.concatenate(([0.0], jumps.times))[idx]
    return idx, grid - base


def evolve_state(model, jumps: JumpRecord, eta0, grid) -> TrajectoryPath:
    """Exact propagation of a pure state along one trajectory."""
    model = ensure_model(model)
    grid = _check_grid(grid, jumps.t_max)
    eta0 = as_state(eta0, model.dim, "eta0")
    V, e = model.h_evecs, model.h_evals
    Cb = dagger(V) @ model.C @ V
    idx, elapsed = _anchors(jumps, grid)
    n_used = int(idx[-1]) if idx.size else 0
    post = _post_jump_states(dagger(V) @ eta0, jumps.times[:n_used],
                             lambda x, dt: np.exp(-1j * e * dt) * x, lambda x: Cb @ x)
    xs = np.exp(-1j * np.outer(elapsed, e)) * np.asarray(post)[idx]
    chi = xs @ V.T
    q = np.einsum("ki,ki->k", chi.conj(), chi).real
    eta = np.full_like(chi, np.nan)
    ok = q > Q_FLOOR
    eta[ok] = chi[ok] / np.sqrt(q[ok])[:, None]
    if not ok.all():
        warnings.warn(f"survival below {Q_FLOOR:g} at {int((~ok).sum())} grid points; "
                      "a-posteriori state omitted there", DegenerateStateWarning,
                      stacklevel=2)
    return TrajectoryPath(grid=grid, chi=chi, q=q, eta=eta, jumps=jumps)


def evolve_density(model, jumps: JumpRecord, sigma, grid) -> DensityPath:
    """Stochastic density matrix: von Neumann flow with ``rho -> C rho C*`` at jumps."""
    model = ensure_model(model)
    grid = _check_grid(grid, jumps.t_max)
    sigma = np.asarray(sigma, dtype=complex)
    V, e = model.h_evecs, model.h_evals
    Cb = dagger(V) @ model.C @ V
    Cbd = dagger(Cb)
    gap = e[:, None] - e[None, :]
    idx, elapsed = _anchors(jumps, grid)
    n_used = int(idx[-1]) if idx.size else 0
    post = _post_jump_states(dagger(V) @ sigma @ V, jumps.times[:n_used],
                             lambda x, dt: np.exp(-1j * gap * dt) * x,
                             lambda x: Cb @ x @ Cbd)
    xs = np.exp(-1j * np.multiply.outer(elapsed, gap)) * np.asarray(post)[idx]
    return DensityPath(grid=grid, rho=V @ xs @ dagger(V))


def _ensemble_block(model, eta0, grid, t_max, seed_base, start, stop):
    d = model.dim
    G = len(grid)
    rho = np.zeros((G, d, d), dtype=complex)
    s1 = np.zeros(G)
    s2 = np.zeros(G)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateStateWarning)
        for i in range(start, stop):
            path = evolve_state(model, sample_jumps(model.lam, t_max, seed_base + i), eta0, grid)
            rho += path.chi[:, :, None] * path.chi.conj()[:, None, :]
            s1 += path.q
            s2 += path.q * path.q
    return rho, s1, s2


@dataclass
class EnsembleResult:
    rho_bar: DensityPath
    q_bar: np.ndarray
    q_stderr: np.ndarray
    n: int
    seed_base: int


def _stderr(s1, s2, n):
    if n < 2:
        return np.zeros_like(s1)
    var = np.clip((s2 - s1 * s1 / n) / (n - 1), 0.0, None)
    return np.sqrt(var / n)


def ensemble_average(model, eta0, n: int, grid, seed_base: int,
                     t_max: float | None = None, workers: int = 1) -> EnsembleResult:
    """Average ``n`` trajectories seeded ``seed_base + i``.

    Returns the mean density path, the mean survival and its standard error
    at each grid point.  Output bits do not depend on ``workers``.
    """
    model = ensure_model(model)
    grid = _check_grid(grid)
    t_max = float(grid[-1]) if t_max is None else float(t_max)
    if t_max <= 0:
        t_max = 1.0
    eta0 = as_state(eta0, model.dim, "eta0")
    rho, s1, s2 = block_reduce(
        partial(_ensemble_block, model, eta0, grid, t_max, int(seed_base)), int(n), workers)
    return EnsembleResult(rho_bar=DensityPath(grid=grid, rho=rho / n), q_bar=s1 / n,
                          q_stderr=_stderr(s1, s2, n), n=int(n), seed_base=int(seed_base))


def semigroup_deviation(model, eta0, grid, seed: int) -> float:
    """``sup_t ||chi_t - e^{-Kt} eta||`` for one trajectory, ``K = iH + R``."""
    model = ensure_model(model)
    grid = _check_grid(grid)
    eta0 = as_state(eta0, model.dim, "eta0")
    path = evolve_state(model, sample_jumps(model.lam, float(grid[-1]), seed), eta0, grid)
    K = semigroup_generator(model, limit=True)
    target = np.array([expm(-K * t) @ eta0 for t in grid])
    return float(np.max(np.linalg.norm(path.chi - target, axis=1)))
