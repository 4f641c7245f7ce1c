"""Finite unitary dilations of a collapse contraction.

A contraction ``C`` on the system space is embedded as a block of a unitary
``S`` on ``system (x) C^2``.  Blocks are addressed ``S[i][k]`` with ``i`` the
output meter index and ``k`` the input meter index, so ``S`` as a matrix is

    [[S^0_0, S^0_1],
     [S^1_0, S^1_1]]

with the meter index as the slow (block) index.  Along a counting trajectory
every collapse adjoins a fresh meter qubit prepared in ``e0`` and scatters
the system together with that qubit through ``S``.  Pairing every meter with
a fixed readout vector recovers the contractive propagator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import partial

import numpy as np

from .core import (TOL_PSD, as_operator, as_state, dagger, ensure_model, opnorm, psd_sqrt,
                   NotContraction)
from .genfun import StepFunction, piecewise_linear_flow
from .parallel import block_reduce
from .trajectory import JumpRecord, sample_jumps

UNITARY_TOL = 1e-12
INTERTWINE_TOL = 1e-10
N_CAP = 12

E0 = np.array([1.0, 0.0], dtype=complex)
E1 = np.array([0.0, 1.0], dtype=complex)

FLAVORS = ("hermitian", "nonhermitian")


class MeterBudgetExceeded(RuntimeError):
    """More collapses than the dense dilated state may hold."""


class DilationError(ArithmeticError):
    """Assembled block matrix failed its unitarity or intertwining checks."""


@dataclass(frozen=True)
class DilationMatrix:
    d: int
    S: np.ndarray
    flavor: str

    def block(self, i: int, k: int) -> np.ndarray:
        d = self.d
        return self.S[i * d:(i + 1) * d, k * d:(k + 1) * d]

    @property
    def readout(self) -> np.ndarray:
        """Meter vector whose pairing recovers ``C``."""
        return E1 if self.flavor == "hermitian" else E0

    @property
    def contraction(self) -> np.ndarray:
        return self.block(1, 0) if self.flavor == "hermitian" else self.block(0, 0)

    def unitarity_residual(self) -> float:
        return opnorm(dagger(self.S) @ self.S - np.eye(2 * self.d))


def build_dilation(C, flavor: str = "hermitian") -> DilationMatrix:
    """Unitary block matrix with ``C`` in the readout position.

    ``hermitian``::

        [[-(I - C*C)^1/2, C*], [C, (I - CC*)^1/2]]

    ``nonhermitian``::

        [[C, (I - CC*)^1/2], [-(I - C*C)^1/2, C*]]
    """
    if flavor not in FLAVORS:
        raise ValueError(f"flavor must be one of {FLAVORS}, got {flavor!r}")
    C = as_operator(C, "C")
    d = C.shape[0]
    Cd = dagger(C)
    left, right = defect_roots(C)
    if flavor == "hermitian":
        S = np.block([[-left, Cd], [C, right]])
    else:
        S = np.block([[C, right], [-left, Cd]])
    Sd = DilationMatrix(d=d, S=S, flavor=flavor)
    res = Sd.unitarity_residual()
    if res > UNITARY_TOL * max(1.0, d):
        raise DilationError(f"||S*S - I|| = {res:.3e}")
    tw = intertwining_residual(C)
    if tw > INTERTWINE_TOL:
        raise DilationError(f"defect intertwining residual {tw:.3e}")
    return Sd


def defect_roots(C) -> tuple[np.ndarray, np.ndarray]:
    """``((I - C*C)^1/2, (I - CC*)^1/2)`` from one singular value decomposition.

    Sharing the singular vectors keeps both roots accurate when a singular
    value of ``C`` equals one, where an eigenvalue square root loses half
    the digits.
    """
    C = as_operator(C, "C")
    U, s, Vh = np.linalg.svd(C)
    if s.max(initial=0.0) ** 2 > 1.0 + TOL_PSD:
        raise NotContraction(f"C is not a contraction: ||C|| = {s.max():.12g}")
    s = np.minimum(s, 1.0)
    root = np.sqrt((1.0 - s) * (1.0 + s))
    left = dagger(Vh) @ (root[:, None] * Vh)
    right = U @ (root[:, None] * dagger(U))
    return 0.5 * (left + dagger(left)), 0.5 * (right + dagger(right))


def intertwining_residual(C) -> float:
    """``max(||C D - D' C||, ||D C* - C* D'||)`` with the two defect roots."""
    C = as_operator(C, "C")
    Cd = dagger(C)
    D, Dp = defect_roots(C)
    return max(opnorm(C @ D - Dp @ C), opnorm(D @ Cd - Cd @ Dp))


# -- dilated evolution --------------------------------------------------------

@dataclass(frozen=True)
class DilatedState:
    """Amplitude tensor of shape ``(2,)*n + (d,)``, meters ordered by collapse time."""

    amp: np.ndarray
    t: float = 0.0

    @property
    def n(self) -> int:
        return self.amp.ndim - 1

    @property
    def d(self) -> int:
        return self.amp.shape[-1]

    @property
    def vector(self) -> np.ndarray:
        """Flattened amplitudes of length ``d * 2**n``."""
        return self.amp.reshape(-1)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.amp))

    @classmethod
    def initial(cls, eta0, t: float = 0.0) -> "DilatedState":
        return cls(amp=as_state(eta0, name="eta0").copy(), t=float(t))


def _free(H: np.ndarray, dt: float) -> np.ndarray:
    w, V = np.linalg.eigh(H)
    return (V * np.exp(-1j * w * dt)) @ dagger(V)


def _scatter(Sd: DilationMatrix, amp: np.ndarray) -> np.ndarray:
    d = Sd.d
    fresh = np.stack([amp, np.zeros_like(amp)], axis=-2)  # new meter in e0
    S4 = Sd.S.reshape(2, d, 2, d)
    return np.einsum("iakb,...kb->...ia", S4, fresh)


def dilated_step(Sd: DilationMatrix, H, state: DilatedState, dt_free: float,
                 apply_jump: bool, n_cap: int = N_CAP, free=None) -> DilatedState:
    """Free evolution for ``dt_free``, then optionally one scattering event.

    ``free`` may carry a precomputed ``exp(-i H dt_free)``.
    """
    if dt_free < 0:
        raise ValueError("dt_free must be >= 0")
    if apply_jump and state.n + 1 > n_cap:
        raise MeterBudgetExceeded(
            f"collapse {state.n + 1} exceeds the meter budget n_cap={n_cap}")
    U = _free(np.asarray(H, dtype=complex), dt_free) if free is None else free
    amp = state.amp @ U.T
    if apply_jump:
        amp = _scatter(Sd, amp)
    return DilatedState(amp=amp, t=state.t + dt_free)


def dilated_evolve(Sd: DilationMatrix, H, jumps: JumpRecord, eta0, t: float,
                   n_cap: int = N_CAP) -> DilatedState:
    """Dilated state at ``t`` for the collapse times of ``jumps`` before ``t``."""
    H = as_operator(H, "H")
    w, V = np.linalg.eigh(H)
    state = DilatedState.initial(eta0)
    last = 0.0
    for s in jumps.times[: jumps.count_before(t)]:
        U = (V * np.exp(-1j * w * (s - last))) @ dagger(V)
        state = dilated_step(Sd, H, state, s - last, True, n_cap, free=U)
        last = s
    U = (V * np.exp(-1j * w * (t - last))) @ dagger(V)
    return dilated_step(Sd, H, state, t - last, False, n_cap, free=U)


def compress(Sd: DilationMatrix | None, state: DilatedState, e_out=None) -> np.ndarray:
    """Pair every meter factor with ``e_out`` (default: the flavor's readout)."""
    if e_out is None:
        if Sd is None:
            raise ValueError("need a dilation or an explicit readout vector")
        e_out = Sd.readout
    e_out = np.asarray(e_out, dtype=complex).reshape(2)
    if not math.isclose(np.linalg.norm(e_out), 1.0, rel_tol=0, abs_tol=1e-12):
        raise ValueError("readout vector must be normalized")
    amp = state.amp
    bra = e_out.conj()
    for _ in range(state.n):
        amp = np.tensordot(bra, amp, axes=([0], [0]))
    return amp


def survival_profile(Sd: DilationMatrix, H, jumps: JumpRecord, eta0, t: float) -> np.ndarray:
    """Readout-projected squared norms after the start and after each collapse.

    The last entry is the squared norm at ``t``.  Free evolution is unitary,
    so the sequence is non-increasing.
    """
    H = as_operator(H, "H")
    state = DilatedState.initial(eta0)
    out = [np.linalg.norm(compress(Sd, state)) ** 2]
    last = 0.0
    for s in jumps.times[: jumps.count_before(t)]:
        state = dilated_step(Sd, H, state, s - last, True)
        out.append(np.linalg.norm(compress(Sd, state)) ** 2)
        last = s
    state = dilated_step(Sd, H, state, t - last, False)
    out.append(np.linalg.norm(compress(Sd, state)) ** 2)
    return np.array(out)


def _survival_block(model, Sd, eta0, t, seed_base, start, stop):
    s1 = np.zeros(1)
    s2 = np.zeros(1)
    for i in range(start, stop):
        jumps = sample_jumps(model.lam, t, seed_base + i)
        q = np.linalg.norm(compress(Sd, dilated_evolve(Sd, model.H, jumps, eta0, t))) ** 2
        s1 += q
        s2 += q * q
    return s1, s2


def survival_ensemble(model, Sd: DilationMatrix, eta0, t: float, n: int,
                      seed_base: int, workers: int = 1) -> tuple[float, float]:
    """Mean readout-projected squared norm at ``t`` and its standard error."""
    model = ensure_model(model)
    eta0 = as_state(eta0, model.dim, "eta0")
    s1, s2 = block_reduce(partial(_survival_block, model, Sd, eta0, float(t), int(seed_base)),
                          int(n), workers)
    mean = float(s1[0] / n)
    var = max(0.0, float((s2[0] - n * mean * mean) / (n - 1))) if n > 1 else 0.0
    return mean, math.sqrt(var / n)


# -- coherent matrix elements -------------------------------------------------

def _pair(fs, name: str) -> tuple[StepFunction, StepFunction]:
    if len(fs) != 2:
        raise ValueError(f"{name} needs exactly two meter components")
    a, b = fs
    a._same_grid(b)
    return a, b


def coherent_generator(model, Sd: DilationMatrix, g_vec, f_vec):
    """``t -> A(t)`` for the coherent matrix element ``dU/dt = A(t) U``.

    ``g_vec`` enters complex conjugated, as in a bra.
    """
    model = ensure_model(model)
    g0, g1 = _pair(g_vec, "g_vec")
    f0, f1 = _pair(f_vec, "f_vec")
    d = model.dim
    Sm = Sd.S - np.eye(2 * d)
    B = [[Sm[i * d:(i + 1) * d, k * d:(k + 1) * d] for k in range(2)] for i in range(2)]
    s = math.sqrt(model.lam)
    base = -1j * model.H + model.lam * B[0][0]

    def A(t):
        g = (np.conj(g0(t)), np.conj(g1(t)))
        f = (f0(t), f1(t))
        out = base.copy()
        for i in range(2):
            out += s * g[i] * B[i][0] + s * B[0][i] * f[i]
            for k in range(2):
                out += g[i] * f[k] * B[i][k]
        return out

    return A


def coherent_matrix_ode(model, Sd: DilationMatrix, g_vec, f_vec, grid, eta0=None) -> np.ndarray:
    """Coherent matrix element of the dilated evolution along ``grid``.

    Returns operators of shape ``(len(grid), d, d)``, or states of shape
    ``(len(grid), d)`` when ``eta0`` is given.
    """
    model = ensure_model(model)
    gen = coherent_generator(model, Sd, g_vec, f_vec)
    breaks = np.union1d(g_vec[0].grid, f_vec[0].grid)
    x0 = np.eye(model.dim, dtype=complex) if eta0 is None else as_state(eta0, model.dim)
    return piecewise_linear_flow(gen, breaks, x0, grid)


def limiting_coherent_ode(H, R, g1: StepFunction, f1: StepFunction, grid,
                          eta0=None) -> np.ndarray:
    """Limit of the coherent element under ``C = I - R/lam``, ``lam -> inf``.

    Solves ``dU/dt = (-(R + iH) + (R + R*)^1/2 (f1(t) - conj(g1(t)))) U``.
    """
    H = as_operator(H, "H")
    R = as_operator(R, "R")
    B = psd_sqrt(R + dagger(R))
    K = R + 1j * H

    def A(t):
        return -K + B * (f1(t) - np.conj(g1(t)))

    x0 = np.eye(H.shape[0], dtype=complex) if eta0 is None else as_state(eta0, H.shape[0])
    return piecewise_linear_flow(A, np.union1d(g1.grid, f1.grid), x0, grid)


def expansion_blocks(R) -> tuple[np.ndarray, np.ndarray]:
    """First and second order blocks of the weak-collapse expansion of ``S``."""
    R = as_operator(R, "R")
    B = psd_sqrt(R + dagger(R))
    Z = np.zeros_like(R)
    first = np.block([[Z, B], [-B, Z]])
    second = np.block([[R, Z], [Z, dagger(R)]])
    return first, second


def lambda_expansion_residual(R, lam: float) -> float:
    """``||S - (I + lam^-1/2 first - lam^-1 second)||`` for the nonhermitian flavor."""
    R = as_operator(R, "R")
    d = R.shape[0]
    S = build_dilation(np.eye(d) - R / lam, "nonhermitian").S
    first, second = expansion_blocks(R)
    return opnorm(S - (np.eye(2 * d) + first / math.sqrt(lam) - second / lam))


def fit_power_law(xs, ys) -> tuple[float, float]:
    """Least-squares ``y = c x^p`` in log space; returns ``(c, p)``."""
    p, logc = np.polyfit(np.log(xs), np.log(ys), 1)
    return float(math.exp(logc)), float(p)
