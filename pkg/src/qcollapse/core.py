"""Dense complex linear algebra and model validation.

Operators are plain ``numpy`` complex arrays of shape ``(d, d)``; state
vectors are complex arrays of shape ``(d,)``.  A model is the triple
(H, C, lambda): a Hamiltonian, a collapse contraction and a Poisson
intensity.  Optionally a rate operator R is carried with ``C = I - R/lambda``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import scipy.linalg

TOL_HERM = 1e-10
TOL_PSD = 1e-10


class ModelError(ValueError):
    """Base class for rejected model input."""


class NotHermitian(ModelError):
    pass


class NotContraction(ModelError):
    pass


class NegativeIntensity(ModelError):
    pass


class InconsistentR(ModelError):
    pass


class TooNegative(ModelError):
    pass


class SchemaError(ModelError):
    """Malformed model document; ``path`` names the offending JSON location."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


def dagger(A: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(A, -1, -2))


def opnorm(A: np.ndarray) -> float:
    """Spectral norm."""
    return float(np.linalg.norm(A, 2))


def as_operator(A, name: str = "operator") -> np.ndarray:
    A = np.asarray(A, dtype=complex)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] == 0:
        raise ModelError(f"{name} must be a non-empty square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ModelError(f"{name} has non-finite entries")
    return A


def as_state(v, dim: int | None = None, name: str = "state") -> np.ndarray:
    v = np.asarray(v, dtype=complex).reshape(-1)
    if dim is not None and v.shape[0] != dim:
        raise ModelError(f"{name} has dimension {v.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(v)):
        raise ModelError(f"{name} has non-finite entries")
    return v


def hermiticity_defect(A: np.ndarray) -> float:
    return opnorm(A - dagger(A))


def psd_sqrt(A: np.ndarray, tol: float = TOL_PSD) -> np.ndarray:
    """Hermitian square root of a positive semidefinite matrix.

    Eigenvalues in ``[-tol, 0)`` are treated as roundoff and clipped to zero.

    Raises
    ------
    NotHermitian
        If ``A`` deviates from its adjoint by more than ``tol`` in norm.
    TooNegative
        If an eigenvalue is below ``-tol``.
    """
    A = as_operator(A, "A")
    if hermiticity_defect(A) > tol:
        raise NotHermitian(f"matrix is not Hermitian (defect {hermiticity_defect(A):.3e})")
    Ah = 0.5 * (A + dagger(A))
    w, U = np.linalg.eigh(Ah)
    if w.min() < -tol:
        raise TooNegative(f"eigenvalue {w.min():.3e} below -{tol:g}")
    w = np.clip(w, 0.0, None)
    B = (U * np.sqrt(w)) @ dagger(U)
    return 0.5 * (B + dagger(B))


def expm(A: np.ndarray) -> np.ndarray:
    """Matrix exponential (scaling and squaring with a Pade kernel)."""
    return scipy.linalg.expm(np.asarray(A, dtype=complex))


def trace_distance(rho: np.ndarray, sigma: np.ndarray) -> float:
    """Half the trace norm of ``rho - sigma`` for Hermitian arguments."""
    D = rho - sigma
    D = 0.5 * (D + dagger(D))
    return 0.5 * float(np.sum(np.abs(np.linalg.eigvalsh(D))))


@dataclass
class ModelSpec:
    """Unvalidated model data.

    ``C`` may be omitted when ``R`` and a positive ``lam`` are given, in
    which case ``C = I - R/lam``.
    """

    H: np.ndarray
    C: np.ndarray | None
    lam: float
    R: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return int(np.asarray(self.H).shape[0])

    @classmethod
    def from_rate(cls, H, R, lam: float) -> "ModelSpec":
        """Model with weak collapses ``C = I - R/lam``."""
        H = np.asarray(H, dtype=complex)
        R = np.asarray(R, dtype=complex)
        if lam <= 0:
            raise NegativeIntensity("rate form requires lambda > 0")
        C = np.eye(H.shape[0], dtype=complex) - R / lam
        return cls(H=H, C=C, lam=float(lam), R=R)


@dataclass(frozen=True)
class ValidatedModel:
    """A checked model with cached spectral data.

    Attributes
    ----------
    H, C : ndarray
        Hamiltonian and collapse contraction.
    lam : float
        Collapse intensity (events per unit time).
    R : ndarray or None
        Rate operator when the model was given in the weak-collapse form.
    h_evals, h_evecs : ndarray
        Eigendecomposition ``H = V diag(e) V^*``.
    defect_evals : ndarray
        Spectrum of ``I - C^*C`` (non-negative up to ``TOL_PSD``).
    """

    H: np.ndarray
    C: np.ndarray
    lam: float
    R: np.ndarray | None
    h_evals: np.ndarray = field(repr=False)
    h_evecs: np.ndarray = field(repr=False)
    defect_evals: np.ndarray = field(repr=False)

    @property
    def dim(self) -> int:
        return self.H.shape[0]

    def free_propagator(self, dt: float) -> np.ndarray:
        """``exp(-i H dt)`` from the cached eigendecomposition."""
        V = self.h_evecs
        return (V * np.exp(-1j * self.h_evals * dt)) @ dagger(V)

    def with_lambda(self, lam: float) -> "ValidatedModel":
        """Same H and R at a different intensity (rate form only)."""
        if self.R is None:
            raise InconsistentR("with_lambda needs a model carrying R")
        return validate_model(ModelSpec.from_rate(self.H, self.R, lam))


def validate_model(spec: ModelSpec, tol_herm: float = TOL_HERM,
                   tol_psd: float = TOL_PSD) -> ValidatedModel:
    """Check Hermiticity of H, contractivity of C and consistency of R."""
    H = as_operator(spec.H, "H")
    d = H.shape[0]
    lam = float(spec.lam)
    if not np.isfinite(lam) or lam < 0:
        raise NegativeIntensity(f"lambda must be finite and >= 0, got {spec.lam}")
    if hermiticity_defect(H) > tol_herm:
        raise NotHermitian(f"H is not Hermitian (defect {hermiticity_defect(H):.3e})")
    H = 0.5 * (H + dagger(H))

    R = None if spec.R is None else as_operator(spec.R, "R")
    if R is not None and R.shape != H.shape:
        raise ModelError(f"R has shape {R.shape}, expected {H.shape}")
    if spec.C is None:
        if R is None:
            raise ModelError("either C or R must be given")
        if lam == 0:
            raise InconsistentR("C = I - R/lambda is undefined at lambda = 0")
        C = np.eye(d, dtype=complex) - R / lam
    else:
        C = as_operator(spec.C, "C")
        if C.shape != H.shape:
            raise ModelError(f"C has shape {C.shape}, expected {H.shape}")
        if R is not None:
            if lam == 0:
                raise InconsistentR("C = I - R/lambda is undefined at lambda = 0")
            gap = opnorm(np.eye(d) - R / lam - C)
            if gap > tol_herm:
                raise InconsistentR(f"||(I - R/lambda) - C|| = {gap:.3e}")

    defect = np.eye(d) - dagger(C) @ C
    defect_evals = np.linalg.eigvalsh(0.5 * (defect + dagger(defect)))
    if defect_evals.min() < -tol_psd:
        raise NotContraction(
            f"C is not a contraction: I - C*C has eigenvalue {defect_evals.min():.3e}")
    h_evals, h_evecs = np.linalg.eigh(H)
    return ValidatedModel(H=H, C=C, lam=lam, R=R, h_evals=h_evals,
                          h_evecs=h_evecs, defect_evals=defect_evals)


def ensure_model(model) -> ValidatedModel:
    if isinstance(model, ValidatedModel):
        return model
    return validate_model(model)


def semigroup_generator(model, limit: bool = False) -> np.ndarray:
    """``K = iH + lambda (I - C)``; with ``limit=True`` the form ``K = iH + R``."""
    model = ensure_model(model)
    if limit:
        if model.R is None:
            raise InconsistentR("limit generator needs R")
        return 1j * model.H + model.R
    return 1j * model.H + model.lam * (np.eye(model.dim) - model.C)


def side_condition(R: np.ndarray, lam: float, tol: float = TOL_PSD) -> bool:
    """Whether ``R^*R <= lambda (R + R^*)`` holds."""
    M = lam * (R + dagger(R)) - dagger(R) @ R
    return bool(np.linalg.eigvalsh(0.5 * (M + dagger(M))).min() >= -tol)


# -- JSON model documents ---------------------------------------------------

def _parse_complex(x: Any, path: str) -> complex:
    if isinstance(x, bool):
        raise SchemaError(path, "expected a number or [re, im] pair, got a boolean")
    if isinstance(x, (int, float)):
        return complex(float(x), 0.0)
    if isinstance(x, list) and len(x) == 2 and all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in x):
        return complex(float(x[0]), float(x[1]))
    raise SchemaError(path, f"expected a number or [re, im] pair, got {x!r}")


def parse_matrix(obj: Any, path: str, dim: int | None = None) -> np.ndarray:
    """Parse a nested list of ``[re, im]`` pairs into a square complex matrix."""
    if not isinstance(obj, list) or not obj:
        raise SchemaError(path, "expected a non-empty list of rows")
    n = len(obj) if dim is None else dim
    if len(obj) != n:
        raise SchemaError(path, f"expected {n} rows, got {len(obj)}")
    out = np.empty((n, n), dtype=complex)
    for i, row in enumerate(obj):
        if not isinstance(row, list) or len(row) != n:
            raise SchemaError(f"{path}[{i}]", f"expected a row of length {n}")
        for j, x in enumerate(row):
            out[i, j] = _parse_complex(x, f"{path}[{i}][{j}]")
    return out


def parse_vector(obj: Any, path: str, dim: int | None = None) -> np.ndarray:
    if not isinstance(obj, list) or not obj:
        raise SchemaError(path, "expected a non-empty list")
    if dim is not None and len(obj) != dim:
        raise SchemaError(path, f"expected {dim} entries, got {len(obj)}")
    return np.array([_parse_complex(x, f"{path}[{i}]") for i, x in enumerate(obj)])


def model_from_dict(doc: Any) -> ModelSpec:
    """Build a :class:`ModelSpec` from a decoded JSON document.

    Required keys are ``dim``, ``H``, ``lambda`` and at least one of ``C``
    and ``R``.
    """
    if not isinstance(doc, dict):
        raise SchemaError("$", "model document must be a JSON object")
    for key in ("dim", "H", "lambda"):
        if key not in doc:
            raise SchemaError(f"$.{key}", "missing required field")
    dim = doc["dim"]
    if not isinstance(dim, int) or isinstance(dim, bool) or dim < 1:
        raise SchemaError("$.dim", f"expected a positive integer, got {dim!r}")
    lam = doc["lambda"]
    if not isinstance(lam, (int, float)) or isinstance(lam, bool):
        raise SchemaError("$.lambda", f"expected a number, got {lam!r}")
    if "C" not in doc and "R" not in doc:
        raise SchemaError("$.C", "one of C or R is required")
    H = parse_matrix(doc["H"], "$.H", dim)
    C = parse_matrix(doc["C"], "$.C", dim) if "C" in doc else None
    R = parse_matrix(doc["R"], "$.R", dim) if "R" in doc else None
    return ModelSpec(H=H, C=C, lam=float(lam), R=R)


def read_json(path, what: str = "model file") -> Any:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ModelError(f"{path}: cannot read {what} ({exc.strerror})") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError("$", f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc


def load_model(path) -> ValidatedModel:
    """Read and validate a model file."""
    return load_model_document(path)[0]


def load_model_document(path) -> tuple[ValidatedModel, np.ndarray | None]:
    """Model plus the optional initial state stored under ``eta0``."""
    doc = read_json(path)
    try:
        model = validate_model(model_from_dict(doc))
    except SchemaError as exc:
        raise SchemaError(exc.path, f"{exc.message} (in {path})") from exc
    except ModelError as exc:
        raise type(exc)(f"{path}: {exc}") from exc
    eta0 = None
    if "eta0" in doc:
        eta0 = parse_vector(doc["eta0"], "$.eta0", model.dim)
        if not np.isclose(np.linalg.norm(eta0), 1.0, atol=1e-12):
            raise SchemaError("$.eta0", f"initial state must be normalized (in {path})")
    return model, eta0


def matrix_to_json(A: np.ndarray) -> list:
    A = np.asarray(A, dtype=complex)
    if A.ndim == 1:
        return [[float(z.real), float(z.imag)] for z in A]
    return [matrix_to_json(row) for row in A]


def model_to_dict(model: ValidatedModel) -> dict:
    doc = {"dim": model.dim, "H": matrix_to_json(model.H), "lambda": model.lam}
    if model.R is not None:
        doc["R"] = matrix_to_json(model.R)
    else:
        doc["C"] = matrix_to_json(model.C)
    return doc
