import numpy as np
import pytest
from hypothesis import settings

from qcollapse.core import ModelSpec, validate_model

settings.register_profile("default", max_examples=30, deadline=None)
settings.load_profile("default")

SIGMA_Z = np.diag([1.0, -1.0]).astype(complex)
C_FIX = np.diag([1.0, 0.8]).astype(complex)
R_FIX = np.diag([0.0, 0.36]).astype(complex)
ETA_FIX = np.array([1.0, 1.0], dtype=complex) / np.sqrt(2.0)


@pytest.fixture
def d2_model():
    return validate_model(ModelSpec(H=SIGMA_Z, C=C_FIX, lam=1.0))


@pytest.fixture
def eta():
    return ETA_FIX.copy()


def rate_model(lam: float, H=SIGMA_Z, R=R_FIX):
    return validate_model(ModelSpec.from_rate(H, R, lam))


def random_contraction(rng, d: int, scale: float = 0.95) -> np.ndarray:
    A = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    return scale * A / np.linalg.norm(A, 2)


def random_hermitian(rng, d: int) -> np.ndarray:
    A = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    return 0.5 * (A + A.conj().T)


def random_state(rng, d: int) -> np.ndarray:
    v = rng.normal(size=d) + 1j * rng.normal(size=d)
    return v / np.linalg.norm(v)
