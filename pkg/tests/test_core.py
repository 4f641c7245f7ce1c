import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import C_FIX, SIGMA_Z, random_contraction, random_hermitian
from qcollapse.core import (InconsistentR, ModelSpec, NegativeIntensity, NotContraction,
                            NotHermitian, SchemaError, TooNegative, expm, load_model,
                            load_model_document, model_from_dict, model_to_dict, psd_sqrt,
                            semigroup_generator, side_condition, trace_distance,
                            validate_model)


def test_fixture_model_accepted():
    m = validate_model(ModelSpec(H=SIGMA_Z, C=C_FIX, lam=1.0))
    np.testing.assert_allclose(m.h_evals, [-1.0, 1.0])
    np.testing.assert_allclose(np.sort(m.defect_evals), [0.0, 0.36], atol=1e-15)


def test_rejects_expanding_collapse():
    with pytest.raises(NotContraction):
        validate_model(ModelSpec(H=SIGMA_Z, C=np.diag([1.0, 1.1]), lam=1.0))


def test_rejects_non_hermitian_hamiltonian():
    with pytest.raises(NotHermitian):
        validate_model(ModelSpec(H=[[0, 1], [0, 0]], C=C_FIX, lam=1.0))


def test_rejects_negative_intensity():
    with pytest.raises(NegativeIntensity):
        validate_model(ModelSpec(H=SIGMA_Z, C=C_FIX, lam=-1.0))


def test_rejects_inconsistent_rate():
    with pytest.raises(InconsistentR):
        validate_model(ModelSpec(H=SIGMA_Z, C=C_FIX, lam=1.0, R=np.diag([0.0, 0.3])))


def test_rate_form_builds_collapse():
    m = validate_model(ModelSpec.from_rate(SIGMA_Z, np.diag([0.0, 0.36]), 10.0))
    np.testing.assert_allclose(m.C, np.diag([1.0, 0.964]))


def test_psd_sqrt_examples():
    np.testing.assert_allclose(psd_sqrt(np.eye(3)), np.eye(3))
    np.testing.assert_allclose(psd_sqrt(np.diag([4.0, 1.0])), np.diag([2.0, 1.0]))
    # roundoff-negative eigenvalues are clipped
    np.testing.assert_allclose(psd_sqrt(np.diag([1.0, -1e-12])), np.diag([1.0, 0.0]))
    with pytest.raises(TooNegative):
        psd_sqrt(np.diag([1.0, -1e-6]))
    with pytest.raises(NotHermitian):
        psd_sqrt(np.array([[1.0, 1.0], [0.0, 1.0]]))


@given(st.integers(0, 2**32 - 1), st.integers(1, 5))
def test_psd_sqrt_squares_back_and_commutes(seed, d):
    rng = np.random.default_rng(seed)
    G = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    A = G @ G.conj().T
    B = psd_sqrt(A)
    assert np.linalg.norm(B @ B - A, 2) <= 1e-10 * max(1.0, np.linalg.norm(A, 2))
    assert np.linalg.norm(B - B.conj().T, 2) == 0.0
    assert np.linalg.eigvalsh(B).min() >= -1e-12
    assert np.linalg.norm(B @ A - A @ B, 2) <= 1e-10 * max(1.0, np.linalg.norm(A, 2) ** 1.5)


def test_expm_examples():
    np.testing.assert_allclose(expm(np.zeros((2, 2))), np.eye(2))
    np.testing.assert_allclose(expm(np.diag([1j * np.pi, -1j * np.pi])), -np.eye(2), atol=1e-15)


@given(st.integers(0, 2**32 - 1))
def test_expm_inverse_pair(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
    assert np.linalg.norm(expm(A) @ expm(-A) - np.eye(3), 2) <= 1e-11 * np.exp(2 * np.linalg.norm(A, 2)) / 10


@given(st.integers(0, 2**32 - 1))
def test_expm_commuting_sum(seed):
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3)))
    a = rng.normal(size=3) + 1j * rng.normal(size=3)
    b = rng.normal(size=3) + 1j * rng.normal(size=3)
    A = Q @ np.diag(a) @ Q.conj().T
    B = Q @ np.diag(b) @ Q.conj().T
    np.testing.assert_allclose(expm(A + B), expm(A) @ expm(B), atol=1e-11 * np.exp(np.abs(a + b).max()))


def test_semigroup_generator_examples():
    m0 = validate_model(ModelSpec(H=np.zeros((2, 2)), C=np.eye(2), lam=3.0))
    np.testing.assert_array_equal(semigroup_generator(m0), np.zeros((2, 2)))
    m = validate_model(ModelSpec(H=SIGMA_Z, C=C_FIX, lam=1.0))
    np.testing.assert_allclose(semigroup_generator(m), np.diag([1j, -1j + 0.2]))


@given(st.integers(0, 2**32 - 1), st.floats(0.1, 20.0))
def test_dissipative_generator_for_positive_contraction(seed, lam):
    rng = np.random.default_rng(seed)
    G = random_contraction(rng, 3)
    C = psd_sqrt(G.conj().T @ G)  # Hermitian, PSD, contraction
    m = validate_model(ModelSpec(H=random_hermitian(rng, 3), C=C, lam=lam))
    K = semigroup_generator(m)
    assert np.linalg.eigvalsh(K + K.conj().T).min() >= -1e-10


@given(st.integers(0, 2**32 - 1), st.floats(1.0, 100.0))
def test_rate_generator_real_part(seed, lam):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
    R = A @ A.conj().T * 0.1 + 1j * random_hermitian(rng, 2) * 0.1
    m = validate_model(ModelSpec.from_rate(SIGMA_Z, R, max(lam, 10 * np.linalg.norm(R, 2))))
    K = semigroup_generator(m, limit=True)
    np.testing.assert_allclose(K + K.conj().T, R + R.conj().T, atol=1e-12)
    assert np.linalg.eigvalsh(K + K.conj().T).min() >= -1e-10


def test_side_condition():
    R = np.diag([0.0, 0.36])
    assert side_condition(R, 1.0)
    assert not side_condition(R, 0.1)


def test_trace_distance_basic():
    assert trace_distance(np.diag([1.0, 0.0]), np.diag([0.0, 1.0])) == pytest.approx(1.0)
    assert trace_distance(np.eye(2) / 2, np.eye(2) / 2) == 0.0


def test_json_round_trip(tmp_path, d2_model):
    p = tmp_path / "m.json"
    p.write_text(json.dumps(model_to_dict(d2_model)))
    m = load_model(p)
    np.testing.assert_array_equal(m.C, d2_model.C)
    np.testing.assert_array_equal(m.H, d2_model.H)


def test_json_accepts_complex_pairs():
    spec = model_from_dict({"dim": 2, "H": [[1, [0, 1]], [[0, -1], -1]], "lambda": 1,
                            "C": [[1, 0], [0, 0.5]]})
    assert spec.H[0, 1] == 1j and spec.H[1, 0] == -1j


@pytest.mark.parametrize("doc, path", [
    ({"H": [[1]], "lambda": 1, "C": [[1]]}, "$.dim"),
    ({"dim": 2, "H": [[1, 0], [0, "x"]], "lambda": 1, "C": [[1, 0], [0, 1]]}, "$.H[1][1]"),
    ({"dim": 2, "H": [[1, 0], [0, 1]], "lambda": 1, "C": [[1, 0]]}, "$.C"),
    ({"dim": 2, "H": [[1, 0], [0, 1]], "lambda": True, "C": [[1, 0], [0, 1]]}, "$.lambda"),
    ({"dim": 1, "H": [[1]], "lambda": 1}, "$.C"),
])
def test_schema_errors_cite_path(doc, path):
    with pytest.raises(SchemaError) as info:
        model_from_dict(doc)
    assert info.value.path == path
    assert path in str(info.value)


def test_missing_file_names_path(tmp_path):
    missing = tmp_path / "absent.json"
    with pytest.raises(Exception) as info:
        load_model(missing)
    assert str(missing) in str(info.value)


def test_document_initial_state(tmp_path):
    p = tmp_path / "m.json"
    p.write_text(json.dumps({"dim": 2, "H": [[1, 0], [0, -1]], "lambda": 1,
                             "C": [[1, 0], [0, 0.8]], "eta0": [0, 1]}))
    _, eta0 = load_model_document(p)
    np.testing.assert_array_equal(eta0, [0, 1])
    p.write_text(json.dumps({"dim": 2, "H": [[1, 0], [0, -1]], "lambda": 1,
                             "C": [[1, 0], [0, 0.8]], "eta0": [0, 2]}))
    with pytest.raises(SchemaError) as info:
        load_model_document(p)
    assert info.value.path == "$.eta0"
