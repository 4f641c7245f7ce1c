import numpy as np
import pytest

from conftest import ETA_FIX
from qcollapse.parallel import BLOCK, block_reduce, resolve_workers
from qcollapse.trajectory import ensemble_average


def _partial(start, stop):
    x = np.arange(start, stop, dtype=float)
    return (np.array([np.sum(1.0 / (1.0 + x))]), np.array([stop - start]))


def test_fold_matches_sequential_sum():
    s, n = block_reduce(_partial, 1000, workers=1)
    assert n[0] == 1000
    ref = 0.0
    for a in range(0, 1000, BLOCK):
        ref += np.sum(1.0 / (1.0 + np.arange(a, min(a + BLOCK, 1000), dtype=float)))
    assert s[0] == ref


def test_resolve_workers_env(monkeypatch):
    monkeypatch.setenv("QCOLLAPSE_WORKERS", "3")
    assert resolve_workers(None) == 3
    assert resolve_workers(0) == 1


def test_rejects_empty_ensemble():
    with pytest.raises(ValueError):
        block_reduce(_partial, 0)


def test_ensemble_bits_independent_of_workers(d2_model):
    grid = np.linspace(0.0, 1.0, 5)
    a = ensemble_average(d2_model, ETA_FIX, 300, grid, 11, workers=1)
    b = ensemble_average(d2_model, ETA_FIX, 300, grid, 11, workers=3)
    assert np.array_equal(a.rho_bar.rho, b.rho_bar.rho)
    assert np.array_equal(a.q_stderr, b.q_stderr)
