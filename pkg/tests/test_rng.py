import numpy as np
from hypothesis import given, strategies as st

from qcollapse.rng import JUMP_TAG, WIENER_TAG, Stream, jump_stream, wiener_stream


def test_frozen_jump_stream():
    # Philox4x64-10, key (0, "JUMP"), counter 0
    np.testing.assert_array_equal(
        jump_stream(0).raw(3),
        np.array([3254313758371318955, 15077724792683639344, 8759855126263259623], np.uint64))


def test_frozen_wiener_stream():
    np.testing.assert_array_equal(
        wiener_stream(0).raw(2), np.array([1541341342569892017, 10723714465519554292], np.uint64))


def test_frozen_uniforms():
    np.testing.assert_array_equal(jump_stream(12345).uniforms(2),
                                  [0.0979186552618389, 0.7627227439497466])


def test_matches_reference_philox():
    ref = np.random.Philox(key=[42, JUMP_TAG]).random_raw(10)
    np.testing.assert_array_equal(jump_stream(42).raw(10), ref)


@given(st.integers(0, 2**64 - 1), st.lists(st.integers(1, 9), min_size=1, max_size=8))
def test_interleaving_does_not_perturb_streams(seed, chunks):
    a, b = Stream(seed, JUMP_TAG), Stream(seed, WIENER_TAG)
    got_a, got_b = [], []
    for k in chunks:
        got_a.append(a.raw(k))
        got_b.append(b.raw(k + 1))
    ra = np.random.Philox(key=np.array([seed, JUMP_TAG], np.uint64)).random_raw(sum(chunks))
    rb = np.random.Philox(key=np.array([seed, WIENER_TAG], np.uint64)).random_raw(sum(chunks) + len(chunks))
    np.testing.assert_array_equal(np.concatenate(got_a), ra)
    np.testing.assert_array_equal(np.concatenate(got_b), rb)


def test_uniforms_open_interval():
    u = jump_stream(3).uniforms(200_000)
    assert u.min() > 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 5 * np.sqrt(1 / 12 / u.size)


def test_normals_moments():
    z = wiener_stream(5).normals(200_000)
    assert abs(z.mean()) < 5 / np.sqrt(z.size)
    assert abs(z.var() - 1.0) < 5 * np.sqrt(2 / z.size)


def test_domain_separation():
    assert not np.array_equal(jump_stream(1).raw(4), wiener_stream(1).raw(4))
