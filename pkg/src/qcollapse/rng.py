"""Counter-based random streams.

Every stream is Philox4x64-10 (Salmon et al., Random123) as shipped in
``numpy.random.Philox``, keyed by ``(seed mod 2**64, domain_tag)`` with the
counter starting at zero.  Raw 64-bit outputs are consumed in order and
mapped to the open unit interval by ``((x >> 11) + 0.5) * 2**-53``.
Exponential and Gaussian variates use the inverse CDF of that uniform, so a
reimplementation only needs Philox and the two quantile functions to
reproduce every stream bit for bit.
"""

from __future__ import annotations

import threading
import weakref

import numpy as np
from scipy.special import ndtri

MASK64 = (1 << 64) - 1

# ASCII "JUMP" and "WIEN"
JUMP_TAG = 0x4A554D50
WIENER_TAG = 0x5749454E

_SCALE = 2.0 ** -53
_SHIFT = np.uint64(11)

# Constructing a Philox object costs far more than rekeying one, so each
# thread keeps a single generator and streams swap their state in and out.
_local = threading.local()


def _shared():
    if not hasattr(_local, "bitgen"):
        _local.bitgen = np.random.Philox(key=[0, 0])
        _local.owner = lambda: None
    return _local


def _fresh_state(seed: int, tag: int) -> dict:
    return {
        "bit_generator": "Philox",
        "state": {"counter": np.zeros(4, np.uint64),
                  "key": np.array([seed, tag], np.uint64)},
        "buffer": np.zeros(4, np.uint64),
        "buffer_pos": 4,
        "has_uint32": 0,
        "uinteger": 0,
    }


class Stream:
    """Sequential reader over one keyed Philox stream."""

    __slots__ = ("seed", "tag", "_saved", "__weakref__")

    def __init__(self, seed: int, tag: int):
        self.seed = int(seed) & MASK64
        self.tag = int(tag) & MASK64
        self._saved = _fresh_state(self.seed, self.tag)

    def _acquire(self):
        shared = _shared()
        owner = shared.owner()
        if owner is not self:
            if owner is not None:
                owner._saved = shared.bitgen.state
            shared.bitgen.state = self._saved
            shared.owner = weakref.ref(self)
        return shared.bitgen

    def raw(self, n: int) -> np.ndarray:
        return self._acquire().random_raw(n)

    def uniforms(self, n: int) -> np.ndarray:
        """``n`` doubles in the open interval (0, 1)."""
        bits = self._acquire().random_raw(n) >> _SHIFT
        return (bits.astype(np.float64) + 0.5) * _SCALE

    def exponentials(self, n: int, rate: float) -> np.ndarray:
        with np.errstate(over="ignore"):  # subnormal rates give infinite waits
            return -np.log(self.uniforms(n)) / rate

    def normals(self, n: int) -> np.ndarray:
        return ndtri(self.uniforms(n))


def jump_stream(seed: int) -> Stream:
    return Stream(seed, JUMP_TAG)


def wiener_stream(seed: int) -> Stream:
    return Stream(seed, WIENER_TAG)
