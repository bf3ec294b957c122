"""Counter-based SplitMix64 streams.

Every random word is a pure function of ``(key, counter)``:

    word(key, i) = mix64(key + (i + 1) * GAMMA)   (mod 2**64)

so any block of a stream can be regenerated without replaying earlier
draws, and a batch of streams (one key per row) is produced with a single
vectorised call.  Replica streams are keyed by :func:`derive_seed`, which
makes results independent of how work is split across processes.

Conversions (all fixed and documented so other implementations can match):

* uniform double: ``(word >> 11) * 2**-53`` in ``[0, 1)``;
* standard normals: Box-Muller on consecutive word pairs ``(u1, u2)``,
  giving ``r cos(2 pi u2)`` then ``r sin(2 pi u2)`` with ``r = sqrt(-2 log(1 - u1))``;
* discrete law: ``searchsorted(cdf, u, side="right")``.
"""

from __future__ import annotations

import numpy as np

from . import _kernels

GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_DERIVE = 0xD1B54A32D192ED03
_MASK = (1 << 64) - 1

_U = np.uint64


def mix64_int(z: int) -> int:
    """SplitMix64 finaliser on a Python int."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * _M1) & _MASK
    z = ((z ^ (z >> 27)) * _M2) & _MASK
    return z ^ (z >> 31)


def mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finaliser, vectorised over a uint64 array."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> _U(30))) * _U(_M1)
        z = (z ^ (z >> _U(27))) * _U(_M2)
        return z ^ (z >> _U(31))


def derive_seed(master: int, *path: int) -> int:
    """Derive a child seed from a master seed and an index path.

    ``derive_seed(m, i)`` is the seed of replica ``i``; longer paths give
    nested sub-streams.  The mapping is a chain of SplitMix64 finalisers:

        h = mix64(master + GAMMA)
        h = mix64(h ^ (idx * DERIVE + GAMMA))    for each idx
    """
    h = mix64_int((int(master) + GAMMA) & _MASK)
    for idx in path:
        h = mix64_int(h ^ ((int(idx) * _DERIVE + GAMMA) & _MASK))
    return h



def words(keys: np.ndarray, start: int, count: int) -> np.ndarray:
    """Raw words for counters ``start .. start+count-1``; shape (rows, count)."""
    keys = np.asarray(keys, dtype=np.uint64).reshape(-1)
    out = np.empty((len(keys), count), dtype=np.uint64)
    _kernels.fill_words(keys, np.uint64(start), out)
    return out


def words_reference(keys: np.ndarray, start: int, count: int) -> np.ndarray:
    """Pure-numpy :func:`words`, used to cross-check the compiled kernel."""
    keys = np.asarray(keys, dtype=np.uint64).reshape(-1)
    ctr = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = keys[:, None] + ctr[None, :] * _U(GAMMA)
    return mix64(z)


def to_uniform(w: np.ndarray) -> np.ndarray:
    return (w >> _U(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def normals_reference(w: np.ndarray, count: int) -> np.ndarray:
    """Box-Muller on word pairs; pure-numpy statement of the normal conversion."""
    half = (count + 1) // 2
    u = to_uniform(w[:, : 2 * half]).reshape(w.shape[0], half, 2)
    r = np.sqrt(-2.0 * np.log1p(-u[:, :, 0]))
    theta = (2.0 * np.pi) * u[:, :, 1]
    z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=2)
    return z.reshape(w.shape[0], 2 * half)[:, :count]


class Streams:
    """A batch of independent counter streams, one per key.

    All draw methods return arrays of shape ``(rows, count)`` and advance a
    shared counter, so row ``r`` of a batch built from keys ``k`` is
    bit-identical to a single stream built from ``k[r]``.
    """

    def __init__(self, keys, position: int = 0):
        self.keys = np.atleast_1d(np.asarray(keys, dtype=np.uint64))
        self.position = int(position)

    @classmethod
    def for_replicas(cls, master: int, indices, *prefix: int) -> "Streams":
        keys = [derive_seed(master, *prefix, int(i)) for i in indices]
        return cls(np.array(keys, dtype=np.uint64))

    @property
    def rows(self) -> int:
        return self.keys.shape[0]

    def _take(self, count: int) -> np.ndarray:
        w = words(self.keys, self.position, count)
        self.position += count
        return w

    # The *_rows methods always return (rows, count); library code uses them
    # so that a single Stream and a batch share one code path.
    def uniform_rows(self, count: int) -> np.ndarray:
        out = np.empty((self.rows, count))
        _kernels.fill_uniform(self.keys, np.uint64(self.position), out)
        self.position += count
        return out

    def normal_rows(self, count: int) -> np.ndarray:
        """Standard normals; ``count`` normals consume ``2 * ceil(count / 2)`` words."""
        out = np.empty((self.rows, count))
        _kernels.fill_normal(self.keys, np.uint64(self.position), out)
        self.position += 2 * ((count + 1) // 2)
        return out

    def choice_rows(self, cdf: np.ndarray, count: int) -> np.ndarray:
        """Indices drawn from the law whose cumulative sums are ``cdf``."""
        u = self.uniform_rows(count)
        idx = np.searchsorted(cdf, u, side="right")
        return np.minimum(idx, len(cdf) - 1)

    uniform = uniform_rows
    normal = normal_rows
    choice = choice_rows

    def row(self, r: int) -> "Stream":
        return Stream(int(self.keys[r]), self.position)


class Stream(Streams):
    """A single stream; draws are returned as 1-D arrays."""

    def __init__(self, seed: int, position: int = 0):
        super().__init__([int(seed) & _MASK], position)
        self.seed = int(seed) & _MASK

    def uniform(self, count: int) -> np.ndarray:
        return self.uniform_rows(count)[0]

    def normal(self, count: int) -> np.ndarray:
        return self.normal_rows(count)[0]

    def choice(self, cdf: np.ndarray, count: int) -> np.ndarray:
        return self.choice_rows(cdf, count)[0]

    def spawn(self, *path: int) -> "Stream":
        return Stream(derive_seed(self.seed, *path))


def as_stream(rng) -> Streams:
    """Accept a seed, a :class:`Stream`, or a :class:`Streams` batch."""
    if isinstance(rng, Streams):
        return rng
    if rng is None:
        return Stream(0)
    return Stream(int(rng))
