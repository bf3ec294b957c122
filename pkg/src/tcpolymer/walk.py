"""Finite-range reference walks on Z^d and the space-time geometry they span."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, Sequence

import numpy as np

from ._kernels import next_layer
from .errors import DegenerateWalkError, EnumerationTooLarge, WalkError
from .rng import Streams, as_stream

ENUMERATION_CAP = 10**7
SLAB_SITE_CAP = 40_000_000
PROB_TOL = 1e-12


@dataclass(frozen=True)
class WalkModel:
    """Step law of a walk with finitely many distinct integer offsets.

    Offsets are stored as tuples so the model is hashable and can key caches.
    """

    d: int
    steps: tuple = field(default=())

    def __init__(self, d: int, steps: Sequence):
        offsets = []
        probs = []
        for off, p in steps:
            off = tuple(int(c) for c in off)
            if len(off) != d:
                raise WalkError(f"step offset {off} has dimension {len(off)}, expected {d}")
            p = float(p)
            if not p > 0.0:
                raise WalkError(f"step {off} has non-positive probability {p}")
            offsets.append(off)
            probs.append(p)
        if d < 3:
            raise WalkError(f"transience required: d ≥ 3 (got d={d})")
        if not offsets:
            raise WalkError("walk has no steps")
        if len(set(offsets)) != len(offsets):
            raise WalkError("step offsets must be distinct")
        total = math.fsum(probs)
        if abs(total - 1.0) > PROB_TOL:
            raise WalkError(f"step probabilities sum to {total!r}, not 1")
        object.__setattr__(self, "d", int(d))
        object.__setattr__(self, "steps", tuple(zip(offsets, probs)))

    @classmethod
    def nearest_neighbour(cls, d: int = 3) -> "WalkModel":
        steps = []
        for i in range(d):
            for sgn in (1, -1):
                e = [0] * d
                e[i] = sgn
                steps.append((tuple(e), 1.0 / (2 * d)))
        return cls(d, steps)

    @cached_property
    def offsets(self) -> np.ndarray:
        return np.array([s[0] for s in self.steps], dtype=np.int64)

    @cached_property
    def probs(self) -> np.ndarray:
        return np.array([s[1] for s in self.steps], dtype=np.float64)

    @cached_property
    def cdf(self) -> np.ndarray:
        c = np.cumsum(self.probs)
        c[-1] = 1.0
        return c

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    @property
    def reach(self) -> int:
        """Largest l1 length of a single step."""
        return int(np.abs(self.offsets).sum(axis=1).max())

    @property
    def p_min(self) -> float:
        return float(self.probs.min())

    @property
    def entropy(self) -> float:
        p = self.probs
        return float(-np.sum(p * np.log(p)))


def nn3d() -> WalkModel:
    return WalkModel.nearest_neighbour(3)


def walk_constants(walk: WalkModel) -> tuple[float, float, float]:
    """Return ``(p_S, H(S_1), K(S))`` with ``K(S) = -log p_S / H(S_1)``."""
    h = walk.entropy
    if walk.n_steps < 2 or h <= 0.0:
        raise DegenerateWalkError("entropy zero, criterion undefined")
    p_s = walk.p_min
    return p_s, h, -math.log(p_s) / h


@dataclass(frozen=True)
class Path:
    """A walk trajectory ``S_0 = 0, S_1, ..., S_n``; ``sites`` has shape (n+1, d)."""

    sites: np.ndarray

    @property
    def n(self) -> int:
        return self.sites.shape[0] - 1

    def is_valid(self, walk: WalkModel) -> bool:
        if np.any(self.sites[0] != 0):
            return False
        inc = np.diff(self.sites, axis=0)
        allowed = {tuple(o) for o in walk.offsets.tolist()}
        return all(tuple(s) in allowed for s in inc.tolist())


def _check_enum_size(walk: WalkModel, n_steps: int, cap: int) -> int:
    if n_steps < 0:
        raise ValueError("n_steps must be non-negative")
    count = walk.n_steps**n_steps
    if count > cap:
        raise EnumerationTooLarge(
            f"enumeration too large: {walk.n_steps}^{n_steps} = {count} paths exceeds cap {cap}"
        )
    return count


def enumerate_step_indices(walk: WalkModel, n_steps: int, cap: int = ENUMERATION_CAP) -> np.ndarray:
    """All step-index sequences, shape (k**n, n), in lexicographic order."""
    _check_enum_size(walk, n_steps, cap)
    k = walk.n_steps
    if n_steps == 0:
        return np.zeros((1, 0), dtype=np.int64)
    grids = np.indices((k,) * n_steps, dtype=np.int64)
    return grids.reshape(n_steps, -1).T.copy()


def enumerate_path_arrays(walk: WalkModel, n_steps: int, cap: int = ENUMERATION_CAP):
    """Vectorised enumeration: ``(sites (P, n+1, d), log_prob (P,))``."""
    idx = enumerate_step_indices(walk, n_steps, cap)
    return steps_to_sites(walk, idx), np.log(walk.probs)[idx].sum(axis=1)


def enumerate_paths(walk: WalkModel, n_steps: int, cap: int = ENUMERATION_CAP) -> Iterator[tuple[Path, float]]:
    """Yield every ``(path, probability)`` of length ``n_steps``."""
    idx = enumerate_step_indices(walk, n_steps, cap)
    sites = steps_to_sites(walk, idx)
    probs = walk.probs[idx].prod(axis=1)
    for s, p in zip(sites, probs):
        yield Path(s), float(p)


def steps_to_sites(walk: WalkModel, idx: np.ndarray) -> np.ndarray:
    """Cumulative positions for step-index arrays of shape (..., n)."""
    inc = walk.offsets[idx]
    out = np.zeros(idx.shape[:-1] + (idx.shape[-1] + 1, walk.d), dtype=np.int64)
    np.cumsum(inc, axis=-2, out=out[..., 1:, :])
    return out


def sample_step_indices(walk: WalkModel, n_steps: int, rng) -> np.ndarray:
    """Step indices of shape (rows, n_steps), one row per stream key."""
    return as_stream(rng).choice_rows(walk.cdf, n_steps)


def sample_path(walk: WalkModel, n_steps: int, rng) -> Path:
    idx = sample_step_indices(walk, n_steps, rng)[0]
    return Path(steps_to_sites(walk, idx))


def sample_paths(walk: WalkModel, n_steps: int, n_paths: int, rng) -> np.ndarray:
    """``n_paths`` independent paths from one stream, shape (n_paths, n+1, d)."""
    s = as_stream(rng)
    idx = s.choice_rows(walk.cdf, n_paths * n_steps)[0].reshape(n_paths, n_steps)
    return steps_to_sites(walk, idx)


# ---------------------------------------------------------------------------
# Difference walk and visits to l1 balls


def difference_law(walk: WalkModel) -> tuple[np.ndarray, np.ndarray]:
    """Law of ``X_1 - X'_1`` for two independent copies of the walk."""
    off = walk.offsets
    diff = (off[:, None, :] - off[None, :, :]).reshape(-1, walk.d)
    prob = (walk.probs[:, None] * walk.probs[None, :]).ravel()
    uniq, inv = np.unique(diff, axis=0, return_inverse=True)
    p = np.zeros(len(uniq))
    np.add.at(p, inv.ravel(), prob)
    return uniq, p


@dataclass(frozen=True)
class VisitEstimate:
    """Truncated mean of ``sum_{n=1}^{horizon} 1{|Z_n|_1 <= r}`` with a tail estimate.

    ``counts`` holds the per-run visit numbers so that exponential moments
    of the visit count can be formed from the same runs.
    """

    r: int
    horizon: int
    mean: float
    se: float
    tail: float
    counts: np.ndarray

    @property
    def total(self) -> float:
        return self.mean + self.tail


def _tail_extrapolation(late_visits: float, steps_last: np.ndarray, horizon: int, d: int) -> float:
    # Local CLT: the visit rate decays like c n^{-d/2}.  Fit c on the last
    # tenth of the horizon and sum the power law beyond it.
    c = late_visits / np.sum(steps_last.astype(float) ** (-d / 2.0))
    return float(c * horizon ** (1.0 - d / 2.0) / (d / 2.0 - 1.0))


def ball_visit_sums(
    walk: WalkModel,
    radii: Sequence[int],
    horizon: int = 10**4,
    n_samples: int = 10**4,
    rng=0,
    chunk: int = 2048,
) -> list[VisitEstimate]:
    """Monte Carlo visit sums of the difference walk for several radii.

    The difference walk is sampled directly from :func:`difference_law`,
    one draw per step, in vectorised chunks of runs.
    """
    if walk.d < 3:
        raise WalkError("transience required: d ≥ 3")
    radii = [int(r) for r in radii]
    offs, probs = difference_law(walk)
    cdf = np.cumsum(probs)
    cdf[-1] = 1.0
    stream = as_stream(rng)
    last_from = horizon - max(1, horizon // 10)
    counts = np.zeros((len(radii), n_samples), dtype=np.int64)
    late = np.zeros(len(radii))
    r_arr = np.array(radii)[:, None]
    block = max(1, min(horizon, 4_000_000 // max(chunk, 1)))
    for start in range(0, n_samples, chunk):
        m = min(chunk, n_samples - start)
        sub = Streams(stream.keys, stream.position)
        pos = np.zeros((m, walk.d), dtype=np.int64)
        done = 0
        while done < horizon:
            b = min(block, horizon - done)
            draws = sub.uniform_rows(m * b)[0].reshape(m, b)
            idx = np.minimum(np.searchsorted(cdf, draws, side="right"), len(cdf) - 1)
            traj = pos[:, None, :] + np.cumsum(offs[idx], axis=1)
            dist = np.abs(traj).sum(axis=2)
            inside = dist[None, :, :] <= r_arr[:, :, None]
            counts[:, start : start + m] += inside.sum(axis=2)
            lo = max(0, last_from - done)
            if lo < b:
                late += inside[:, :, lo:].sum(axis=(1, 2))
            pos = traj[:, -1, :]
            done += b
        stream.position = sub.position
    out = []
    steps_last = np.arange(last_from + 1, horizon + 1)
    for i, r in enumerate(radii):
        c = counts[i]
        out.append(
            VisitEstimate(
                r=r,
                horizon=horizon,
                mean=float(c.mean()),
                se=float(c.std(ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else float("nan"),
                tail=_tail_extrapolation(late[i] / n_samples, steps_last, horizon, walk.d),
                counts=c,
            )
        )
    return out


def ball_visit_sum(walk: WalkModel, r: int, horizon: int = 10**4, n_samples: int = 10**4, rng=0) -> VisitEstimate:
    return ball_visit_sums(walk, [r], horizon, n_samples, rng)[0]


def ball_visit_sum_exact(walk: WalkModel, r: int, horizon: int) -> float:
    """Exact truncated visit sum by propagating the difference-walk law."""
    offs, probs = difference_law(walk)
    reach = int(np.abs(offs).max())
    half = reach * horizon
    size = 2 * half + 1
    dist = np.zeros((size,) * walk.d)
    centre = (half,) * walk.d
    dist[centre] = 1.0
    grid = np.indices((size,) * walk.d) - half
    in_ball = np.abs(grid).sum(axis=0) <= r
    total = 0.0
    for _ in range(horizon):
        new = np.zeros_like(dist)
        for o, p in zip(offs, probs):
            new += p * np.roll(dist, tuple(o), axis=tuple(range(walk.d)))
        dist = new
        total += float(dist[in_ball].sum())
    return total


def khasminskii_check(est: VisitEstimate, c_eta: float = 0.5) -> tuple[float, float, float]:
    """``(E[exp(C V)], se, bound)`` with ``C = c_eta / mean`` and bound ``1/(1-c_eta)``."""
    c = c_eta / est.mean
    v = np.exp(c * est.counts.astype(float))
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v))), 1.0 / (1.0 - c_eta)


# ---------------------------------------------------------------------------
# Layered reachable geometry


class Slab:
    """Sites reachable at each time ``n = 0..N`` and their predecessor indices.

    Layer ``n`` holds the sorted codes of the sites the walk can occupy at
    time ``n``.  ``preds[n]`` has shape (k, m_n) and gives, for every step
    ``s`` and site ``z``, the index of ``z - s`` in layer ``n-1`` or
    ``m_{n-1}`` (a padding slot holding zero weight) when absent.  Site codes
    do not depend on ``N``, so a slab can be extended in place and shorter
    slabs are prefixes of longer ones.
    """

    def __init__(self, walk: WalkModel, N: int = 0):
        self.walk = walk
        self._base = int(2 ** (62 // walk.d))
        self._span = (self._base - 1) // 2
        self._mult = self._base ** np.arange(walk.d, dtype=np.int64)
        self._step_codes = walk.offsets @ self._mult
        self.codes = [self.encode(np.zeros((1, walk.d), dtype=np.int64))]
        self.preds = [np.zeros((walk.n_steps, 1), dtype=np.int32)]
        self.extend(N)

    @property
    def N(self) -> int:
        return len(self.codes) - 1

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(c) for c in self.codes])

    def extend(self, N: int) -> "Slab":
        if N * self.walk.reach >= self._span:
            raise EnumerationTooLarge(f"horizon {N} exceeds the coordinate range of the site encoding")
        total = self.total_sites()
        while self.N < N:
            cand, pred = next_layer(self.codes[-1], self._step_codes)
            total += len(cand)
            if total > SLAB_SITE_CAP:
                raise EnumerationTooLarge(f"slab to time {N} exceeds {SLAB_SITE_CAP} sites (reached at time {self.N + 1})")
            self.preds.append(pred)
            self.codes.append(cand)
        return self

    def encode(self, sites: np.ndarray) -> np.ndarray:
        sites = np.asarray(sites, dtype=np.int64)
        return (sites + self._span) @ self._mult

    def decode(self, codes: np.ndarray) -> np.ndarray:
        rest = np.asarray(codes, dtype=np.int64).copy()
        out = np.empty(rest.shape + (self.walk.d,), dtype=np.int64)
        for i in range(self.walk.d):
            out[..., i] = rest % self._base
            rest //= self._base
        return out - self._span

    def sites(self, n: int) -> np.ndarray:
        return self.decode(self.codes[n])

    def index(self, n: int, sites: np.ndarray) -> np.ndarray:
        """Indices of ``sites`` in layer ``n``; -1 where absent."""
        sites = np.asarray(sites, dtype=np.int64)
        far = np.abs(sites).max(axis=-1) >= self._span
        codes = np.where(far, -1, self.encode(np.where(far[..., None], 0, sites)))
        layer = self.codes[n]
        pos = np.minimum(np.searchsorted(layer, codes), len(layer) - 1)
        return np.where(layer[pos] == codes, pos, -1)

    def total_sites(self, N: int | None = None) -> int:
        N = self.N if N is None else N
        return int(sum(len(c) for c in self.codes[1 : N + 1]))


_SLABS: dict = {}


def get_slab(walk: WalkModel, N: int) -> Slab:
    """Shared slab for ``walk`` covering at least ``N`` layers."""
    slab = _SLABS.get(walk)
    if slab is None:
        if len(_SLABS) >= 4:
            _SLABS.clear()
        slab = _SLABS[walk] = Slab(walk, 0)
    return slab.extend(int(N))
