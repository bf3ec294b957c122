"""Random environments on Z_+ x Z^d: parameters, samplers and exact moments.

A space-time site is written ``(n, z)`` with time ``n >= 1`` and ``z`` in
Z^d; arrays of sites carry the time in column 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg
from scipy.special import log_ndtr

from ._kernels import ar_observe
from .errors import FieldError, NumericalError, PreconditionError, ResourceCapError, WindowError
from .rng import as_stream
from .walk import Slab, WalkModel, get_slab

KINDS = ("iid_gaussian", "iid_bernoulli", "ar_time", "gff_gaussian")
GAUSSIAN_KINDS = ("iid_gaussian", "ar_time", "gff_gaussian")
GREEN_SITE_CAP = 6000


@dataclass(frozen=True)
class CorrelationParams:
    """Nominal mixing constants: correlations decay like ``C exp(-g r)``."""

    C: float
    g: float

    def __post_init__(self):
        if not (self.C > 0 and self.g > 0):
            raise FieldError(f"correlation constants must be positive, got C={self.C}, g={self.g}")


@dataclass(frozen=True)
class FieldSpec:
    """Law of the environment.

    ``iid_gaussian``: independent N(0, sigma^2).
    ``iid_bernoulli``: independent, ``values[1]`` with probability ``p``, else ``values[0]``.
    ``ar_time``: independent stationary AR(1) chains in time at each site,
    ``w_n = a w_{n-1} + sigma sqrt(1-a^2) zeta_n``.
    ``gff_gaussian``: centred Gaussian with covariance
    ``exp(-|x-y|_1) G(x, y)``, ``G`` the Green function of the simple walk on
    Z_+ x Z^d killed outside ``box`` enlarged by ``margin``.
    """

    kind: str
    sigma: float = 1.0
    p: float = 0.5
    values: tuple = (0.0, 1.0)
    a: float = 0.5
    box: tuple | None = None
    margin: int | None = None
    C: float = 1.0
    g: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise FieldError(f"unknown field kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if self.kind in ("iid_gaussian", "ar_time") and not self.sigma > 0:
            raise FieldError(f"field.sigma must be positive, got {self.sigma}")
        if self.kind == "iid_bernoulli":
            if not 0.0 <= self.p <= 1.0:
                raise FieldError(f"field.p must lie in [0, 1], got {self.p}")
            if len(self.values) != 2 or not self.values[0] < self.values[1]:
                raise FieldError(f"field.values must be two increasing numbers, got {self.values}")
        if self.kind == "ar_time" and not 0.0 < self.a < 1.0:
            raise FieldError(f"field.a must lie in (0, 1), got {self.a}")
        if self.kind == "gff_gaussian":
            if self.box is not None and (len(self.box) < 2 or min(self.box) < 1):
                raise FieldError(f"field.box must list positive extents (time first), got {self.box}")
            if self.margin is not None and self.margin < 0:
                raise FieldError(f"field.margin must be non-negative, got {self.margin}")
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if self.box is not None:
            object.__setattr__(self, "box", tuple(int(b) for b in self.box))

    @classmethod
    def iid_gaussian(cls, sigma: float = 1.0) -> "FieldSpec":
        return cls("iid_gaussian", sigma=sigma)

    @classmethod
    def iid_bernoulli(cls, p: float = 0.5, values=(0.0, 1.0)) -> "FieldSpec":
        return cls("iid_bernoulli", p=p, values=tuple(values))

    @classmethod
    def ar_time(cls, a: float = 0.5, sigma: float = 1.0) -> "FieldSpec":
        return cls("ar_time", a=a, sigma=sigma)

    @classmethod
    def gff_gaussian(cls, box=None, margin=None) -> "FieldSpec":
        return cls("gff_gaussian", box=box, margin=margin)

    @property
    def is_iid(self) -> bool:
        return self.kind in ("iid_gaussian", "iid_bernoulli")

    @property
    def is_gaussian(self) -> bool:
        return self.kind in GAUSSIAN_KINDS

    @property
    def correlation(self) -> CorrelationParams:
        if self.g is not None:
            return CorrelationParams(self.C, self.g)
        if self.kind == "ar_time":
            return CorrelationParams(self.C, -math.log(self.a))
        return CorrelationParams(self.C, 1.0)

    @property
    def variance(self) -> float:
        if self.kind == "iid_bernoulli":
            v0, v1 = self.values
            return self.p * (1 - self.p) * (v1 - v0) ** 2
        if self.kind == "gff_gaussian":
            raise FieldError("gff variance depends on the site; use covariance()")
        return self.sigma**2


def standard_specs() -> dict[str, FieldSpec]:
    """One representative of every kind."""
    return {
        "iid_gaussian": FieldSpec.iid_gaussian(1.0),
        "iid_bernoulli": FieldSpec.iid_bernoulli(0.5),
        "ar_time": FieldSpec.ar_time(0.5, 1.0),
        "gff_gaussian": FieldSpec.gff_gaussian(),
    }


# ---------------------------------------------------------------------------
# Exact one-site moments


def log_mgf(spec: FieldSpec, t) -> np.ndarray:
    """``log E[exp(t w)]`` for the one-site marginal (not for gff)."""
    t = np.asarray(t, dtype=float)
    if spec.kind in ("iid_gaussian", "ar_time"):
        return 0.5 * t**2 * spec.sigma**2
    if spec.kind == "iid_bernoulli":
        v0, v1 = spec.values
        if spec.p == 0.0:
            return t * v0
        if spec.p == 1.0:
            return t * v1
        return np.logaddexp(math.log1p(-spec.p) + t * v0, math.log(spec.p) + t * v1)
    raise FieldError("gff marginal depends on the site; no single-site moment")


def dlog_mgf(spec: FieldSpec, t) -> np.ndarray:
    """Derivative of :func:`log_mgf` in ``t``."""
    t = np.asarray(t, dtype=float)
    if spec.kind in ("iid_gaussian", "ar_time"):
        return t * spec.sigma**2
    if spec.kind == "iid_bernoulli":
        v0, v1 = spec.values
        if spec.p in (0.0, 1.0):
            return np.full_like(t, v1 if spec.p == 1.0 else v0)
        a0 = math.log1p(-spec.p) + t * v0
        a1 = math.log(spec.p) + t * v1
        w1 = 1.0 / (1.0 + np.exp(a0 - a1))
        return v0 + (v1 - v0) * w1
    raise FieldError("gff marginal depends on the site; no single-site moment")


def log_truncated_mgf(spec: FieldSpec, beta: float, l: float) -> float:
    """``log E[exp(beta max(w, -l))]`` for the one-site marginal."""
    if spec.kind in ("iid_gaussian", "ar_time"):
        s = spec.sigma
        # E[e^{b w}; w > -l] = e^{b^2 s^2 / 2} P(N(0,1) < b s + l/s)
        upper = 0.5 * beta**2 * s**2 + float(log_ndtr(beta * s + l / s))
        lower = -beta * l + float(log_ndtr(-l / s))
        return float(np.logaddexp(upper, lower))
    if spec.kind == "iid_bernoulli":
        v0, v1 = (max(v, -l) for v in spec.values)
        terms = [math.log(q) + beta * v for q, v in ((1 - spec.p, v0), (spec.p, v1)) if q > 0]
        return float(np.logaddexp.reduce(terms))
    raise FieldError("gff marginal depends on the site; no single-site moment")


def esssup(spec: FieldSpec) -> tuple[float, float]:
    """``(top value, its probability)``; raises for unbounded laws."""
    if spec.kind == "iid_bernoulli":
        v0, v1 = spec.values
        return (v1, spec.p) if spec.p > 0 else (v0, 1.0)
    raise FieldError("esssup infinite; window test inapplicable")


def lower_bound(spec: FieldSpec) -> float:
    if spec.kind == "iid_bernoulli":
        v0, v1 = spec.values
        return v0 if spec.p < 1 else v1
    return -math.inf


# ---------------------------------------------------------------------------
# Green function of the killed simple walk on Z_+ x Z^d


@dataclass
class GreenTable:
    """Green function on the sites of a box, killed outside the enlarged box.

    ``box`` lists extents ``(n_t, n_1, ..., n_d)``: times ``1..n_t`` and
    spatial coordinate ``i`` in ``lo_i .. lo_i + n_i - 1`` with
    ``lo_i = -((n_i - 1) // 2)``.  The enlarged box adds ``margin`` sites on
    every side except below time 1, where the half-space boundary kills.
    """

    d: int
    box: tuple
    margin: int
    sites: np.ndarray
    matrix: np.ndarray
    condition: float

    VERSION = 1
    MAGIC = b"TCPGREEN"

    def lookup(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        ia = _box_index(self.box, a)
        ib = _box_index(self.box, b)
        return self.matrix[ia[:, None], ib[None, :]]

    def save(self, path) -> None:
        header = json.dumps({"version": self.VERSION, "d": self.d, "box": list(self.box), "margin": self.margin,
                             "condition": self.condition}).encode()
        with open(path, "wb") as fh:
            fh.write(self.MAGIC)
            fh.write(len(header).to_bytes(4, "little"))
            fh.write(header)
            np.save(fh, self.sites, allow_pickle=False)
            np.save(fh, self.matrix, allow_pickle=False)

    @classmethod
    def load(cls, path, d: int | None = None, box=None, margin: int | None = None) -> "GreenTable":
        with open(path, "rb") as fh:
            if fh.read(len(cls.MAGIC)) != cls.MAGIC:
                raise FieldError(f"{path}: not a Green table file")
            n = int.from_bytes(fh.read(4), "little")
            meta = json.loads(fh.read(n).decode())
            if meta["version"] != cls.VERSION:
                raise FieldError(f"{path}: Green table version {meta['version']} != {cls.VERSION}")
            want = {"d": d, "box": None if box is None else list(box), "margin": margin}
            for key, val in want.items():
                if val is not None and meta[key] != val:
                    raise FieldError(f"{path}: cached {key}={meta[key]} does not match requested {val}")
            sites = np.load(fh, allow_pickle=False)
            matrix = np.load(fh, allow_pickle=False)
        return cls(meta["d"], tuple(meta["box"]), meta["margin"], sites, matrix, meta["condition"])


def box_lower(box: Sequence[int]) -> np.ndarray:
    lo = [1] + [-((n - 1) // 2) for n in box[1:]]
    return np.array(lo, dtype=np.int64)


def box_sites(box: Sequence[int]) -> np.ndarray:
    lo = box_lower(box)
    grids = np.indices(tuple(box)).reshape(len(box), -1).T
    return grids + lo


def _box_index(box, sites: np.ndarray) -> np.ndarray:
    rel = np.asarray(sites, dtype=np.int64) - box_lower(box)
    if np.any(rel < 0) or np.any(rel >= np.array(box)):
        raise WindowError("site outside the Green table box")
    return np.ravel_multi_index(rel.T, tuple(box))


def default_margin(box: Sequence[int]) -> int:
    """The l1 diameter of the box."""
    return int(sum(n - 1 for n in box))


def _enlarged(box, margin):
    lo = box_lower(box)
    lo_e = lo.copy()
    lo_e[1:] -= margin
    ext = np.array(box, dtype=np.int64)
    ext[0] += margin
    ext[1:] += 2 * margin
    return lo_e, ext


def green_quadrature(a: np.ndarray, b: np.ndarray, lo_e: np.ndarray, ext: np.ndarray, h: float = 0.25) -> tuple[np.ndarray, float]:
    """Green function between site arrays ``a`` and ``b`` on the enlarged box.

    Uses ``G = int_0^inf prod_i g_i(t) dt`` where ``g_i`` is the heat kernel
    of the 1-D component of the rate-1 continuous-time walk with Dirichlet
    ends (a sine series), integrated with the trapezoid rule in ``log t``.
    Returns ``(G, condition)`` where ``condition = 1/lambda_min`` estimates
    the conditioning of the underlying solve.
    """
    D = len(ext)
    lam_min = sum((1 - math.cos(math.pi / (n + 1))) / D for n in ext)
    if lam_min < 1e-12:
        raise NumericalError(f"Green solve ill-conditioned: condition estimate {1.0 / max(lam_min, 1e-300):.3e}")
    s = np.arange(-36.0, math.log(45.0 / lam_min) + h, h)
    t = np.exp(s)
    wq = h * t
    ra = np.asarray(a, dtype=np.int64) - lo_e
    rb = np.asarray(b, dtype=np.int64) - lo_e
    tables = []
    for i, n in enumerate(ext):
        n = int(n)
        k = np.arange(1, n + 1)
        mu = (1 - np.cos(np.pi * k / (n + 1))) / D
        ua = np.unique(ra[:, i])
        ub = np.unique(rb[:, i])
        phi_a = math.sqrt(2.0 / (n + 1)) * np.sin(np.pi * np.outer(ua + 1, k) / (n + 1))
        phi_b = math.sqrt(2.0 / (n + 1)) * np.sin(np.pi * np.outer(ub + 1, k) / (n + 1))
        decay = np.exp(-np.outer(t, mu))  # (Q, n)
        tab = np.einsum("ak,qk,bk->qab", phi_a, decay, phi_b, optimize=True)
        tables.append((tab, np.searchsorted(ua, ra[:, i]), np.searchsorted(ub, rb[:, i])))
    G = np.zeros((len(ra), len(rb)))
    for q in range(len(t)):
        prod = np.full((len(ra), len(rb)), wq[q])
        for tab, ia, ib in tables:
            prod *= tab[q][ia[:, None], ib[None, :]]
        G += prod
    return G, 1.0 / lam_min


def green_function(d: int, box: Sequence[int], margin: int | None = None, sites: np.ndarray | None = None) -> GreenTable:
    """Green table on all sites of ``box`` (or on the given subset)."""
    box = tuple(int(b) for b in box)
    if len(box) != d + 1:
        raise FieldError(f"box needs {d + 1} extents (time first), got {box}")
    margin = default_margin(box) if margin is None else int(margin)
    pts = box_sites(box) if sites is None else np.asarray(sites, dtype=np.int64)
    if len(pts) > GREEN_SITE_CAP:
        raise ResourceCapError(f"Green table with {len(pts)} sites exceeds cap {GREEN_SITE_CAP}")
    lo_e, ext = _enlarged(box, margin)
    G, cond = green_quadrature(pts, pts, lo_e, ext)
    G = 0.5 * (G + G.T)
    return GreenTable(d, box, margin, pts, G, cond)


def green_function_direct(d: int, box: Sequence[int], margin: int | None = None) -> np.ndarray:
    """Reference Green matrix on the box sites from a sparse direct solve."""
    import scipy.sparse as sp
    import scipy.sparse.linalg as spla

    box = tuple(int(b) for b in box)
    margin = default_margin(box) if margin is None else int(margin)
    lo_e, ext = _enlarged(box, margin)
    D = d + 1
    size = int(np.prod(ext))
    # sparse LU fill-in on a (d+1)-dimensional grid grows fast; keep it small
    if size > 20_000:
        raise ResourceCapError(f"direct Green solve on {size} sites exceeds cap 20000")
    idx = np.arange(size).reshape(tuple(ext))
    rows, cols = [], []
    for axis in range(D):
        for sh in (1, -1):
            src = idx
            dst = np.roll(idx, -sh, axis=axis)
            valid = np.ones(tuple(ext), dtype=bool)
            sl = [slice(None)] * D
            sl[axis] = slice(-1, None) if sh == 1 else slice(0, 1)
            valid[tuple(sl)] = False
            rows.append(src[valid])
            cols.append(dst[valid])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    P = sp.csr_matrix((np.full(len(rows), 1.0 / (2 * D)), (rows, cols)), shape=(size, size))
    A = (sp.identity(size, format="csc") - P.tocsc()).tocsc()
    pts = box_sites(box) - lo_e
    flat = np.ravel_multi_index(pts.T, tuple(ext))
    rhs = np.zeros((size, len(flat)))
    rhs[flat, np.arange(len(flat))] = 1.0
    sol = spla.splu(A).solve(rhs)
    return sol[flat, :]


@lru_cache(maxsize=16)
def _gff_table_cached(d: int, box: tuple, margin: int | None) -> GreenTable:
    return green_function(d, box, margin)


# ---------------------------------------------------------------------------
# Covariances of Gaussian kinds


def window_box(slab: Slab, N: int) -> tuple:
    r = slab.walk.reach * N
    return (N,) + (2 * r + 1,) * slab.walk.d


def covariance(spec: FieldSpec, a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Covariance matrix between space-time site arrays (time in column 0)."""
    a = np.asarray(a, dtype=np.int64)
    b = a if b is None else np.asarray(b, dtype=np.int64)
    if spec.kind == "iid_gaussian":
        same = np.all(a[:, None, :] == b[None, :, :], axis=2)
        return spec.sigma**2 * same.astype(float)
    if spec.kind == "iid_bernoulli":
        same = np.all(a[:, None, :] == b[None, :, :], axis=2)
        return spec.variance * same.astype(float)
    if spec.kind == "ar_time":
        same = np.all(a[:, None, 1:] == b[None, :, 1:], axis=2)
        lag = np.abs(a[:, None, 0] - b[None, :, 0])
        return spec.sigma**2 * np.where(same, spec.a ** lag.astype(float), 0.0)
    # gff
    both = np.concatenate([a, b])
    box, lo_e, ext = _gff_geometry(spec, both)
    G, _ = green_quadrature(a, b, lo_e, ext)
    dist = np.abs(a[:, None, :] - b[None, :, :]).sum(axis=2)
    return np.exp(-dist) * G


def _gff_geometry(spec: FieldSpec, sites: np.ndarray):
    d = sites.shape[1] - 1
    if np.any(sites[:, 0] < 1):
        raise WindowError("gff sites need time >= 1")
    if spec.box is not None:
        box = spec.box
        if len(box) != d + 1:
            raise FieldError(f"field.box needs {d + 1} extents, got {box}")
        lo = box_lower(box)
        if np.any(sites < lo) or np.any(sites >= lo + np.array(box)):
            bad = sites[np.any((sites < lo) | (sites >= lo + np.array(box)), axis=1)][0]
            raise WindowError(f"site {tuple(bad.tolist())} lies outside field.box {box}")
    else:
        t_hi = int(sites[:, 0].max())
        r = int(np.abs(sites[:, 1:]).max()) if sites.shape[0] else 0
        box = (t_hi,) + (2 * r + 1,) * d
    margin = default_margin(box) if spec.margin is None else spec.margin
    lo_e, ext = _enlarged(box, margin)
    return box, lo_e, ext


# ---------------------------------------------------------------------------
# Field samples


@dataclass
class FieldSample:
    """Field values on the slab window ``1..N``; ``layers[n]`` matches ``slab.codes[n]``.

    For a batch of disorders the layer arrays have a leading replica axis.
    """

    spec: FieldSpec
    slab: Slab
    N: int
    layers: list
    seed: int | None = None

    @property
    def batched(self) -> bool:
        return self.layers[1].ndim == 2 if self.N > 0 else False

    def value(self, n: int, z) -> float:
        i = int(self.slab.index(n, np.asarray(z)[None, :])[0])
        if i < 0 or n > self.N or n < 1:
            raise WindowError(f"site {(n, tuple(int(c) for c in z))} not in the window")
        return self.layers[n][..., i]

    def replica(self, r: int) -> "FieldSample":
        return FieldSample(self.spec, self.slab, self.N, [None] + [x[r] for x in self.layers[1:]], self.seed)


class ARChains:
    """Per-site stationary AR(1) chains observed along increasing times.

    ``observe(t, pos, z)`` returns chain values at time ``t`` for sites
    ``pos`` (distinct) from standard normals ``z``, conditioning on each
    site's previous observation.
    """

    def __init__(self, a: float, sigma: float, rows: int, n_sites: int):
        self.a = a
        self.sigma = sigma
        self.val = np.zeros((rows, n_sites))
        self.time = np.full(n_sites, -1, dtype=np.int64)

    def observe(self, t: int, pos: np.ndarray, z: np.ndarray) -> np.ndarray:
        pos = np.ascontiguousarray(pos, dtype=np.int64)
        z = np.ascontiguousarray(np.atleast_2d(z), dtype=np.float64)
        out = np.empty((self.val.shape[0], len(pos)))
        ar_observe(self.val, self.time, int(t), pos, z, float(self.a), float(self.sigma), out)
        return out


def _union_positions(slab: Slab, N: int):
    union = np.unique(np.concatenate(slab.codes[1 : N + 1])) if N > 0 else np.zeros(0, dtype=np.int64)
    return union, [None] + [np.searchsorted(union, slab.codes[n]) for n in range(1, N + 1)]


def window_sites(slab: Slab, N: int) -> np.ndarray:
    """All space-time sites of the window in layer order, time in column 0."""
    parts = []
    for n in range(1, N + 1):
        s = slab.sites(n)
        parts.append(np.column_stack([np.full(len(s), n), s]))
    return np.concatenate(parts) if parts else np.zeros((0, slab.walk.d + 1), dtype=np.int64)


@lru_cache(maxsize=8)
def _gff_factor(spec: FieldSpec, walk: WalkModel, N: int) -> np.ndarray:
    slab = get_slab(walk, N)
    sites = window_sites(slab, N)
    if len(sites) > GREEN_SITE_CAP:
        raise ResourceCapError(f"gff window with {len(sites)} sites exceeds cap {GREEN_SITE_CAP}")
    C = covariance(spec, sites)
    C = 0.5 * (C + C.T)
    return psd_factor(C)


def psd_factor(C: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Lower factor ``F`` with ``F F^T = C``; errors if ``C`` is not PSD."""
    try:
        return scipy.linalg.cholesky(C, lower=True)
    except np.linalg.LinAlgError:
        pass
    w, V = np.linalg.eigh(C)
    if w[0] < -tol * max(1.0, w[-1]):
        raise NumericalError(f"covariance not positive semidefinite: minimum eigenvalue {w[0]:.3e}")
    return V * np.sqrt(np.clip(w, 0.0, None))


def sample_layers(spec: FieldSpec, slab: Slab, N: int, rng) -> list:
    """Field layers ``1..N`` for every stream row; entry ``n`` has shape (rows, m_n)."""
    streams = as_stream(rng)
    rows = streams.rows
    sizes = [len(slab.codes[n]) for n in range(N + 1)]
    out = [None]
    if spec.kind == "iid_gaussian":
        for n in range(1, N + 1):
            out.append(spec.sigma * streams.normal_rows(sizes[n]))
    elif spec.kind == "iid_bernoulli":
        v0, v1 = spec.values
        for n in range(1, N + 1):
            u = streams.uniform_rows(sizes[n])
            out.append(np.where(u < spec.p, v1, v0))
    elif spec.kind == "ar_time":
        union, pos = _union_positions(slab, N)
        chains = ARChains(spec.a, spec.sigma, rows, len(union))
        for n in range(1, N + 1):
            out.append(chains.observe(n, pos[n], streams.normal_rows(sizes[n])))
    else:
        F = _gff_factor(spec, slab.walk, N)
        z = streams.normal_rows(F.shape[0])
        vals = z @ F.T
        start = 0
        for n in range(1, N + 1):
            out.append(vals[:, start : start + sizes[n]])
            start += sizes[n]
    return out


def sample_window(spec: FieldSpec, walk: WalkModel | Slab, N: int, rng) -> FieldSample:
    """Sample the field on every site reachable by the walk up to time ``N``."""
    slab = walk if isinstance(walk, Slab) else get_slab(walk, N)
    if slab.N < N:
        slab.extend(N)
    streams = as_stream(rng)
    seed = int(streams.keys[0]) if streams.rows == 1 else None
    layers = sample_layers(spec, slab, N, streams)
    if streams.rows == 1:
        layers = [None] + [x[0] for x in layers[1:]]
    return FieldSample(spec, slab, N, layers, seed)


def truncate_field(sample: FieldSample, l: float) -> FieldSample:
    """Pointwise ``max(w, -l)``."""
    layers = [None] + [np.maximum(x, -l) for x in sample.layers[1:]]
    return FieldSample(sample.spec, sample.slab, sample.N, layers, sample.seed)


# ---------------------------------------------------------------------------
# Exact exponential moments and correlation ratios


def _weights_to_arrays(weights) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(weights, Mapping):
        keys = list(weights.keys())
        if not keys:
            return np.zeros((0, 1), dtype=np.int64), np.zeros(0)
        sites = np.array([[k[0], *k[1]] for k in keys], dtype=np.int64)
        w = np.array([weights[k] for k in keys], dtype=float)
        return sites, w
    sites, w = weights
    return np.asarray(sites, dtype=np.int64), np.asarray(w, dtype=float)


def log_analytic_exp_moment(spec: FieldSpec, weights) -> float:
    """``log E[exp(sum_i w_i omega_{site_i})]`` for Gaussian and Bernoulli kinds.

    ``weights`` is either a mapping ``{(n, z): w}`` or a pair ``(sites, w)``
    with sites of shape (M, 1+d).  Repeated sites are merged.
    """
    sites, w = _weights_to_arrays(weights)
    if len(w) == 0 or not np.any(w):
        return 0.0
    uniq, inv = np.unique(sites, axis=0, return_inverse=True)
    wu = np.zeros(len(uniq))
    np.add.at(wu, inv.ravel(), w)
    if spec.is_gaussian:
        C = covariance(spec, uniq)
        return 0.5 * float(wu @ C @ wu)
    if spec.kind == "iid_bernoulli":
        return float(np.sum(log_mgf(spec, wu)))
    raise FieldError(f"no analytic oracle for field kind {spec.kind}")


def analytic_exp_moment(spec: FieldSpec, weights) -> float:
    return math.exp(log_analytic_exp_moment(spec, weights))


def l1_spacetime(a, b) -> int:
    return int(np.abs(np.asarray(a) - np.asarray(b)).sum())


def estimate_kappa(spec: FieldSpec, beta: float, center, family: Sequence) -> float:
    """Largest correlation ratio ``E[e^{b w_z + b S_I}] / (E[e^{b w_z}] E[e^{b S_I}])``.

    ``center`` is a space-time site ``(n, z...)`` and ``family`` a list of
    site sets ``I``, each at l1 space-time distance greater than 1 from the
    centre.  Independence makes the ratio exactly 1 for iid kinds; for
    Gaussian kinds it equals ``exp(b^2 sum_{v in I} Cov(w_z, w_v))``.
    """
    c = np.asarray(center, dtype=np.int64).ravel()
    best = -math.inf
    if not family:
        raise PreconditionError("kappa family is empty")
    for I in family:
        I = np.asarray(I, dtype=np.int64).reshape(-1, len(c))
        dmin = min(l1_spacetime(c, s) for s in I)
        if dmin <= 1:
            raise PreconditionError(f"kappa set must be at distance > 1 from the centre (got {dmin})")
        if spec.is_iid:
            ratio = 0.0
        elif spec.is_gaussian:
            cov = covariance(spec, c[None, :], I)
            ratio = beta**2 * float(cov.sum())
        else:
            raise FieldError(f"no analytic oracle for field kind {spec.kind}")
        best = max(best, ratio)
    return math.exp(best)


def cone_family(center, sizes: Sequence[int], offset: int = 2) -> list[np.ndarray]:
    """Nested sets ``I_m`` on the time column above ``center`` starting ``offset`` later."""
    c = np.asarray(center, dtype=np.int64).ravel()
    fam = []
    for m in sizes:
        pts = np.tile(c, (m, 1))
        pts[:, 0] += offset + np.arange(m)
        fam.append(pts)
    return fam


def default_kappa(spec: FieldSpec, beta: float, d: int = 3, depth: int = 64) -> float:
    """Correlation ratio over the time column above a site (the dominant direction)."""
    if spec.kind == "gff_gaussian":
        depth = min(depth, 8)
    center = np.zeros(d + 1, dtype=np.int64)
    center[0] = 1
    return estimate_kappa(spec, beta, center, cone_family(center, [depth]))


# ---------------------------------------------------------------------------
# Field values along sampled paths


def sample_along_paths(spec: FieldSpec, paths: np.ndarray, rng, groups: np.ndarray | None = None) -> np.ndarray:
    """Field values at ``(k, paths[r, p, k])`` for times ``k = 1..K``.

    ``paths`` has shape (R, P, K, d) (position at time ``k`` in slot
    ``k-1``); row ``r`` uses stream row ``r``.  Paths in the same row share
    one environment, so coinciding space-time points get identical values.
    ``groups`` (R, K) optionally splits time into independent pieces: AR
    chains are restarted from stationarity at the first visit inside each
    group.  Returns values of shape (R, P, K).
    """
    R, P, K, d = paths.shape
    streams = as_stream(rng)
    if spec.kind == "gff_gaussian":
        if groups is not None:
            raise FieldError("gff fields cannot be split into independent time groups")
        return _gff_along_paths(spec, paths, streams)
    if spec.kind == "iid_bernoulli":
        z = streams.uniform_rows(K * P).reshape(R, K, P)
    else:
        z = streams.normal_rows(K * P).reshape(R, K, P)
    # event (r, k, p) -> sort within (row, group, site) by time
    ev_sites = np.transpose(paths, (0, 2, 1, 3)).reshape(R * K * P, d)
    lo = ev_sites.min(axis=0)
    span = ev_sites.max(axis=0) - lo + 1
    site_code = np.ravel_multi_index((ev_sites - lo).T, tuple(span))
    row = np.repeat(np.arange(R), K * P)
    time = np.tile(np.repeat(np.arange(1, K + 1), P), R)
    grp = np.zeros(R * K * P, dtype=np.int64) if groups is None else np.repeat(np.asarray(groups).reshape(-1), P)
    order = np.lexsort((time, site_code, grp, row))
    same_chain = np.zeros(len(order), dtype=bool)
    o_prev = order[:-1]
    o_next = order[1:]
    same_chain[1:] = (row[o_next] == row[o_prev]) & (grp[o_next] == grp[o_prev]) & (site_code[o_next] == site_code[o_prev])
    prev = np.full(R * K * P, -1, dtype=np.int64)
    prev[order[1:]] = np.where(same_chain[1:], o_prev, -1)
    dup = (prev >= 0) & (time[np.maximum(prev, 0)] == time)
    vals = np.zeros(R * K * P)
    zf = z.reshape(-1)
    if spec.kind == "iid_bernoulli":
        v0, v1 = spec.values
        base = np.where(zf < spec.p, v1, v0)
    elif spec.kind == "iid_gaussian":
        base = spec.sigma * zf
    if spec.is_iid:
        vals = base.copy()
        # duplicates copy their primary (the first event in the chain at that time)
        for _ in range(P):
            vals[dup] = vals[prev[dup]]
        return vals.reshape(R, K, P).transpose(0, 2, 1)
    a, sigma = spec.a, spec.sigma
    idx_all = np.arange(R * K * P).reshape(R, K, P)
    for k in range(1, K + 1):
        e = idx_all[:, k - 1, :].reshape(-1)
        pe = prev[e]
        prim = ~dup[e]
        has = pe >= 0
        gap = np.where(has, k - time[np.maximum(pe, 0)], 0)
        coef = np.where(has, a ** gap.astype(float), 0.0)
        x = coef * vals[np.maximum(pe, 0)] + sigma * np.sqrt(1.0 - coef**2) * zf[e]
        x = np.where(prim, x, 0.0)
        vals[e] = x
        for _ in range(P):
            de = e[~prim]
            vals[de] = vals[prev[de]]
    return vals.reshape(R, K, P).transpose(0, 2, 1)


def _gff_along_paths(spec: FieldSpec, paths: np.ndarray, streams) -> np.ndarray:
    R, P, K, d = paths.shape
    out = np.empty((R, P, K))
    z_all = streams.normal_rows(K * P)
    for r in range(R):
        st = np.concatenate(
            [np.broadcast_to(np.arange(1, K + 1)[None, :, None], (P, K, 1)), paths[r]], axis=2
        ).reshape(-1, d + 1)
        uniq, inv = np.unique(st, axis=0, return_inverse=True)
        F = psd_factor(0.5 * (covariance(spec, uniq) + covariance(spec, uniq).T))
        vals = F @ z_all[r, : len(uniq)]
        out[r] = vals[inv.ravel()].reshape(P, K)
    return out
