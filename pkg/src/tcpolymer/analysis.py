"""Free energies, LLN traces, concentration, Lambda(beta), entropy criteria and phase scans.

Quenched and annealed estimates are paired: one set of disorder replicas
feeds both, so the gap ``rho - lambda`` has a small standard error.
Replica ``i`` always draws its field from ``derive_seed(seed, i)``; every
estimator is a deterministic function of the per-replica results taken in
replica order, so splitting replicas over workers does not change outputs.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .environment import (
    FieldSpec,
    covariance,
    default_kappa,
    dlog_mgf,
    esssup,
    log_mgf,
    log_truncated_mgf,
    sample_along_paths,
    sample_layers,
)
from .errors import FieldError, NumericalError, PreconditionError
from .partition import ANALYTIC_MAX_N, PolymerConfig, annealed_partition, log_partition_batch
from .rng import Streams, as_stream
from .walk import WalkModel, get_slab, steps_to_sites, walk_constants

DOMINANCE_FRACTION = 0.01
CI_Z = 2.0
REPLICA_BLOCK = 32
_CELL_BUDGET = 4_000_000


class DominanceWarning(UserWarning):
    """The annealed Monte Carlo mean is carried by a handful of replicas."""


class CancellationWarning(UserWarning):
    """A finite-difference step is below the noise floor of its inputs."""


# ---------------------------------------------------------------------------
# Per-replica disorder sweeps


@dataclass
class DisorderLogs:
    """``log Z`` and ``d log Z / d beta`` per replica, beta and N.

    Arrays have shape (R, len(betas), len(Ns)); ``replicas`` lists the
    replica indices in row order.
    """

    betas: np.ndarray
    Ns: tuple
    replicas: np.ndarray
    log_Z: np.ndarray
    dlog_Z: np.ndarray

    @staticmethod
    def merge(parts: Sequence["DisorderLogs"]) -> "DisorderLogs":
        parts = sorted(parts, key=lambda p: int(p.replicas[0]) if len(p.replicas) else -1)
        first = parts[0]
        return DisorderLogs(
            first.betas,
            first.Ns,
            np.concatenate([p.replicas for p in parts]),
            np.concatenate([p.log_Z for p in parts]),
            np.concatenate([p.dlog_Z for p in parts]),
        )


def replica_blocks(n_disorder: int, block: int = REPLICA_BLOCK) -> list[range]:
    """Fixed replica blocks; the unit of work handed to a worker."""
    return [range(s, min(n_disorder, s + block)) for s in range(0, n_disorder, block)]


def disorder_logs(walk: WalkModel, spec: FieldSpec, betas, Ns, seed: int, replicas,
                  truncate: float | None = None) -> DisorderLogs:
    """Run the transfer recursion for the given replicas at every beta and N.

    ``truncate`` replaces the field by ``max(w, -truncate)``.
    """
    betas = np.asarray(betas, dtype=float)
    Ns = tuple(int(n) for n in Ns)
    if min(Ns) < 1:
        raise PreconditionError("N must be at least 1")
    replicas = np.asarray(list(replicas), dtype=np.int64)
    N = max(Ns)
    slab = get_slab(walk, N)
    per = max(1, slab.total_sites(N) * max(1, len(betas)) * 2)
    chunk = max(1, min(REPLICA_BLOCK, _CELL_BUDGET // per))
    logs, dlogs = [], []
    for c0 in range(0, len(replicas), chunk):
        idx = replicas[c0 : c0 + chunk]
        rows = Streams.for_replicas(seed, idx.tolist())
        layers = sample_layers(spec, slab, N, rows)
        if truncate is not None:
            layers = [None] + [np.maximum(x, -truncate) for x in layers[1:]]
        lz, dz = log_partition_batch(slab, layers, betas, N, record=Ns, derivative=True)
        logs.append(lz)
        dlogs.append(dz)
    if not logs:
        shape = (0, len(betas), len(Ns))
        return DisorderLogs(betas, Ns, replicas, np.zeros(shape), np.zeros(shape))
    return DisorderLogs(betas, Ns, replicas, np.concatenate(logs), np.concatenate(dlogs))


# ---------------------------------------------------------------------------
# Estimate tables


@dataclass(frozen=True)
class EstimateRow:
    beta: float
    N: int
    rho_hat: float
    rho_se: float
    lambda_hat: float
    lambda_se: float
    lambda_prime: float
    Lambda_hat: float
    gap: float
    gap_se: float
    n_disorder: int
    seed: int

    COLUMNS = ("beta", "N", "rho_hat", "rho_se", "lambda_hat", "lambda_se", "lambda_prime",
               "Lambda_hat", "gap", "gap_se", "n_disorder", "seed")

    def values(self) -> tuple:
        return tuple(getattr(self, c) for c in self.COLUMNS)


@dataclass
class EstimateTable:
    rows: list
    notes: list = field(default_factory=list)

    def __post_init__(self):
        keys = [(r.beta, r.N, r.seed) for r in self.rows]
        if len(set(keys)) != len(keys):
            raise PreconditionError("estimate rows must be unique per (beta, N, seed)")

    def get(self, beta: float, N: int) -> EstimateRow:
        for r in self.rows:
            if r.beta == beta and r.N == N:
                return r
        raise KeyError((beta, N))

    def column(self, name: str, N: int | None = None) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows if N is None or r.N == N])


def _dominated(logs: np.ndarray) -> bool:
    """True when fewer than 1% of samples carry more than half of ``sum exp(logs)``."""
    w = np.exp(logs - logs.max())
    w = np.sort(w)[::-1]
    k = int(np.searchsorted(np.cumsum(w), 0.5 * w.sum())) + 1
    return k < DOMINANCE_FRACTION * len(w)


def _paired_annealed(lz: np.ndarray, dz: np.ndarray, N: int):
    """``(lambda_hat, lambda_se, lambda_prime, gap_influence)`` from paired replicas."""
    R = len(lz)
    top = lz.max()
    e = np.exp(lz - top)
    m = e.mean()
    lam = float(top + math.log(m)) / N
    ratio = e / m
    lam_se = float(ratio.std(ddof=1) / math.sqrt(R)) / N
    lam_prime = float(np.sum(e * dz) / np.sum(e)) / N
    gap_infl = (lz - ratio) / N
    return float(lam), lam_se, lam_prime, gap_infl


def estimate_table(logs: DisorderLogs, spec: FieldSpec, seed: int, walk: WalkModel | None = None,
                   annealed: str = "auto", kappa: float | None = None) -> EstimateTable:
    """Assemble :class:`EstimateRow` values from per-replica results.

    ``annealed="auto"`` uses the exact value for iid fields and the paired
    Monte Carlo estimate otherwise; ``"analytic"`` forces path enumeration
    (N <= 8) and ``"mc"`` forces the paired estimate.
    """
    R = logs.log_Z.shape[0]
    if R < 2:
        raise PreconditionError("n_disorder must be at least 2")
    rows, notes = [], []
    for b, beta in enumerate(logs.betas):
        beta = float(beta)
        Lam = lambda_capital(spec, beta, kappa=kappa).total
        for k, N in enumerate(logs.Ns):
            lz = logs.log_Z[:, b, k]
            dz = logs.dlog_Z[:, b, k]
            rho_v = lz / N
            rho = float(rho_v.mean())
            rho_se = float(rho_v.std(ddof=1) / math.sqrt(R))
            if beta == 0.0:
                rows.append(EstimateRow(0.0, N, 0.0, 0.0, 0.0, 0.0, _lambda_prime_zero(spec), Lam,
                                        0.0, 0.0, R, seed))
                continue
            mode = annealed
            if mode == "auto":
                mode = "exact" if spec.is_iid else "mc"
            if mode == "exact" or (mode == "analytic" and spec.is_iid):
                lam = float(log_mgf(spec, beta))
                lam_se = 0.0
                lam_prime = float(dlog_mgf(spec, beta))
                gap_se = rho_se
            elif mode == "analytic":
                if walk is None:
                    raise PreconditionError("analytic annealed values need the walk")
                res = annealed_partition(PolymerConfig(walk, beta, N), spec, "analytic")
                lam, lam_se, lam_prime = res.log_EZ / N, 0.0, res.dlog_EZ / N
                gap_se = rho_se
            elif mode == "mc":
                lam, lam_se, lam_prime, infl = _paired_annealed(lz, dz, N)
                gap_se = float(infl.std(ddof=1) / math.sqrt(R))
                if _dominated(lz):
                    msg = f"annealed mean at beta={beta}, N={N} carried by <1% of replicas"
                    notes.append(msg)
                    warnings.warn(msg, DominanceWarning, stacklevel=2)
            else:
                raise PreconditionError(f"unknown annealed mode {annealed!r}")
            rows.append(EstimateRow(beta, N, rho, rho_se, lam, lam_se, lam_prime, Lam,
                                    rho - lam, gap_se, R, seed))
    return EstimateTable(rows, notes)


def _lambda_prime_zero(spec: FieldSpec) -> float:
    if spec.kind == "gff_gaussian":
        return 0.0
    return float(dlog_mgf(spec, 0.0))


def free_energy_sweep(walk: WalkModel, spec: FieldSpec, betas, Ns, n_disorder: int, seed: int = 0,
                      annealed: str = "auto", kappa: float | None = None) -> EstimateTable:
    """Paired quenched and annealed estimates on a (beta, N) grid."""
    if n_disorder < 2:
        raise PreconditionError("n_disorder must be at least 2")
    logs = disorder_logs(walk, spec, betas, Ns, seed, range(n_disorder))
    return estimate_table(logs, spec, seed, walk, annealed, kappa)


def quenched_free_energy(walk: WalkModel, spec: FieldSpec, betas, Ns, n_disorder: int, seed: int = 0):
    """``{(beta, N): (rho_hat, se)}`` with ``rho_hat`` the disorder mean of ``N^-1 log Z_N``.

    At each N this is also the superadditive proxy ``N^-1 E log Z_N`` whose
    supremum over N is the limit.
    """
    table = free_energy_sweep(walk, spec, betas, Ns, n_disorder, seed)
    return {(r.beta, r.N): (r.rho_hat, r.rho_se) for r in table.rows}


def annealed_free_energy(walk: WalkModel, spec: FieldSpec, betas, Ns, mode: str = "analytic",
                         n_disorder: int = 1000, seed: int = 0):
    """``{(beta, N): (lambda_hat, se)}``; exact for iid fields in analytic mode."""
    out = {}
    for beta in betas:
        for N in Ns:
            if beta == 0.0:
                out[(float(beta), int(N))] = (0.0, 0.0)
                continue
            if mode == "analytic" and spec.is_iid:
                out[(float(beta), int(N))] = (float(log_mgf(spec, beta)), 0.0)
                continue
            res = annealed_partition(PolymerConfig(walk, float(beta), int(N)), spec, mode, n_disorder, seed)
            out[(float(beta), int(N))] = (res.log_EZ / N, res.se / N)
    return out


# ---------------------------------------------------------------------------
# Annealed derivative


@dataclass
class DerivativeEstimate:
    value: float
    method: str
    h: float | None = None
    richardson_error: float | None = None
    noise_floor: float | None = None
    notes: list = field(default_factory=list)


def annealed_derivative(spec: FieldSpec, beta: float, N: int, mode: str = "analytic",
                        walk: WalkModel | None = None, n_disorder: int = 1000, seed: int = 0) -> DerivativeEstimate:
    """``lambda'_N(beta)``: tilted mean of ``N^-1 sum w`` or a central difference.

    ``mode="analytic"`` is exact for iid fields and enumerates paths
    otherwise (N <= 8).  ``mode="fd"`` differentiates the annealed estimate
    with step ``h = max(1e-4, 1e-3 beta)`` and a Richardson check; Monte
    Carlo inputs use common seeds on both sides.
    """
    if N < 1:
        raise PreconditionError("N must be at least 1")
    from .walk import nn3d

    walk = walk or nn3d()
    if mode == "analytic":
        if spec.is_iid:
            return DerivativeEstimate(float(dlog_mgf(spec, beta)), "analytic")
        if N > ANALYTIC_MAX_N:
            raise PreconditionError(f"analytic derivative limited to N <= {ANALYTIC_MAX_N}; use mode='fd'")
        res = annealed_partition(PolymerConfig(walk, beta, N), spec, "analytic")
        return DerivativeEstimate(res.dlog_EZ / N, "analytic")
    if mode != "fd":
        raise PreconditionError(f"unknown derivative mode {mode!r}")
    sub = "analytic" if (spec.is_iid or N <= ANALYTIC_MAX_N) else "mc"

    def lam(b):
        b = max(b, 0.0)
        if b == 0.0:
            return 0.0, 0.0
        if sub == "analytic" and spec.is_iid:
            return float(log_mgf(spec, b)), 0.0
        r = annealed_partition(PolymerConfig(walk, b, N), spec, sub, n_disorder, seed)
        return r.log_EZ / N, r.se / N

    h = max(1e-4, beta * 1e-3)
    if beta >= h:
        (f_hi, s_hi), (f_lo, s_lo) = lam(beta + h), lam(beta - h)
        d1 = (f_hi - f_lo) / (2 * h)
        d2 = (lam(beta + h / 2)[0] - lam(beta - h / 2)[0]) / h
        rich, err = (4 * d2 - d1) / 3, abs(d2 - d1) / 3
        span = 2 * h
    else:
        # one-sided at the boundary beta = 0: first-order error, Richardson weights (2, -1)
        (f_hi, s_hi), (f_lo, s_lo) = lam(beta + h), lam(beta)
        d1 = (f_hi - f_lo) / h
        d2 = (lam(beta + h / 2)[0] - f_lo) / (h / 2)
        rich, err = 2 * d2 - d1, abs(d2 - d1)
        span = h
    floor = math.sqrt(s_hi**2 + s_lo**2) / span + 4 * np.finfo(float).eps * max(1.0, abs(f_hi)) / span
    notes = [f"h={h!r}"]
    if err < floor and sub == "mc":
        msg = f"finite-difference step h={h} below the noise floor {floor:.3e}"
        notes.append(msg)
        warnings.warn(msg, CancellationWarning, stacklevel=2)
    return DerivativeEstimate(float(rich), "fd", h, float(err), float(floor), notes)


# ---------------------------------------------------------------------------
# Lambda(beta)


@dataclass(frozen=True)
class LambdaDecomposition:
    """``total = log_kappa + log_m2 + 2 log_m_minus``."""

    total: float
    log_kappa: float
    log_m2: float
    log_m_minus: float
    kappa1: float
    kappa2: float


def _site_log_mgf(spec: FieldSpec, t: float, d: int = 3) -> float:
    if spec.kind == "gff_gaussian":
        site = np.zeros((1, d + 1), dtype=np.int64)
        site[0, 0] = 1
        v = float(covariance(spec, site)[0, 0])
        return 0.5 * t * t * v
    return float(log_mgf(spec, t))


def literal_kappas(spec: FieldSpec, beta: float, kappa: float = 1.0, r0: int = 4, d: int = 3) -> tuple[float, float]:
    """Jensen-type constants built from a base correlation constant ``kappa``.

    ``kappa1 = sup_{|x-y|_1 <= r0} kappa^b E[e^{w_x + w_y}]^b / E[e^{b w_x + b w_y}]`` over
    pairs on the time column, and ``kappa2 = kappa^{2b} (E[e^{-w}]^b / E[e^{-b w}])^2``.
    """
    if not spec.is_gaussian and spec.kind != "iid_bernoulli":
        raise FieldError(f"no moment oracle for {spec.kind}")
    k2 = 2 * beta * math.log(kappa) + 2 * (beta * _site_log_mgf(spec, -1.0, d) - _site_log_mgf(spec, -beta, d))
    best = -math.inf
    for r in range(1, r0 + 1):
        x = np.zeros((2, d + 1), dtype=np.int64)
        x[:, 0] = [1, 1 + r]
        if spec.is_gaussian:
            C = covariance(spec, x)
            s = float(C.sum())
            val = beta * 0.5 * s - 0.5 * beta * beta * s
        else:
            val = 2 * (beta * _site_log_mgf(spec, 1.0, d) - _site_log_mgf(spec, beta, d))
        best = max(best, val)
    return math.exp(beta * math.log(kappa) + best), math.exp(k2)


def lambda_capital(spec: FieldSpec, beta: float, kappa: float | None = None,
                   kappas: tuple[float, float] | None = None, d: int = 3) -> LambdaDecomposition:
    """``Lambda = log kappa1 kappa2 + log E e^{2 b w} + 2 log E e^{-b w}``.

    By default ``kappa1 = kappa2 = kappa`` with ``kappa`` the correlation
    ratio from :func:`environment.default_kappa` (exactly 1 for iid
    fields); ``kappas`` overrides both, e.g. with :func:`literal_kappas`.
    """
    if beta < 0:
        raise PreconditionError("beta must be non-negative")
    if kappas is None:
        k = default_kappa(spec, beta, d) if kappa is None else kappa
        kappas = (k, k)
    k1, k2 = kappas
    if not (k1 > 0 and k2 > 0):
        raise NumericalError(f"kappa estimates must be positive, got {kappas}")
    lk = math.log(k1) + math.log(k2)
    m2 = _site_log_mgf(spec, 2 * beta, d)
    mm = _site_log_mgf(spec, -beta, d)
    total = lk + m2 + 2 * mm
    if not math.isfinite(total):
        raise NumericalError(f"Lambda not finite at beta={beta}")
    if beta == 0.0:
        total, lk, m2, mm = 0.0, 0.0, 0.0, 0.0
    return LambdaDecomposition(total, lk, m2, mm, k1, k2)


# ---------------------------------------------------------------------------
# Law of large numbers for the running field average


@dataclass
class LLNTrace:
    checkpoints: np.ndarray
    running_avg: np.ndarray  # (R, len(checkpoints))

    def variance(self, N: int) -> float:
        k = int(np.searchsorted(self.checkpoints, N))
        if k >= len(self.checkpoints) or self.checkpoints[k] != N:
            raise KeyError(N)
        return float(self.running_avg[:, k].var(ddof=1))

    def terminal(self) -> np.ndarray:
        return self.running_avg[:, -1]


def lln_trace(walk: WalkModel, spec: FieldSpec, N_max: int, n_paths: int, rng=0,
              checkpoints: Sequence[int] | None = None, replica_offset: int = 0) -> LLNTrace:
    """Running averages ``N^-1 sum_{k<=N} w_{k,S_k}`` for independent (field, path) pairs."""
    if N_max < 10:
        raise PreconditionError("N_max must be at least 10")
    if n_paths < 1:
        raise PreconditionError("n_paths must be at least 1")
    master = int(as_stream(rng).keys[0])
    if checkpoints is None:
        checkpoints = sorted({int(round(N_max / 2**k)) for k in range(0, 8) if N_max / 2**k >= 1})
    cps = np.asarray(sorted(set(int(c) for c in checkpoints)), dtype=np.int64)
    if cps[0] < 1 or cps[-1] > N_max:
        raise PreconditionError("checkpoints must lie in 1..N_max")
    out = []
    for start in range(replica_offset, replica_offset + n_paths, REPLICA_BLOCK):
        idx = list(range(start, min(replica_offset + n_paths, start + REPLICA_BLOCK)))
        steps = Streams.for_replicas(master, idx, 0).choice_rows(walk.cdf, N_max)
        pos = steps_to_sites(walk, steps)[:, None, 1:, :]
        w = sample_along_paths(spec, pos, Streams.for_replicas(master, idx, 1))[:, 0, :]
        csum = np.cumsum(w, axis=1)
        out.append(csum[:, cps - 1] / cps[None, :])
    return LLNTrace(cps, np.concatenate(out))


# ---------------------------------------------------------------------------
# Concentration of log Z_N


@dataclass
class ConcentrationResult:
    N: int
    eps: float
    beta: float
    tail: float
    tail_se: float
    bound: float
    passed: bool
    n_disorder: int
    note: str = "the bound is asymptotic: it holds for N >= N0(beta, eps), which is not known"


def concentration_bound(N: int, eps: float) -> float:
    return math.exp(-(eps ** (2.0 / 3.0)) * N ** (1.0 / 3.0) / 4.0)


def concentration_from_logs(log_Z: np.ndarray, N: int, eps, beta: float) -> list[ConcentrationResult]:
    n = len(log_Z)
    dev = np.abs(log_Z - log_Z.mean())
    out = []
    for e in np.atleast_1d(eps):
        e = float(e)
        f = float(np.mean(dev > e * N))
        se = math.sqrt(f * (1 - f) / n)
        bound = concentration_bound(N, e)
        out.append(ConcentrationResult(N, e, beta, f, se, bound, f <= bound + 3 * se, n))
    return out


def concentration_test(walk: WalkModel, spec: FieldSpec, beta: float, N: int, eps, n_disorder: int = 1000,
                       seed: int = 0) -> ConcentrationResult | list[ConcentrationResult]:
    """Empirical ``P(|log Z_N - mean| > eps N)`` against ``exp(-eps^{2/3} N^{1/3} / 4)``."""
    if n_disorder < 1000:
        raise PreconditionError("concentration_test needs n_disorder >= 1000")
    if beta == 0.0:
        lz = np.zeros(n_disorder)
    else:
        logs = disorder_logs(walk, spec, [beta], [N], seed, range(n_disorder))
        lz = logs.log_Z[:, 0, 0]
    res = concentration_from_logs(lz, N, eps, beta)
    return res if np.ndim(eps) else res[0]


# ---------------------------------------------------------------------------
# Entropy criterion


@dataclass
class WindowTest:
    log_inv_p: float
    K_prime: float
    satisfied: bool


@dataclass
class CriterionRecord:
    beta: float
    lhs: float
    rhs: float
    satisfied: bool
    window: WindowTest | None = None


def _lam_and_prime(spec: FieldSpec, beta: float):
    return float(log_mgf(spec, beta)), float(dlog_mgf(spec, beta))


def entropy_criterion(walk: WalkModel, spec: FieldSpec, beta: float, lam: float | None = None,
                      lam_prime: float | None = None, kappa: float = 1.0, window: bool | None = None) -> CriterionRecord:
    """``beta lambda' - lambda > K(S) H(S_1)`` and, for bounded fields, the window test.

    The window test compares ``log 1/P(w = top)`` with
    ``K(S) H(S_1) + K'`` where ``K' = 2 log kappa``: the entropy criterion
    is then met at large beta, since ``beta lambda' - lambda`` eventually
    exceeds ``log 1/P(w = top) - 2 log kappa``.
    """
    _, h, K = walk_constants(walk)
    rhs = K * h
    if lam is None or lam_prime is None:
        l0, l1 = _lam_and_prime(spec, beta)
        lam = l0 if lam is None else lam
        lam_prime = l1 if lam_prime is None else lam_prime
    lhs = beta * lam_prime - lam
    win = None
    if window or (window is None and spec.kind == "iid_bernoulli"):
        _, p = esssup(spec)
        log_inv_p = -math.log(p)
        k_prime = 2.0 * math.log(kappa)
        win = WindowTest(log_inv_p, k_prime, log_inv_p - k_prime >= rhs)
    return CriterionRecord(float(beta), float(lhs), float(rhs), bool(lhs > rhs), win)


def criterion_threshold(walk: WalkModel, spec: FieldSpec, beta_max: float = 50.0) -> float | None:
    """Smallest beta with ``beta lambda' - lambda = K(S) H(S_1)``, or None below ``beta_max``."""
    _, h, K = walk_constants(walk)
    rhs = K * h

    def f(b):
        l0, l1 = _lam_and_prime(spec, b)
        return b * l1 - l0 - rhs

    if f(beta_max) <= 0:
        return None
    return float(brentq(f, 0.0, beta_max, xtol=1e-12))


@dataclass
class AsymptoteTrace:
    betas: np.ndarray
    trace: np.ndarray
    target: float
    band: tuple
    enters_and_stays: bool
    monotone: bool


def entropy_gap_asymptote(spec: FieldSpec, betas, kappa: float = 1.0, tol: float = 1e-3, tail: int = 3) -> AsymptoteTrace:
    """``beta lambda' - lambda`` against ``log 1/P(w = top)`` within ``log kappa^2``."""
    top, p = esssup(spec)
    betas = np.asarray(sorted(betas), dtype=float)
    tr = np.array([b * float(dlog_mgf(spec, b)) - float(log_mgf(spec, b)) for b in betas])
    target = -math.log(p)
    width = abs(2.0 * math.log(kappa))
    band = (target - width - tol, target + width + tol)
    k = min(tail, len(tr))
    inside = (tr[-k:] >= band[0]) & (tr[-k:] <= band[1])
    mono = bool(np.all(np.diff(tr) >= -1e-12))
    return AsymptoteTrace(betas, tr, target, band, bool(inside.all()), mono)


# ---------------------------------------------------------------------------
# Truncation sweep


@dataclass
class TruncationSweep:
    betas: np.ndarray
    ls: np.ndarray
    rho: np.ndarray  # (len(ls), len(betas))
    lam: np.ndarray
    rho_full: np.ndarray
    lam_full: np.ndarray

    @property
    def rho_distance(self) -> np.ndarray:
        return np.abs(self.rho - self.rho_full[None, :]).max(axis=1)

    @property
    def lam_distance(self) -> np.ndarray:
        return np.abs(self.lam - self.lam_full[None, :]).max(axis=1)


def truncation_sweep(walk: WalkModel, spec: FieldSpec, betas, N: int, ls, n_disorder: int = 200,
                     seed: int = 0) -> TruncationSweep:
    """Free energies on ``max(w, -l)`` with common seeds across ``l``."""
    ls = np.asarray(ls, dtype=float)
    if np.any(np.diff(ls) <= 0):
        raise PreconditionError("l grid must be increasing")
    betas = np.asarray(betas, dtype=float)

    def estimates(trunc):
        logs = disorder_logs(walk, spec, betas, [N], seed, range(n_disorder), truncate=trunc)
        lz = logs.log_Z[:, :, 0]
        rho = lz.mean(axis=0) / N
        lam = np.empty(len(betas))
        for b, beta in enumerate(betas):
            if beta == 0.0:
                lam[b] = 0.0
            elif spec.is_iid:
                lam[b] = log_truncated_mgf(spec, beta, trunc) if trunc is not None else float(log_mgf(spec, beta))
            else:
                top = lz[:, b].max()
                lam[b] = (top + math.log(np.mean(np.exp(lz[:, b] - top)))) / N
        return rho, lam

    rf, lf = estimates(None)
    rho = np.empty((len(ls), len(betas)))
    lam = np.empty((len(ls), len(betas)))
    for i, l in enumerate(ls):
        rho[i], lam[i] = estimates(float(l))
    return TruncationSweep(betas, ls, rho, lam, rf, lf)


# ---------------------------------------------------------------------------
# Phase scan


@dataclass
class PhaseScanRow:
    beta: float
    gap: float
    gap_lo: float
    gap_hi: float
    monotone_ok: bool
    bracket_lo: float | None
    bracket_hi: float | None

    COLUMNS = ("beta", "gap", "gap_lo", "gap_hi", "monotone_ok", "bracket_lo", "bracket_hi")

    def values(self) -> tuple:
        return tuple(getattr(self, c) for c in self.COLUMNS)


@dataclass
class PhaseScanReport:
    betas: np.ndarray
    gap: np.ndarray
    gap_se: np.ndarray
    N: int
    monotone: bool
    bracket: tuple | None
    rows: list
    trend: np.ndarray
    table: EstimateTable

    @property
    def detected(self) -> bool:
        return self.bracket is not None


def phase_report(table: EstimateTable, betas) -> PhaseScanReport:
    """Gap CIs at the largest N, monotonicity verdicts and the critical-beta bracket."""
    betas = np.asarray(betas, dtype=float)
    if np.any(np.diff(betas) <= 0):
        raise PreconditionError("beta grid must be strictly increasing")
    Ns = sorted({r.N for r in table.rows})
    N = Ns[-1]
    gap = np.array([table.get(b, N).gap for b in betas])
    se = np.array([table.get(b, N).gap_se for b in betas])
    if len(Ns) > 1:
        trend = gap - np.array([table.get(b, Ns[-2]).gap for b in betas])
    else:
        trend = np.zeros(len(betas))
    lo, hi = gap - CI_Z * se, gap + CI_Z * se
    ok = np.ones(len(betas), dtype=bool)
    for i in range(1, len(betas)):
        ok[i] = gap[i] <= gap[i - 1] + CI_Z * math.sqrt(se[i] ** 2 + se[i - 1] ** 2)
    below = np.flatnonzero(hi < 0)
    bracket = None
    if len(below):
        j = int(below[0])
        contains = [i for i in range(j) if lo[i] <= 0 <= hi[i]]
        b_lo = float(betas[contains[-1]]) if contains else None
        bracket = (b_lo, float(betas[j]))
    rows = [PhaseScanRow(float(b), float(g), float(a), float(c), bool(m),
                         bracket[0] if bracket else None, bracket[1] if bracket else None)
            for b, g, a, c, m in zip(betas, gap, lo, hi, ok)]
    return PhaseScanReport(betas, gap, se, N, bool(ok.all()), bracket, rows, trend, table)


def phase_scan(walk: WalkModel, spec: FieldSpec, betas, Ns, n_disorder: int, seed: int = 0,
               annealed: str = "auto") -> PhaseScanReport:
    """Scan ``rho - lambda`` over a beta grid with paired seeds."""
    Ns = sorted(set(int(n) for n in Ns))
    table = free_energy_sweep(walk, spec, betas, Ns, n_disorder, seed, annealed)
    return phase_report(table, betas)
