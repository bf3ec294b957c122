"""Auxiliary ternary randomness, regeneration times and block-normalised processes.

The ternary sequence ``eps_1, eps_2, ...`` is i.i.d. with law
``Q(1) = Q(-1) = 1/4`` and ``Q(0) = 1/2``.  It defines the auxiliary fields

    eta_{n,z} = 2 w_{n,z} 1{eps_n = 0}
    xi_{n,z}  = -beta l               if eps_n = +-1
              = log(2 e^{beta w(l)} - e^{-beta l})   if eps_n = 0

with ``w(l) = max(w, -l)``, so that ``E_Q exp(xi) = exp(beta w(l))`` site by
site.  A regeneration time is the end of a run of ``L`` ones followed by a
non-one symbol; at such times the xi-field carries no information about the
preceding ``L`` layers, which is what makes blocks between consecutive
regenerations nearly independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._kernels import codes_to_grid, layer, next_layer
from .environment import (
    ARChains,
    FieldSample,
    FieldSpec,
    log_truncated_mgf,
    sample_along_paths,
    truncate_field,
)
from .errors import FieldError, NumericalError, PreconditionError, RegenerationError, ResourceCapError
from .partition import PolymerConfig, forward
from .rng import Stream, Streams, as_stream, derive_seed
from .walk import WalkModel, get_slab, steps_to_sites

Q_ONE = 0.25
Q_MINUS = 0.25
Q_ZERO = 0.5
SLAB_CACHE_N = 96


@dataclass(frozen=True)
class EpsilonSeq:
    """Ternary symbols; ``values[k-1]`` is ``eps_k``."""

    values: np.ndarray
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.values)

    def at(self, k: int) -> int:
        return int(self.values[k - 1])


def epsilon_from_uniform(u: np.ndarray) -> np.ndarray:
    """``u < 1/4 -> 1``, ``u < 1/2 -> -1``, otherwise ``0``."""
    return np.where(u < Q_ONE, 1, np.where(u < Q_ONE + Q_MINUS, -1, 0)).astype(np.int8)


def sample_epsilon(n: int, rng) -> EpsilonSeq:
    if n < 1:
        raise PreconditionError("epsilon length must be at least 1")
    s = as_stream(rng)
    return EpsilonSeq(epsilon_from_uniform(s.uniform_rows(n)[0]), int(s.keys[0]))


def _eps_array(eps) -> np.ndarray:
    return np.asarray(eps.values if isinstance(eps, EpsilonSeq) else eps)


def _broadcast_eps(sample: FieldSample, eps: np.ndarray):
    if len(eps) < sample.N:
        raise PreconditionError(f"epsilon covers {len(eps)} times, window needs {sample.N}")
    return eps


def eta_field(sample: FieldSample, eps) -> FieldSample:
    e = _broadcast_eps(sample, _eps_array(eps))
    layers = [None] + [np.where(e[n - 1] == 0, 2.0 * sample.layers[n], 0.0) for n in range(1, sample.N + 1)]
    return FieldSample(sample.spec, sample.slab, sample.N, layers, sample.seed)


def xi_values(omega: np.ndarray, eps_zero, beta: float, l: float) -> np.ndarray:
    """xi at sites with field ``omega``; ``eps_zero`` marks ``eps = 0``."""
    wl = np.maximum(omega, -l)
    # log(2 e^{b wl} - e^{-b l}) = b wl + log(2 - e^{-b (wl + l)}), argument in [1, 2)
    on_zero = beta * wl + np.log(2.0 - np.exp(-beta * (wl + l)))
    return np.where(eps_zero, on_zero, -beta * l)


def xi_field(sample: FieldSample, eps, beta: float, l: float) -> FieldSample:
    if beta < 0 or not l > 0:
        raise PreconditionError("xi needs beta >= 0 and l > 0")
    e = _broadcast_eps(sample, _eps_array(eps))
    layers = [None] + [xi_values(sample.layers[n], e[n - 1] == 0, beta, l) for n in range(1, sample.N + 1)]
    return FieldSample(sample.spec, sample.slab, sample.N, layers, sample.seed)


@dataclass
class XiAverage:
    """Monte Carlo ``E_Q Z^{1,xi}_N`` against the truncated-field ``Z^{beta,w(l)}_N``."""

    log_mean: float
    rel_se: float
    log_target: float
    n_eps: int

    @property
    def z_score(self) -> float:
        return (math.exp(self.log_mean - self.log_target) - 1.0) / self.rel_se if self.rel_se > 0 else 0.0


def xi_partition_average(config: PolymerConfig, sample: FieldSample, l: float, n_eps: int, rng=0,
                         chunk: int = 2000) -> XiAverage:
    """Average ``Z^{1,xi(l)}_N`` over ``n_eps`` independent eps sequences for one field.

    Site by site ``E_Q e^{xi} = e^{beta w(l)}`` and the eps symbols at
    different times are independent, so the average is unbiased for
    ``Z^{beta,w(l)}_N``.
    """
    if sample.batched:
        raise PreconditionError("xi_partition_average takes a single field sample")
    if n_eps < 2:
        raise PreconditionError("n_eps must be at least 2")
    N, beta = config.N, config.beta
    slab = sample.slab
    master = int(as_stream(rng).keys[0])
    logs = []
    for c0 in range(0, n_eps, chunk):
        idx = range(c0, min(n_eps, c0 + chunk))
        eps = epsilon_from_uniform(Streams.for_replicas(master, idx).uniform_rows(N))
        logf = [None] + [xi_values(sample.layers[n][None, :], (eps[:, n - 1] == 0)[:, None], beta, l)
                         for n in range(1, N + 1)]
        out, _ = forward(slab, logf, N, [N])
        logs.append(out[:, 0])
    lz = np.concatenate(logs)
    top = lz.max()
    e = np.exp(lz - top)
    m = e.mean()
    trunc = truncate_field(sample, l)
    target, _ = forward(slab, [None] + [beta * trunc.layers[n][None, :] for n in range(1, N + 1)], N, [N])
    return XiAverage(float(top + math.log(m)), float(e.std(ddof=1) / math.sqrt(n_eps) / m),
                     float(target[0, 0]), n_eps)


# ---------------------------------------------------------------------------
# Regeneration times


def _run_lengths(eps: np.ndarray) -> np.ndarray:
    """Length of the run of ones ending at each index (last axis)."""
    ones = eps == 1
    n = eps.shape[-1]
    idx = np.arange(n)
    last_break = np.where(ones, -1, idx)
    last_break = np.maximum.accumulate(last_break, axis=-1)
    return idx - last_break


def regeneration_mask(eps: np.ndarray, L: int) -> np.ndarray:
    """Boolean mask over times ``1..n`` marking regenerations (last axis)."""
    eps = np.asarray(eps)
    run = _run_lengths(eps)
    prev_run = np.concatenate([np.zeros(eps.shape[:-1] + (1,), dtype=run.dtype), run[..., :-1]], axis=-1)
    return (eps != 1) & (prev_run >= L)


def regeneration_times(eps, L: int, horizon: int | None = None) -> list[int]:
    """Greedy left-to-right regeneration times ``tau_1 < tau_2 < ...`` up to ``horizon``."""
    if L < 1:
        raise PreconditionError("L must be at least 1")
    e = _eps_array(eps)
    if horizon is not None:
        e = e[:horizon]
    taus = []
    run = 0
    last = 0
    for j in range(1, len(e) + 1):
        v = e[j - 1]
        if v != 1 and run >= L and j >= last + L and j >= L + 1:
            taus.append(j)
            last = j
        run = run + 1 if v == 1 else 0
    return taus


def is_regeneration(eps, L: int, j: int) -> bool:
    e = _eps_array(eps)
    if j < L + 1 or j > len(e):
        return False
    return bool(np.all(e[j - L - 1 : j - 1] == 1) and e[j - 1] != 1)


@dataclass
class RegenerationTrace:
    L: int
    l: float
    taus: list
    scaled_gaps: np.ndarray
    eta: FieldSample | None = None
    xi: FieldSample | None = None


def regeneration_trace(sample: FieldSample, eps, beta: float, L: int, l: float) -> RegenerationTrace:
    taus = regeneration_times(eps, L, sample.N)
    gaps = np.diff(np.concatenate([[0], taus])) / 4.0**L
    return RegenerationTrace(L, l, taus, gaps, eta_field(sample, eps), xi_field(sample, eps, beta, l))


# ---------------------------------------------------------------------------
# The run-length chain: exact law of tau_1 and weighted block sums


def _chain(L: int, f_one: float = 1.0, f_minus: float = 1.0, f_zero: float = 1.0):
    """Weighted transitions on run lengths ``0..L`` and absorption weights.

    ``A[u, v]`` is the weight of one step from ``u`` to ``v`` that does not
    regenerate; ``b[u]`` the probability of regenerating next (its site
    weight is excluded, as it belongs to the following block).
    """
    A = np.zeros((L + 1, L + 1))
    for u in range(L + 1):
        A[u, min(u + 1, L)] += Q_ONE * f_one
        if u < L:
            A[u, 0] += Q_MINUS * f_minus + Q_ZERO * f_zero
    b = np.zeros(L + 1)
    b[L] = Q_MINUS + Q_ZERO
    return A, b


def tau_distribution(L: int, tol: float = 1e-17, t_max: int | None = None) -> np.ndarray:
    """``pmf[t]`` = Q(tau_1 = t) for t = 0..T (exact propagation)."""
    A, b = _chain(L)
    t_max = t_max or 400 * 4**L
    v = np.zeros(L + 1)
    v[0] = 1.0
    pmf = [0.0]
    for _ in range(t_max):
        pmf.append(float(v @ b))
        v = v @ A
        if v.sum() < tol:
            break
    return np.array(pmf)


def tau_exact_moment(L: int, p: float) -> float:
    """Exact ``E_Q[(4^{-L} tau_1)^p]^{1/p}``."""
    pmf = tau_distribution(L)
    t = np.arange(len(pmf)) / 4.0**L
    return float(np.sum(pmf * t**p) ** (1.0 / p))


def tau_mean_exact(L: int) -> float:
    """``E_Q[tau_1]`` from the first-passage linear system."""
    A, b = _chain(L)
    m = np.linalg.solve(np.eye(L + 1) - A, np.ones(L + 1))
    return float(m[0])


@dataclass
class TauEstimate:
    L: int
    p: float
    moment: float
    se: float
    censored_frac: float
    n_samples: int


def sample_first_regeneration(L: int, n_samples: int, rng, horizon: int | None = None) -> np.ndarray:
    """First regeneration time per sample (0 where censored at ``horizon``)."""
    horizon = horizon or 100 * 4**L
    streams = as_stream(rng)
    keys = [derive_seed(int(streams.keys[0]), i) for i in range(n_samples)]
    out = np.zeros(n_samples, dtype=np.int64)
    chunk_len = min(horizon, max(64, 8 * 4**L))
    rows = max(1, 4_000_000 // chunk_len)
    for r0 in range(0, n_samples, rows):
        ks = Streams(np.array(keys[r0 : r0 + rows], dtype=np.uint64))
        m = ks.rows
        found = np.zeros(m, dtype=np.int64)
        carry = np.zeros(m, dtype=np.int64)
        done_t = 0
        while done_t < horizon and np.any(found == 0):
            c = min(chunk_len, horizon - done_t)
            eps = epsilon_from_uniform(ks.uniform_rows(c))
            run = _run_lengths(eps)
            # runs continuing from the previous chunk
            leading = np.cumprod(eps == 1, axis=1).astype(bool)
            run = run + np.where(leading, carry[:, None], 0)
            prev = np.concatenate([carry[:, None], run[:, :-1]], axis=1)
            hit = (eps != 1) & (prev >= L)
            if done_t == 0:
                hit[:, : min(L, c)] = False
            first = np.where(hit.any(axis=1), hit.argmax(axis=1) + 1 + done_t, 0)
            newly = (found == 0) & (first > 0)
            found[newly] = first[newly]
            carry = run[:, -1]
            done_t += c
        out[r0 : r0 + m] = found
    return out


def tau_moments(L: int, p, n_samples: int, rng, horizon: int | None = None) -> list[TauEstimate] | TauEstimate:
    """Monte Carlo ``E_Q[(4^{-L} tau_1)^p]^{1/p}`` for one or several ``p``."""
    ps = np.atleast_1d(p).astype(float)
    if np.any(ps < 1):
        raise PreconditionError("moment order p must be at least 1")
    if n_samples < 100:
        raise PreconditionError("tau_moments needs n_samples >= 100")
    tau = sample_first_regeneration(L, n_samples, rng, horizon)
    ok = tau > 0
    cens = 1.0 - ok.mean()
    x = tau[ok] / 4.0**L
    out = []
    for q in ps:
        xp = x**q
        m = xp.mean()
        se_m = xp.std(ddof=1) / math.sqrt(len(xp))
        est = m ** (1.0 / q)
        out.append(TauEstimate(L, float(q), float(est), float(est / (q * m) * se_m), float(cens), n_samples))
    return out if np.ndim(p) else out[0]


# ---------------------------------------------------------------------------
# Block normalisation


@dataclass
class BlockConstants:
    """Block means of the xi-weights under the decoupled field.

    ``psi0``: first block (times ``1 .. tau_1 - 1``); ``psi``: later blocks
    (the regeneration site ``tau_j`` and the times up to ``tau_{j+1} - 1``);
    ``phi_end``: the last regeneration site alone.
    """

    psi0: float
    psi: float
    phi_end: float
    psi0_se: float = 0.0
    psi_se: float = 0.0
    exact: bool = True
    radius: float = 0.0

    def log_norm(self, n: int) -> float:
        return math.log(self.psi0) + (n - 1) * math.log(self.psi) + math.log(self.phi_end)

    def rel_se(self, n: int) -> float:
        return self.psi0_se / self.psi0 + (n - 1) * self.psi_se / self.psi


def _site_factors(spec: FieldSpec, beta: float, l: float) -> tuple[float, float]:
    """``(e^{-beta l}, E[2 e^{beta w(l)} - e^{-beta l}])`` for a single site."""
    el = math.exp(-beta * l)
    ml = math.exp(log_truncated_mgf(spec, beta, l))
    return el, 2.0 * ml - el


def _check_radius(A: np.ndarray, beta: float, L: int) -> float:
    rho = float(np.max(np.abs(np.linalg.eigvals(A))))
    if rho >= 1.0:
        raise NumericalError(
            f"block normalisation diverges at beta={beta}, L={L}: weighted spectral radius {rho:.6f} >= 1"
        )
    return rho


def block_constants(walk: WalkModel, spec: FieldSpec, beta: float, l: float, L: int,
                    n_inner: int = 10**4, rng=0) -> BlockConstants:
    """Exact block constants for iid fields, Rao-Blackwellised Monte Carlo otherwise."""
    el, f0 = _site_factors(spec, beta, l)
    phi_end = (Q_MINUS * el + Q_ZERO * f0) / (Q_MINUS + Q_ZERO)
    A, b = _chain(L, el, el, f0)
    rho = _check_radius(A, beta, L)
    if spec.is_iid:
        x = np.linalg.solve(np.eye(L + 1) - A, b)
        psi0 = float(x[0])
        return BlockConstants(psi0, psi0 * phi_end, phi_end, radius=rho)
    if spec.kind != "ar_time":
        raise FieldError("block normalisation needs a time-stationary field (iid or ar_time)")
    if n_inner < 1000:
        raise PreconditionError("n_inner must be at least 1000")
    T = int(math.ceil(45.0 / -math.log(rho))) + L + 2
    if T > 20000:
        raise ResourceCapError(f"block horizon {T} too long for beta={beta}, L={L}")
    streams = as_stream(rng)
    master = int(streams.keys[0])
    chunk = max(1, min(n_inner, 3_000_000 // T))
    psi0_s, psi_s = [], []
    for c0 in range(0, n_inner, chunk):
        m = min(chunk, n_inner - c0)
        rows = Streams.for_replicas(master, range(c0, c0 + m), 7)
        idx = rows.choice_rows(walk.cdf, T)
        pos = steps_to_sites(walk, idx)  # times 0..T, position at time 0 is the origin
        omega = sample_along_paths(spec, pos[:, None, :, :], rows)[:, 0, :]  # times 0..T
        wl_factor = 2.0 * np.exp(beta * np.maximum(omega, -l)) - el
        lead = (Q_MINUS * el + Q_ZERO * wl_factor[:, 0]) / (Q_MINUS + Q_ZERO)
        p0, tail = _weighted_block_sums(wl_factor[:, 1:], el, L)
        if np.any(tail > 1e-9 * p0):
            raise NumericalError("block sums not converged within the horizon; beta too large for this L")
        psi0_s.append(p0)
        psi_s.append(lead * p0)
    psi0_s = np.concatenate(psi0_s)
    psi_s = np.concatenate(psi_s)
    n = len(psi0_s)
    return BlockConstants(
        float(psi0_s.mean()), float(psi_s.mean()), phi_end,
        float(psi0_s.std(ddof=1) / math.sqrt(n)), float(psi_s.std(ddof=1) / math.sqrt(n)),
        exact=False, radius=rho,
    )


def _weighted_block_sums(f_zero: np.ndarray, el: float, L: int) -> tuple[np.ndarray, np.ndarray]:
    """``E_Q[prod_{k < tau} f_k(eps_k)]`` given per-time factors, integrating eps exactly.

    ``f_zero`` (R, T) holds the factor on ``eps = 0`` at times ``1..T``;
    ``eps = +-1`` always weigh ``el``.  Returns the sums and the weight still
    alive after ``T`` steps.
    """
    R, T = f_zero.shape
    V = np.zeros((R, L + 1))
    V[:, 0] = 1.0
    total = np.zeros(R)
    for k in range(T):
        total += V[:, L] * (Q_MINUS + Q_ZERO)
        new = np.zeros_like(V)
        new[:, 1:] += V[:, :-1] * (Q_ONE * el)
        new[:, L] += V[:, L] * (Q_ONE * el)
        new[:, 0] += V[:, :L].sum(axis=1) * (Q_MINUS * el + Q_ZERO * f_zero[:, k])
        V = new
    return total, V.sum(axis=1)


# ---------------------------------------------------------------------------
# Block-normalised partition processes


@dataclass
class MartingaleStats:
    """Samples of ``H_n`` and ``L_n`` for ``n = 1..n_blocks``.

    ``log_H[r, n-1]`` and ``log_L[r, n-1]`` are per-replica logs;
    ``delta[r, j-1]`` is the realised block correction
    ``log H_j - log H_{j-1} - (log L_j - log L_{j-1})``.
    """

    n_blocks: int
    L: int
    l: float
    beta: float
    log_H: np.ndarray
    log_L: np.ndarray
    constants: BlockConstants
    taus: list = field(default_factory=list)
    log_lr: np.ndarray | None = None

    @property
    def H(self) -> np.ndarray:
        return np.exp(self.log_H)

    @property
    def L_values(self) -> np.ndarray:
        return np.exp(self.log_L)

    @property
    def delta(self) -> np.ndarray:
        d = self.log_H - self.log_L
        return np.diff(np.concatenate([np.zeros((d.shape[0], 1)), d], axis=1), axis=1)

    @property
    def weighted_H(self) -> np.ndarray:
        """``H_n dQ/dQ~``: unbiased for ``E E_Q[H_n]`` under the eps proposal."""
        lr = 0.0 if self.log_lr is None else self.log_lr
        return np.exp(self.log_H + lr)

    def mean(self) -> np.ndarray:
        return self.weighted_H.mean(axis=0)

    def second_moment(self) -> np.ndarray:
        lr = 0.0 if self.log_lr is None else self.log_lr
        return np.exp(2 * self.log_H + lr).mean(axis=0)

    def se(self) -> np.ndarray:
        """Standard error of the mean of ``H_n`` including normalisation uncertainty."""
        H = self.weighted_H
        R = H.shape[0]
        mc = H.std(axis=0, ddof=1) / math.sqrt(R) if R > 1 else np.zeros(self.n_blocks)
        rel = np.array([self.constants.rel_se(n) for n in range(1, self.n_blocks + 1)])
        return np.sqrt(mc**2 + (H.mean(axis=0) * rel) ** 2)


def _eps_until(L: int, n_blocks: int, key: int, horizon: int) -> tuple[np.ndarray, list]:
    s = Stream(key)
    chunk = max(64, 4 ** (L + 1) * n_blocks)
    eps = np.zeros(0, dtype=np.int8)
    while True:
        take = min(chunk, horizon - len(eps))
        if take <= 0:
            raise RegenerationError(
                f"insufficient regenerations: fewer than {n_blocks} within horizon {horizon} (L={L})"
            )
        eps = np.concatenate([eps, epsilon_from_uniform(s.uniform(take))])
        taus = regeneration_times(eps, L)
        if len(taus) >= n_blocks:
            T = taus[n_blocks - 1]
            return eps[:T], taus[:n_blocks]


@dataclass(frozen=True)
class EpsilonProposal:
    """Doob transform of the run-length chain weighted by the mean site factors.

    Under this law the product of mean site factors over a block, times the
    likelihood ratio ``dQ/dQ~``, is the same constant for every
    realisation, which removes the heavy tail that long blocks give the
    plain estimator.  ``cdf[r]`` is the cumulative law of ``(1, -1, 0)`` in
    run state ``r``; ``log_lr[r]`` the matching ``log Q - log Q~``.
    """

    L: int
    cdf: np.ndarray
    log_lr: np.ndarray

    @classmethod
    def build(cls, L: int, el: float, f0: float) -> "EpsilonProposal":
        A, b = _chain(L, el, el, f0)
        rho = float(np.max(np.abs(np.linalg.eigvals(A))))
        if rho >= 1.0:
            raise NumericalError(f"eps proposal undefined: weighted spectral radius {rho:.6f} >= 1 at L={L}")
        h = np.linalg.solve(np.eye(L + 1) - A, b)
        q = np.array([Q_ONE, Q_MINUS, Q_ZERO])
        probs = np.zeros((L + 1, 3))
        for r in range(L):
            nxt = min(r + 1, L)
            probs[r] = [Q_ONE * el * h[nxt], Q_MINUS * el * h[0], Q_ZERO * f0 * h[0]]
            probs[r] /= h[r]
        regen = (Q_MINUS + Q_ZERO) / h[L]
        split = Q_MINUS * el + Q_ZERO * f0
        probs[L] = [Q_ONE * el, regen * Q_MINUS * el / split, regen * Q_ZERO * f0 / split]
        probs /= probs.sum(axis=1, keepdims=True)
        return cls(L, np.cumsum(probs, axis=1), np.log(q)[None, :] - np.log(probs))

    @classmethod
    def plain(cls, L: int) -> "EpsilonProposal":
        return cls.build(L, 1.0, 1.0)


_SYMBOLS = np.array([1, -1, 0], dtype=np.int8)


def _eps_proposal(prop: EpsilonProposal, n_blocks: int, key: int, horizon: int):
    """Sample eps from ``prop`` until the ``n_blocks``-th regeneration.

    Returns ``(eps, taus, log_lr)`` with ``log_lr[j]`` the likelihood ratio
    ``log dQ/dQ~`` of ``eps_1..eps_{tau_{j+1}}``.
    """
    s = Stream(key)
    L = prop.L
    chunk = max(64, 4 ** (L + 1) * n_blocks)
    eps = np.zeros(horizon, dtype=np.int8)
    taus, lrs = [], []
    r, lr, t = 0, 0.0, 0
    while t < horizon:
        for u in s.uniform(min(chunk, horizon - t)):
            k = int(np.searchsorted(prop.cdf[r], u, side="right"))
            k = min(k, 2)
            eps[t] = _SYMBOLS[k]
            lr += prop.log_lr[r, k]
            t += 1
            if k == 0:
                r = min(r + 1, L)
                continue
            if r == L:
                taus.append(t)
                lrs.append(lr)
                if len(taus) == n_blocks:
                    return eps[:t], taus, np.array(lrs)
            r = 0
    raise RegenerationError(f"insufficient regenerations: fewer than {n_blocks} within horizon {horizon} (L={L})")


def _replica_logs(walk, spec, beta, l, L, n_blocks, key, horizon, prop: EpsilonProposal):
    """``(log Z_tau_j(omega), log Z_tau_j(omega*), taus, log_lr)`` for j = 1..n_blocks."""
    eps, taus, log_lr = _eps_proposal(prop, n_blocks, derive_seed(key, 0), horizon)
    T = taus[-1]
    slab = get_slab(walk, min(T, SLAB_CACHE_N))
    field_stream = Stream(derive_seed(key, 1))
    el = -beta * l
    ar = spec.kind == "ar_time"
    radius = walk.reach * T
    K = 2 if ar else 1
    if ar:
        chains = ARChains(spec.a, spec.sigma, 1, (2 * radius + 1) ** walk.d)
        delta = np.zeros((2 * radius + 1) ** walk.d)
        anchor = 0
    starts = {t: j for j, t in enumerate(taus)}
    layer_sites = {}

    def logf(n, codes):
        nonlocal anchor
        m = len(codes)
        if ar and n in starts:
            s = n - L - 1
            seen = np.flatnonzero(chains.time >= 1)
            delta[:] = 0.0
            if s >= 1 and len(seen):
                z = field_stream.normal_rows(2 * len(seen))
                past = chains.observe(s, seen, z[:, : len(seen)])[0]
                delta[seen] = past - spec.sigma * z[0, len(seen):]
            anchor = s
        if eps[n - 1] != 0:
            return np.full((K, m), el)
        if spec.kind == "ar_time":
            pos = codes_to_grid(codes, slab._base, slab._span, radius, walk.d)
            w = chains.observe(n, pos, field_stream.normal_rows(m))[0]
            w_star = w - spec.a ** (n - anchor) * delta[pos] if anchor > 0 else w
            return np.vstack([xi_values(w, True, beta, l), xi_values(w_star, True, beta, l)])
        if spec.kind == "iid_gaussian":
            w = spec.sigma * field_stream.normal(m)
        else:
            v0, v1 = spec.values
            w = np.where(field_stream.uniform(m) < spec.p, v1, v0)
        return xi_values(w, True, beta, l)[None, :]

    out, _ = forward_lazy(slab, logf, T, taus)
    return out[0], out[-1], taus, log_lr


def forward_lazy(slab, logf_fn, N: int, record):
    """:func:`partition.forward` with per-layer factors produced on demand.

    Layers beyond the cached slab are generated on the fly and discarded.
    """
    probs = slab.walk.probs
    rec = {n: i for i, n in enumerate(record)}
    w = None
    offset = None
    out = None
    for n, codes, pred in iter_layers(slab, N):
        x = logf_fn(n, codes)
        if w is None:
            K = x.shape[0]
            w = np.ones((K, 1))
            offset = np.zeros(K)
            out = np.zeros((K, len(record)))
        w, xmax = layer(w, pred, probs, x)
        scale = w.max(axis=1)
        w /= scale[:, None]
        offset += xmax + np.log(scale)
        if n in rec:
            out[:, rec[n]] = offset + np.log(w.sum(axis=1))
    return out, None


def iter_layers(slab, N: int):
    """Yield ``(n, codes, preds)`` for n = 1..N, extending past the cache lazily."""
    for n in range(1, min(N, slab.N) + 1):
        yield n, slab.codes[n], slab.preds[n]
    prev = slab.codes[slab.N] if N > slab.N else None
    step_codes = slab._step_codes
    for n in range(slab.N + 1, N + 1):
        cand, pred = next_layer(prev, step_codes)
        yield n, cand, pred
        prev = cand


def H_process(
    config: PolymerConfig,
    spec: FieldSpec,
    L: int,
    l: float,
    n_blocks: int,
    n_inner: int = 10**4,
    rng=0,
    n_replicas: int = 100,
    horizon: int | None = None,
    replica_offset: int = 0,
    proposal: str = "tilted",
    tilt: float = 0.75,
) -> MartingaleStats:
    """Samples of the block-normalised processes ``L_n`` and ``H_n``.

    ``L_n = Z^{1,xi}_{tau_n}(omega) / D_n`` and ``H_n = Z^{1,xi}_{tau_n}(omega*) / D_n``
    where ``omega*`` replaces, inside every block, the conditional mean of
    the field given the layers up to ``tau_j - L - 1`` by an independent copy;
    for iid fields ``omega* = omega``.  ``D_n`` is the exact mean of the
    numerator, a product of block constants.

    With ``proposal="tilted"`` the eps sequence is drawn from the Doob
    transform of its run-length chain weighted by the mean site factors
    raised to ``tilt`` (:class:`EpsilonProposal`), and every replica carries
    the likelihood ratio.  ``"plain"`` samples eps from ``Q`` directly,
    which is unbiased too but heavy tailed.  ``tilt = 1`` makes the eps part
    of the weight constant at the price of longer blocks.
    """
    if spec.kind == "gff_gaussian":
        raise FieldError("H process needs a time-stationary field; gff_gaussian on a finite box is not")
    walk, beta = config.walk, config.beta
    if n_blocks < 1:
        raise PreconditionError("n_blocks must be at least 1")
    streams = as_stream(rng)
    master = int(streams.keys[0])
    consts = block_constants(walk, spec, beta, l, L, n_inner, derive_seed(master, 1 << 40)) if beta > 0 else BlockConstants(1.0, 1.0, 1.0)
    horizon = horizon or 100 * 4**L * n_blocks
    if not 0.0 <= tilt <= 1.0:
        raise PreconditionError("tilt must lie in [0, 1]")
    if proposal == "tilted" and beta > 0:
        el, f0 = _site_factors(spec, beta, l)
        prop = EpsilonProposal.build(L, el**tilt, f0**tilt)
    elif proposal in ("tilted", "plain"):
        prop = EpsilonProposal.plain(L)
    else:
        raise PreconditionError(f"unknown eps proposal {proposal!r}")
    logH = np.zeros((n_replicas, n_blocks))
    log_lr = np.zeros((n_replicas, n_blocks))
    logL = np.zeros((n_replicas, n_blocks))
    taus_all = []
    norms = np.array([consts.log_norm(n) for n in range(1, n_blocks + 1)])
    for r in range(n_replicas):
        key = derive_seed(master, replica_offset + r)
        if beta == 0.0:
            _, taus = _eps_until(L, n_blocks, derive_seed(key, 0), horizon)
            taus_all.append(taus)
            continue
        lz, lz_star, taus, lr = _replica_logs(walk, spec, beta, l, L, n_blocks, key, horizon, prop)
        logL[r] = lz - norms
        logH[r] = lz_star - norms
        log_lr[r] = lr
        taus_all.append(taus)
    return MartingaleStats(n_blocks, L, l, beta, logH, logL, consts, taus_all, log_lr)


# ---------------------------------------------------------------------------
# Two-replica second moment


@dataclass
class SecondMoment:
    log_m2: np.ndarray
    se: np.ndarray
    slope: float
    slope_se: float
    n_samples: int


def second_moment_probe(walk: WalkModel, spec: FieldSpec, beta: float, L: int, l: float, n_blocks: int,
                        n_samples: int, rng=0, n_inner: int = 10**4) -> SecondMoment:
    """``log E E_Q[H_n^2]`` for n = 1..n_blocks by sampling two replica paths.

    ``E[(Z*)^2] = E_Q E^{S, S'} E[exp(sum xi*(S) + sum xi*(S'))]``; the field
    is sampled jointly along both paths with independent blocks, exactly as
    the decoupled field is distributed.
    """
    if spec.kind == "gff_gaussian":
        raise FieldError("second-moment probe needs a time-stationary field")
    streams = as_stream(rng)
    master = int(streams.keys[0])
    consts = block_constants(walk, spec, beta, l, L, n_inner, derive_seed(master, 1 << 40))
    horizon = 100 * 4**L * n_blocks
    eps_list, tau_list = [], []
    for r in range(n_samples):
        e, t = _eps_until(L, n_blocks, derive_seed(master, r, 0), horizon)
        eps_list.append(e)
        tau_list.append(t)
    T = max(t[-1] for t in tau_list)
    R = n_samples
    eps = np.ones((R, T), dtype=np.int8)
    groups = np.zeros((R, T), dtype=np.int64)
    for r, (e, t) in enumerate(zip(eps_list, tau_list)):
        eps[r, : len(e)] = e
        g = np.zeros(T, dtype=np.int64)
        for j, tj in enumerate(t, start=1):
            g[tj - 1 :] = j
        groups[r] = g
    rows = Streams.for_replicas(master, range(R), 1)
    idx = rows.choice_rows(walk.cdf, 2 * T).reshape(R, 2, T)
    pos = steps_to_sites(walk, idx)[:, :, 1:, :]
    sub = Streams.for_replicas(master, range(R), 2)
    omega = sample_along_paths(spec, pos, sub, groups=groups)
    xi = xi_values(omega, (eps == 0)[:, None, :], beta, l).sum(axis=1)
    cum = np.cumsum(xi, axis=1)
    A = np.array([[cum[r, tj - 1] for tj in t] for r, t in enumerate(tau_list)])
    log_norm = np.array([consts.log_norm(n) for n in range(1, n_blocks + 1)])
    top = A.max(axis=0)
    e = np.exp(A - top)
    m = e.mean(axis=0)
    log_m2 = top + np.log(m) - 2 * log_norm
    se = e.std(axis=0, ddof=1) / math.sqrt(R) / m
    rel = np.array([consts.rel_se(n) for n in range(1, n_blocks + 1)])
    se = np.sqrt(se**2 + (2 * rel) ** 2)
    n = np.arange(1, n_blocks + 1, dtype=float)
    X = np.column_stack([np.ones_like(n), n])
    coef, *_ = np.linalg.lstsq(X, log_m2, rcond=None)
    cov = np.linalg.inv(X.T @ X)
    resid = log_m2 - X @ coef
    dof = max(1, n_blocks - 2)
    s2 = max(float(resid @ resid) / dof, float(np.mean(se**2)))
    return SecondMoment(log_m2, se, float(coef[1]), float(math.sqrt(s2 * cov[1, 1])), R)
