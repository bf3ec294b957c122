"""Point-to-line partition functions: layered DP, exact enumeration, annealed sums."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .environment import FieldSample, FieldSpec, covariance, dlog_mgf, log_mgf, sample_layers
from ._kernels import layer, layer_derivative
from .errors import ConfigError, EnumerationTooLarge, PreconditionError, WindowError
from .rng import Streams, as_stream
from .walk import ENUMERATION_CAP, Slab, WalkModel, enumerate_path_arrays, get_slab

ANALYTIC_MAX_N = 8


@dataclass(frozen=True)
class PolymerConfig:
    walk: WalkModel
    beta: float
    N: int

    def __post_init__(self):
        if not self.beta >= 0:
            raise ConfigError(f"beta must be non-negative, got {self.beta}")
        if self.N < 0:
            raise ConfigError(f"N must be non-negative, got {self.N}")


@dataclass
class PartitionResult:
    """``log_Z`` and the polymer endpoint weights on layer ``N`` (summing to 1)."""

    log_Z: float
    endpoint_weights: np.ndarray | None
    method: str
    notes: list = field(default_factory=list)
    sites: np.ndarray | None = None


def forward(
    slab: Slab,
    logf: list,
    N: int,
    record=None,
    cadence: int = 1,
    dlogf: list | None = None,
    keep_last: bool = False,
):
    """Layered transfer recursion in log space.

    ``logf[n]`` holds log site factors for layer ``n`` with shape (K, m_n)
    (any batch ``K``).  Each layer is multiplied by ``exp(logf - max)`` and
    the weights are rescaled by their maximum every ``cadence`` layers, so
    nothing overflows.  Returns ``log Z`` at the layers in ``record``
    (shape (K, len(record))); with ``dlogf`` also the derivative ratio
    ``sum(w') / sum(w)`` where ``w'`` propagates ``d logf``.
    """
    probs = slab.walk.probs
    K = logf[1].shape[0] if N > 0 else 1
    record = [N] if record is None else list(record)
    rec_set = {n: i for i, n in enumerate(record)}
    out = np.zeros((K, len(record)))
    dout = np.zeros((K, len(record))) if dlogf is not None else None
    w = np.ones((K, 1))
    dw = np.zeros((K, 1)) if dlogf is not None else None
    offset = np.zeros(K)
    if 0 in rec_set:
        out[:, rec_set[0]] = 0.0
    for n in range(1, N + 1):
        pred = slab.preds[n]
        if dw is not None:
            w, dw, xmax = layer_derivative(w, dw, pred, probs, logf[n], dlogf[n])
        else:
            w, xmax = layer(w, pred, probs, logf[n])
        offset += xmax
        if n % cadence == 0 or n == N:
            scale = w.max(axis=1)
            scale = np.where(scale > 0, scale, 1.0)
            w /= scale[:, None]
            if dw is not None:
                dw /= scale[:, None]
            offset += np.log(scale)
        if n in rec_set:
            tot = w.sum(axis=1)
            out[:, rec_set[n]] = offset + np.log(tot)
            if dw is not None:
                dout[:, rec_set[n]] = dw.sum(axis=1) / tot
    if keep_last:
        return out, dout, w
    return out, dout


def _check_window(config: PolymerConfig, sample: FieldSample) -> None:
    if sample.N >= config.N and sample.slab.walk == config.walk:
        return
    slab = get_slab(config.walk, config.N)
    for n in range(1, config.N + 1):
        need = slab.sites(n)
        if n > sample.N:
            raise WindowError(f"window missing site {(n, tuple(need[0].tolist()))}")
        idx = sample.slab.index(n, need)
        if np.any(idx < 0):
            z = need[np.argmax(idx < 0)]
            raise WindowError(f"window missing site {(n, tuple(z.tolist()))}")
    raise WindowError("field sample was drawn for a different walk; resample on this walk's window")


def _single_layers(sample: FieldSample, N: int) -> list:
    return [None] + [np.atleast_2d(sample.layers[n]) for n in range(1, N + 1)]


def quenched_partition_dp(config: PolymerConfig, sample: FieldSample, cadence: int = 1) -> PartitionResult:
    """``Z_N`` for one field sample by the transfer recursion."""
    _check_window(config, sample)
    if sample.batched:
        raise PreconditionError("quenched_partition_dp takes a single field sample")
    N, beta = config.N, config.beta
    slab = sample.slab
    layers = _single_layers(sample, N)
    logf = [None] + [beta * x for x in layers[1:]]
    out, _, w = forward(slab, logf, N, [N], cadence, keep_last=True)
    endpoint = w[0] / w[0].sum()
    log_z = 0.0 if beta == 0.0 else float(out[0, 0])
    return PartitionResult(log_z, endpoint, "dp", sites=slab.sites(N))


def _path_layer_indices(slab: Slab, sites: np.ndarray) -> np.ndarray:
    P, n1, _ = sites.shape
    idx = np.empty((P, n1 - 1), dtype=np.int64)
    for n in range(1, n1):
        idx[:, n - 1] = slab.index(n, sites[:, n, :])
    return idx


def quenched_partition_enum(config: PolymerConfig, sample: FieldSample, cap: int = ENUMERATION_CAP) -> PartitionResult:
    """Reference ``Z_N`` summing every path with compensated summation."""
    _check_window(config, sample)
    N, beta = config.N, config.beta
    slab = sample.slab
    sites, logp = enumerate_path_arrays(config.walk, N, cap)
    idx = _path_layer_indices(slab, sites)
    energy = np.zeros(len(logp))
    for n in range(1, N + 1):
        energy += np.asarray(sample.layers[n])[idx[:, n - 1]]
    logterm = logp + beta * energy
    top = logterm.max()
    terms = np.exp(logterm - top)
    total = math.fsum(terms.tolist())
    end_idx = idx[:, -1] if N > 0 else np.zeros(len(logp), dtype=np.int64)
    m = len(slab.codes[N])
    end = np.zeros(m)
    np.add.at(end, end_idx, terms)
    log_z = 0.0 if beta == 0.0 else top + math.log(total)
    return PartitionResult(log_z, end / total, "enumeration", sites=slab.sites(N))


def endpoint_distribution(config: PolymerConfig, sample: FieldSample) -> tuple[np.ndarray, np.ndarray]:
    """``(sites, probabilities)`` of the polymer endpoint at time ``N``."""
    res = quenched_partition_dp(config, sample)
    return res.sites, res.endpoint_weights


def log_partition_batch(slab: Slab, layers: list, betas, N: int, record=None, cadence: int = 1, derivative: bool = False):
    """``log Z`` for a batch of field replicas and several inverse temperatures.

    ``layers[n]`` has shape (R, m_n).  Returns an array (R, B, len(record))
    and, with ``derivative``, the matching ``d log Z / d beta``.
    """
    betas = np.atleast_1d(np.asarray(betas, dtype=float))
    R = layers[1].shape[0] if N > 0 else 1
    B = len(betas)
    logf = [None] + [(betas[None, :, None] * x[:, None, :]).reshape(R * B, -1) for x in layers[1 : N + 1]]
    dlogf = None
    if derivative:
        dlogf = [None] + [np.broadcast_to(x[:, None, :], (R, B, x.shape[1])).reshape(R * B, -1) for x in layers[1 : N + 1]]
    rec = [N] if record is None else list(record)
    out, dout = forward(slab, logf, N, rec, cadence, dlogf)
    out = out.reshape(R, B, len(rec))
    out[:, betas == 0.0, :] = 0.0
    if derivative:
        return out, dout.reshape(R, B, len(rec))
    return out


# ---------------------------------------------------------------------------
# Annealed partition function


@dataclass
class AnnealedResult:
    log_EZ: float
    se: float
    method: str
    dlog_EZ: float | None = None
    notes: list = field(default_factory=list)


def path_log_moments(spec: FieldSpec, sites: np.ndarray, beta: float) -> tuple[np.ndarray, np.ndarray]:
    """``log E[exp(beta sum_n w_{n,S_n})]`` for each enumerated path and its beta-derivative."""
    P, n1, d = sites.shape
    N = n1 - 1
    if N == 0:
        return np.zeros(P), np.zeros(P)
    if spec.kind == "iid_bernoulli":
        return N * float(log_mgf(spec, beta)) * np.ones(P), N * float(dlog_mgf(spec, beta)) * np.ones(P)
    if spec.kind == "iid_gaussian":
        v = N * spec.sigma**2 * np.ones(P)
    elif spec.kind == "ar_time":
        same = np.all(sites[:, 1:, None, :] == sites[:, None, 1:, :], axis=3)
        lag = np.abs(np.arange(1, n1)[:, None] - np.arange(1, n1)[None, :])
        v = spec.sigma**2 * np.einsum("pij,ij->p", same.astype(float), spec.a ** lag.astype(float))
    else:
        times = np.arange(1, n1)
        st = np.concatenate([np.broadcast_to(times[None, :, None], (P, N, 1)), sites[:, 1:, :]], axis=2)
        uniq, inv = np.unique(st.reshape(-1, d + 1), axis=0, return_inverse=True)
        C = covariance(spec, uniq)
        inv = inv.reshape(P, N)
        v = C[inv[:, :, None], inv[:, None, :]].sum(axis=(1, 2))
    return 0.5 * beta**2 * v, beta * v


def annealed_partition(
    config: PolymerConfig,
    spec: FieldSpec,
    mode: str = "analytic",
    n_disorder: int = 1000,
    rng=0,
) -> AnnealedResult:
    """``log E[Z_N]``: exact path sum (``analytic``) or Monte Carlo (``mc``)."""
    N, beta, walk = config.N, config.beta, config.walk
    if mode == "analytic":
        if spec.is_iid:
            return AnnealedResult(N * float(log_mgf(spec, beta)), 0.0, "analytic", N * float(dlog_mgf(spec, beta)))
        if N > ANALYTIC_MAX_N:
            raise EnumerationTooLarge(f"analytic annealed sum limited to N <= {ANALYTIC_MAX_N} (got {N})")
        sites, logp = enumerate_path_arrays(walk, N)
        lm, dlm = path_log_moments(spec, sites, beta)
        a = logp + lm
        log_ez = float(logsumexp(a))
        wts = np.exp(a - log_ez)
        return AnnealedResult(log_ez, 0.0, "analytic", float(np.sum(wts * dlm)))
    if mode != "mc":
        raise ConfigError(f"unknown annealed mode {mode!r}")
    if n_disorder < 2:
        raise PreconditionError("mc mode needs n_disorder >= 2")
    streams = as_stream(rng)
    slab = get_slab(walk, N)
    chunk = max(1, min(n_disorder, 2_000_000 // max(1, slab.total_sites(N))))
    logs = []
    dlogs = []
    for start in range(0, n_disorder, chunk):
        rows = Streams.for_replicas(streams.keys[0].item(), range(start, min(n_disorder, start + chunk)))
        layers = sample_layers(spec, slab, N, rows)
        lz, dz = log_partition_batch(slab, layers, [beta], N, derivative=True)
        logs.append(lz[:, 0, 0])
        dlogs.append(dz[:, 0, 0])
    lz = np.concatenate(logs)
    dz = np.concatenate(dlogs)
    log_mean, se = log_mean_exp(lz)
    wts = np.exp(lz - lz.max())
    return AnnealedResult(log_mean, se, "mc", float(np.sum(wts * dz) / np.sum(wts)))


def log_mean_exp(x: np.ndarray) -> tuple[float, float]:
    """``log(mean(exp(x)))`` and its delta-method standard error."""
    x = np.asarray(x, dtype=float)
    top = x.max()
    e = np.exp(x - top)
    m = e.mean()
    se = e.std(ddof=1) / math.sqrt(len(x)) / m if len(x) > 1 else math.nan
    return float(top + math.log(m)), float(se)
