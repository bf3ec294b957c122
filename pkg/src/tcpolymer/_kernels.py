"""Compiled inner loops of the layered transfer recursion."""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def propagate(w, pred, probs, x, xmax, out):
    """``out[r, i] = sum_s probs[s] w[r, pred[s, i]] * exp(x[r, i] - xmax[r])``.

    ``pred`` entries equal to ``w.shape[1]`` mark missing predecessors.
    """
    K, m = out.shape
    mp = w.shape[1]
    k = pred.shape[0]
    for r in range(K):
        for i in range(m):
            acc = 0.0
            for s in range(k):
                j = pred[s, i]
                if j < mp:
                    acc += probs[s] * w[r, j]
            out[r, i] = acc * math.exp(x[r, i] - xmax[r])


@njit(cache=True)
def propagate_derivative(w, dw, pred, probs, x, xmax, dx, out, dout):
    """:func:`propagate` together with the forward derivative weights."""
    K, m = out.shape
    mp = w.shape[1]
    k = pred.shape[0]
    for r in range(K):
        for i in range(m):
            acc = 0.0
            dacc = 0.0
            for s in range(k):
                j = pred[s, i]
                if j < mp:
                    acc += probs[s] * w[r, j]
                    dacc += probs[s] * dw[r, j]
            f = math.exp(x[r, i] - xmax[r])
            out[r, i] = acc * f
            dout[r, i] = (dacc + acc * dx[r, i]) * f


def layer(w, pred, probs, x):
    """One layer of the recursion; returns ``(new weights, row maxima of x)``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    xmax = x.max(axis=1)
    out = np.empty_like(x)
    propagate(np.ascontiguousarray(w), pred, probs, x, xmax, out)
    return out, xmax


def layer_derivative(w, dw, pred, probs, x, dx):
    x = np.ascontiguousarray(x, dtype=np.float64)
    dx = np.ascontiguousarray(np.broadcast_to(dx, x.shape), dtype=np.float64)
    xmax = x.max(axis=1)
    out = np.empty_like(x)
    dout = np.empty_like(x)
    propagate_derivative(np.ascontiguousarray(w), np.ascontiguousarray(dw), pred, probs, x, xmax, dx, out, dout)
    return out, dout, xmax


_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0


@njit(cache=True)
def _word(key, ctr):
    z = key + ctr * _GAMMA
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(cache=True)
def fill_words(keys, start, out):
    rows, count = out.shape
    for r in range(rows):
        k = keys[r]
        for i in range(count):
            out[r, i] = _word(k, start + np.uint64(i + 1))


@njit(cache=True)
def fill_uniform(keys, start, out):
    rows, count = out.shape
    for r in range(rows):
        k = keys[r]
        for i in range(count):
            out[r, i] = (_word(k, start + np.uint64(i + 1)) >> _S11) * _INV53


@njit(cache=True)
def fill_normal(keys, start, out):
    rows, count = out.shape
    two_pi = 2.0 * math.pi
    for r in range(rows):
        k = keys[r]
        for i in range(0, count, 2):
            u1 = (_word(k, start + np.uint64(i + 1)) >> _S11) * _INV53
            u2 = (_word(k, start + np.uint64(i + 2)) >> _S11) * _INV53
            rad = math.sqrt(-2.0 * math.log1p(-u1))
            th = two_pi * u2
            out[r, i] = rad * math.cos(th)
            if i + 1 < count:
                out[r, i + 1] = rad * math.sin(th)


@njit(cache=True)
def next_layer(prev, step_codes):
    """Sorted union of ``prev + step`` over the steps, with predecessor indices.

    Each shifted copy of ``prev`` is sorted, so this is a k-way merge.
    ``pred[s, i]`` is the index of ``cand[i] - step_codes[s]`` in ``prev``
    or ``len(prev)`` when absent.
    """
    k = step_codes.shape[0]
    m = prev.shape[0]
    cand = np.empty(k * m, dtype=np.int64)
    pred = np.empty((k, k * m), dtype=np.int32)
    ptr = np.zeros(k, dtype=np.int64)
    n_out = 0
    big = np.iinfo(np.int64).max
    while True:
        best = big
        for s in range(k):
            if ptr[s] < m:
                v = prev[ptr[s]] + step_codes[s]
                if v < best:
                    best = v
        if best == big:
            break
        for s in range(k):
            if ptr[s] < m and prev[ptr[s]] + step_codes[s] == best:
                pred[s, n_out] = ptr[s]
                ptr[s] += 1
            else:
                pred[s, n_out] = m
        cand[n_out] = best
        n_out += 1
    return cand[:n_out].copy(), pred[:, :n_out].copy()


@njit(cache=True)
def codes_to_grid(codes, base, span, radius, d):
    """Linear index in the cube ``[-radius, radius]^d`` of encoded sites."""
    side = 2 * radius + 1
    out = np.empty(codes.shape[0], dtype=np.int64)
    for i in range(codes.shape[0]):
        rest = codes[i]
        idx = 0
        mult = 1
        for _ in range(d):
            x = rest % base - span
            rest //= base
            idx += (x + radius) * mult
            mult *= side
        out[i] = idx
    return out


@njit(cache=True)
def ar_observe(val, time, t, pos, z, a, sigma, out):
    """Advance per-site AR(1) chains to time ``t`` at ``pos`` (see ``ARChains``)."""
    rows = val.shape[0]
    for i in range(pos.shape[0]):
        p = pos[i]
        last = time[p]
        if last >= 0:
            c = a ** (t - last)
            noise = sigma * math.sqrt(1.0 - c * c)
        else:
            c = 0.0
            noise = sigma
        for r in range(rows):
            v = c * val[r, p] + noise * z[r, i]
            val[r, p] = v
            out[r, i] = v
        time[p] = t
