import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tcpolymer.errors import EnumerationTooLarge, WalkError
from tcpolymer.walk import (
    WalkModel,
    ball_visit_sum_exact,
    ball_visit_sums,
    difference_law,
    enumerate_path_arrays,
    enumerate_paths,
    get_slab,
    khasminskii_check,
    nn3d,
    sample_paths,
    walk_constants,
)


def test_nn3d_constants():
    p, h, K = walk_constants(nn3d())
    assert p == pytest.approx(1 / 6, abs=1e-15)
    assert h == pytest.approx(math.log(6), abs=1e-14)
    assert K * h == pytest.approx(math.log(6), abs=1e-14)


def test_transience_required():
    with pytest.raises(WalkError, match="transience required"):
        WalkModel.nearest_neighbour(2)


def test_probabilities_must_sum_to_one():
    with pytest.raises(WalkError, match="sum to"):
        WalkModel(3, [((1, 0, 0), 0.5), ((-1, 0, 0), 0.4)])


def test_non_positive_probability_rejected():
    with pytest.raises(WalkError):
        WalkModel(3, [((1, 0, 0), 1.0), ((-1, 0, 0), 0.0)])


@pytest.mark.parametrize("N", [0, 1, 2, 3, 4])
def test_enumeration_weights_sum_to_one(N):
    sites, logp = enumerate_path_arrays(nn3d(), N)
    assert sites.shape == (6**N, N + 1, 3)
    assert math.fsum(np.exp(logp)) == pytest.approx(1.0, abs=1e-12)


def test_enumerated_paths_are_valid():
    for path, p in enumerate_paths(nn3d(), 3):
        assert path.is_valid(nn3d())
        assert p == pytest.approx(6.0**-3)


def test_enumeration_cap():
    with pytest.raises(EnumerationTooLarge):
        enumerate_path_arrays(nn3d(), 12, cap=1000)


@pytest.mark.parametrize("n", range(6))
def test_slab_layers_are_parity_l1_balls(n):
    pts = {p for p in itertools.product(range(-n, n + 1), repeat=3)
           if sum(map(abs, p)) <= n and (sum(p) - n) % 2 == 0}
    slab = get_slab(nn3d(), n)
    got = {tuple(s) for s in slab.sites(n).tolist()}
    assert got == pts


def test_slab_predecessors_point_to_neighbours():
    slab = get_slab(nn3d(), 5)
    w = nn3d()
    prev = slab.sites(4)
    cur = slab.sites(5)
    pred = slab.preds[5]
    for s, off in enumerate(w.offsets):
        ok = pred[s] < len(prev)
        assert np.array_equal(prev[pred[s][ok]] + off, cur[ok])
        missing = cur[~ok] - off
        assert np.all(slab.index(4, missing) < 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32))
def test_sampled_paths_stay_in_slab(seed):
    paths = sample_paths(nn3d(), 8, 5, seed)
    slab = get_slab(nn3d(), 8)
    for n in range(9):
        assert np.all(slab.index(n, paths[:, n, :]) >= 0)


def test_sampled_step_frequencies():
    paths = sample_paths(nn3d(), 100, 200, 1)
    steps = np.diff(paths, axis=1).reshape(-1, 3)
    assert np.all(np.abs(steps).sum(axis=1) == 1)
    freq = np.array([np.mean(np.all(steps == o, axis=1)) for o in nn3d().offsets])
    assert np.all(np.abs(freq - 1 / 6) < 5 * np.sqrt(1 / 6 * 5 / 6 / len(steps)))


def test_difference_law_is_symmetric_probability():
    offs, p = difference_law(nn3d())
    assert math.fsum(p) == pytest.approx(1.0, abs=1e-15)
    zero = np.all(offs == 0, axis=1)
    assert p[zero][0] == pytest.approx(1 / 6)
    for o, q in zip(offs, p):
        j = np.flatnonzero(np.all(offs == -o, axis=1))[0]
        assert p[j] == pytest.approx(q)


@pytest.mark.parametrize("r", [0, 1, 2])
def test_visit_sum_mc_matches_exact_propagation(r):
    horizon = 30
    exact = ball_visit_sum_exact(nn3d(), r, horizon)
    est = ball_visit_sums(nn3d(), [r], horizon=horizon, n_samples=20_000, rng=4)[0]
    assert abs(est.mean - exact) < 4 * est.se


def test_khasminskii_bound_constant():
    est = ball_visit_sums(nn3d(), [2], horizon=200, n_samples=2000, rng=1)[0]
    m, se, bound = khasminskii_check(est, 0.5)
    assert bound == 2.0
    assert m > 1.0 and se > 0
