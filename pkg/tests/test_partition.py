import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tcpolymer.environment import FieldSpec, sample_layers, sample_window, standard_specs
from tcpolymer.errors import ConfigError, EnumerationTooLarge
from tcpolymer.partition import (
    PolymerConfig,
    annealed_partition,
    endpoint_distribution,
    log_mean_exp,
    log_partition_batch,
    quenched_partition_dp,
    quenched_partition_enum,
)
from tcpolymer.rng import Streams
from tcpolymer.walk import enumerate_path_arrays, get_slab, nn3d

KINDS = ["iid_gaussian", "iid_bernoulli", "ar_time", "gff_gaussian"]


def brute_log_z(sample, beta, N):
    """Independent oracle: explicit path sum with per-site lookups."""
    sites, logp = enumerate_path_arrays(nn3d(), N)
    tot = np.zeros(len(sites))
    for n in range(1, N + 1):
        idx = sample.slab.index(n, sites[:, n, :])
        tot += sample.layers[n][idx]
    a = logp + beta * tot
    m = a.max()
    return m + math.log(np.exp(a - m).sum())


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("N", [1, 3, 5])
def test_dp_matches_brute_force(kind, N):
    spec = standard_specs()[kind]
    for seed in range(3):
        s = sample_window(spec, nn3d(), N, seed)
        cfg = PolymerConfig(nn3d(), 0.8, N)
        dp = quenched_partition_dp(cfg, s).log_Z
        assert dp == pytest.approx(brute_log_z(s, 0.8, N), rel=1e-12, abs=1e-12)
        assert dp == pytest.approx(quenched_partition_enum(cfg, s).log_Z, rel=1e-12, abs=1e-12)


def test_zero_length_and_zero_beta():
    s = sample_window(FieldSpec.iid_gaussian(), nn3d(), 4, 0)
    assert quenched_partition_dp(PolymerConfig(nn3d(), 1.0, 0), s).log_Z == 0.0
    assert quenched_partition_dp(PolymerConfig(nn3d(), 0.0, 4), s).log_Z == 0.0


def test_negative_beta_rejected():
    with pytest.raises(ConfigError):
        PolymerConfig(nn3d(), -0.1, 3)


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.integers(1, 6), st.integers(0, 1000))
def test_constant_shift(c, N, seed):
    s = sample_window(FieldSpec.iid_gaussian(), nn3d(), N, seed)
    shifted = type(s)(s.spec, s.slab, s.N, [None] + [x + c for x in s.layers[1:]], s.seed)
    cfg = PolymerConfig(nn3d(), 0.7, N)
    a = quenched_partition_dp(cfg, s).log_Z
    b = quenched_partition_dp(cfg, shifted).log_Z
    assert b - a == pytest.approx(0.7 * c * N, abs=1e-10)


def test_endpoint_distribution_sums_to_one():
    s = sample_window(FieldSpec.ar_time(), nn3d(), 6, 2)
    sites, p = endpoint_distribution(PolymerConfig(nn3d(), 1.0, 6), s)
    assert len(sites) == len(p)
    assert math.fsum(p) == pytest.approx(1.0, abs=1e-12)


def test_batch_matches_single_and_derivative_by_differences():
    slab = get_slab(nn3d(), 10)
    layers = sample_layers(FieldSpec.ar_time(), slab, 10, Streams.for_replicas(4, range(3)))
    betas = [0.5, 1.0]
    lz, dz = log_partition_batch(slab, layers, betas, 10, record=[5, 10], derivative=True)
    h = 1e-5
    lp = log_partition_batch(slab, layers, [b + h for b in betas], 10, record=[5, 10])
    lm = log_partition_batch(slab, layers, [b - h for b in betas], 10, record=[5, 10])
    assert np.allclose(dz, (lp - lm) / (2 * h), rtol=1e-6, atol=1e-8)


def test_log_z_convex_in_beta():
    slab = get_slab(nn3d(), 8)
    layers = sample_layers(FieldSpec.iid_gaussian(), slab, 8, Streams.for_replicas(0, range(4)))
    betas = np.linspace(0.1, 3, 30)
    lz = log_partition_batch(slab, layers, betas, 8)[:, :, 0]
    assert np.all(np.diff(lz, 2, axis=1) > -1e-10)


def test_no_overflow_at_large_beta():
    slab = get_slab(nn3d(), 30)
    layers = sample_layers(FieldSpec.iid_gaussian(), slab, 30, Streams.for_replicas(0, range(2)))
    lz = log_partition_batch(slab, layers, [200.0], 30)
    assert np.all(np.isfinite(lz))


@pytest.mark.parametrize("beta", [0.0, 0.5, 1.0, 2.0])
def test_annealed_gaussian_exact(beta):
    r = annealed_partition(PolymerConfig(nn3d(), beta, 10), FieldSpec.iid_gaussian(), "analytic")
    assert r.log_EZ / 10 == pytest.approx(beta**2 / 2, abs=1e-12)


def test_annealed_ar_analytic_against_pairs():
    # E Z = E^S exp(beta^2/2 sum_{i,j} a^{|i-j|} 1{S_i = S_j}); N = 2 by hand:
    # the walk never revisits a site at times 1 and 2 (distance 2 or 0 steps apart only for
    # back-and-forth, which returns to the origin, not to S_1).
    beta = 0.9
    r = annealed_partition(PolymerConfig(nn3d(), beta, 2), FieldSpec.ar_time(0.5), "analytic")
    assert r.log_EZ == pytest.approx(beta**2, rel=1e-14)


def test_annealed_ar_mc_agrees_with_analytic():
    cfg = PolymerConfig(nn3d(), 0.6, 5)
    spec = FieldSpec.ar_time()
    exact = annealed_partition(cfg, spec, "analytic").log_EZ
    mc = annealed_partition(cfg, spec, "mc", n_disorder=4000, rng=3)
    assert abs(mc.log_EZ - exact) < 4 * mc.se


def test_annealed_analytic_limit():
    with pytest.raises(EnumerationTooLarge):
        annealed_partition(PolymerConfig(nn3d(), 1.0, 9), FieldSpec.ar_time(), "analytic")


def test_log_mean_exp():
    x = np.log(np.array([1.0, 2.0, 3.0]))
    m, se = log_mean_exp(x)
    assert m == pytest.approx(math.log(2.0))
    assert se > 0
