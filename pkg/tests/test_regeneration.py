import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tcpolymer.environment import FieldSpec, log_truncated_mgf, sample_window
from tcpolymer.errors import FieldError, NumericalError, PreconditionError
from tcpolymer.partition import PolymerConfig
from tcpolymer.regeneration import (
    EpsilonProposal,
    H_process,
    block_constants,
    epsilon_from_uniform,
    eta_field,
    is_regeneration,
    regeneration_mask,
    regeneration_times,
    sample_epsilon,
    sample_first_regeneration,
    second_moment_probe,
    tau_distribution,
    tau_exact_moment,
    tau_mean_exact,
    tau_moments,
    xi_field,
    xi_partition_average,
    xi_values,
)
from tcpolymer.walk import nn3d

eps_lists = st.lists(st.sampled_from([1, -1, 0]), min_size=1, max_size=60)


def test_epsilon_law():
    e = sample_epsilon(200_000, 1).values
    for v, q in ((1, 0.25), (-1, 0.25), (0, 0.5)):
        f = np.mean(e == v)
        assert abs(f - q) < 5 * math.sqrt(q * (1 - q) / len(e))


def test_epsilon_from_uniform_thresholds():
    assert list(epsilon_from_uniform(np.array([0.0, 0.2499, 0.25, 0.4999, 0.5, 0.99]))) == [1, 1, -1, -1, 0, 0]


def test_regeneration_times_examples():
    assert regeneration_times([1, 0, 1, 1, -1, 0], 1) == [2, 5]
    assert regeneration_times([1, 1, 0, 1, 0], 2) == [3]
    assert regeneration_times([0, 0, -1], 1) == []


@settings(max_examples=50)
@given(eps_lists, st.integers(1, 3))
def test_regeneration_times_satisfy_definition(eps, L):
    taus = regeneration_times(eps, L)
    assert all(is_regeneration(eps, L, t) for t in taus)
    assert taus == sorted(set(taus))
    assert all(b - a >= L + 1 for a, b in zip(taus, taus[1:]))
    mask = regeneration_mask(np.array(eps), L)
    for t in taus:
        assert mask[t - 1]


@pytest.mark.parametrize("L", [1, 2, 3])
def test_exact_mean_is_pattern_waiting_time(L):
    # pattern "L ones then a non-one" has no self-overlap: E tau = 1/prob
    assert tau_mean_exact(L) == pytest.approx(1.0 / (0.25**L * 0.75), rel=1e-12)
    assert tau_exact_moment(L, 1) == pytest.approx(4.0 / 3.0, rel=1e-12)


def test_exact_second_moment_l1():
    # non-overlapping pattern of length m, probability pi: Var = 1/pi^2 - (2m - 1)/pi
    pi, m = 3 / 16, 2
    mean = 1 / pi
    second = mean**2 + (1 / pi**2 - (2 * m - 1) / pi)
    assert tau_exact_moment(1, 2) == pytest.approx(math.sqrt(second / 16), rel=1e-10)


def test_tau_distribution_normalised():
    p = tau_distribution(2)
    assert p.sum() == pytest.approx(1.0, abs=1e-14)
    assert np.all(p[:3] == 0)


def test_first_regeneration_samples_match_law():
    t = sample_first_regeneration(1, 20_000, 5)
    assert np.all(t >= 2)
    p = tau_distribution(1)
    for k in (2, 3, 4, 6):
        f = np.mean(t == k)
        assert abs(f - p[k]) < 5 * math.sqrt(p[k] * (1 - p[k]) / len(t))


def test_tau_moments_preconditions():
    with pytest.raises(PreconditionError):
        tau_moments(1, 0.5, 1000, 0)
    with pytest.raises(PreconditionError):
        tau_moments(1, 1, 10, 0)


def test_eta_averages_to_field():
    s = sample_window(FieldSpec.iid_gaussian(), nn3d(), 3, 2)
    eps = np.array([0, 1, -1])
    e = eta_field(s, eps)
    assert np.array_equal(e.layers[1], 2 * s.layers[1])
    assert np.all(e.layers[2] == 0) and np.all(e.layers[3] == 0)


@pytest.mark.parametrize("beta,l", [(0.3, 0.5), (1.0, 1.0), (2.5, 0.2), (0.0, 1.0)])
def test_xi_site_identity(beta, l):
    w = np.linspace(-4, 4, 81)
    mean = 0.5 * np.exp(xi_values(w, True, beta, l)) + 0.5 * np.exp(xi_values(w, False, beta, l))
    target = np.exp(beta * np.maximum(w, -l))
    assert np.max(np.abs(mean / target - 1)) < 1e-14


def test_xi_field_rejects_bad_l():
    s = sample_window(FieldSpec.iid_gaussian(), nn3d(), 2, 0)
    with pytest.raises(PreconditionError):
        xi_field(s, [0, 0], 1.0, 0.0)


def test_xi_partition_average_unbiased():
    s = sample_window(FieldSpec.iid_gaussian(), nn3d(), 6, 1)
    r = xi_partition_average(PolymerConfig(nn3d(), 0.5, 6), s, 1.0, 4000, rng=2)
    assert abs(r.z_score) < 4


def test_plain_proposal_is_q():
    prop = EpsilonProposal.plain(2)
    probs = np.diff(np.concatenate([np.zeros((3, 1)), prop.cdf], axis=1), axis=1)
    assert np.allclose(probs, [[0.25, 0.25, 0.5]] * 3)
    assert np.allclose(prop.log_lr, 0)


@pytest.mark.parametrize("beta,L", [(0.25, 1), (0.1, 2)])
def test_tilted_proposal_rows_are_laws(beta, L):
    spec = FieldSpec.iid_gaussian()
    el = math.exp(-beta * 0.5)
    f0 = 2 * math.exp(log_truncated_mgf(spec, beta, 0.5)) - el
    prop = EpsilonProposal.build(L, el**0.75, f0**0.75)
    assert np.allclose(prop.cdf[:, -1], 1.0)
    assert np.all(np.diff(prop.cdf, axis=1) >= 0)


def test_tilted_proposal_rejects_divergent_chain():
    with pytest.raises(NumericalError):
        EpsilonProposal.build(2, 0.88, 1.26)


def test_block_constants_iid_match_monte_carlo():
    spec = FieldSpec.iid_gaussian()
    exact = block_constants(nn3d(), spec, 0.25, 0.5, 1)
    assert exact.exact
    ar_like = block_constants(nn3d(), FieldSpec.ar_time(0.01), 0.25, 0.5, 1, n_inner=20_000, rng=1)
    # a = 0.01 is nearly independent in time: constants close to the iid ones
    assert abs(ar_like.psi0 - exact.psi0) < 4 * ar_like.psi0_se + 0.01 * exact.psi0


def test_H_is_one_at_beta_zero():
    st_ = H_process(PolymerConfig(nn3d(), 0.0, 0), FieldSpec.ar_time(), 1, 0.5, 5, rng=0, n_replicas=10)
    assert np.all(st_.H == 1.0)


def test_H_equals_L_for_iid():
    st_ = H_process(PolymerConfig(nn3d(), 0.25, 0), FieldSpec.iid_gaussian(), 1, 0.5, 3, rng=0, n_replicas=8)
    assert np.array_equal(st_.log_H, st_.log_L)


def test_H_rejects_gff():
    with pytest.raises(FieldError):
        H_process(PolymerConfig(nn3d(), 0.25, 0), FieldSpec.gff_gaussian(), 1, 0.5, 3, n_replicas=2)


def test_H_tilt_bounds():
    with pytest.raises(PreconditionError):
        H_process(PolymerConfig(nn3d(), 0.25, 0), FieldSpec.iid_gaussian(), 1, 0.5, 3, n_replicas=2, tilt=1.5)


@pytest.mark.slow
def test_H_mean_one_iid_small():
    st_ = H_process(PolymerConfig(nn3d(), 0.25, 0), FieldSpec.iid_gaussian(), 1, 0.5, 4, rng=3, n_replicas=100)
    t = (st_.mean() - 1) / st_.se()
    assert np.all(np.abs(t) < 4)


def test_second_moment_probe_shapes():
    sm = second_moment_probe(nn3d(), FieldSpec.ar_time(), 0.03, 1, 0.5, 4, 200, rng=1, n_inner=2000)
    assert sm.log_m2.shape == (4,) and np.all(sm.se > 0)
    assert abs(sm.slope) < 0.1
