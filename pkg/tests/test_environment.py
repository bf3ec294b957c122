import math

import numpy as np
import pytest
from scipy import integrate, stats

from tcpolymer.environment import (
    FieldSpec,
    analytic_exp_moment,
    covariance,
    default_kappa,
    dlog_mgf,
    esssup,
    estimate_kappa,
    cone_family,
    green_function,
    green_function_direct,
    log_mgf,
    log_truncated_mgf,
    sample_along_paths,
    sample_layers,
    sample_window,
    truncate_field,
    window_sites,
)
from tcpolymer.errors import FieldError, PreconditionError, ResourceCapError
from tcpolymer.rng import Streams
from tcpolymer.walk import get_slab, nn3d, sample_paths


def test_unknown_kind():
    with pytest.raises(FieldError, match="unknown field kind"):
        FieldSpec("pareto")


@pytest.mark.parametrize("kw", [dict(kind="ar_time", a=1.0), dict(kind="iid_gaussian", sigma=0.0),
                                dict(kind="iid_bernoulli", p=1.5)])
def test_invalid_parameters(kw):
    with pytest.raises(FieldError):
        FieldSpec(**kw)


@pytest.mark.parametrize("beta", [0.0, 0.5, 1.0, 2.0])
def test_gaussian_mgf(beta):
    assert log_mgf(FieldSpec.iid_gaussian(), beta) == pytest.approx(beta**2 / 2, abs=1e-15)
    assert dlog_mgf(FieldSpec.iid_gaussian(), beta) == pytest.approx(beta, abs=1e-15)


@pytest.mark.parametrize("beta", [0.0, 0.5, 1.0, 2.0, 30.0])
def test_bernoulli_mgf(beta):
    spec = FieldSpec.iid_bernoulli(0.5)
    assert float(log_mgf(spec, beta)) == pytest.approx(math.log((1 + math.exp(beta)) / 2), rel=1e-14)
    assert float(dlog_mgf(spec, beta)) == pytest.approx(math.exp(beta) / (1 + math.exp(beta)), rel=1e-14)


@pytest.mark.parametrize("beta,l", [(0.5, 0.5), (1.0, 1.0), (2.0, 0.3)])
def test_truncated_gaussian_mgf_by_quadrature(beta, l):
    f = lambda x: math.exp(beta * max(x, -l)) * stats.norm.pdf(x)
    val = integrate.quad(f, -l, 12)[0] + math.exp(-beta * l) * stats.norm.cdf(-l)
    assert log_truncated_mgf(FieldSpec.iid_gaussian(), beta, l) == pytest.approx(math.log(val), rel=1e-10)


def test_truncation_inactive_above_bernoulli_minimum():
    spec = FieldSpec.iid_bernoulli(0.3)
    assert log_truncated_mgf(spec, 1.2, 0.5) == pytest.approx(float(log_mgf(spec, 1.2)), rel=1e-15)


def test_esssup():
    assert esssup(FieldSpec.iid_bernoulli(0.5)) == (1.0, 0.5)
    with pytest.raises(FieldError, match="esssup infinite"):
        esssup(FieldSpec.iid_gaussian())


def test_ar_covariance_structure():
    spec = FieldSpec.ar_time(0.5, 2.0)
    a = np.array([[1, 0, 0, 0], [3, 0, 0, 0], [3, 1, 0, 0]])
    C = covariance(spec, a)
    assert C[0, 1] == pytest.approx(4 * 0.25)
    assert C[0, 2] == 0.0
    assert np.allclose(np.diag(C), 4.0)


def test_ar_layer_samples_have_stationary_correlation():
    spec = FieldSpec.ar_time(0.6)
    slab = get_slab(nn3d(), 4)
    layers = sample_layers(spec, slab, 4, Streams.for_replicas(1, range(20_000)))
    i2 = slab.index(2, np.zeros((1, 3), dtype=np.int64))[0]
    i4 = slab.index(4, np.zeros((1, 3), dtype=np.int64))[0]
    x, y = layers[2][:, i2], layers[4][:, i4]
    assert abs(x.var() - 1) < 0.05
    assert abs(np.corrcoef(x, y)[0, 1] - 0.36) < 4 / math.sqrt(len(x))


def test_layers_have_slab_shapes():
    slab = get_slab(nn3d(), 5)
    for spec in (FieldSpec.iid_gaussian(), FieldSpec.iid_bernoulli(), FieldSpec.ar_time()):
        layers = sample_layers(spec, slab, 5, Streams.for_replicas(0, range(3)))
        assert [x.shape for x in layers[1:]] == [(3, m) for m in slab.sizes[1:6]]


def test_bernoulli_layer_values():
    slab = get_slab(nn3d(), 3)
    layers = sample_layers(FieldSpec.iid_bernoulli(0.2, (-1.0, 2.0)), slab, 3, Streams.for_replicas(0, range(500)))
    allv = np.concatenate([x.ravel() for x in layers[1:]])
    assert set(np.unique(allv)) == {-1.0, 2.0}
    assert abs(np.mean(allv == 2.0) - 0.2) < 5 * math.sqrt(0.16 / len(allv))


def test_gff_window_covariance_matches_samples():
    spec = FieldSpec.gff_gaussian()
    slab = get_slab(nn3d(), 3)
    sites = window_sites(slab, 3)
    C = covariance(spec, sites)
    layers = sample_layers(spec, slab, 3, Streams.for_replicas(2, range(20_000)))
    X = np.concatenate(layers[1:], axis=1)
    emp = np.cov(X.T)
    assert np.max(np.abs(emp - C)) < 6 * np.sqrt(2 / 20_000) * np.max(np.diag(C))


def test_gff_window_cap():
    with pytest.raises(ResourceCapError):
        sample_layers(FieldSpec.gff_gaussian(), get_slab(nn3d(), 40), 40, Streams.for_replicas(0, [0]))


def test_green_quadrature_matches_direct_solve():
    box = (3, 3, 3, 3)
    G = green_function(3, box, margin=3).matrix
    D = green_function_direct(3, box, margin=3)
    assert np.max(np.abs(G - D)) < 1e-8 * np.max(np.abs(D))


def test_green_is_symmetric_positive():
    G = green_function(3, (2, 3, 3, 3)).matrix
    assert np.allclose(G, G.T)
    assert np.min(np.linalg.eigvalsh(G)) > 0


def test_green_cache_roundtrip(tmp_path):
    t = green_function(3, (2, 3, 3, 3))
    t.save(tmp_path / "g.bin")
    from tcpolymer.environment import GreenTable

    u = GreenTable.load(tmp_path / "g.bin", d=3, box=(2, 3, 3, 3))
    assert np.array_equal(t.matrix, u.matrix)
    with pytest.raises(FieldError):
        GreenTable.load(tmp_path / "g.bin", box=(2, 5, 5, 5))


@pytest.mark.parametrize("kind", ["iid_gaussian", "iid_bernoulli", "ar_time"])
def test_kappa_for_iid_is_one_and_ar_matches_closed_form(kind):
    spec = FieldSpec(kind)
    k = default_kappa(spec, 0.7, depth=64)
    if spec.is_iid:
        assert k == 1.0
    else:
        # beta^2 sum_{m>=2} a^m over 64 terms
        s = sum(0.5**m for m in range(2, 66))
        assert math.log(k) == pytest.approx(0.49 * s, rel=1e-12)


def test_kappa_rejects_close_sets():
    c = np.array([1, 0, 0, 0])
    with pytest.raises(PreconditionError):
        estimate_kappa(FieldSpec.ar_time(), 1.0, c, cone_family(c, [3], offset=1))


def test_analytic_exp_moment_against_monte_carlo():
    spec = FieldSpec.ar_time(0.5)
    sites = np.array([[1, 0, 0, 0], [2, 0, 0, 0], [2, 1, 0, 0]])
    w = np.array([0.3, -0.2, 0.5])
    exact = analytic_exp_moment(spec, (sites, w))
    C = covariance(spec, sites)
    assert exact == pytest.approx(math.exp(0.5 * w @ C @ w), rel=1e-14)


def test_along_paths_consistent_when_paths_meet():
    paths = np.zeros((2, 2, 5, 3), dtype=np.int64)
    for spec in (FieldSpec.iid_gaussian(), FieldSpec.ar_time(), FieldSpec.iid_bernoulli()):
        v = sample_along_paths(spec, paths, Streams.for_replicas(0, [0, 1]))
        assert np.array_equal(v[:, 0], v[:, 1])


def test_along_paths_ar_correlation():
    R = 20_000
    paths = np.zeros((R, 1, 3, 3), dtype=np.int64)
    v = sample_along_paths(FieldSpec.ar_time(0.5), paths, Streams.for_replicas(3, range(R)))[:, 0]
    assert abs(np.corrcoef(v[:, 0], v[:, 2])[0, 1] - 0.25) < 4 / math.sqrt(R)


def test_sample_window_and_truncation():
    s = sample_window(FieldSpec.iid_gaussian(), nn3d(), 4, 1)
    t = truncate_field(s, 0.5)
    for n in range(1, 5):
        assert np.array_equal(t.layers[n], np.maximum(s.layers[n], -0.5))
