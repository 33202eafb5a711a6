import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from rqle.model import (GeneModel, NBParams, RobustConfig, effective_phi, make_gene,
                        mean_vector, nb_cdf, nb_cdf_array, nb_logpmf, nb_pmf)


def test_pmf_poisson_zero():
    assert nb_pmf(0, NBParams(1.0, 0.0)) == pytest.approx(math.exp(-1), abs=1e-15)


def test_pmf_nb_zero():
    assert nb_pmf(0, NBParams(1.0, 1.0)) == pytest.approx(0.5, abs=1e-15)


def test_pmf_matches_loggamma_formula():
    s, mu, phi = 3, 2.5, 0.4
    r = 1 / phi
    direct = math.exp(math.lgamma(s + r) - math.lgamma(r) - math.lgamma(s + 1)
                      + r * math.log(r / (r + mu)) + s * math.log(mu / (r + mu)))
    assert nb_pmf(s, NBParams(mu, phi)) == pytest.approx(direct, rel=1e-12)
    total = sum(nb_pmf(k, NBParams(mu, phi)) for k in range(501))
    assert total == pytest.approx(1.0, abs=1e-12)


def test_pmf_matches_scipy():
    mu, phi = 7.3, 0.6
    r = 1 / phi
    k = np.arange(60)
    ours = np.exp(nb_logpmf(k, mu, phi))
    np.testing.assert_allclose(ours, stats.nbinom.pmf(k, r, r / (r + mu)), rtol=1e-11)


def test_pmf_rejects_bad_support():
    with pytest.raises(ValueError):
        nb_pmf(-1, NBParams(1.0, 0.0))
    with pytest.raises(ValueError):
        nb_pmf(1.5, NBParams(1.0, 0.0))


@pytest.mark.parametrize("mu,phi", [(-1.0, 0.0), (1.0, -0.1), (float("nan"), 0.0)])
def test_nbparams_invalid(mu, phi):
    with pytest.raises(ValueError):
        NBParams(mu, phi)


def test_cdf_edges():
    assert nb_cdf(-1, NBParams(2.0, 0.4)) == 0.0
    assert nb_cdf(10**6, NBParams(2.0, 0.4)) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("phi", [0.0, 0.4, 3.0])
def test_cdf_is_partial_pmf_sum(phi):
    p = NBParams(2.5, phi)
    for s in range(12):
        assert nb_cdf(s, p) == pytest.approx(sum(nb_pmf(t, p) for t in range(s + 1)), abs=1e-13)


def test_tiny_phi_is_poisson():
    mu = 30.0
    s = np.arange(int(mu + 10 * math.sqrt(mu)))
    np.testing.assert_allclose(np.exp(nb_logpmf(s, mu, 1e-12)), stats.poisson.pmf(s, mu), rtol=1e-8)
    assert effective_phi(1e-9) == 0.0 and effective_phi(0.2) == 0.2


@settings(max_examples=60, deadline=None)
@given(mu=st.floats(0.01, 3000), phi=st.sampled_from([0.0, 0.05, 0.4, 1.0, 3.0]))
def test_pmf_normalizes(mu, phi):
    S = int(mu + 20 * math.sqrt(mu + phi * mu * mu) + 50)
    total = np.exp(nb_logpmf(np.arange(S + 1), mu, phi)).sum()
    assert total == pytest.approx(float(nb_cdf_array(S, mu, phi)), abs=1e-10)
    assert total == pytest.approx(1.0, abs=1e-6)


@settings(max_examples=60, deadline=None)
@given(mu=st.floats(0.01, 3000), phi=st.sampled_from([0.0, 0.05, 0.4]))
def test_tail_beyond_twenty_sd(mu, phi):
    S = int(mu + 20 * math.sqrt(mu + phi * mu * mu) + 50)
    assert 1 - nb_cdf_array(S, mu, phi) < 1e-10


def test_heavy_dispersion_tail_is_wider():
    # with size 1/phi <= 1 the tail decays too slowly for a 20 sd cutoff
    mu, phi = 2.0, 3.0
    S = int(mu + 20 * math.sqrt(mu + phi * mu * mu) + 50)
    assert 1e-10 < 1 - nb_cdf_array(S, mu, phi) < 1e-7


def test_sampler_moments(rng):
    mu, phi = 12.0, 0.4
    r = 1 / phi
    x = rng.negative_binomial(r, r / (r + mu), size=100_000)
    var = mu + phi * mu * mu
    assert abs(x.mean() - mu) < 5 * math.sqrt(var / x.size)
    # se of the sample variance from the fourth central moment
    m4 = np.mean((x - x.mean()) ** 4)
    assert abs(x.var(ddof=1) - var) < 5 * math.sqrt((m4 - var * var) / x.size)


def test_mean_vector():
    np.testing.assert_array_equal(mean_vector(np.eye(2), [3, 5]), [3, 5])
    np.testing.assert_array_equal(mean_vector(np.ones((2, 3)), [0, 0], 1e-8), [1e-8] * 3)
    A = np.array([[0.5, 1.5, 2.0], [1.0, 0.0, 0.1]]) * 100
    np.testing.assert_allclose(mean_vector(A, [0.8, 0.2]), 0.8 * A[0] + 0.2 * A[1])
    with pytest.raises(ValueError):
        mean_vector(A, [1.0])
    with pytest.raises(ValueError):
        mean_vector(A, [1.0, -0.1])


def test_gene_validation():
    with pytest.raises(ValueError, match="no positive sampling rate"):
        make_gene([[1.0, 0.0]], [1, 2])
    with pytest.raises(ValueError):
        make_gene([[1.0, -1.0]], [1, 2])
    with pytest.raises(ValueError):
        make_gene([[1.0, 1.0]], [1])
    with pytest.raises(ValueError):
        make_gene([[1.0, 1.0]], [1, 2.5])
    with pytest.raises(ValueError):
        make_gene([[1.0, 1.0]], [1, -2])
    with pytest.raises(ValueError):
        GeneModel("g", ("a", "b"), np.ones((1, 2)), np.array([1, 1]))


def test_gene_is_immutable():
    g = make_gene([[1.0, 2.0]], [3, 4])
    with pytest.raises(ValueError):
        g.A[0, 0] = 5
    with pytest.raises(ValueError):
        g.counts[0] = 5
    assert g.total_reads == 7 and g.n_isoforms == 1 and g.n_read_types == 2


def test_drop_columns():
    g = make_gene([[1.0, 2.0, 3.0], [0.0, 1.0, 1.0]], [3, 4, 5])
    h = g.drop_columns([0])
    np.testing.assert_array_equal(h.counts, [4, 5])
    assert h.A.shape == (2, 2)


def test_config_validation():
    for bad in ({"c": 0}, {"phi": -1}, {"mu_floor": 0}, {"quad_tol": 0}, {"max_iter": 0},
                {"weights": [1.0, 0.0]}):
        with pytest.raises(ValueError):
            RobustConfig(**bad)
    assert RobustConfig(weights=[1.0, 2.0]).weights_for(2).tolist() == [1.0, 2.0]
    with pytest.raises(ValueError):
        RobustConfig(weights=[1.0, 2.0]).weights_for(3)
