import math

import numpy as np
import pytest
from scipy import stats

import oracles
from epirenew.delaydist import DiscretePmf
from epirenew.observation import (
    DeathModelParams, apply_reporting_factors, expected_deaths, likelihood_window, nb_size,
    negbin_logpmf, state_loglikelihood,
)


@pytest.mark.parametrize("rep", range(5))
def test_expected_deaths_matches_naive_loop(pmfs, rep):
    _, pi = pmfs
    rng = np.random.default_rng(rep)
    T = int(rng.integers(2, 100))
    c = rng.gamma(2.0, 500.0, T)
    got = expected_deaths(c, pi, 0.007)
    np.testing.assert_allclose(got, oracles.deaths(c, pi.mass, 0.007), rtol=1e-10, atol=1e-300)


def test_expected_deaths_single_pulse():
    pi = DiscretePmf(np.array([0.25, 0.5, 0.25, 0.0, 0.0, 0.0]))
    c = np.zeros(6)
    c[1] = 100.0
    np.testing.assert_allclose(expected_deaths(c, pi, 0.1), [0, 0, 2.5, 5.0, 2.5, 0.0])


def test_expected_deaths_lag_convention():
    # pi[0] is the one-day lag, so infections on day 1 first kill on day 2
    pi = DiscretePmf(np.array([0.0, 0.5, 0.5]))
    np.testing.assert_allclose(expected_deaths(np.array([100.0, 0, 0]), pi, 0.01), [0, 0, 0.5])
    assert not expected_deaths(np.zeros(3), pi, 0.01).any()


def test_expected_deaths_rejects_short_pi():
    pi = DiscretePmf(np.array([0.5, 0.5]))
    with pytest.raises(ValueError):
        expected_deaths(np.ones(10), pi, 0.01)


def test_reporting_factors_scale():
    d = np.array([10.0, 20.0])
    np.testing.assert_allclose(apply_reporting_factors(d, 0.5, [1.0, 0.5]), [5.0, 5.0])


@pytest.mark.parametrize("form", ["linear", "quadratic"])
def test_negbin_logpmf_matches_scipy(form):
    y = np.arange(0, 60)
    mu, phi = 12.5, 1.7
    r = mu * phi if form == "linear" else phi
    want = stats.nbinom(r, r / (r + mu)).logpmf(y)
    np.testing.assert_allclose(negbin_logpmf(y, mu, phi, form), want, rtol=1e-12)


def test_negbin_variance_forms():
    assert nb_size(10.0, 2.0, "linear") == 20.0
    assert nb_size(10.0, 2.0, "quadratic") == 2.0
    for form, var in (("linear", 15.0), ("quadratic", 60.0)):
        r = nb_size(10.0, 2.0, form)
        assert stats.nbinom(r, r / (r + 10.0)).var() == pytest.approx(var)
    with pytest.raises(ValueError):
        nb_size(1.0, 1.0, "cubic")


def test_negbin_pmf_normalises():
    y = np.arange(0, 400)
    assert np.exp(negbin_logpmf(y, 20.0, 0.8)).sum() == pytest.approx(1.0, abs=1e-10)


def test_negbin_zero_mean_and_errors():
    assert negbin_logpmf(0, 0.0, 2.0) == 0.0
    assert negbin_logpmf(3, 0.0, 2.0) == -math.inf
    with pytest.raises(ValueError):
        negbin_logpmf(-1, 1.0, 1.0)
    with pytest.raises(ValueError):
        negbin_logpmf(1, 1.0, 0.0)


def test_likelihood_window_drops_last_two_days():
    assert likelihood_window(10, 3) == slice(3, 8)
    assert likelihood_window(4, 4) == slice(4, 4)
    with pytest.raises(ValueError):
        likelihood_window(5, 6)


def test_state_loglikelihood_sums_window():
    rng = np.random.default_rng(1)
    mu = rng.uniform(1, 30, 20)
    y = rng.poisson(mu)
    got = state_loglikelihood(y, mu, 3.0, 5)
    want = sum(oracles.negbin_logpmf(int(y[t]), mu[t], 3.0) for t in range(5, 18))
    assert got == pytest.approx(want, rel=1e-12)
    with pytest.raises(ValueError):
        state_loglikelihood(y, mu[:-1], 3.0, 5)


def test_death_model_params():
    assert DeathModelParams(0.01, 1.2, 0.5, 2.0).ifr_effective == pytest.approx(0.012)
    for bad in ((0.01, 1.0, 1.0, 2.0), (0.01, 1.0, 0.5, 0.0), (0.5, 3.0, 0.5, 1.0)):
        with pytest.raises(ValueError):
            DeathModelParams(*bad)
