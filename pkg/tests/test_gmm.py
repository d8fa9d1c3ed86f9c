import numpy as np
import pytest

from pflab import autodiff as ad
from pflab.gmm import (
    AnalyticGmmScore,
    GaussianMixture,
    gmm_logp0,
    gmm_logp_t,
    gmm_score_t,
    standard_normal_model,
)
from pflab.sde import LOG_2PI, SubVpSde

from helpers import central_diff_grad


@pytest.fixture(scope="module")
def sde():
    return SubVpSde()


@pytest.fixture(scope="module")
def gmm3():
    return GaussianMixture(
        [0.4, 0.4, 0.2], [[1.0, 0.5], [-1.0, -0.5], [0.0, 0.0]], [0.55, 0.4, 0.7]
    )


def test_mixture_validation():
    with pytest.raises(ValueError):
        GaussianMixture([0.5, 0.6], [[0.0], [1.0]], [1.0, 1.0])  # weights sum > 1
    with pytest.raises(ValueError):
        GaussianMixture([0.5, 0.5], [[0.0], [1.0]], [1.0, -1.0])  # negative std
    with pytest.raises(ValueError):
        GaussianMixture([1.0], [[0.0], [1.0]], [1.0])  # count mismatch


def test_logp0_single_standard_normal():
    gmm = GaussianMixture([1.0], [[0.0]], [1.0])
    assert gmm_logp0(np.zeros(1), gmm) == pytest.approx(-0.9189385332046727)


def test_logp0_symmetric_two_component():
    gmm = GaussianMixture([0.5, 0.5], [[1.5, 0.0], [-1.5, 0.0]], [0.6, 0.6])
    for x in (np.array([0.3, -0.7]), np.array([1.1, 0.2])):
        assert gmm_logp0(x, gmm) == pytest.approx(gmm_logp0(-x, gmm), rel=1e-14)


def test_logp0_matches_naive_summation(gmm3):
    # Oracle: direct density summation without log-sum-exp stabilization.
    rng = np.random.default_rng(0)
    for _ in range(10):
        x = rng.normal(size=2)
        dens = 0.0
        for w, mu, s in zip(gmm3.weights, gmm3.means, gmm3.stds):
            q = np.sum((x - mu) ** 2) / s**2
            dens += w * np.exp(-0.5 * q) / (2 * np.pi * s**2)
        assert gmm_logp0(x, gmm3) == pytest.approx(np.log(dens), abs=1e-12)


def test_score_single_gaussian_closed_form(sde):
    gmm = GaussianMixture([1.0], [[0.0, 0.0]], [0.8])
    for t in (1e-5, 0.4, 0.95):
        m, sig = sde.kernel_moments(t)
        v = (m * 0.8) ** 2 + sig**2
        x = np.array([0.7, -1.1])
        np.testing.assert_allclose(gmm_score_t(x, t, gmm, sde), -x / v, rtol=1e-12)


def test_score_zero_at_symmetric_point(sde):
    gmm = GaussianMixture([0.5, 0.5], [[1.0, 0.4], [-1.0, -0.4]], [0.5, 0.5])
    np.testing.assert_allclose(
        gmm_score_t(np.zeros(2), 0.3, gmm, sde), np.zeros(2), atol=1e-14
    )


def test_score_matches_fd_of_closed_form_density(gmm3, sde):
    rng = np.random.default_rng(3)
    for t in (1e-5, 0.25, 0.7, 1.0):
        x = rng.normal(size=2)
        s = gmm_score_t(x, t, gmm3, sde)
        fd = central_diff_grad(lambda v: gmm_logp_t(v, t, gmm3, sde), x, h=1e-6)
        np.testing.assert_allclose(s, fd, rtol=1e-6, atol=1e-9)


def test_score_at_t0_approaches_data_score(gmm3, sde):
    rng = np.random.default_rng(4)
    for _ in range(5):
        x = gmm3.sample(1, rng)[0]
        s_t0 = gmm_score_t(x, 1e-5, gmm3, sde)
        s_data = central_diff_grad(lambda v: gmm_logp0(v, gmm3), x, h=1e-6)
        np.testing.assert_allclose(s_t0, s_data, rtol=1e-3)


def test_score_jacobian_is_symmetric(gmm3, sde):
    # The score is a gradient field, so its Jacobian must be symmetric.
    rng = np.random.default_rng(5)
    for t in (0.1, 0.6):
        x = rng.normal(size=2)
        with ad.Tape() as tape:
            xv = tape.leaf(x)
            s = gmm_score_t(xv, t, gmm3, sde)
            jac = ad.jacobian(s, xv)
        assert abs(jac[0, 1] - jac[1, 0]) < 1e-6


def test_score_taped_equals_plain(gmm3, sde):
    x = np.array([0.37, -0.81])
    with ad.Tape() as tape:
        xv = tape.leaf(x)
        taped = gmm_score_t(xv, 0.33, gmm3, sde)
    np.testing.assert_array_equal(
        np.asarray(taped.value), gmm_score_t(x, 0.33, gmm3, sde)
    )


def test_diffused_moments_match_sampling(gmm3, sde):
    # The diffused mixture at t should equal m(t) x0 + sigma(t) eps in law;
    # spot-check mean and variance against sampling.
    rng = np.random.default_rng(9)
    t = 0.5
    m, sig = sde.kernel_moments(t)
    x0 = gmm3.sample(200_000, rng)
    xt = m * x0 + sig * rng.standard_normal(x0.shape)
    mean_expect = m * np.einsum("k,kd->d", gmm3.weights, gmm3.means)
    np.testing.assert_allclose(xt.mean(axis=0), mean_expect, atol=0.01)
    var_expect = (
        np.einsum("k,kd->d", gmm3.weights, (m * gmm3.means) ** 2)
        - mean_expect**2
        + np.einsum("k,k->", gmm3.weights, (m * gmm3.stds) ** 2)
        + sig**2
    )
    np.testing.assert_allclose(xt.var(axis=0), var_expect, rtol=0.02)


def test_standard_normal_model_logp(sde):
    model = standard_normal_model(2)
    x = np.array([0.2, -0.4])
    expected = -0.5 * np.sum(x**2) - LOG_2PI
    assert model.logp0(x) == pytest.approx(expected, rel=1e-12)


def test_model_shape_validation(gmm3):
    with pytest.raises(ValueError):
        AnalyticGmmScore(gmm3, SubVpSde(), shape=(3,))
