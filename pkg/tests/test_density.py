import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from thetaem.density import (DensityEstimate, GaussianLaw, dens_con_threshold, density_distance,
                             endpoint_samples, horizon_check, kde, ou_exact_density, silverman_bandwidth)
from thetaem.errors import EmptySamples, GridMismatch
from thetaem.integrator import SchemeConfig
from thetaem.model import cubic_model, ou_model


def theta_ou_law(a, sigma0, theta, delta, xi0, K):
    """Exact Gaussian law of the theta scheme for scalar OU after K steps."""
    rho = (1 - (1 - theta) * a * delta) / (1 + theta * a * delta)
    s2 = (sigma0 / (1 + theta * a * delta)) ** 2 * delta
    var = s2 * sum(rho ** (2 * j) for j in range(K))
    return GaussianLaw(xi0 * rho**K, var)


class TestKde:
    def test_single_sample_is_kernel(self):
        z = np.linspace(-3, 3, 13)
        est = kde([0.5], bandwidth=0.25, grid=z)
        expect = np.exp(-0.5 * (z - 0.5) ** 2 / 0.25) / math.sqrt(2 * math.pi * 0.25)
        assert np.allclose(est.values, expect, rtol=1e-14)

    def test_empty(self):
        with pytest.raises(EmptySamples):
            kde([])

    def test_silverman(self, rng):
        s = rng.normal(size=500)
        h = 1.06 * np.std(s, ddof=1) * 500 ** (-0.2)
        assert silverman_bandwidth(s) == pytest.approx(h * h, rel=1e-14)
        with pytest.raises(EmptySamples):
            silverman_bandwidth([1.0, 1.0])

    @given(st.lists(st.integers(-500, 500), min_size=2, max_size=30, unique=True))
    def test_integrates_to_one(self, ks):
        est = kde(np.array(ks) / 100.0)
        assert est.integral() == pytest.approx(1.0, abs=1e-6)
        assert np.all(est.values >= 0)

    def test_chunking_matches_direct(self, rng):
        s = rng.normal(size=20000)
        z = np.linspace(-4, 4, 300)
        est = kde(s, bandwidth=0.04, grid=z)
        direct = np.mean(np.exp(-0.5 * (s[:, None] - z) ** 2 / 0.04), axis=0) / math.sqrt(2 * math.pi * 0.04)
        assert np.allclose(est.values, direct, rtol=1e-11)

    def test_mean_is_smoothed_law(self, rng):
        law = GaussianLaw(1.0, 0.5)
        z = np.linspace(-2, 4, 121)
        est = kde(rng.normal(1.0, math.sqrt(0.5), size=200000), bandwidth=0.01, grid=z)
        l1, sup = density_distance(est, DensityEstimate.from_function(law.smoothed(0.01).pdf, z))
        assert l1 < 0.01 and sup < 0.01


class TestDistances:
    def test_grid_mismatch(self):
        a = DensityEstimate.from_function(GaussianLaw(0, 1).pdf, np.linspace(-1, 1, 5))
        b = DensityEstimate.from_function(GaussianLaw(0, 1).pdf, np.linspace(-1, 1, 6))
        with pytest.raises(GridMismatch):
            density_distance(a, b)

    def test_shifted_gaussians(self):
        z = np.linspace(-10, 10, 4001)
        a = DensityEstimate.from_function(GaussianLaw(0, 1).pdf, z)
        b = DensityEstimate.from_function(GaussianLaw(1, 1).pdf, z)
        l1, sup = density_distance(a, b)
        # L1 distance between N(0,1) and N(1,1) is 2(2 Phi(1/2) - 1)
        assert l1 == pytest.approx(2 * math.erf(0.5 / math.sqrt(2)), abs=1e-5)
        assert sup > 0


class TestLaws:
    def test_ou_exact(self):
        law = ou_exact_density(a=1.5, sigma0=0.7, xi0=2.0, T=0.8, eps=0.5)
        assert law.mean == pytest.approx(2.0 * math.exp(-1.2))
        assert law.var == pytest.approx(0.5 * 0.49 * (1 - math.exp(-2.4)) / 3.0)
        assert ou_exact_density(1.0, 1.0, 2.0, 0.0).degenerate

    def test_sf_and_logpdf(self):
        law = GaussianLaw(0.0, 4.0)
        assert law.sf(0.0) == pytest.approx(0.5)
        assert law.logpdf(1.0) == pytest.approx(math.log(law.pdf(1.0)))
        assert GaussianLaw(1.0, 0.0).sf(0.5) == 1.0

    def test_scheme_endpoints_follow_discrete_law(self):
        m = ou_model(a=1.0, sigma0=1.0)
        cfg = SchemeConfig(theta=0.75, delta=1 / 16)
        y = endpoint_samples(m, cfg, 2.0, 1.0, 40000, master_seed=3)
        law = theta_ou_law(1.0, 1.0, 0.75, 1 / 16, 2.0, 16)
        assert abs(y.mean() - law.mean) < 4 * law.std / math.sqrt(y.size)
        assert y.var() == pytest.approx(law.var, rel=0.03)


class TestHorizon:
    def test_threshold_formula(self):
        assert dens_con_threshold(2.0, 1, 1.0) == pytest.approx(math.log(1.5) / 12)

    def test_warns_below_horizon(self):
        m = ou_model()
        cfg = SchemeConfig(theta=1.0, delta=1 / 32)
        with pytest.warns(UserWarning):
            t0 = horizon_check(m, cfg, 1e-3)
        assert t0 > 0
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            horizon_check(m, cfg, 1.0)

    def test_no_constants_no_check(self):
        assert horizon_check(cubic_model(), SchemeConfig(), 1.0) is None
