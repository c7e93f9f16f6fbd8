import numpy as np
import pytest
from scipy.stats import multivariate_normal, norm

from grouped_gee.bvn import bvn_cdf, bvn_pdf, frechet_bounds, latent_corr_for_binary


def test_arcsine_identity_at_zero_thresholds():
    r = np.linspace(-0.99, 0.99, 41)
    np.testing.assert_allclose(bvn_cdf(0.0, 0.0, r), 0.25 + np.arcsin(r) / (2 * np.pi), atol=1e-13)


def test_against_scipy(rng):
    for _ in range(30):
        h, k = rng.uniform(-2.5, 2.5, 2)
        r = rng.uniform(-0.95, 0.95)
        ref = multivariate_normal(cov=[[1, r], [r, 1]]).cdf([h, k])
        assert bvn_cdf(h, k, r) == pytest.approx(ref, abs=1e-6)


def test_limits():
    assert bvn_cdf(0.3, -0.2, 0.0) == pytest.approx(norm.cdf(0.3) * norm.cdf(-0.2), abs=1e-15)
    assert bvn_cdf(0.3, -0.2, 1.0) == pytest.approx(norm.cdf(-0.2), abs=1e-10)
    assert bvn_cdf(0.3, -0.2, -1.0) == pytest.approx(max(0, norm.cdf(0.3) + norm.cdf(-0.2) - 1), abs=1e-10)


def test_pdf_is_derivative_in_r():
    h, k, r, e = 0.4, -0.7, 0.3, 1e-6
    fd = (bvn_cdf(h, k, r + e) - bvn_cdf(h, k, r - e)) / (2 * e)
    assert fd == pytest.approx(bvn_pdf(h, k, r), rel=1e-6)


def test_rejects_bad_correlation():
    with pytest.raises(ValueError):
        bvn_cdf(0, 0, 1.5)


def test_frechet_bounds_symmetric():
    lo, hi = frechet_bounds(0.5, 0.5)
    assert lo == pytest.approx(-1.0) and hi == pytest.approx(1.0)
    lo, hi = frechet_bounds(0.1, 0.9)
    assert lo == pytest.approx(-1.0) and hi == pytest.approx(0.01 / 0.09)


def test_latent_zero_target():
    r, clamped = latent_corr_for_binary(0.3, 0.7, 0.0)
    assert r == 0.0 and not clamped


@pytest.mark.parametrize("rho", np.round(np.arange(0.1, 1.0, 0.1), 1))
def test_latent_arcsine(rho):
    # Phi2(0, 0; r) = 1/4 + asin(r)/(2 pi) gives rho = 2 asin(r) / pi at p = 1/2
    r, _ = latent_corr_for_binary(0.5, 0.5, rho)
    assert abs(r - np.sin(np.pi * rho / 2)) < 1e-8


def test_latent_half_half_example():
    r, _ = latent_corr_for_binary(0.5, 0.5, 0.5)
    assert r == pytest.approx(np.sqrt(2) / 2, abs=1e-10)


def test_latent_boundary_and_clamp():
    r, clamped = latent_corr_for_binary(0.5, 0.5, 1.0)
    assert r == 1.0 and not clamped
    r, clamped = latent_corr_for_binary(0.1, 0.9, 0.5)
    assert clamped and r == 1.0


def test_latent_solves_equation(rng):
    ps, pt = rng.uniform(0.1, 0.9, 50), rng.uniform(0.1, 0.9, 50)
    lo, hi = frechet_bounds(ps, pt)
    rho = lo + rng.uniform(0.05, 0.95, 50) * (hi - lo)
    r, clamped = latent_corr_for_binary(ps, pt, rho)
    assert not clamped.any()
    target = rho * np.sqrt(ps * (1 - ps) * pt * (1 - pt)) + ps * pt
    np.testing.assert_allclose(bvn_cdf(norm.ppf(ps), norm.ppf(pt), r), target, atol=1e-10)


def test_latent_monotone_in_target():
    grid = np.linspace(-0.7, 0.5, 50)  # inside the Frechet range (-0.80, 0.53)
    r, _ = latent_corr_for_binary(np.full(50, 0.3), np.full(50, 0.6), grid)
    assert np.all(np.diff(r) > 0)


def test_latent_rejects_degenerate_marginal():
    with pytest.raises(ValueError):
        latent_corr_for_binary(0.0, 0.5, 0.2)
