import numpy as np
import pytest
from hypothesis import given, strategies as st

from grouped_gee.exceptions import ContractError
from grouped_gee.families import ETA_CLAMP, Family, FamilySpec, as_family, mean, subject_matrices, variance

from oracles import central_difference

BERN, GAUSS, POIS = (FamilySpec(f) for f in Family)


def test_mean_examples():
    assert mean(BERN, 0.0) == 0.5
    assert mean(GAUSS, 1.7) == 1.7
    assert mean(BERN, 2.0) == pytest.approx(1 / (1 + np.exp(-2.0)), abs=1e-15)
    assert mean(BERN, 2.0) == pytest.approx(0.880797, abs=1e-6)


def test_variance_examples():
    assert variance(BERN, 0.0) == 0.25
    assert variance(GAUSS, 3.2) == 1.0
    assert variance(POIS, 0.0) == 1.0


def test_variance_scales_with_phi():
    assert variance(FamilySpec("gaussian", 2.5), 0.3) == 2.5
    assert variance(FamilySpec("bernoulli", 2.0), 0.0) == 0.5


def test_non_finite_eta_rejected():
    for fam in (BERN, GAUSS, POIS):
        with pytest.raises(ContractError):
            fam.mean(np.nan)
        with pytest.raises(ContractError):
            fam.variance(np.inf)


def test_bad_scale_rejected():
    with pytest.raises(ContractError):
        FamilySpec("gaussian", 0.0)


def test_as_family_accepts_names():
    assert as_family("poisson") == POIS
    assert as_family(Family.GAUSSIAN_IDENTITY) == GAUSS
    assert as_family(BERN) is BERN


def test_subject_matrices_gaussian_single():
    m = subject_matrices(GAUSS, [[1.0]], [2.0])
    np.testing.assert_array_equal(m.mu, [2.0])
    np.testing.assert_array_equal(m.A, [[1.0]])
    np.testing.assert_array_equal(m.Delta, [[1.0]])
    np.testing.assert_array_equal(m.D, [[1.0]])


def test_subject_matrices_zero_coefficients():
    m = subject_matrices(BERN, [[1, 0], [1, 1]], [0, 0])
    np.testing.assert_array_equal(m.mu, [0.5, 0.5])
    np.testing.assert_array_equal(m.A, np.diag([0.25, 0.25]))
    np.testing.assert_array_equal(m.Delta, np.eye(2))
    np.testing.assert_array_equal(m.D, [[0.25, 0.0], [0.25, 0.25]])


def test_subject_matrices_hand_values():
    m = subject_matrices(BERN, [[1, 2]], [0, 1])
    p = 1 / (1 + np.exp(-2.0))
    assert m.mu[0] == pytest.approx(0.880797, abs=1e-6)
    assert m.A[0, 0] == pytest.approx(p * (1 - p), rel=1e-14)
    assert m.A[0, 0] == pytest.approx(0.104994, abs=1e-6)
    np.testing.assert_allclose(m.D, [[p * (1 - p), 2 * p * (1 - p)]], rtol=1e-14)
    assert m.D[0, 1] == pytest.approx(0.209987, abs=1e-6)


def test_subject_matrices_shape_mismatch():
    with pytest.raises(ContractError):
        subject_matrices(BERN, np.ones((3, 2)), np.ones(3))


@given(st.sampled_from(list(Family)),
       st.lists(st.floats(-5, 5), min_size=1, max_size=6).flatmap(
           lambda b: st.tuples(st.just(b), st.lists(st.lists(st.floats(-3, 3), min_size=len(b), max_size=len(b)),
                                                     min_size=1, max_size=6))))
def test_d_reconstruction_and_positivity(fam, args):
    beta, X = np.array(args[0]), np.array(args[1])
    m = subject_matrices(fam, X, beta)
    np.testing.assert_array_equal(m.D, m.A @ m.Delta @ X)
    assert np.all(np.diag(m.A) > 0)
    if fam is Family.BERNOULLI_LOGIT:
        assert np.all((m.mu > 0) & (m.mu < 1))


@pytest.mark.parametrize("fam", [BERN, POIS, GAUSS])
def test_mean_derivative_is_variance(fam, rng):
    for eta in rng.uniform(-4, 4, 20):
        fd = central_difference(lambda e: fam.mean(e), eta)
        assert abs(fd - fam.variance(eta) / fam.scale_phi) < 1e-6
        assert fam.link_deriv(eta) == 1.0


@pytest.mark.parametrize("fam", [BERN, POIS])
def test_mean_monotone(fam):
    grid = np.linspace(-30, 30, 2001)
    assert np.all(np.diff(fam.mean(grid)) >= 0)
    assert np.all(np.diff(fam.mean(np.linspace(-5, 5, 101))) > 0)


def test_extreme_predictor_is_clamped():
    assert np.isfinite(POIS.mean(1e4))
    assert POIS.mean(1e4) == np.exp(ETA_CLAMP)
    assert BERN.variance(-1e4) > 0
    assert 0 < BERN.mean(-1e4) < 1
