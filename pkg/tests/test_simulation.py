import numpy as np
import pytest

from grouped_gee.correlation import WorkingCorrelationSpec
from grouped_gee.exceptions import ContractError
from grouped_gee.grouping import GroupedFit
from grouped_gee.simulation import (GROUP_BETAS, SimScenario, align_labels, average_squared_loss,
                                    classification_error, gen_binary_longitudinal, gen_covariates, metrics,
                                    simulate, subject_coefficients, true_groups, truth_ar1, truth_ex)

from oracles import exhaustive_alignment_error

N_BIG = 100_000


def pairwise_corr(Y):
    C = np.corrcoef(Y, rowvar=False)
    return C[np.triu_indices(Y.shape[1], 1)]


@pytest.mark.parametrize("rho", [0.0, 0.4])
def test_covariate_correlation(rho):
    X = gen_covariates(10_000, 10, rho, rng=1)
    assert X.shape == (10_000, 10, 3)
    np.testing.assert_array_equal(X[..., 0], 1.0)
    c = np.corrcoef(X[..., 1].ravel(), X[..., 2].ravel())[0, 1]
    assert abs(c - rho) < 0.02


def test_covariates_deterministic():
    np.testing.assert_array_equal(gen_covariates(5, 4, rng=3), gen_covariates(5, 4, rng=3))


def test_generator_independence_target():
    Y = gen_binary_longitudinal(np.full(4, 0.3), WorkingCorrelationSpec("EX", 0.0), rng=2)
    assert Y.shape == (4,)
    Y = gen_binary_longitudinal(np.full((N_BIG, 4), 0.3), WorkingCorrelationSpec("EX", 0.0), rng=2)
    assert np.max(np.abs(pairwise_corr(Y))) < 0.02


def test_generator_ex_half():
    Y, clamp = gen_binary_longitudinal(np.full((N_BIG, 5), 0.5), truth_ex(), rng=3, return_clamps=True)
    assert clamp == 0.0
    assert abs(Y.mean() - 0.5) < 0.01
    assert np.max(np.abs(pairwise_corr(Y) - 0.5)) < 0.02


def test_generator_marginals_follow_pi(rng):
    pi = rng.uniform(0.15, 0.85, 6)
    for truth in (truth_ex(), truth_ar1()):
        Y = gen_binary_longitudinal(np.tile(pi, (N_BIG, 1)), truth, rng=4)
        np.testing.assert_allclose(Y.mean(0), pi, atol=0.01)


def test_generator_ar1_feasible_targets():
    Y = gen_binary_longitudinal(np.full((N_BIG, 4), 0.5), truth_ar1(), rng=5)
    C = np.corrcoef(Y, rowvar=False)
    for lag in (1, 2, 3):
        assert abs(np.diag(C, lag).mean() - 0.7 ** lag) < 0.02


def test_latent_method_thresholds_target_matrix():
    Y, clamp = gen_binary_longitudinal(np.full((N_BIG, 3), 0.5), truth_ex(), rng=6, return_clamps=True,
                                       method="latent")
    assert clamp == 0.0
    # thresholding at zero maps latent correlation r to 2 asin(r) / pi
    assert abs(pairwise_corr(Y).mean() - 2 * np.arcsin(0.5) / np.pi) < 0.02


def test_generator_rejects_bad_input():
    with pytest.raises(ContractError):
        gen_binary_longitudinal(np.array([0.0, 0.5]), truth_ex())
    with pytest.raises(ContractError):
        gen_binary_longitudinal(np.array([0.2, 0.5]), truth_ex(), method="copula")


def test_true_groups_layout():
    np.testing.assert_array_equal(true_groups(6), [0, 0, 1, 1, 2, 2])
    with pytest.raises(ContractError):
        SimScenario(n=100)


def test_scenario_coefficients(rng):
    np.testing.assert_array_equal(subject_coefficients("S1", 9, rng), GROUP_BETAS[true_groups(9)])
    d = subject_coefficients("S2", 3000, rng) - GROUP_BETAS[true_groups(3000)]
    assert d.min() >= -0.5 and d.max() <= 0.5
    s3 = subject_coefficients("S3", 3000, rng)
    assert np.all(np.abs(s3[:, 0]) <= 0.2) and np.all(np.abs(s3[:, 1]) <= 2)
    assert s3[:, 2].min() >= 0 and s3[:, 2].max() <= 2


def test_simulate_deterministic_and_shapes():
    a = simulate(SimScenario(n=30, T=4, seed=8))
    b = simulate(SimScenario(n=30, T=4, seed=8))
    np.testing.assert_array_equal(a.data.blocks[0].Y, b.data.blocks[0].Y)
    assert a.data.n == 30 and a.data.p == 3 and a.probs.shape == (30, 4)
    assert set(np.unique(a.data.blocks[0].Y)) <= {0.0, 1.0}


# ---------------------------------------------------------------------------
# label alignment and metrics

def test_align_identity_and_swap():
    t = np.array([0, 0, 1, 1, 2])
    np.testing.assert_array_equal(align_labels(t, t, 3), [0, 1, 2])
    swapped = np.array([1, 1, 0, 0, 2])
    sigma = align_labels(swapped, t, 3)
    np.testing.assert_array_equal(sigma, [1, 0, 2])
    assert classification_error(swapped, t, 3) == 0.0


def test_align_hand_example():
    est, truth = np.array([0, 0, 1, 1, 2]), np.array([1, 1, 0, 0, 0])
    np.testing.assert_array_equal(align_labels(est, truth, 3), [1, 0, 2])
    assert classification_error(est, truth, 3) == pytest.approx(1 / 5)


def test_hungarian_agrees_with_exhaustive(rng):
    for _ in range(100):
        G = int(rng.integers(1, 7))
        truth = rng.integers(G, size=40)
        est = np.where(rng.random(40) < 0.6, rng.permutation(G)[truth], rng.integers(G, size=40))
        ce_h = classification_error(est, truth, G, align_labels(est, truth, G, "hungarian"))
        ce_e = classification_error(est, truth, G, align_labels(est, truth, G, "exhaustive"))
        assert ce_h == ce_e
        assert ce_e == pytest.approx(exhaustive_alignment_error(est, truth, G))
        assert ce_e <= np.mean(est != truth)


def test_align_length_mismatch():
    with pytest.raises(ContractError):
        align_labels([0, 1], [0], 2)


def make_fit(betas, assignments):
    return GroupedFit(G=len(betas), betas=np.asarray(betas, float), assignments=np.asarray(assignments),
                      corr=[WorkingCorrelationSpec("ID")], group_fits=[], outer_iterations=1, converged=True,
                      objective=0.0, history=[])


def test_metrics_perfect():
    sim = simulate(SimScenario(n=30, T=3, seed=1))
    m = metrics(make_fit(GROUP_BETAS, sim.groups), sim)
    np.testing.assert_array_equal(m.sel_by_group, 0.0)
    assert m.ce == 0.0 and m.asl == 0.0


def test_metrics_sel_shifted_and_relabelled():
    sim = simulate(SimScenario(n=30, T=3, seed=1))
    perm = np.array([2, 0, 1])  # true label -> estimated label
    betas = np.empty((3, 3))
    betas[perm] = GROUP_BETAS + np.array([5.0, 0.1, -0.1])  # intercept error is ignored
    m = metrics(make_fit(betas, perm[sim.groups]), sim)
    np.testing.assert_allclose(m.sel_by_group, 0.02, atol=1e-14)
    assert m.ce == 0.0
    assert m.asl == pytest.approx(0.02)


def test_metrics_g_mismatch():
    sim = simulate(SimScenario(n=30, T=3, seed=1))
    with pytest.raises(ContractError):
        metrics(make_fit(GROUP_BETAS[:2], sim.groups % 2), sim)
    # ASL is defined for any number of groups
    assert average_squared_loss(make_fit(GROUP_BETAS[:2], sim.groups % 2), sim) >= 0
