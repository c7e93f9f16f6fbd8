import numpy as np
import pytest

from grouped_gee import (FitOptions, InitStrategy, LongitudinalDataset, SimScenario, Subject, assign_groups,
                         distance_matrix, fit, fit_gee, init_fit, mahalanobis_distance, simulate,
                         solve_group_gee)
from grouped_gee.correlation import WorkingCorrelationSpec, build_matrix
from grouped_gee.exceptions import ContractError
from grouped_gee.grouping import _reseed_empty, kmeans
from grouped_gee.simulation import classification_error

from oracles import brute_force_assign


def test_mahalanobis_examples():
    L2 = np.eye(2)
    assert mahalanobis_distance([1, 2], np.eye(2), "gaussian", [1, 2], L2) == 0.0
    assert mahalanobis_distance([1, -2], np.eye(2), "gaussian", [0, 0], L2) == 5.0
    L = np.linalg.cholesky(np.array([[1, .5], [.5, 1]]))
    assert mahalanobis_distance([1, 1], np.eye(2), "gaussian", [0, 0], L) == pytest.approx(4 / 3, rel=1e-14)


def test_mahalanobis_dimension_mismatch():
    with pytest.raises(ContractError):
        mahalanobis_distance([1, 1, 1], np.eye(3), "gaussian", [0, 0, 0], np.eye(2))


def random_gaussian(rng, n=20, T=4, p=2):
    return LongitudinalDataset.from_arrays(rng.standard_normal((n, T)), rng.standard_normal((n, T, p)))


def test_assign_single_group(rng):
    data = random_gaussian(rng)
    np.testing.assert_array_equal(assign_groups(data, "gaussian", np.zeros((1, 2)), "ID"), 0)


def test_assign_identity_is_least_squares(rng):
    data = random_gaussian(rng)
    betas = rng.standard_normal((3, 2))
    Y, X = data.blocks[0].Y, data.blocks[0].X
    sse = np.stack([((Y - X @ b) ** 2).sum(1) for b in betas], axis=1)
    np.testing.assert_array_equal(assign_groups(data, "gaussian", betas, "ID"), sse.argmin(1))


def test_assign_matches_brute_force_bernoulli(rng):
    for _ in range(20):
        n, T, G = int(rng.integers(1, 30)), int(rng.integers(2, 6)), int(rng.integers(1, 5))
        Y = (rng.random((n, T)) < 0.5).astype(float)
        X = rng.standard_normal((n, T, 3))
        betas = rng.standard_normal((G, 3))
        R = build_matrix(WorkingCorrelationSpec("AR1", rng.uniform(-0.8, 0.8)), T)
        data = LongitudinalDataset.from_arrays(Y, X)
        oracle = brute_force_assign(Y, X, betas, R, mean=lambda e: 1 / (1 + np.exp(-e)))
        np.testing.assert_array_equal(assign_groups(data, "bernoulli", betas, R), oracle)


def test_ties_go_to_smallest_index(rng):
    data = random_gaussian(rng)
    betas = np.zeros((3, 2))
    np.testing.assert_array_equal(assign_groups(data, "gaussian", betas, "ID"), 0)


def test_distance_matrix_per_group_factors(rng):
    data = random_gaussian(rng, T=3)
    betas = rng.standard_normal((2, 2))
    specs = [WorkingCorrelationSpec("EX", 0.3), WorkingCorrelationSpec("EX", -0.2)]
    D = distance_matrix(data, "gaussian", betas, specs)
    for i, s in enumerate(data.subjects):
        for g in range(2):
            r = s.y - s.X @ betas[g]
            assert D[i, g] == pytest.approx(r @ np.linalg.solve(specs[g].matrix(3), r), rel=1e-12)


def test_kmeans_separated_points():
    pts = np.array([[0.0, 0.0], [0.0, 0.0], [5.0, 5.0]])
    centers, labels, inertia = kmeans(pts, 2, rng=0)
    assert inertia == 0.0
    assert labels[0] == labels[1] != labels[2]
    np.testing.assert_array_equal(centers[labels[2]], [5.0, 5.0])


def test_init_two_distinct_points():
    # per-subject least-squares fits are exactly (1, 2), (1, 2) and (-1, 0)
    rng = np.random.default_rng(3)
    X = rng.standard_normal((3, 4, 2))
    b = np.array([[1.0, 2.0], [1.0, 2.0], [-1.0, 0.0]])
    Y = np.einsum("ntp,np->nt", X, b)
    betas, labels, _ = init_fit(LongitudinalDataset.from_arrays(Y, X), "gaussian", 2)
    assert labels[0] == labels[1] != labels[2]
    np.testing.assert_allclose(betas[labels[0]], [1, 2], atol=1e-8)
    np.testing.assert_allclose(betas[labels[2]], [-1, 0], atol=1e-8)


def test_init_requires_long_subjects(rng):
    with pytest.raises(ContractError):
        init_fit(random_gaussian(rng, T=2, p=2), "gaussian", 2)


def test_init_degenerate_falls_back(rng):
    X = rng.standard_normal((6, 4, 1))
    Y = X[..., 0] * 1.5
    betas, g, diag = init_fit(LongitudinalDataset.from_arrays(Y, X), "gaussian", 2)
    assert any("degenerate" in d for d in diag)
    assert set(g.tolist()) == {0, 1}


def test_random_restarts_reproducible(rng):
    data = random_gaussian(rng)
    s = InitStrategy.random_restarts(1, seed=11)
    a = init_fit(data, "gaussian", 3, s)[1]
    b = init_fit(data, "gaussian", 3, s)[1]
    np.testing.assert_array_equal(a, b)


def test_kmeans_init_ce_s1():
    sim = simulate(SimScenario(n=60, T=20, seed=5))
    _, labels, _ = init_fit(sim.data, "bernoulli", 3)
    assert classification_error(labels, sim.groups, 3) < 0.2


@pytest.mark.parametrize("structure", ["ID", "EX", "AR1", "UN"])
def test_single_group_is_plain_gee(structure):
    sim = simulate(SimScenario(n=60, T=5, seed=2))
    res = fit(sim.data, "bernoulli", 1, structure)
    assert np.all(res.assignments == 0)
    direct = solve_group_gee(sim.data, "bernoulli", np.zeros(3), res.corr[0])
    np.testing.assert_allclose(res.betas[0], direct.beta, rtol=0, atol=1e-10)
    gee = fit_gee(sim.data, "bernoulli", structure)
    np.testing.assert_allclose(res.corr[0].alpha, gee.corr.alpha, atol=1e-6)
    np.testing.assert_allclose(res.betas[0], gee.beta, atol=1e-6)


def test_noiseless_two_groups_exact():
    rng = np.random.default_rng(7)
    X = rng.standard_normal((40, 6, 2))
    truth = np.repeat([0, 1], 20)
    B = np.array([[1.0, -1.0], [-2.0, 3.0]])
    Y = np.einsum("ntp,np->nt", X, B[truth])
    res = fit(LongitudinalDataset.from_arrays(Y, X), "gaussian", 2, "EX")
    assert classification_error(res.assignments, truth, 2) == 0.0
    order = np.argsort(res.betas[:, 0])[::-1]
    np.testing.assert_allclose(res.betas[order], B, atol=1e-8)
    assert res.converged


def check_invariants(res, data):
    assert res.assignments.min() >= 0 and res.assignments.max() < res.G
    D = distance_matrix(data, res.family, res.betas, res.factors())
    own = D[np.arange(data.n), res.assignments]
    assert np.all(own <= D.min(axis=1) + 1e-12)
    assert res.objective == pytest.approx(own.sum())
    if res.converged:
        assert res.history[-1] == 0
    assert res.outer_iterations <= 100


@pytest.mark.parametrize("structure", ["ID", "EX", "AR1", "UN"])
@pytest.mark.parametrize("seed", [0, 1])
def test_fit_invariants(structure, seed):
    sim = simulate(SimScenario(n=90, T=8, seed=seed))
    res = fit(sim.data, "bernoulli", 3, structure)
    check_invariants(res, sim.data)
    assert len(res.group_fits) == 3
    assert res.std_errors.shape == (3, 3)


def test_heterogeneous_alpha():
    sim = simulate(SimScenario(n=90, T=8, seed=3))
    res = fit(sim.data, "bernoulli", 3, "EX", opts=FitOptions(heterogeneous_alpha=True))
    assert res.heterogeneous and len(res.corr) == 3
    check_invariants(res, sim.data)


def test_random_restarts_keep_best():
    sim = simulate(SimScenario(n=60, T=8, seed=4))
    res = fit(sim.data, "bernoulli", 3, "EX", InitStrategy.random_restarts(3, seed=1))
    singles = [fit(sim.data, "bernoulli", 3, "EX", InitStrategy.random_restarts(k + 1, seed=1)).objective
               for k in range(3)]
    assert res.objective == min(singles)
    check_invariants(res, sim.data)


def test_deterministic():
    sim = simulate(SimScenario(n=60, T=8, seed=9))
    a = fit(sim.data, "bernoulli", 3, "AR1", InitStrategy(seed=4))
    b = fit(sim.data, "bernoulli", 3, "AR1", InitStrategy(seed=4))
    np.testing.assert_array_equal(a.betas, b.betas)
    np.testing.assert_array_equal(a.assignments, b.assignments)
    np.testing.assert_array_equal(a.corr[0].alpha, b.corr[0].alpha)
    assert a.history == b.history and a.objective == b.objective


def test_unbalanced_fit():
    rng = np.random.default_rng(1)
    subs = []
    for i in range(60):
        T = int(rng.integers(5, 9))
        X = np.column_stack([np.ones(T), rng.standard_normal(T)])
        beta = [0.0, 2.0] if i % 2 else [0.0, -2.0]
        subs.append(Subject(str(i), X @ beta + 0.3 * rng.standard_normal(T), X, np.arange(1.0, T + 1)))
    data = LongitudinalDataset(subs)
    res = fit(data, "gaussian", 2, "AR1")
    check_invariants(res, data)
    assert classification_error(res.assignments, np.arange(60) % 2, 2) == 0.0
    with pytest.raises(ContractError):
        fit(data, "gaussian", 2, "UN")


def test_bad_group_count(rng):
    with pytest.raises(ContractError):
        fit(random_gaussian(rng, T=4), "gaussian", 0)


def test_reseed_empty_moves_farthest():
    g = np.array([0, 0, 0, 1])
    D = np.array([[1.0, 9], [5.0, 9], [2.0, 9], [9, 0.5]])
    diag = []
    out = _reseed_empty(g.copy(), D, 3, diag)
    np.testing.assert_array_equal(out, [0, 2, 0, 1])
    assert diag


def test_s1_binary_ce_180_20():
    ces = []
    for rep in range(200):
        sim = simulate(SimScenario(n=180, T=20, seed=1000 + rep))
        res = fit(sim.data, "bernoulli", 3, "EX", InitStrategy(seed=rep))
        ces.append(classification_error(res.assignments, sim.groups, 3))
    assert abs(np.mean(ces) - 0.015) <= 0.02
