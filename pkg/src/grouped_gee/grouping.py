"""Simultaneous grouping of subjects and per-group GEE estimation.

Each outer iteration (1) assigns every subject to the group whose fitted mean
is closest in the Mahalanobis metric of the current working correlation,
(2) re-solves each group's estimating equation with the correlation held
fixed, and (3) re-estimates the correlation parameter from the new fit.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .correlation import (CorrelationFactor, Structure, WorkingCorrelationSpec,
                          empirical_moment_matrix, estimate_alpha)
from .data import LongitudinalDataset
from .exceptions import ContractError, NumericError
from .families import FamilySpec, as_family
from .solver import GroupFit, SolverOptions, as_factor, solve_group_gee, subjectwise_glm

log = logging.getLogger(__name__)

#: Bound on the assignment re-checks after the final coefficient solve.
FINAL_PASSES = 10


class InitKind(str, Enum):
    KMEANS = "kmeans"
    RANDOM = "random"


@dataclass(frozen=True)
class InitStrategy:
    """How to start the alternating algorithm.

    ``KMEANS`` clusters subject-wise GLM estimates; ``RANDOM`` draws uniform
    assignments ``restarts`` times and keeps the best final objective.
    """

    kind: InitKind = InitKind.KMEANS
    restarts: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", InitKind(self.kind))
        if self.restarts < 1:
            raise ContractError("restarts must be at least 1")

    @classmethod
    def random_restarts(cls, count: int, seed: int = 0) -> "InitStrategy":
        return cls(InitKind.RANDOM, count, seed)


@dataclass(frozen=True)
class FitOptions:
    tol_beta: float = 1e-6
    max_outer: int = 100
    heterogeneous_alpha: bool = False
    kmeans_init: int = 50
    kmeans_iter: int = 100
    init_ridge: float = 1e-2
    stall_patience: int = 5   # stop once assignments are this stable but some group has no root
    solver: SolverOptions = field(default_factory=SolverOptions)


@dataclass
class GroupedFit:
    """Outcome of the grouped GEE algorithm.

    Group labels are 0-based.  ``corr`` holds one working correlation, or one
    per group when ``heterogeneous`` is set.
    """

    G: int
    betas: np.ndarray
    assignments: np.ndarray
    corr: list
    group_fits: list
    outer_iterations: int
    converged: bool
    objective: float
    history: list
    family: FamilySpec = field(default_factory=FamilySpec)
    diagnostics: list = field(default_factory=list)
    seed: int | None = None
    restart: int = 0

    @property
    def heterogeneous(self) -> bool:
        return len(self.corr) > 1

    @property
    def structure(self) -> Structure:
        return self.corr[0].structure

    def corr_for(self, g: int) -> WorkingCorrelationSpec:
        return self.corr[g] if self.heterogeneous else self.corr[0]

    def factors(self) -> list:
        return [CorrelationFactor(c) for c in self.corr]

    @property
    def std_errors(self) -> np.ndarray:
        return np.stack([gf.std_errors for gf in self.group_fits])

    @property
    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.G)


def mahalanobis_distance(y, X, family, beta_g, R_chol) -> float:
    """``r^T R^{-1} r`` for the raw residual ``r = y - m(X beta_g)``.

    ``R_chol`` is the lower Cholesky factor of the working correlation.
    """
    from scipy.linalg import solve_triangular

    family = as_family(family)
    y = np.asarray(y, dtype=float)
    R_chol = np.asarray(R_chol, dtype=float)
    if R_chol.shape != (len(y), len(y)):
        raise ContractError(f"subject length {len(y)} does not match correlation of size {R_chol.shape}")
    r = y - family.mean(np.asarray(X, dtype=float) @ np.asarray(beta_g, dtype=float))
    z = solve_triangular(R_chol, r, lower=True)
    return float(z @ z)


def distance_matrix(data: LongitudinalDataset, family, betas, factors) -> np.ndarray:
    """``(n, G)`` matrix of Mahalanobis distances of every subject to every group.

    ``factors`` is a single correlation (spec, matrix or factor) or a list with
    one entry per group.
    """
    family = as_family(family)
    betas = np.atleast_2d(np.asarray(betas, dtype=float))
    G = len(betas)
    if isinstance(factors, (list, tuple)):
        factors = [as_factor(f) for f in factors]
    else:
        factors = [as_factor(factors)]
    out = np.empty((data.n, G))
    for b in data.blocks:
        if len(factors) == 1:
            mu, _ = family.mean_variance(b.X @ betas.T)  # (m, T, G)
            z = factors[0].whiten(b.T, b.Y[..., None] - mu)
            out[b.index] = np.einsum("mtg,mtg->mg", z, z)
        else:
            for g in range(G):
                mu, _ = family.mean_variance(b.X @ betas[g])
                z = factors[g].whiten(b.T, b.Y - mu)
                out[b.index, g] = np.einsum("mt,mt->m", z, z)
    return out


def assign_groups(data, family, betas, R_hat) -> np.ndarray:
    """Closest group per subject; ties go to the smallest group index."""
    return np.argmin(distance_matrix(data, family, betas, R_hat), axis=1)


def kmeans(points, k: int, n_init: int = 50, max_iter: int = 100, rng=None):
    """Lloyd's algorithm with k-means++ seeding, all restarts run as one batch.

    Returns ``(centers, labels, inertia)`` of the restart with least inertia.
    """
    rng = np.random.default_rng(rng)
    X = np.asarray(points, dtype=float)
    n, d = X.shape
    if k > n:
        raise ContractError(f"cannot form {k} clusters from {n} points")
    R = n_init
    C = np.empty((R, k, d))
    C[:, 0] = X[rng.integers(n, size=R)]
    d2 = ((X[None] - C[:, :1]) ** 2).sum(-1)  # (R, n)
    for j in range(1, k):
        tot = d2.sum(1, keepdims=True)
        probs = np.where(tot > 0, d2 / np.where(tot > 0, tot, 1.0), 1.0 / n)
        cdf = np.cumsum(probs, axis=1)
        u = rng.random((R, 1)) * cdf[:, -1:]
        pick = np.minimum((cdf < u).sum(1), n - 1)
        C[:, j] = X[pick]
        d2 = np.minimum(d2, ((X[None] - C[:, j:j + 1]) ** 2).sum(-1))

    labels = np.full((R, n), -1)
    for _ in range(max_iter):
        dist = ((X[None, :, None, :] - C[:, None]) ** 2).sum(-1)  # (R, n, k)
        new = dist.argmin(-1)
        if np.array_equal(new, labels):
            break
        labels = new
        onehot = labels[..., None] == np.arange(k)  # (R, n, k)
        counts = onehot.sum(1)  # (R, k)
        sums = np.einsum("rnk,nd->rkd", onehot.astype(float), X)
        C = np.where(counts[..., None] > 0, sums / np.maximum(counts, 1)[..., None], C)
    dist = ((X[None, :, None, :] - C[:, None]) ** 2).sum(-1)
    labels = dist.argmin(-1)
    inertia = np.take_along_axis(dist, labels[..., None], -1)[..., 0].sum(1)
    best = int(np.argmin(inertia))
    return C[best], labels[best], float(inertia[best])


def _random_assignments(n, G, rng):
    g = rng.integers(G, size=n)
    # every group gets at least one subject
    g[rng.permutation(n)[:G]] = np.arange(G)
    return g


def _fit_groups(data, family, betas_init, g, factors, G, opts, compute_cov=False):
    fits = []
    for k in range(G):
        members = g == k
        blocks = [b.take(members[b.index]) for b in data.blocks]
        fits.append(solve_group_gee(blocks, family, betas_init[k], factors[k if len(factors) > 1 else 0],
                                    opts.solver, compute_cov))
    return fits


def init_fit(data: LongitudinalDataset, family, G: int, strategy: InitStrategy | None = None,
             opts: FitOptions | None = None, rng=None):
    """Starting coefficients, assignments and (independence) correlation.

    Returns ``(betas, assignments, diagnostics)``.  With the k-means strategy
    each subject gets its own GLM fit and the ``G`` cluster centres of those
    estimates become the starting coefficients.
    """
    strategy = strategy or InitStrategy()
    opts = opts or FitOptions()
    family = as_family(family)
    rng = np.random.default_rng(strategy.seed if rng is None else rng)
    diagnostics = []
    if G < 1 or G > data.n:
        raise ContractError(f"G must lie in 1..{data.n}, got {G}")
    if strategy.kind is InitKind.KMEANS:
        if data.lengths.min() < data.p + 1:
            raise ContractError(
                f"subject-wise initialization needs every T_i >= p + 1 = {data.p + 1}")
        est, ridged = subjectwise_glm(data, family, ridge=opts.init_ridge)
        if ridged.any():
            diagnostics.append(f"{int(ridged.sum())} subject-wise fits used the ridge fallback")
        # estimates equal up to roundoff count as one point
        scale = max(1.0, float(np.max(np.abs(est))))
        if len(np.unique(np.round(est / scale, 8), axis=0)) >= G:
            centers, labels, _ = kmeans(est, G, opts.kmeans_init, opts.kmeans_iter, rng)
            return centers, labels, diagnostics
        diagnostics.append("subject-wise estimates are degenerate; falling back to a random start")
    g = _random_assignments(data.n, G, rng)
    ident = as_factor(Structure.ID)
    fits = _fit_groups(data, family, np.zeros((G, data.p)), g, [ident], G,
                       replace(opts, solver=replace(opts.solver, max_iter=25)))
    return np.stack([f.beta for f in fits]), g, diagnostics


def _reseed_empty(g, D, G, diagnostics):
    counts = np.bincount(g, minlength=G)
    for k in np.flatnonzero(counts == 0):
        own = D[np.arange(len(g)), g]
        movable = counts[g] > 1
        if not movable.any():
            break
        i = int(np.argmax(np.where(movable, own, -np.inf)))
        diagnostics.append(f"group {k} emptied; reseeded with subject {i}")
        counts[g[i]] -= 1
        g[i] = k
        counts[k] = 1
    return g


def _update_corr(data, family, structure, betas, g, G, heterogeneous, current):
    if structure is Structure.ID:
        return current
    if not heterogeneous:
        S = empirical_moment_matrix(data, family, betas, g)
        return [WorkingCorrelationSpec(structure, estimate_alpha(structure, S))]
    out = []
    for k in range(G):
        if not np.any(g == k):
            out.append(current[k])
            continue
        S = empirical_moment_matrix(data, family, betas, g, restrict_to_group=k)
        out.append(WorkingCorrelationSpec(structure, estimate_alpha(structure, S), True))
    return out


def _run(data, family, G, structure, betas, g, opts, diagnostics):
    het = opts.heterogeneous_alpha
    start = WorkingCorrelationSpec.independence_start(structure, data.max_T, het)
    corr = [start] * (G if het else 1)
    history = []
    seen = {}
    snapshots = []
    delta = np.inf
    converged = False
    cycled = False
    stable = 0
    stalled = False
    unsolved = []
    r = 0
    while r < opts.max_outer:
        factors = [CorrelationFactor(c) for c in corr]
        D = distance_matrix(data, family, betas, factors)
        new_g = np.argmin(D, axis=1)
        objective = float(D[np.arange(data.n), new_g].sum())
        new_g = _reseed_empty(new_g, D, G, diagnostics)
        changes = int((new_g != g).sum())
        if r > 0:
            history.append(changes)
            if changes == 0 and delta < opts.tol_beta:
                converged = True
                break
            stable = stable + 1 if changes == 0 else 0
            if stable >= opts.stall_patience and unsolved:
                diagnostics.append(
                    f"groups {unsolved} have no finite solution (separation?); stopped after "
                    f"{stable} outer iterations without assignment changes")
                stalled = True
                break
        key = new_g.tobytes()
        if key in seen and seen[key] < r - 1:
            cycled = True
            diagnostics.append(f"assignment cycle detected at outer iteration {r}")
            break
        seen[key] = r
        snapshots.append((objective, betas, new_g, corr))
        g = new_g
        r += 1
        fits = _fit_groups(data, family, betas, g, factors, G, opts)
        new_betas = np.stack([f.beta for f in fits])
        unsolved = [k for k, f in enumerate(fits) if not f.converged]
        delta = float(np.max(np.abs(new_betas - betas)))
        betas = new_betas
        corr = _update_corr(data, family, structure, betas, g, G, het, corr)

    if cycled:
        _, betas, g, corr = min(snapshots, key=lambda s: s[0])
    elif not (converged or stalled):
        diagnostics.append(f"outer iteration cap {opts.max_outer} reached")

    # final solve: coefficients are exact roots under the reported correlation
    factors = [CorrelationFactor(c) for c in corr]
    fits = _fit_groups(data, family, betas, g, factors, G, opts, compute_cov=True)
    betas = np.stack([f.beta for f in fits])
    D = distance_matrix(data, family, betas, factors)
    # the reported assignments must be optimal for the reported coefficients
    for _ in range(FINAL_PASSES):
        best = np.argmin(D, axis=1)
        if np.array_equal(best, g) or not np.all(np.bincount(best, minlength=G) > 0):
            break
        diagnostics.append(f"{int((best != g).sum())} assignments moved after the final solve")
        g = best
        fits = _fit_groups(data, family, betas, g, factors, G, opts, compute_cov=True)
        betas = np.stack([f.beta for f in fits])
        D = distance_matrix(data, family, betas, factors)
    objective = float(D[np.arange(data.n), g].sum())
    return GroupedFit(G=G, betas=betas, assignments=g, corr=list(corr), group_fits=fits,
                      outer_iterations=r, converged=converged, objective=objective,
                      history=history, family=family, diagnostics=diagnostics)


def fit(data: LongitudinalDataset, family, G: int, corr_structure="EX",
        strategy: InitStrategy | None = None, opts: FitOptions | None = None) -> GroupedFit:
    """Grouped GEE estimate with ``G`` groups.

    Parameters
    ----------
    data : LongitudinalDataset
    family : FamilySpec or str
    G : int
        Number of groups.
    corr_structure : {"ID", "EX", "AR1", "UN"}
        Working correlation; UN requires balanced data.
    strategy : InitStrategy, optional
        Initialization; defaults to k-means on subject-wise estimates.
    opts : FitOptions, optional

    Returns
    -------
    GroupedFit
        For random restarts, the restart with the smallest total distance.
    """
    family = as_family(family)
    structure = Structure.parse(corr_structure)
    strategy = strategy or InitStrategy()
    opts = opts or FitOptions()
    if structure is Structure.UN and not data.balanced:
        raise ContractError("UN working correlation requires balanced data")
    best = None
    for k in range(strategy.restarts):
        rng = np.random.default_rng([strategy.seed, k])
        diagnostics = []
        try:
            betas, g, diag = init_fit(data, family, G, strategy, opts, rng)
            diagnostics.extend(diag)
            res = _run(data, family, G, structure, betas, np.asarray(g), opts, diagnostics)
        except NumericError as e:
            raise NumericError(f"restart {k}: {e}") from e
        res.seed = strategy.seed
        res.restart = k
        if best is None or res.objective < best.objective:
            best = res
    return best
