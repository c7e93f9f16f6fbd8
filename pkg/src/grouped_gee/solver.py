"""Generalized estimating equations for one group of subjects.

The working covariance of subject ``i`` is ``V_i = A_i^{1/2} R A_i^{1/2}``,
so ``D_i^T V_i^{-1} r_i = (A_i^{1/2} Delta_i X_i)^T R^{-1} (A_i^{-1/2} r_i)``.
Both factors are whitened with the Cholesky factor of ``R``; no inverse is
ever formed.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .correlation import (CorrelationFactor, Structure, WorkingCorrelationSpec,
                          empirical_moment_matrix, estimate_alpha)
from .data import Block, LongitudinalDataset
from .exceptions import ContractError, NumericError
from .families import as_family

log = logging.getLogger(__name__)

#: Relative size of the smallest squared Cholesky pivot below which H is treated as singular.
RANK_TOL = 1e-13

#: Subject-wise fits with a fitted linear predictor beyond this are treated as separated.
SEPARATION_ETA = 10.0


@dataclass(frozen=True)
class SolverOptions:
    tol_step: float = 1e-8
    tol_score: float = 1e-8
    max_iter: int = 50
    max_halvings: int = 10
    ridge: float = 1e-8
    max_step: float = 10.0

    def __post_init__(self):
        if min(self.tol_step, self.tol_score, self.ridge) <= 0 or self.max_iter < 1:
            raise ContractError("solver tolerances and max_iter must be positive")


@dataclass
class GroupFit:
    """Result of solving one group's estimating equation."""

    beta: np.ndarray
    iterations: int
    converged: bool
    score_norm: float
    H: np.ndarray
    sandwich_cov: np.ndarray | None
    n_g: int
    diagnostics: list = field(default_factory=list)

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.sandwich_cov), 0.0, None))


def as_blocks(group) -> list[Block]:
    if isinstance(group, LongitudinalDataset):
        return group.blocks
    return list(group)


def as_factor(R_hat) -> CorrelationFactor:
    """Accept a ``CorrelationFactor``, a spec, or a fixed ``T x T`` matrix."""
    if isinstance(R_hat, CorrelationFactor):
        return R_hat
    if isinstance(R_hat, WorkingCorrelationSpec):
        return CorrelationFactor(R_hat)
    if isinstance(R_hat, (str, Structure)):
        return CorrelationFactor(WorkingCorrelationSpec(R_hat))
    return FixedFactor(R_hat)


class FixedFactor(CorrelationFactor):
    """A user-supplied correlation matrix for a single subject length."""

    def __init__(self, R):
        R = np.asarray(R, dtype=float)
        if R.ndim != 2 or R.shape[0] != R.shape[1]:
            raise ContractError("R_hat must be a square matrix")
        self.R = R
        self.spec = None
        self._inv = {}
        self._identity = False
        try:
            self._L = linalg.cholesky(R, lower=True)
        except linalg.LinAlgError:
            raise NumericError("R_hat is not positive definite") from None

    def cholesky(self, T: int) -> np.ndarray:
        if T != self.R.shape[0]:
            raise ContractError(f"subject length {T} does not match R_hat of size {self.R.shape[0]}")
        return self._L


def _contributions(blocks, family, beta, factor, per_subject=False):
    """Score, information and (optionally) per-subject scores at ``beta``."""
    p = beta.shape[0]
    S = np.zeros(p)
    H = np.zeros((p, p))
    pieces = []
    for b in blocks:
        if len(b.Y) == 0:
            continue
        eta = b.X @ beta
        mu, a = family.mean_variance(eta)
        sa = np.sqrt(a)
        # canonical links: Delta = I
        W = factor.whiten(b.T, sa[..., None] * b.X)
        e = factor.whiten(b.T, (b.Y - mu) / sa)
        Wf = W.reshape(-1, p)
        S += Wf.T @ e.ravel()
        H += Wf.T @ Wf
        if per_subject:
            pieces.append(np.einsum("mtp,mt->mp", W, e))
    if not (np.all(np.isfinite(S)) and np.all(np.isfinite(H))):
        raise NumericError("non-finite score or information")
    if per_subject:
        return S, H, (np.concatenate(pieces) if pieces else np.zeros((0, p)))
    return S, H


def score(group, family, beta, R_hat) -> np.ndarray:
    """``sum_i D_i^T V_i^{-1} (y_i - mu_i)`` over the subjects of ``group``."""
    family = as_family(family)
    beta = np.asarray(beta, dtype=float)
    blocks = as_blocks(group)
    if not blocks:
        raise ContractError("score needs at least one subject")
    return _contributions(blocks, family, beta, as_factor(R_hat))[0]


def _solve_pd(H, rhs, ridge, diagnostics):
    try:
        c = linalg.cho_factor(H, lower=True, check_finite=False)
        # an exactly singular H can survive the factorization through roundoff
        pivots = np.diag(c[0]) ** 2
        if pivots.min() <= RANK_TOL * pivots.max():
            raise linalg.LinAlgError("rank deficient")
        return linalg.cho_solve(c, rhs, check_finite=False)
    except linalg.LinAlgError:
        p = H.shape[0]
        lam = ridge * max(np.trace(H), 1e-300) / p
        diagnostics.append(f"information matrix singular; ridge {lam:.3g} added")
        try:
            c = linalg.cho_factor(H + lam * np.eye(p), lower=True, check_finite=False)
        except linalg.LinAlgError:
            raise NumericError("information matrix is not positive definite even after ridge") from None
        return linalg.cho_solve(c, rhs, check_finite=False)


def solve_group_gee(group, family, beta_init, R_hat, opts: SolverOptions | None = None,
                    compute_cov: bool = True) -> GroupFit:
    """Fisher scoring with step-halving for one group's estimating equation.

    Stops when the step or the score (both in max-norm) drops below its
    tolerance, or after ``opts.max_iter`` iterations.  With
    ``compute_cov=False`` the sandwich covariance is left as ``None``.
    """
    opts = opts or SolverOptions()
    family = as_family(family)
    factor = as_factor(R_hat)
    blocks = as_blocks(group)
    n_g = sum(len(b.Y) for b in blocks)
    if n_g == 0:
        raise ContractError("cannot fit an empty group")
    beta = np.array(beta_init, dtype=float)
    diagnostics = []

    S, H = _contributions(blocks, family, beta, factor)
    converged = False
    it = 0
    while it < opts.max_iter:
        if np.max(np.abs(S)) < opts.tol_score:
            converged = True
            break
        it += 1
        step = _solve_pd(H, S, opts.ridge, diagnostics)
        big = np.max(np.abs(step))
        if big > opts.max_step:
            step *= opts.max_step / big
        norm0 = np.linalg.norm(S)
        for _ in range(opts.max_halvings + 1):
            cand = beta + step
            if not np.all(np.isfinite(cand)):
                raise NumericError("coefficient iterate became non-finite")
            S_new, H_new = _contributions(blocks, family, cand, factor)
            if np.linalg.norm(S_new) <= norm0:
                break
            step = step / 2.0
        else:
            # the scoring direction no longer reduces the score; further
            # iterations would repeat the same failed search
            diagnostics.append(f"step-halving failed at iteration {it}; stopped without convergence")
            break
        beta, S, H = cand, S_new, H_new
        if np.max(np.abs(step)) < opts.tol_step:
            converged = True
            break

    cov = _sandwich(blocks, family, beta, factor, opts, diagnostics) if compute_cov else None
    return GroupFit(beta=beta, iterations=it, converged=converged,
                    score_norm=float(np.max(np.abs(S))), H=H, sandwich_cov=cov,
                    n_g=n_g, diagnostics=diagnostics)


def _sandwich(blocks, family, beta, factor, opts, diagnostics):
    try:
        _, H, U = _contributions(blocks, family, beta, factor, per_subject=True)
    except NumericError:
        diagnostics.append("score contributions overflow at the estimate (separation); covariance undefined")
        p = beta.shape[0]
        return np.full((p, p), np.nan)
    with np.errstate(over="ignore", invalid="ignore"):
        M = U.T @ U
    if not np.all(np.isfinite(M)):
        diagnostics.append("empirical score covariance overflows (separation); covariance undefined")
        return np.full_like(M, np.nan)
    Hinv_M = _solve_pd(H, M, opts.ridge, diagnostics)
    cov = _solve_pd(H, Hinv_M.T, opts.ridge, diagnostics)
    return (cov + cov.T) / 2.0


def sandwich_cov(group, family, beta_hat, R_hat, opts: SolverOptions | None = None) -> np.ndarray:
    """Robust covariance ``H^{-1} M H^{-1}`` with ``M`` the empirical score covariance."""
    return _sandwich(as_blocks(group), as_family(family), np.asarray(beta_hat, dtype=float),
                     as_factor(R_hat), opts or SolverOptions(), [])


@dataclass
class GEEFit:
    """Plain (single-group) GEE fit with an estimated working correlation."""

    beta: np.ndarray
    corr: WorkingCorrelationSpec
    group_fit: GroupFit
    outer_iterations: int
    converged: bool


def fit_gee(data: LongitudinalDataset, family, structure="EX", beta_init=None,
            tol=1e-6, max_outer=100, opts: SolverOptions | None = None) -> GEEFit:
    """Standard GEE: alternate the coefficient solve and the moment update of ``alpha``.

    The returned coefficients solve the estimating equation exactly under the
    returned working correlation.
    """
    family = as_family(family)
    structure = Structure.parse(structure)
    if structure is Structure.UN and not data.balanced:
        raise ContractError("UN working correlation requires balanced data")
    if beta_init is None:
        beta_init = solve_group_gee(data, family, np.zeros(data.p), Structure.ID, opts).beta
    beta = np.asarray(beta_init, dtype=float)
    spec = WorkingCorrelationSpec.independence_start(structure, data.max_T)
    zeros = np.zeros(data.n, dtype=int)
    converged = False
    r = 0
    while r < max_outer:
        r += 1
        new = solve_group_gee(data, family, beta, spec, opts).beta
        delta = np.max(np.abs(new - beta))
        beta = new
        spec = WorkingCorrelationSpec(
            structure, estimate_alpha(structure, empirical_moment_matrix(data, family, beta, zeros)))
        # the first pass runs under the independence start, so it cannot certify convergence
        if r > 1 and delta < tol:
            converged = True
            break
    gf = solve_group_gee(data, family, beta, spec, opts)
    return GEEFit(beta=gf.beta, corr=spec, group_fit=gf, outer_iterations=r, converged=converged)


def subjectwise_glm(data: LongitudinalDataset, family, ridge=1e-2, max_iter=25, tol=1e-8,
                    separation_eta=SEPARATION_ETA):
    """Independent GLM fit for every subject, batched over equal-length subjects.

    Subjects whose unpenalized Newton iteration fails (singular information,
    non-finite iterate, or no convergence) or whose fitted linear predictor
    exceeds ``separation_eta`` in absolute value (complete or quasi-complete
    separation, where the estimate is driven off towards infinity) are
    refitted with a ridge penalty ``ridge * ||beta||^2 / 2``.

    Returns
    -------
    betas : ndarray, shape (n, p)
    ridged : ndarray of bool, shape (n,)
    """
    family = as_family(family)
    betas = np.zeros((data.n, data.p))
    ridged = np.zeros(data.n, dtype=bool)
    for b in data.blocks:
        est, ok = _batched_newton(family, b.Y, b.X, 0.0, max_iter, tol)
        with np.errstate(invalid="ignore"):
            eta = np.abs(np.einsum("mtp,mp->mt", b.X, est)).max(axis=1)
        bad = ~ok | ~(eta <= separation_eta)
        if bad.any():
            est[bad], _ = _batched_newton(family, b.Y[bad], b.X[bad], ridge, 4 * max_iter, tol)
        betas[b.index] = est
        ridged[b.index] = bad
    return betas, ridged


def _batched_newton(family, Y, X, ridge, max_iter, tol, max_halvings=30):
    # Newton ascent on sum(loglik) - ridge |beta|^2 / 2 with step-halving
    m, T, p = X.shape
    beta = np.zeros((m, p))
    active = np.ones(m, dtype=bool)
    ok = np.zeros(m, dtype=bool)
    eye = np.eye(p)

    def objective(Xa, Ya, B):
        eta = np.einsum("mtp,mp->mt", Xa, B)
        return family.loglik(Ya, eta).sum(1) - 0.5 * ridge * (B * B).sum(1)

    for _ in range(max_iter):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        Xa, Ya, Ba = X[idx], Y[idx], beta[idx]
        eta = np.einsum("mtp,mp->mt", Xa, Ba)
        mu, a = family.mean_variance(eta)
        g = np.einsum("mtp,mt->mp", Xa, Ya - mu) - ridge * Ba
        H = np.einsum("mtp,mt,mtq->mpq", Xa, a, Xa) + ridge * eye
        with np.errstate(all="ignore"):
            try:
                step = np.linalg.solve(H, g[..., None])[..., 0]
            except np.linalg.LinAlgError:
                step = np.stack([_safe_solve(h, v) for h, v in zip(H, g)])
        bad = ~np.all(np.isfinite(step), axis=1)
        step[bad] = 0.0
        f0 = objective(Xa, Ya, Ba)
        for _ in range(max_halvings):
            worse = objective(Xa, Ya, Ba + step) < f0 - 1e-12 * np.abs(f0)
            if not worse.any():
                break
            step[worse] /= 2.0
        beta[idx] = Ba + step
        done = ~bad & (np.max(np.abs(step), axis=1) < tol)
        ok[idx[done]] = True
        active[idx[done | bad]] = False
    return beta, ok


def _safe_solve(H, g):
    try:
        return np.linalg.solve(H, g)
    except np.linalg.LinAlgError:
        return np.full_like(g, np.nan)
