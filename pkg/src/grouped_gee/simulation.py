"""Synthetic grouped logistic longitudinal data and accuracy metrics.

Covariates ``(x1, x2)`` are bivariate normal with correlation 0.4 and an
intercept column is prepended.  Binary responses are drawn by thresholding a
latent Gaussian vector whose pairwise correlations are solved so that the
binary correlations match a target exchangeable or AR(1) matrix.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import expit, ndtri

from .bvn import latent_corr_for_binary
from .correlation import WorkingCorrelationSpec, build_matrix, pd_repair
from .data import LongitudinalDataset
from .exceptions import ContractError

#: Group coefficient vectors ``(intercept, x1, x2)`` of the three-group design.
GROUP_BETAS = np.array([[0.0, -2.0, 0.0],
                        [0.0, 1.0, 2.0],
                        [0.0, 1.0, -2.0]])
COVARIATE_NAMES = ["intercept", "x1", "x2"]
BINARY_METHODS = ("tetrachoric", "latent")


class Scenario(str, Enum):
    S1 = "S1"   # exact three-group structure
    S2 = "S2"   # group coefficients plus U([-0.5, 0.5]^3) subject noise
    S3 = "S3"   # fully random subject coefficients


def truth_ex(alpha=0.5):
    return WorkingCorrelationSpec("EX", alpha)


def truth_ar1(alpha=0.7):
    return WorkingCorrelationSpec("AR1", alpha)


@dataclass(frozen=True)
class SimScenario:
    n: int = 180
    T: int = 10
    scenario: Scenario = Scenario.S1
    truth_corr: WorkingCorrelationSpec = field(default_factory=truth_ex)
    covariate_corr: float = 0.4
    seed: int = 0
    binary_method: str = "tetrachoric"   # or "latent": threshold N(0, R_truth) directly

    def __post_init__(self):
        object.__setattr__(self, "scenario", Scenario(self.scenario))
        if self.binary_method not in BINARY_METHODS:
            raise ContractError(f"binary_method must be one of {BINARY_METHODS}, got {self.binary_method!r}")
        if self.n % 3:
            raise ContractError(f"n must be divisible by 3, got {self.n}")


@dataclass
class SimulatedData:
    data: LongitudinalDataset
    groups: np.ndarray          # true 0-based group of each subject
    subject_betas: np.ndarray   # (n, p) coefficients used to generate subject i
    group_betas: np.ndarray     # (3, p) nominal group coefficients
    probs: np.ndarray           # (n, T) marginal success probabilities
    clamp_rate: float           # fraction of latent pairs clamped to a Frechet bound


def gen_covariates(n: int, T: int, rho: float = 0.4, rng=None) -> np.ndarray:
    """Designs ``(n, T, 3)`` with columns ``(1, x1, x2)``."""
    rng = np.random.default_rng(rng)
    L = np.linalg.cholesky(np.array([[1.0, rho], [rho, 1.0]]))
    z = rng.standard_normal((n, T, 2)) @ L.T
    return np.concatenate([np.ones((n, T, 1)), z], axis=2)


def true_groups(n: int) -> np.ndarray:
    """First third in group 0, second third in group 1, the rest in group 2."""
    return np.repeat(np.arange(3), n // 3)


def subject_coefficients(scenario, n: int, rng=None) -> np.ndarray:
    rng = np.random.default_rng(rng)
    scenario = Scenario(scenario)
    if scenario is Scenario.S3:
        return np.column_stack([rng.uniform(-0.2, 0.2, n), rng.uniform(-2, 2, n), rng.uniform(0, 2, n)])
    betas = GROUP_BETAS[true_groups(n)]
    if scenario is Scenario.S2:
        betas = betas + rng.uniform(-0.5, 0.5, size=(n, 3))
    return betas


def binary_target_matrix(truth_corr: WorkingCorrelationSpec, T: int) -> np.ndarray:
    return build_matrix(truth_corr, T)


def gen_binary_longitudinal(pi, truth_corr: WorkingCorrelationSpec, rng=None, return_clamps=False,
                            method: str = "tetrachoric"):
    """Correlated binary vectors with marginals ``pi`` (``(T,)`` or ``(n, T)``).

    With ``method="tetrachoric"`` the latent normal correlation of every
    subject and pair ``(s, t)`` is solved so that ``P(y_s = y_t = 1)``
    matches the target binary correlation; infeasible targets are clamped and
    latent matrices that are not positive definite are repaired before
    sampling.  With ``method="latent"`` the target matrix itself is used as
    the latent correlation, so the binary correlations come out smaller than
    the target but nothing is clamped.
    """
    rng = np.random.default_rng(rng)
    pi = np.asarray(pi, dtype=float)
    single = pi.ndim == 1
    P = np.atleast_2d(pi)
    if np.any((P <= 0) | (P >= 1)):
        raise ContractError("marginal probabilities must lie in (0, 1)")
    n, T = P.shape
    target = binary_target_matrix(truth_corr, T)
    iu = np.triu_indices(T, 1)
    R = np.broadcast_to(np.eye(T), (n, T, T)).copy()
    clamps = 0
    if method == "latent":
        R[:] = target
    elif method != "tetrachoric":
        raise ContractError(f"unknown binary generation method {method!r}")
    elif T > 1 and np.any(target[iu] != 0):
        ps, pt = P[:, iu[0]], P[:, iu[1]]
        r, clamped = latent_corr_for_binary(ps, pt, np.broadcast_to(target[iu], ps.shape))
        clamps = int(clamped.sum())
        R[:, iu[0], iu[1]] = r
        R[:, iu[1], iu[0]] = r
    L = np.broadcast_to(np.linalg.cholesky(target), R.shape) if method == "latent" else _batched_cholesky(R)
    Z = np.einsum("nst,nt->ns", L, rng.standard_normal((n, T)))
    y = (Z <= ndtri(P)).astype(float)
    y = y[0] if single else y
    if return_clamps:
        pairs = n * len(iu[0])
        return y, (clamps / pairs if pairs else 0.0)
    return y


def _batched_cholesky(R):
    out = np.empty_like(R)
    for i, Ri in enumerate(R):
        try:
            out[i] = np.linalg.cholesky(Ri)
        except np.linalg.LinAlgError:
            out[i] = np.linalg.cholesky(pd_repair(Ri))
    return out


def simulate(scenario: SimScenario, rng=None) -> SimulatedData:
    """Draw one dataset from ``scenario`` (``rng`` defaults to ``scenario.seed``)."""
    rng = np.random.default_rng(scenario.seed if rng is None else rng)
    n, T = scenario.n, scenario.T
    X = gen_covariates(n, T, scenario.covariate_corr, rng)
    betas = subject_coefficients(scenario.scenario, n, rng)
    probs = expit(np.einsum("ntp,np->nt", X, betas))
    # keep thresholds finite; extreme predictors otherwise round to exactly 0 or 1
    probs = np.clip(probs, 1e-12, 1 - 1e-12)
    y, clamp_rate = gen_binary_longitudinal(probs, scenario.truth_corr, rng, return_clamps=True,
                                            method=scenario.binary_method)
    data = LongitudinalDataset.from_arrays(y, X, covariate_names=COVARIATE_NAMES)
    return SimulatedData(data, true_groups(n), betas, GROUP_BETAS.copy(), probs, clamp_rate)


# ---------------------------------------------------------------------------
# metrics


def confusion(est, truth, G: int) -> np.ndarray:
    """``C[a, b]`` = number of subjects with estimate ``a`` and truth ``b``."""
    C = np.zeros((G, G), dtype=int)
    np.add.at(C, (np.asarray(est), np.asarray(truth)), 1)
    return C


def align_labels(est, truth, G: int, method: str = "auto") -> np.ndarray:
    """Relabeling ``sigma`` (estimated label -> true label) maximizing agreement.

    ``method`` is ``"exhaustive"`` (all ``G!`` permutations, first maximizer in
    lexicographic order), ``"hungarian"``, or ``"auto"`` (exhaustive for
    ``G <= 10``).
    """
    est, truth = np.asarray(est), np.asarray(truth)
    if est.shape != truth.shape:
        raise ContractError("label vectors differ in length")
    C = confusion(est, truth, G)
    if method == "auto":
        method = "exhaustive" if G <= 10 else "hungarian"
    if method == "hungarian":
        rows, cols = linear_sum_assignment(-C)
        sigma = np.empty(G, dtype=int)
        sigma[rows] = cols
        return sigma
    if method != "exhaustive":
        raise ContractError(f"unknown alignment method {method!r}")
    best, best_score = None, -1
    chunk = 100_000
    perms = itertools.permutations(range(G))
    rows = np.arange(G)
    while True:
        block = np.array(list(itertools.islice(perms, chunk)), dtype=np.int8)
        if not block.size:
            break
        scores = C[rows, block].sum(axis=1)
        i = int(np.argmax(scores))
        if scores[i] > best_score:
            best_score, best = int(scores[i]), block[i].astype(int)
    return best


def classification_error(est, truth, G: int, sigma=None) -> float:
    if sigma is None:
        sigma = align_labels(est, truth, G)
    return float(np.mean(np.asarray(sigma)[np.asarray(est)] != np.asarray(truth)))


@dataclass
class MetricReport:
    sel_by_group: np.ndarray   # squared slope error per true group
    ce: float                  # classification error after alignment
    asl: float                 # mean per-subject squared slope error
    alignment: np.ndarray      # estimated label -> true label


def average_squared_loss(fit, truth: SimulatedData, slopes=(1, 2)) -> float:
    """Mean over subjects of the squared slope error of ``beta_hat[g_hat_i]``; any ``G``."""
    slopes = list(slopes)
    est_i = fit.betas[fit.assignments][:, slopes]
    return float(np.mean(((est_i - truth.subject_betas[:, slopes]) ** 2).sum(axis=1)))


def metrics(fit, truth: SimulatedData, slopes=(1, 2)) -> MetricReport:
    """SEL per group, aligned CE, and ASL of a grouped fit against the truth.

    Only the slope coefficients (``slopes``, by default indices 1 and 2) enter
    SEL and ASL; the intercept is excluded.  Labels are aligned by the
    CE-optimal permutation before SEL and CE are computed.
    """
    G = len(truth.group_betas)
    if fit.G != G:
        raise ContractError(f"fit has G={fit.G} but the truth has {G} groups")
    slopes = list(slopes)
    sigma = align_labels(fit.assignments, truth.groups, G)
    ce = classification_error(fit.assignments, truth.groups, G, sigma)
    inv = np.argsort(sigma)   # true label -> estimated label
    sel = ((fit.betas[inv][:, slopes] - truth.group_betas[:, slopes]) ** 2).sum(axis=1)
    return MetricReport(sel, ce, average_squared_loss(fit, truth, slopes), sigma)
