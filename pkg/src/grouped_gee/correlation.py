"""Working correlation structures and their moment-based estimation.

The correlation parameter is chosen to minimise the Frobenius distance
between ``R(alpha)`` and the average outer product of standardized
residuals ``A_i^{-1/2} (y_i - mu_i)``.  For unbalanced data the objective
is summed over subjects, each compared with its own ``T_i x T_i`` matrix.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import linalg

from .data import LongitudinalDataset
from .exceptions import ContractError, EmptyGroupError, NumericError, ParameterError
from .families import as_family

EDGE = 1e-6
PD_FLOOR = 1e-6
GOLDEN_TOL = 1e-8


class Structure(str, Enum):
    ID = "ID"
    EX = "EX"
    AR1 = "AR1"
    UN = "UN"

    @classmethod
    def parse(cls, value) -> "Structure":
        if isinstance(value, cls):
            return value
        key = str(value).upper()
        aliases = {"IND": "ID", "INDEPENDENT": "ID", "EXCH": "EX", "AR": "AR1", "US": "UN"}
        return cls(aliases.get(key, key))


@dataclass(frozen=True)
class WorkingCorrelationSpec:
    """A correlation structure together with its parameter vector.

    ``alpha`` is empty for ID, a length-1 array for EX and AR1, and the
    strict upper triangle (row-major) of the matrix for UN.
    """

    structure: Structure
    alpha: np.ndarray = field(default_factory=lambda: np.zeros(0))
    heterogeneous: bool = False

    def __post_init__(self):
        object.__setattr__(self, "structure", Structure.parse(self.structure))
        alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float)).ravel()
        object.__setattr__(self, "alpha", alpha)

    def __eq__(self, other):
        return (isinstance(other, WorkingCorrelationSpec)
                and self.structure == other.structure
                and self.heterogeneous == other.heterogeneous
                and np.array_equal(self.alpha, other.alpha))

    __hash__ = None

    @classmethod
    def independence_start(cls, structure, T, heterogeneous=False):
        """Parameter value that makes ``R`` the identity (``alpha = 0``)."""
        structure = Structure.parse(structure)
        k = {Structure.ID: 0, Structure.EX: 1, Structure.AR1: 1,
             Structure.UN: T * (T - 1) // 2}[structure]
        return cls(structure, np.zeros(k), heterogeneous)

    def matrix(self, T: int) -> np.ndarray:
        return build_matrix(self, T)


def admissible_range(structure, T: int) -> tuple[float, float]:
    """Open interval of scalar ``alpha`` giving a positive definite matrix."""
    structure = Structure.parse(structure)
    if structure is Structure.EX:
        return (-1.0 / (T - 1) if T > 1 else -np.inf, 1.0)
    if structure is Structure.AR1:
        return (-1.0, 1.0)
    raise ContractError(f"{structure.value} has no scalar parameter range")


def build_matrix(spec: WorkingCorrelationSpec, T: int) -> np.ndarray:
    """Materialize the ``T x T`` working correlation matrix of ``spec``."""
    s, a = spec.structure, spec.alpha
    if T < 1:
        raise ContractError("T must be positive")
    if s is Structure.ID:
        return np.eye(T)
    if s in (Structure.EX, Structure.AR1):
        if a.size != 1:
            raise ParameterError(f"{s.value} takes one parameter, got {a.size}")
        lo, hi = admissible_range(s, T)
        alpha = float(a[0])
        if T > 1 and not lo < alpha < hi:
            raise ParameterError(
                f"{s.value} parameter {alpha} outside the admissible interval ({lo:g}, {hi:g}) for T={T}")
        if s is Structure.EX:
            R = np.full((T, T), alpha)
            np.fill_diagonal(R, 1.0)
            return R
        lags = np.abs(np.subtract.outer(np.arange(T), np.arange(T)))
        return alpha ** lags
    # UN
    if a.size != T * (T - 1) // 2:
        raise ParameterError(
            f"UN parameter of length {a.size} does not match T={T} (needs {T * (T - 1) // 2})")
    R = np.eye(T)
    iu = np.triu_indices(T, 1)
    R[iu] = a
    R.T[iu] = a
    try:
        linalg.cholesky(R, lower=True)
    except linalg.LinAlgError:
        raise ParameterError("UN parameter does not give a positive definite matrix") from None
    return R


def pd_repair(M, floor: float = PD_FLOOR) -> np.ndarray:
    """Nearest-in-spectrum positive definite correlation matrix.

    Eigenvalues below ``floor`` are raised to it, the matrix is rebuilt and
    rescaled to unit diagonal.  Matrices already satisfying the floor with a
    unit diagonal are returned unchanged.
    """
    M = np.asarray(M, dtype=float)
    M = (M + M.T) / 2.0
    if np.allclose(np.diag(M), 1.0, rtol=0, atol=1e-14) and np.linalg.eigvalsh(M)[0] >= floor:
        return M
    for _ in range(50):
        w, V = np.linalg.eigh(M)
        if w[0] >= floor and np.allclose(np.diag(M), 1.0, rtol=0, atol=1e-14):
            break
        # aim slightly above the floor so the unit-diagonal rescale stays above it
        w = np.maximum(w, floor * 1.001)
        M = (V * w) @ V.T
        d = np.sqrt(np.diag(M))
        M = M / np.outer(d, d)
        M = (M + M.T) / 2.0
        np.fill_diagonal(M, 1.0)
    return M


@dataclass(frozen=True)
class MomentMatrix:
    """Average standardized-residual outer products, one per subject length.

    ``parts`` maps ``T`` to ``(S_T, count)``.  For balanced data there is a
    single part and ``S`` returns it.
    """

    parts: dict

    @property
    def S(self) -> np.ndarray:
        if len(self.parts) != 1:
            raise ContractError("moment matrix spans several subject lengths; use .parts")
        return next(iter(self.parts.values()))[0]

    @property
    def n_used(self) -> int:
        return int(sum(c for _, c in self.parts.values()))

    @classmethod
    def from_matrix(cls, S, n_used: int = 1) -> "MomentMatrix":
        S = np.asarray(S, dtype=float)
        return cls({S.shape[0]: ((S + S.T) / 2.0, n_used)})


def standardized_residuals(family, Y, X, beta):
    """``A^{-1/2}(y - mu)`` for a block; ``beta`` is ``(p,)`` or per-subject ``(m, p)``."""
    beta = np.asarray(beta, dtype=float)
    eta = X @ beta if beta.ndim == 1 else np.einsum("mtp,mp->mt", X, beta)
    mu, a = family.mean_variance(eta)
    return (Y - mu) / np.sqrt(a)


def empirical_moment_matrix(data: LongitudinalDataset, family, beta_by_group, assignments,
                            restrict_to_group=None) -> MomentMatrix:
    family = as_family(family)
    betas = np.atleast_2d(np.asarray(beta_by_group, dtype=float))
    assignments = np.asarray(assignments, dtype=int)
    if assignments.shape != (data.n,):
        raise ContractError("assignments must have one entry per subject")
    if assignments.min() < 0 or assignments.max() >= len(betas):
        raise ContractError(f"assignments must lie in 0..{len(betas) - 1}")
    parts = {}
    for block in data.blocks:
        g = assignments[block.index]
        keep = slice(None) if restrict_to_group is None else g == restrict_to_group
        Y, X, g = block.Y[keep], block.X[keep], g[keep]
        if len(Y) == 0:
            continue
        E = standardized_residuals(family, Y, X, betas[g])
        S = E.T @ E / len(E)
        parts[block.T] = ((S + S.T) / 2.0, len(E))
    if not parts:
        raise EmptyGroupError(f"group {restrict_to_group} has no members")
    return MomentMatrix(parts)


def estimate_alpha(structure, S) -> np.ndarray:
    """Frobenius-nearest parameter of ``structure`` to the moment matrix ``S``.

    ``S`` may be a ``MomentMatrix`` or a square array.
    """
    structure = Structure.parse(structure)
    if not isinstance(S, MomentMatrix):
        S = MomentMatrix.from_matrix(S)
    parts = {T: ((St + St.T) / 2.0, c) for T, (St, c) in S.parts.items()}
    T_max = max(parts)
    if structure is Structure.ID:
        return np.zeros(0)
    if structure is Structure.UN:
        if len(parts) != 1:
            raise ContractError("UN working correlation requires balanced data")
        R = parts[T_max][0].copy()
        np.fill_diagonal(R, 1.0)
        R = pd_repair(R)
        return R[np.triu_indices(T_max, 1)]
    if T_max < 2:
        return np.zeros(1)
    lo, hi = admissible_range(structure, T_max)
    lo, hi = lo + EDGE, hi - EDGE
    if structure is Structure.EX:
        num = sum(c * (St.sum() - np.trace(St)) for T, (St, c) in parts.items())
        den = sum(c * T * (T - 1) for T, (St, c) in parts.items())
        return np.array([float(np.clip(num / den, lo, hi))])
    return np.array([_ar1_alpha(parts, lo, hi)])


def _ar1_alpha(parts, lo, hi) -> float:
    # sum_T c_T ||R_T(a) - S_T||_F^2 = sum_k (w_k a^{2k} - 2 a^k L_k) + const
    K = max(parts) - 1
    w = np.zeros(K + 1)
    L = np.zeros(K + 1)
    for T, (St, c) in parts.items():
        for k in range(1, T):
            w[k] += c * 2 * (T - k)
            L[k] += c * 2 * np.trace(St, offset=k)
    ks = np.arange(1, K + 1)

    def objective(a):
        a = np.asarray(a, dtype=float)[..., None]
        pw = a ** ks
        return (w[1:] * pw * pw - 2.0 * L[1:] * pw).sum(axis=-1)

    grid = np.linspace(lo, hi, 401)
    i = int(np.argmin(objective(grid)))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    return golden_section(lambda x: float(objective(x)), a, b, GOLDEN_TOL)


def golden_section(f, a: float, b: float, tol: float = GOLDEN_TOL) -> float:
    """Minimize a unimodal ``f`` on ``[a, b]`` to bracket width ``tol``."""
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return (a + b) / 2.0


class CorrelationFactor:
    """Cached Cholesky factors of ``R(alpha)`` for every subject length.

    ``whiten(T, B)`` returns ``L^{-1} B`` where ``R = L L^T``.
    """

    def __init__(self, spec: WorkingCorrelationSpec):
        self.spec = spec
        self._chol = {}
        self._inv = {}
        self._identity = spec.structure is Structure.ID or not np.any(spec.alpha)

    @property
    def identity(self) -> bool:
        return self._identity

    def cholesky(self, T: int) -> np.ndarray:
        L = self._chol.get(T)
        if L is None:
            try:
                L = linalg.cholesky(build_matrix(self.spec, T), lower=True)
            except linalg.LinAlgError:
                raise NumericError(f"working correlation for T={T} is not positive definite") from None
            self._chol[T] = L
        return L

    def inverse_factor(self, T: int) -> np.ndarray:
        """``L^{-1}``, formed once per length by a triangular solve."""
        Li = self._inv.get(T)
        if Li is None:
            Li = linalg.solve_triangular(self.cholesky(T), np.eye(T), lower=True)
            self._inv[T] = Li
        return Li

    def whiten(self, T: int, B: np.ndarray) -> np.ndarray:
        """Apply ``L^{-1}`` along the time axis (axis 1) of ``B``: ``(m, T)`` or ``(m, T, k)``."""
        if self.identity:
            return B
        Li = self.inverse_factor(T)
        if B.ndim == 2:
            return B @ Li.T
        if B.ndim == 3:
            return np.matmul(Li, B)
        moved = np.moveaxis(B, 1, 0)
        out = (Li @ moved.reshape(T, -1)).reshape(moved.shape)
        return np.moveaxis(out, 0, 1)
