"""Exponential-family marginal models with canonical links.

Each family supplies the mean ``m(eta)``, the variance ``sigma^2(eta)``
(including the known scale ``phi``) and the link derivative ``u'(eta)``
where ``theta = u(eta)``.  Only canonical links are implemented, so
``u'(eta) == 1`` everywhere.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .exceptions import ContractError

#: Linear predictors are clamped to this range before exponentiation.
ETA_CLAMP = 700.0


class Family(str, Enum):
    BERNOULLI_LOGIT = "bernoulli"
    GAUSSIAN_IDENTITY = "gaussian"
    POISSON_LOG = "poisson"


@dataclass(frozen=True)
class FamilySpec:
    """A marginal GLM family and its known scale parameter ``phi``."""

    family: Family = Family.BERNOULLI_LOGIT
    scale_phi: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if not (np.isfinite(self.scale_phi) and self.scale_phi > 0):
            raise ContractError(f"scale_phi must be positive, got {self.scale_phi}")

    @property
    def canonical(self) -> bool:
        return True

    def mean(self, eta):
        eta = _check_eta(eta)
        if self.family is Family.BERNOULLI_LOGIT:
            return _expit(_clamp(eta))
        if self.family is Family.POISSON_LOG:
            return np.exp(_clamp(eta))
        return eta

    def variance(self, eta):
        eta = _check_eta(eta)
        if self.family is Family.BERNOULLI_LOGIT:
            v = _logistic_var(_clamp(eta))
        elif self.family is Family.POISSON_LOG:
            v = np.exp(_clamp(eta))
        else:
            v = np.ones_like(eta) if isinstance(eta, np.ndarray) else 1.0
        return v * self.scale_phi

    def link_deriv(self, eta):
        """``u'(eta)``; identically one for canonical links."""
        eta = _check_eta(eta)
        return np.ones_like(eta, dtype=float)

    def loglik(self, y, eta):
        """Per-observation log-likelihood (times ``phi``) up to terms free of ``eta``."""
        if self.family is Family.BERNOULLI_LOGIT:
            return y * eta - np.logaddexp(0.0, eta)
        if self.family is Family.POISSON_LOG:
            return y * eta - np.exp(_clamp(eta))
        return -0.5 * (y - eta) ** 2

    def mean_variance(self, eta):
        """Mean and variance in one pass; skips the finiteness check (hot path)."""
        if self.family is Family.BERNOULLI_LOGIT:
            eta = _clamp(eta)
            return _expit(eta), _logistic_var(eta) * self.scale_phi
        if self.family is Family.POISSON_LOG:
            mu = np.exp(_clamp(eta))
            return mu, mu * self.scale_phi
        return eta, np.full_like(eta, self.scale_phi)


def _check_eta(eta):
    arr = np.asarray(eta, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ContractError("linear predictor must be finite")
    return arr if arr.ndim else float(arr)


def _clamp(eta):
    return np.clip(eta, -ETA_CLAMP, ETA_CLAMP)


def _expit(eta):
    # exp(-|eta|) never overflows; both branches are evaluated on the same value
    e = np.exp(-np.abs(eta))
    out = np.where(eta >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out if out.ndim else float(out)


def _logistic_var(eta):
    # p(1-p) without cancellation; stays positive on the clamped range
    e = np.exp(-np.abs(eta))
    return e / (1.0 + e) ** 2


def as_family(family) -> FamilySpec:
    """Coerce a ``FamilySpec``, ``Family`` or family name to a ``FamilySpec``."""
    if isinstance(family, FamilySpec):
        return family
    return FamilySpec(Family(family))


def mean(family, eta):
    return as_family(family).mean(eta)


def variance(family, eta):
    return as_family(family).variance(eta)


@dataclass(frozen=True)
class SubjectMatrices:
    """Per-subject quantities evaluated at one coefficient vector.

    ``A`` and ``Delta`` are diagonal and stored densely; ``D = A @ Delta @ X``.
    """

    mu: np.ndarray
    A: np.ndarray
    Delta: np.ndarray
    D: np.ndarray


def subject_matrices(family, X, beta) -> SubjectMatrices:
    family = as_family(family)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    beta = np.asarray(beta, dtype=float)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(beta))):
        raise ContractError("X and beta must be finite")
    if X.shape[1] != beta.shape[0]:
        raise ContractError(f"X has {X.shape[1]} columns but beta has length {beta.shape[0]}")
    eta = X @ beta
    mu = np.atleast_1d(family.mean(eta))
    a = np.atleast_1d(family.variance(eta))
    delta = np.atleast_1d(family.link_deriv(eta))
    return SubjectMatrices(mu=mu, A=np.diag(a), Delta=np.diag(delta), D=(a * delta)[:, None] * X)
