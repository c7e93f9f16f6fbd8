"""In-memory longitudinal data container.

Subjects may have different numbers of observations.  Numerical code works
on *blocks*: stacks of subjects sharing the same length ``T``, so that a
balanced panel is a single ``(n, T)`` response array and ``(n, T, p)``
design array.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .exceptions import ContractError


@dataclass(frozen=True)
class Subject:
    subject_id: str
    y: np.ndarray
    X: np.ndarray
    times: np.ndarray

    @property
    def T(self) -> int:
        return len(self.y)


@dataclass(frozen=True)
class Block:
    """Subjects of a common length ``T``; ``index`` holds dataset positions."""

    index: np.ndarray
    Y: np.ndarray
    X: np.ndarray

    @property
    def T(self) -> int:
        return self.Y.shape[1]

    def take(self, mask) -> "Block":
        return Block(self.index[mask], self.Y[mask], self.X[mask])


class LongitudinalDataset:
    """A list of subjects with responses ``y_i`` and designs ``X_i``.

    Parameters
    ----------
    subjects : sequence of Subject
    covariate_names : sequence of str, optional
        Column labels for the design matrices.
    """

    def __init__(self, subjects, covariate_names=None):
        subjects = list(subjects)
        if not subjects:
            raise ContractError("a dataset needs at least one subject")
        p = subjects[0].X.shape[1]
        for s in subjects:
            if s.X.ndim != 2 or s.X.shape != (s.T, p):
                raise ContractError(
                    f"subject {s.subject_id!r}: design has shape {s.X.shape}, expected ({s.T}, {p})")
            if s.T == 0:
                raise ContractError(f"subject {s.subject_id!r} has no observations")
            if len(s.times) != s.T or np.any(np.diff(s.times) <= 0):
                raise ContractError(
                    f"subject {s.subject_id!r}: time indices must be strictly increasing")
        self.subjects = subjects
        self.p = p
        if covariate_names is None:
            covariate_names = [f"x{k}" for k in range(p)]
        self.covariate_names = list(covariate_names)
        if len(self.covariate_names) != p:
            raise ContractError("covariate_names length does not match p")

    @classmethod
    def from_arrays(cls, Y, X, subject_ids=None, covariate_names=None):
        """Build a balanced dataset from ``Y (n, T)`` and ``X (n, T, p)``."""
        Y = np.asarray(Y, dtype=float)
        X = np.asarray(X, dtype=float)
        if Y.ndim != 2 or X.ndim != 3 or X.shape[:2] != Y.shape:
            raise ContractError(f"incompatible shapes Y{Y.shape}, X{X.shape}")
        n, T = Y.shape
        if subject_ids is None:
            subject_ids = [str(i) for i in range(n)]
        times = np.arange(1, T + 1, dtype=float)
        subjects = [Subject(str(sid), Y[i], X[i], times) for i, sid in enumerate(subject_ids)]
        ds = cls(subjects, covariate_names)
        # the arrays are already stacked; seed the cache instead of re-stacking
        ds.__dict__["blocks"] = [Block(np.arange(n), Y, X)]
        return ds

    def __len__(self):
        return len(self.subjects)

    def __repr__(self):
        return f"LongitudinalDataset(n={self.n}, p={self.p}, lengths={sorted(set(self.lengths.tolist()))})"

    @property
    def n(self) -> int:
        return len(self.subjects)

    @cached_property
    def lengths(self) -> np.ndarray:
        return np.array([s.T for s in self.subjects])

    @property
    def balanced(self) -> bool:
        return len(self.blocks) == 1

    @property
    def max_T(self) -> int:
        return int(self.lengths.max())

    @cached_property
    def blocks(self) -> list[Block]:
        out = []
        for T in np.unique(self.lengths):
            idx = np.flatnonzero(self.lengths == T)
            Y = np.stack([self.subjects[i].y for i in idx]).astype(float)
            X = np.stack([self.subjects[i].X for i in idx]).astype(float)
            out.append(Block(idx, Y, X))
        return out

    @property
    def ids(self) -> list[str]:
        return [s.subject_id for s in self.subjects]

    def subset(self, indices) -> "LongitudinalDataset":
        """Dataset restricted to ``indices`` (in the given order)."""
        indices = np.asarray(indices, dtype=int)
        ds = LongitudinalDataset([self.subjects[i] for i in indices], self.covariate_names)
        if self.balanced:
            b = self.blocks[0]
            ds.__dict__["blocks"] = [Block(np.arange(len(indices)), b.Y[indices], b.X[indices])]
        return ds
