"""Choosing the number of groups by cross-validated clustering instability.

For each of ``C`` random splits the subjects are divided into two training
sets of size ``M = n // 3`` and a test set holding the rest.  A grouped fit
with ``G`` groups is computed on each training set, both fits assign the
test subjects, and the number of test pairs that one fit puts together while
the other separates them measures how unstable ``G`` groups are.  The
averaged instability is minimized over the candidates.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import LongitudinalDataset
from .exceptions import ContractError, EmptyGroupError, NumericError
from .families import as_family
from .grouping import FitOptions, GroupedFit, InitStrategy, distance_matrix, fit

log = logging.getLogger(__name__)


@dataclass
class CvaResult:
    """Averaged instability per candidate and the selected number of groups.

    ``per_split[c, j]`` is the raw instability of split ``c`` for
    ``candidates[j]``; cells whose training fit failed hold NaN and are left
    out of the average.
    """

    candidates: list
    instability: dict
    selected_G: int
    per_split: np.ndarray
    seed: int
    M: int
    diagnostics: list = field(default_factory=list)

    @property
    def C(self) -> int:
        return len(self.per_split)


def split_three(n: int, M: int, rng=None):
    """Random disjoint index sets of sizes ``M``, ``M`` and ``n - 2M``."""
    if M < 1 or 2 * M >= n:
        raise ContractError(f"need 1 <= M and 2M < n, got n={n}, M={M}")
    perm = np.random.default_rng(rng).permutation(n)
    return np.sort(perm[:M]), np.sort(perm[M:2 * M]), np.sort(perm[2 * M:])


def test_assignments(test_data: LongitudinalDataset, family, trained: GroupedFit) -> np.ndarray:
    """Closest group of every test subject under a trained fit.

    Distances use the fit's coefficients and working correlation, with ties
    going to the smallest group index as in the fitting algorithm.
    """
    D = distance_matrix(test_data, as_family(family), trained.betas, trained.factors())
    return np.argmin(D, axis=1)


test_assignments.__test__ = False  # not a pytest test despite the name


def instability(g1, g2) -> int:
    """Ordered pairs ``(i, j)`` that are co-clustered under exactly one partition.

    Equal to twice the number of disagreeing unordered pairs; the diagonal
    never disagrees.  Labels only matter through equality, so the value is
    unchanged by relabeling either partition.
    """
    g1, g2 = np.asarray(g1), np.asarray(g2)
    if g1.shape != g2.shape:
        raise ContractError("partitions differ in length")
    # pairs together in both = sum of squared contingency counts; 'together in
    # one' then follows from the per-partition totals (all counts include i = j)
    _, a = np.unique(g1, return_inverse=True)
    _, b = np.unique(g2, return_inverse=True)
    table = np.zeros((a.max(initial=-1) + 1, b.max(initial=-1) + 1), dtype=np.int64)
    np.add.at(table, (a, b), 1)
    both = int((table ** 2).sum())
    same1 = int((table.sum(1) ** 2).sum())
    same2 = int((table.sum(0) ** 2).sum())
    return same1 + same2 - 2 * both


def _derived_seed(*key) -> int:
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1)[0])


def _cell(data, family, corr, G, c, splits, seed, strategy_kind, restarts, opts):
    """Instability of one (split, G) cell, or ``None`` when a training fit fails."""
    Z1, Z2, Z3 = splits
    test = data.subset(Z3)
    labels = []
    for h, Z in enumerate((Z1, Z2)):
        strategy = InitStrategy(strategy_kind, restarts, _derived_seed(seed, c, G, h))
        try:
            trained = fit(data.subset(Z), family, G, corr, strategy, opts)
        except (NumericError, EmptyGroupError, np.linalg.LinAlgError) as e:
            return None, f"split {c}, G={G}, training set {h + 1}: {e}"
        labels.append(test_assignments(test, family, trained))
    return instability(*labels), None


def _cell_job(args):
    return _cell(*args)


def cva_select(data: LongitudinalDataset, family, corr_structure="EX", candidates=range(2, 8),
               C: int = 20, seed: int = 0, strategy: InitStrategy | None = None,
               opts: FitOptions | None = None, n_jobs: int = 1) -> CvaResult:
    """Select ``G`` by cross-validation with averaging.

    Parameters
    ----------
    data : LongitudinalDataset
    family : FamilySpec or str
    corr_structure : str
        Working correlation used by every training fit.
    candidates : iterable of int
        Numbers of groups to compare; each must not exceed ``M = n // 3``.
    C : int
        Number of random splits.
    seed : int
        Master seed.  Split ``c`` uses ``(seed, c)``; the training fit for
        ``G`` on training set ``h`` uses a seed derived from
        ``(seed, c, G, h)``.
    strategy : InitStrategy, optional
        Initialization kind and restart count for the training fits; its seed
        is replaced by the derived one.
    n_jobs : int
        Worker processes for the independent training fits.

    Returns
    -------
    CvaResult
    """
    candidates = sorted({int(G) for G in candidates})
    if not candidates:
        raise ContractError("no candidate numbers of groups")
    if C < 1:
        raise ContractError("C must be at least 1")
    family = as_family(family)
    strategy = strategy or InitStrategy()
    opts = opts or FitOptions()
    n = data.n
    M = n // 3
    if candidates[0] < 1 or candidates[-1] > M:
        raise ContractError(f"candidates must lie in 1..{M} (M = n // 3)")

    splits = [split_three(n, M, np.random.default_rng([seed, c])) for c in range(C)]
    jobs = [(data, family, corr_structure, G, c, splits[c], seed, strategy.kind, strategy.restarts, opts)
            for c in range(C) for G in candidates]
    if n_jobs == 1 or len(jobs) == 1:
        results = [_cell(*job) for job in jobs]
    else:
        workers = n_jobs if n_jobs > 0 else os.cpu_count() or 1
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_cell_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))

    per_split = np.full((C, len(candidates)), np.nan)
    diagnostics = []
    for job, (value, problem) in zip(jobs, results):
        c, j = job[4], candidates.index(job[3])
        if problem is None:
            per_split[c, j] = value
        else:
            diagnostics.append(problem)
            log.warning("CVA cell excluded: %s", problem)

    inst = {}
    for j, G in enumerate(candidates):
        col = per_split[:, j]
        inst[G] = float(col[~np.isnan(col)].mean()) if np.any(~np.isnan(col)) else float("nan")
    usable = [G for G in candidates if not np.isnan(inst[G])]
    if not usable:
        raise NumericError("every CVA training fit failed")
    selected = min(usable, key=lambda G: (inst[G], G))
    return CvaResult(candidates, inst, selected, per_split, seed, M, diagnostics)
