"""Monte Carlo studies: estimation accuracy, classification error, choice of G,
subject-level loss and confidence-interval coverage.

Every study produces *records*, one per (configuration, replication,
metric), so results from separate runs can be concatenated and summarized
with :func:`summarize`.  Replication ``r`` of a configuration draws its data
from a stream keyed by ``(seed, r)`` plus the sample sizes, so the same
replication index gives the same dataset for every working correlation and
any subset of replications can be rerun on its own.
"""
from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .correlation import Structure
from .grouping import FitOptions, InitStrategy, fit
from .model_selection import cva_select
from .simulation import (Scenario, SimScenario, align_labels, average_squared_loss, metrics,
                         simulate, truth_ar1, truth_ex)

#: Sample sizes used throughout the paper's estimation and selection tables.
SIZES = ((180, 10), (180, 20), (270, 10), (270, 20))
TRUTHS = {"EX": truth_ex, "AR1": truth_ar1}
RECORD_FIELDS = ("study", "n", "T", "truth", "scenario", "working", "replication", "metric", "value")


@dataclass(frozen=True)
class StudyOptions:
    """Settings shared by all studies.

    ``n_jobs`` worker processes run replications concurrently (``0`` means
    one per CPU).  ``binary_method`` selects the binary response generator.
    """

    reps: int = 200
    seed: int = 0
    n_jobs: int = 1
    binary_method: str = "tetrachoric"
    fit_opts: FitOptions = FitOptions()


def replication_seed(seed: int, rep: int, *config) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, rep, *config])


def _truth_code(truth: str) -> int:
    return list(TRUTHS).index(truth)


def _map(fn, jobs, n_jobs):
    if n_jobs == 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    workers = n_jobs if n_jobs > 0 else os.cpu_count() or 1
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def _record(study, n, T, truth, scenario, working, rep, metric, value):
    return dict(zip(RECORD_FIELDS, (study, n, T, truth, scenario, working, rep, metric, float(value))))


def _draw(n, T, truth, scenario, rep, opts: StudyOptions):
    sc = SimScenario(n, T, Scenario(scenario), TRUTHS[truth](), seed=opts.seed,
                     binary_method=opts.binary_method)
    ss = replication_seed(opts.seed, rep, n, T, _truth_code(truth), int(Scenario(scenario).value[1]))
    data_ss, fit_ss = ss.spawn(2)
    return simulate(sc, np.random.default_rng(data_ss)), int(fit_ss.generate_state(1)[0])


# ---------------------------------------------------------------------------
# estimation and classification accuracy with G known


def _accuracy_job(args):
    n, T, truth, working, rep, opts = args
    sim, fit_seed = _draw(n, T, truth, "S1", rep, opts)
    out = [_record("accuracy", n, T, truth, "S1", "-", rep, "clamp_rate", sim.clamp_rate)]
    for w in working:
        f = fit(sim.data, "bernoulli", 3, w, InitStrategy(seed=fit_seed), opts.fit_opts)
        m = metrics(f, sim)
        rec = lambda metric, v: _record("accuracy", n, T, truth, "S1", w, rep, metric, v)  # noqa: E731
        out.append(rec("ce", m.ce))
        out.extend(rec(f"sel_{g + 1}", v) for g, v in enumerate(m.sel_by_group))
        out.append(rec("converged", f.converged))
    return out


def accuracy_study(sizes=SIZES, truths=("EX", "AR1"), working=("ID", "EX", "AR1", "UN"),
                   opts: StudyOptions = StudyOptions()) -> list[dict]:
    """SEL per group and CE of three-group fits with ``G`` known.

    All working correlations in ``working`` are fitted to the same dataset in
    each replication.
    """
    jobs = [(n, T, truth, tuple(working), rep, opts)
            for n, T in sizes for truth in truths for rep in range(opts.reps)]
    return [r for rows in _map(_accuracy_job, jobs, opts.n_jobs) for r in rows]


# ---------------------------------------------------------------------------
# choice of G


@dataclass(frozen=True)
class SelectionOptions:
    candidates: tuple = (2, 3, 4, 5, 6, 7)
    C: int = 20


def _selection_job(args):
    n, T, truth, working, rep, opts, sel = args
    sim, fit_seed = _draw(n, T, truth, "S1", rep, opts)
    out = []
    for w in working:
        res = cva_select(sim.data, "bernoulli", w, sel.candidates, sel.C, fit_seed,
                         opts=opts.fit_opts)
        out.append(_record("selection", n, T, truth, "S1", w, rep, "selected_G", res.selected_G))
        out.extend(_record("selection", n, T, truth, "S1", w, rep, f"instability_{G}", v)
                   for G, v in res.instability.items())
        out.append(_record("selection", n, T, truth, "S1", w, rep, "failed_cells", len(res.diagnostics)))
    return out


def selection_study(sizes=SIZES, working=("ID", "EX", "AR1", "UN"), truth="EX",
                    opts: StudyOptions = StudyOptions(reps=50), sel: SelectionOptions = SelectionOptions()):
    """Distribution of the CVA-selected number of groups (true ``G = 3``)."""
    jobs = [(n, T, truth, tuple(working), rep, opts, sel) for n, T in sizes for rep in range(opts.reps)]
    return [r for rows in _map(_selection_job, jobs, opts.n_jobs) for r in rows]


# ---------------------------------------------------------------------------
# subject-level loss with G selected


def _subject_loss_job(args):
    n, T, scenario, working, rep, opts, sel = args
    sim, fit_seed = _draw(n, T, "EX", scenario, rep, opts)
    out = []
    for w in working:
        res = cva_select(sim.data, "bernoulli", w, sel.candidates, sel.C, fit_seed, opts=opts.fit_opts)
        f = fit(sim.data, "bernoulli", res.selected_G, w, InitStrategy(seed=fit_seed), opts.fit_opts)
        out.append(_record("subject_loss", n, T, "EX", scenario, w, rep, "asl", average_squared_loss(f, sim)))
        out.append(_record("subject_loss", n, T, "EX", scenario, w, rep, "selected_G", res.selected_G))
    return out


def subject_loss_study(scenarios=("S1", "S2", "S3"), n=180, Ts=(10, 20), working=("EX", "UN"),
                       opts: StudyOptions = StudyOptions(reps=100),
                       sel: SelectionOptions = SelectionOptions(C=5)):
    """Average squared loss of subject coefficients after selecting ``G`` by CVA."""
    jobs = [(n, T, s, tuple(working), rep, opts, sel)
            for s in scenarios for T in Ts for rep in range(opts.reps)]
    return [r for rows in _map(_subject_loss_job, jobs, opts.n_jobs) for r in rows]


# ---------------------------------------------------------------------------
# Wald interval coverage


def _coverage_job(args):
    n, T, truth, working, rep, opts, level = args
    sim, fit_seed = _draw(n, T, truth, "S1", rep, opts)
    f = fit(sim.data, "bernoulli", 3, working, InitStrategy(seed=fit_seed), opts.fit_opts)
    sigma = align_labels(f.assignments, sim.groups, 3)
    z = norm.ppf(0.5 + level / 2.0)
    out = []
    for g_est, g_true in enumerate(sigma):
        beta, se = f.betas[g_est], f.std_errors[g_est]
        for k in range(len(beta)):
            hit = abs(beta[k] - sim.group_betas[g_true, k]) <= z * se[k]
            out.append(_record("coverage", n, T, truth, "S1", working, rep, f"cover_{g_true + 1}_{k}", hit))
    return out


def coverage_study(n=270, T=20, truth="EX", working="EX", level=0.95,
                   opts: StudyOptions = StudyOptions(reps=500)):
    """Empirical coverage of Wald intervals from the sandwich covariance, ``G = 3`` fixed."""
    jobs = [(n, T, truth, working, rep, opts, level) for rep in range(opts.reps)]
    return [r for rows in _map(_coverage_job, jobs, opts.n_jobs) for r in rows]


# ---------------------------------------------------------------------------
# summaries and output


def summarize(records, by=("study", "n", "T", "truth", "scenario", "working", "metric")) -> list[dict]:
    """Mean, Monte Carlo standard error and count of each metric cell."""
    cells = {}
    for r in records:
        cells.setdefault(tuple(r[k] for k in by), []).append(r["value"])
    out = []
    for key, values in cells.items():
        v = np.asarray(values, dtype=float)
        se = float(v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else float("nan")
        out.append({**dict(zip(by, key)), "mean": float(v.mean()), "mcse": se, "count": len(v)})
    return out


def selection_frequencies(records, working, candidates=(2, 3, 4, 5, 6, 7), n=None, T=None) -> dict:
    """Fraction of replications selecting each candidate ``G``."""
    picks = [r["value"] for r in records
             if r["metric"] == "selected_G" and r["working"] == working
             and (n is None or r["n"] == n) and (T is None or r["T"] == T)]
    total = len(picks)
    return {G: (sum(p == G for p in picks) / total if total else float("nan")) for G in candidates}


def mean_metric(records, metric, **where) -> float:
    v = [r["value"] for r in records if r["metric"] == metric and all(r[k] == x for k, x in where.items())]
    return float(np.mean(v)) if v else float("nan")


def write_records(records, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as handle:
        w = csv.DictWriter(handle, fieldnames=RECORD_FIELDS)
        w.writeheader()
        w.writerows(records)


def write_summary(rows, path) -> None:
    if not rows:
        Path(path).write_text("", encoding="utf-8")
        return
    with Path(path).open("w", newline="", encoding="utf-8") as handle:
        w = csv.DictWriter(handle, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def table_layout(records, table: int) -> list[dict]:
    """Rows arranged like the corresponding published table.

    Table 1 gives ``100 * SEL`` per group and working correlation, table 2
    ``100 * CE`` in percent, table 3 selection percentages per candidate and
    table 4 ``100 * ASL`` per scenario and ``T``.
    """
    rows = []
    if table in (1, 2):
        cells = {}
        for r in records:
            if r["study"] != "accuracy" or r["working"] == "-":
                continue
            if table == 1 and r["metric"].startswith("sel_"):
                key = (r["n"], r["T"], r["truth"], r["metric"][4:])
            elif table == 2 and r["metric"] == "ce":
                key = (r["n"], r["T"], r["truth"], "")
            else:
                continue
            cells.setdefault(key, {}).setdefault(r["working"], []).append(100 * r["value"])
        for (n, T, truth, group), by_w in sorted(cells.items()):
            row = {"n": n, "T": T, "truth": truth}
            if table == 1:
                row["group"] = group
            for w, v in by_w.items():
                v = np.asarray(v)
                row[w] = round(float(v.mean()), 2)
                row[f"{w}_mcse"] = round(float(v.std(ddof=1) / np.sqrt(len(v))), 2) if len(v) > 1 else ""
            rows.append(row)
    elif table == 3:
        keys = sorted({(r["n"], r["T"], r["working"]) for r in records if r["metric"] == "selected_G"})
        for n, T, w in keys:
            freq = selection_frequencies(records, w, n=n, T=T)
            rows.append({"n": n, "T": T, "working": w, **{f"G={G}": round(100 * p, 1) for G, p in freq.items()}})
    elif table == 4:
        cells = {}
        for r in records:
            if r["metric"] == "asl":
                cells.setdefault((r["working"], r["scenario"], r["T"]), []).append(100 * r["value"])
        for w in sorted({k[0] for k in cells}):
            row = {"method": f"GGEE-{'US' if w == Structure.UN.value else w}"}
            for (w2, s, T), v in sorted(cells.items()):
                if w2 == w:
                    row[f"{s}_T{T}"] = round(float(np.mean(v)), 2)
                    row[f"{s}_T{T}_mcse"] = round(float(np.std(v, ddof=1) / np.sqrt(len(v))), 2) if len(v) > 1 else ""
            rows.append(row)
    else:
        raise ValueError(f"unknown table {table}")
    return rows


def run_table(table: int, opts: StudyOptions, sel: SelectionOptions | None = None, sizes=SIZES) -> list[dict]:
    """Records for one of the published simulation tables at the given scale."""
    if table in (1, 2):
        return accuracy_study(sizes, opts=opts)
    if table == 3:
        return selection_study(sizes, opts=opts, sel=sel or SelectionOptions())
    if table == 4:
        return subject_loss_study(opts=opts, sel=sel or SelectionOptions(C=5))
    raise ValueError(f"unknown table {table}")


__all__ = ["StudyOptions", "SelectionOptions", "accuracy_study", "selection_study", "subject_loss_study",
           "coverage_study", "summarize", "selection_frequencies", "mean_metric", "write_records",
           "write_summary", "table_layout", "run_table", "replication_seed"]
