"""Reading long-format CSV data and saving fits as versioned JSON.

A long-format file has one row per observation::

    subject_id,time,y,x1,x2
    a,1,0,0.31,-1.2
    a,2,1,0.02,0.7

Rows may come in any order; they are grouped by ``subject_id`` (in order of
first appearance) and sorted by ``time`` within a subject.  An intercept
column is prepended unless one named ``intercept`` is already present.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .correlation import WorkingCorrelationSpec
from .data import LongitudinalDataset, Subject
from .exceptions import DataError, SchemaError
from .families import Family, FamilySpec
from .grouping import GroupedFit
from .solver import GroupFit

SCHEMA_VERSION = 1
REQUIRED_COLUMNS = ("subject_id", "time", "y")
_MISSING = {"", "na", "nan", "null", "none"}


def _number(text, line, column):
    if text.strip().lower() in _MISSING:
        raise DataError(f"missing value in column {column!r}", line)
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"non-numeric value {text!r} in column {column!r}", line) from None
    if not math.isfinite(value):
        raise DataError(f"non-finite value {text!r} in column {column!r}", line)
    return value


def read_long_csv(path) -> LongitudinalDataset:
    """Load a long-format CSV file.

    Raises
    ------
    DataError
        On a missing or malformed header, a row with the wrong number of
        fields, a missing or non-numeric value, or a repeated
        ``(subject_id, time)`` pair.  The message names the offending line.
    """
    path = Path(path)
    try:
        handle = path.open(newline="", encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot open {path}: {e.strerror}") from None
    with handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("file is empty", 1) from None
        except csv.Error as e:
            raise DataError(str(e), 1) from None
        header = [h.strip() for h in header]
        if tuple(header[:3]) != REQUIRED_COLUMNS:
            raise DataError(f"header must start with {', '.join(REQUIRED_COLUMNS)}; got {header[:3]}", 1)
        covariates = header[3:]
        if len(set(header)) != len(header) or any(not c for c in covariates):
            raise DataError("covariate column names must be unique and non-empty", 1)

        rows = {}
        seen = {}
        try:
            for row in reader:
                line = reader.line_num
                if not row or (len(row) == 1 and not row[0].strip()):
                    continue
                if len(row) != len(header):
                    raise DataError(f"expected {len(header)} fields, found {len(row)}", line)
                sid = row[0].strip()
                if not sid:
                    raise DataError("missing subject_id", line)
                t = _number(row[1], line, "time")
                values = [_number(v, line, c) for v, c in zip(row[2:], header[2:])]
                if (sid, t) in seen:
                    raise DataError(
                        f"duplicate observation for subject {sid!r} at time {t:g} (first on line {seen[sid, t]})",
                        line)
                seen[sid, t] = line
                rows.setdefault(sid, []).append((t, values))
        except csv.Error as e:
            raise DataError(str(e), reader.line_num) from None
    if not rows:
        raise DataError("no observations", 2)

    add_intercept = "intercept" not in covariates
    names = (["intercept"] if add_intercept else []) + covariates
    subjects = []
    for sid, obs in rows.items():
        obs.sort(key=lambda o: o[0])
        times = np.array([o[0] for o in obs])
        M = np.array([o[1] for o in obs], dtype=float).reshape(len(obs), -1)
        X = M[:, 1:]
        if add_intercept:
            X = np.column_stack([np.ones(len(obs)), X])
        subjects.append(Subject(sid, M[:, 0], X, times))
    return LongitudinalDataset(subjects, names)


def write_long_csv(data: LongitudinalDataset, path) -> None:
    """Write ``data`` in the format read by :func:`read_long_csv`."""
    with Path(path).open("w", newline="", encoding="utf-8") as handle:
        w = csv.writer(handle)
        w.writerow([*REQUIRED_COLUMNS, *data.covariate_names])
        for s in data.subjects:
            for t, y, x in zip(s.times, s.y, s.X):
                w.writerow([s.subject_id, repr(float(t)), repr(float(y)), *(repr(float(v)) for v in x)])


# ---------------------------------------------------------------------------
# JSON


def _array(a):
    return None if a is None else np.asarray(a, dtype=float).tolist()


def fit_to_dict(fit: GroupedFit) -> dict:
    return {
        "schema": SCHEMA_VERSION,
        "kind": "grouped_gee_fit",
        "G": fit.G,
        "family": {"name": fit.family.family.value, "scale_phi": fit.family.scale_phi},
        "betas": _array(fit.betas),
        "assignments": [int(g) for g in fit.assignments],
        "corr": [{"structure": c.structure.value, "alpha": _array(c.alpha), "heterogeneous": c.heterogeneous}
                 for c in fit.corr],
        "group_fits": [{"beta": _array(gf.beta), "iterations": gf.iterations, "converged": gf.converged,
                        "score_norm": gf.score_norm, "H": _array(gf.H),
                        "sandwich_cov": _array(gf.sandwich_cov), "n_g": gf.n_g,
                        "diagnostics": list(gf.diagnostics)}
                       for gf in fit.group_fits],
        "outer_iterations": fit.outer_iterations,
        "converged": fit.converged,
        "objective": fit.objective,
        "history": [int(h) for h in fit.history],
        "diagnostics": list(fit.diagnostics),
        "seed": fit.seed,
        "restart": fit.restart,
    }


def fit_from_dict(d: dict) -> GroupedFit:
    if not isinstance(d, dict) or d.get("kind") != "grouped_gee_fit":
        raise SchemaError("not a grouped GEE fit document")
    if d.get("schema") != SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema version {d.get('schema')!r} (expected {SCHEMA_VERSION})")
    try:
        family = FamilySpec(Family(d["family"]["name"]), float(d["family"]["scale_phi"]))
        corr = [WorkingCorrelationSpec(c["structure"], np.array(c["alpha"], dtype=float), bool(c["heterogeneous"]))
                for c in d["corr"]]
        group_fits = [GroupFit(beta=np.array(g["beta"], dtype=float), iterations=int(g["iterations"]),
                               converged=bool(g["converged"]), score_norm=float(g["score_norm"]),
                               H=np.array(g["H"], dtype=float),
                               sandwich_cov=None if g["sandwich_cov"] is None
                               else np.array(g["sandwich_cov"], dtype=float),
                               n_g=int(g["n_g"]), diagnostics=list(g["diagnostics"]))
                      for g in d["group_fits"]]
        return GroupedFit(G=int(d["G"]), betas=np.array(d["betas"], dtype=float),
                          assignments=np.array(d["assignments"], dtype=int), corr=corr,
                          group_fits=group_fits, outer_iterations=int(d["outer_iterations"]),
                          converged=bool(d["converged"]), objective=float(d["objective"]),
                          history=list(d["history"]), family=family, diagnostics=list(d["diagnostics"]),
                          seed=d["seed"], restart=int(d["restart"]))
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"malformed fit document: {e!r}") from None


def dumps(obj: dict) -> str:
    # repr-based float formatting in json round-trips doubles exactly
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_fit_json(fit: GroupedFit, path) -> None:
    Path(path).write_text(dumps(fit_to_dict(fit)), encoding="utf-8")


def load_json(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read {path}: {e.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaError(f"invalid JSON: {e.msg}", e.lineno) from None


def read_fit_json(path) -> GroupedFit:
    return fit_from_dict(load_json(path))
