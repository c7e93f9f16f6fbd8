"""Command-line interface: ``python -m grouped_gee <command> ...``.

Commands
--------
fit        grouped GEE with a fixed number of groups
select     choose the number of groups by cross-validated instability
simulate   rerun one of the simulation tables at a chosen scale
summarize  group-wise mean response trajectories of a saved fit

Exit status is 0 on success, 2 for usage errors, 3 for unreadable or
malformed input and 4 when a numerical routine fails.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io, studies
from .correlation import Structure
from .exceptions import ContractError, DataError, NumericError
from .families import Family, as_family
from .grouping import FitOptions, InitStrategy, fit
from .model_selection import cva_select

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def parse_candidates(text: str) -> list[int]:
    """``"2..10"`` or ``"2,3,5"`` (or a mix such as ``"2..4,7"``)."""
    out = []
    try:
        for part in text.split(","):
            part = part.strip()
            if ".." in part:
                lo, hi = part.split("..")
                out.extend(range(int(lo), int(hi) + 1))
            elif part:
                out.append(int(part))
    except ValueError:
        raise UsageError(f"cannot parse candidate list {text!r}") from None
    if not out:
        raise UsageError("empty candidate list")
    return sorted(set(out))


def _structure(text):
    try:
        return Structure.parse(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"unknown correlation structure {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="python -m grouped_gee", description="Grouped generalized estimating equations.")
    p.add_argument("--threads", type=int, default=1, help="worker processes for parallel jobs (0: one per CPU)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    families = [f.value for f in Family]

    f = sub.add_parser("fit", help="fit grouped GEE with G groups")
    f.add_argument("--data", required=True)
    f.add_argument("--family", choices=families, default="bernoulli")
    f.add_argument("--corr", type=_structure, default=Structure.EX)
    f.add_argument("--groups", type=int, required=True)
    f.add_argument("--hetero-alpha", action="store_true", help="separate correlation parameter per group")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--restarts", type=int, default=1)
    f.add_argument("--init", choices=["kmeans", "random"], default="kmeans")
    f.add_argument("--tol", type=float, default=1e-6)
    f.add_argument("--max-outer", type=int, default=100)
    f.add_argument("--out", required=True)

    s = sub.add_parser("select", help="choose G by cross-validation with averaging")
    s.add_argument("--data", required=True)
    s.add_argument("--family", choices=families, default="bernoulli")
    s.add_argument("--corr", type=_structure, default=Structure.EX)
    s.add_argument("--candidates", default="2..10")
    s.add_argument("--splits", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    m = sub.add_parser("simulate", help="rerun a simulation table")
    m.add_argument("--table", type=int, choices=[1, 2, 3, 4], required=True)
    m.add_argument("--reps", type=int, default=None,
                   help="replications per cell (default 200 for tables 1-2, 50 for 3, 100 for 4)")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--sizes", default=None, help="comma separated n x T cells, e.g. 180x10,270x20")
    m.add_argument("--splits", type=int, default=None, help="CVA splits (tables 3 and 4)")
    m.add_argument("--binary-method", choices=["tetrachoric", "latent"], default="tetrachoric")
    m.add_argument("--out-dir", required=True)

    z = sub.add_parser("summarize", help="group-wise mean response by time")
    z.add_argument("--fit", required=True)
    z.add_argument("--data", required=True)
    z.add_argument("--out", default=None, help="CSV path (default: standard output)")
    return p


def _print_table(fit_, names, out=None):
    out = out or sys.stdout
    se = fit_.std_errors
    width = max(12, *(len(n) + 2 for n in names))
    head = "".ljust(width) + "".join(f"group {g + 1}".rjust(12) for g in range(fit_.G))
    print(head, file=out)
    for k, name in enumerate(names):
        print(f"{name} PE".ljust(width) + "".join(f"{fit_.betas[g, k]:12.4f}" for g in range(fit_.G)), file=out)
        print(f"{name} SE".ljust(width) + "".join(f"{se[g, k]:12.4f}" for g in range(fit_.G)), file=out)
    print("size".ljust(width) + "".join(f"{c:12d}" for c in fit_.group_sizes), file=out)
    alphas = ", ".join(np.array2string(c.alpha, precision=4) for c in fit_.corr)
    print(f"working correlation {fit_.structure.value}: alpha = {alphas}", file=out)
    print(f"converged: {fit_.converged} after {fit_.outer_iterations} outer iterations; "
          f"objective {fit_.objective:.6g}", file=out)


def _check_responses(data, family):
    family = as_family(family).family
    y = np.concatenate([s.y for s in data.subjects])
    if family is Family.BERNOULLI_LOGIT and not np.all((y == 0) | (y == 1)):
        raise DataError("the bernoulli family needs responses coded 0/1")
    if family is Family.POISSON_LOG and np.any((y < 0) | (y != np.round(y))):
        raise DataError("the poisson family needs non-negative integer responses")


def cmd_fit(args) -> int:
    data = io.read_long_csv(args.data)
    _check_responses(data, args.family)
    if args.groups < 1:
        raise UsageError("--groups must be at least 1")
    strategy = InitStrategy(args.init, args.restarts, args.seed)
    opts = FitOptions(tol_beta=args.tol, max_outer=args.max_outer, heterogeneous_alpha=args.hetero_alpha)
    result = fit(data, args.family, args.groups, args.corr, strategy, opts)
    io.write_fit_json(result, args.out)
    _print_table(result, data.covariate_names)
    for d in result.diagnostics:
        logging.getLogger(__name__).info("%s", d)
    return EXIT_OK


def cmd_select(args) -> int:
    data = io.read_long_csv(args.data)
    _check_responses(data, args.family)
    candidates = parse_candidates(args.candidates)
    res = cva_select(data, args.family, args.corr, candidates, args.splits, args.seed, n_jobs=args.threads)
    doc = {"schema": io.SCHEMA_VERSION, "kind": "cva_selection", "candidates": res.candidates,
           "instability": {str(G): v for G, v in res.instability.items()}, "selected_G": res.selected_G,
           "per_split": [[None if np.isnan(v) else v for v in row] for row in res.per_split.tolist()],
           "seed": res.seed, "M": res.M, "C": res.C, "corr": args.corr.value, "family": args.family,
           "diagnostics": res.diagnostics}
    Path(args.out).write_text(io.dumps(doc), encoding="utf-8")
    print(f"{'G':>4} {'instability':>14}")
    for G in res.candidates:
        mark = "  <- selected" if G == res.selected_G else ""
        print(f"{G:>4} {res.instability[G]:>14.2f}{mark}")
    return EXIT_OK


def _parse_sizes(text):
    if text is None:
        return studies.SIZES
    out = []
    for part in text.split(","):
        try:
            n, T = part.lower().split("x")
            out.append((int(n), int(T)))
        except ValueError:
            raise UsageError(f"cannot parse size {part!r}; expected NxT") from None
    return tuple(out)


def cmd_simulate(args) -> int:
    default_reps = {1: 200, 2: 200, 3: 50, 4: 100}[args.table]
    opts = studies.StudyOptions(reps=args.reps or default_reps, seed=args.seed, n_jobs=args.threads,
                                binary_method=args.binary_method)
    sel = None
    if args.table in (3, 4):
        sel = studies.SelectionOptions(C=args.splits or (20 if args.table == 3 else 5))
    records = studies.run_table(args.table, opts, sel, _parse_sizes(args.sizes))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    studies.write_records(records, out / f"table{args.table}_replications.csv")
    studies.write_summary(studies.summarize(records), out / f"table{args.table}_summary.csv")
    layout = studies.table_layout(records, args.table)
    studies.write_summary(layout, out / f"table{args.table}.csv")
    for row in layout:
        print(", ".join(f"{k}={v}" for k, v in row.items()))
    return EXIT_OK


def cmd_summarize(args) -> int:
    result = io.read_fit_json(args.fit)
    data = io.read_long_csv(args.data)
    if len(result.assignments) != data.n:
        raise DataError(f"fit has {len(result.assignments)} subjects but the data has {data.n}")
    sums = {}
    for s, g in zip(data.subjects, result.assignments):
        for t, y in zip(s.times, s.y):
            acc = sums.setdefault((int(g), float(t)), [0.0, 0])
            acc[0] += y
            acc[1] += 1
    lines = ["group,time,mean_y,count"]
    for (g, t), (total, count) in sorted(sums.items()):
        lines.append(f"{g + 1},{t:g},{float(total / count)!r},{count}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "select": cmd_select, "simulate": cmd_simulate, "summarize": cmd_summarize}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ContractError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, np.linalg.LinAlgError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
