"""Command-line interface: ``lcepc {fit,epc,ident,simulate}``.

Exit codes: 0 success, 2 usage or input error, 3 nonconvergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import sim
from .design import ModelSpec, format_pair, parse_pairs
from .epc import reports_to_csv, scan
from .estim import FitOptions, FitResult, NonConvergenceError, bic, deviance, fit, wald_tests
from .ident import rank_probe
from .patterns import DataError, ObservedData, ingest

EXIT_OK, EXIT_USAGE, EXIT_NONCONVERGENCE = 0, 2, 3


class UsageError(Exception):
    pass


def _pairs(text: str):
    try:
        return parse_pairs(text or "")
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nonneg(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def _load_data(path: str, mode: str, expect_n: float | None) -> ObservedData:
    if mode == "auto":
        with open(path, newline="", encoding="utf-8") as fh:
            header = next(csv.reader(fh), [])
        mode = "aggregated" if "count" in [h.strip().lower() for h in header] else "raw"
    data = ingest(path, mode=mode)
    if expect_n is not None and abs(data.N - expect_n) > 1e-9:
        raise UsageError(f"{path}: N = {data.N:g} but --expect-n {expect_n:g}")
    return data


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="CSV file (raw responses or aggregated with a count column)")
    p.add_argument("--mode", choices=["auto", "raw", "aggregated"], default="auto",
                   help="data layout (default: detect a 'count' column)")
    p.add_argument("--expect-n", type=float, default=None, help="fail unless the sample size equals this")


def cmd_fit(args) -> int:
    data = _load_data(args.data, args.mode, args.expect_n)
    spec = ModelSpec(data.n_items, args.classes, args.coding, args.deps)
    code = EXIT_OK
    try:
        res = fit(data, spec, FitOptions(starts=args.starts, seed=args.seed, n_jobs=args.jobs))
    except NonConvergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        if e.best is None:
            return EXIT_NONCONVERGENCE
        res, code = e.best, EXIT_NONCONVERGENCE
    dev = deviance(res)
    print(f"loglik = {res.loglik:.4f}")
    print(f"L2 = {dev.L2:.2f}  df = {dev.df}  BIC = {bic(res):.2f}")
    print("class sizes: " + " ".join(f"{p:.3f}" for p in res.class_probs))
    for w in wald_tests(res):
        print(f"psi {format_pair(w.pair)} = {w.estimate:.3f}  se = {w.se:.3f}  "
              f"Wald = {w.wald:.2f}  p = {w.p_value:.3g}")
    if res.boundary_flag:
        print("warning: boundary solution", file=sys.stderr)
    if args.out:
        Path(args.out).write_text(res.to_json(), encoding="utf-8")
    return code


def cmd_epc(args) -> int:
    data = _load_data(args.data, args.mode, args.expect_n)
    doc = json.loads(Path(args.fit).read_text(encoding="utf-8"))
    try:
        res = FitResult.from_dict(doc, data)
    except (KeyError, TypeError) as e:
        raise UsageError(f"{args.fit}: not a fit document ({e})") from None
    if "N" in doc and abs(doc["N"] - data.N) > 1e-6:
        raise UsageError(f"fit was made on N = {doc['N']:g} but data have N = {data.N:g}")
    pairs = args.pairs if args.pairs else None
    if pairs:
        for p in pairs:
            if p in res.spec.free_deps:
                print(f"note: pair {format_pair(p)} is already free; omitted", file=sys.stderr)
    reports = scan(res, pairs, n_jobs=args.jobs)
    text = reports_to_csv(reports, args.out)
    if not args.out:
        sys.stdout.write(text)
    for r in reports:
        for f in r.flags:
            print(f"pair {format_pair(r.pair)}: {f}", file=sys.stderr)
    return EXIT_OK


def cmd_ident(args) -> int:
    spec = ModelSpec(args.items, args.classes, "effect", args.deps)
    rep = rank_probe(spec, n_draws=args.draws, seed=args.seed)
    print(rep.summary())
    print(f"cell: {rep.cell()}")
    for note in rep.notes:
        print(f"note: {note}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    try:
        config = sim.read_config(args.config)
    except (OSError, ValueError, TypeError) as e:
        raise UsageError(f"{args.config}: {e}") from None
    out = Path(args.out)
    if args.mode == "population":
        cells = sim.population_study(config)
        paths = sim.write_population_tables(cells, out)
        for c in cells:
            for f in c.flags:
                print(f"lambda={c.lam:g} psi={c.psi:g}: {f}", file=sys.stderr)
    elif args.mode == "montecarlo":
        pop = sim.population_study(config)
        cells = sim.monte_carlo(config, n_jobs=args.jobs)
        paths = sim.write_monte_carlo_tables(cells, out, pop)
        for c in cells:
            if c.flagged:
                print(f"lambda={c.lam:g} psi={c.psi:g} N={c.N}: {c.failures}/{c.replications} "
                      "replicates failed", file=sys.stderr)
    else:
        rows = [r for lam, psi in config.grid() for r in sim.curve_data(lam, psi)]
        paths = [sim.write_curves(rows, out / "curves.csv")]
    for p in paths:
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lcepc", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a latent class model")
    _add_data_args(p)
    p.add_argument("--classes", type=_positive, default=2)
    p.add_argument("--deps", type=_pairs, default=(), help="free dependencies, e.g. 1-3,2-5")
    p.add_argument("--coding", choices=["effect", "dummy"], default="effect")
    p.add_argument("--starts", type=_nonneg, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=_positive, default=1)
    p.add_argument("--out", help="write the fit as JSON")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("epc", help="EPC and score-test scan of a saved fit")
    _add_data_args(p)
    p.add_argument("--fit", required=True, help="fit JSON written by 'lcepc fit'")
    p.add_argument("--pairs", type=_pairs, default=(), help="pairs to examine (default: all fixed pairs)")
    p.add_argument("--jobs", type=_positive, default=1)
    p.add_argument("--out", help="CSV destination (default: stdout)")
    p.set_defaults(func=cmd_epc)

    p = sub.add_parser("ident", help="local identifiability rank probe")
    p.add_argument("--items", type=_positive, required=True)
    p.add_argument("--classes", type=_positive, required=True)
    p.add_argument("--deps", type=_pairs, default=())
    p.add_argument("--draws", type=_positive, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ident)

    p = sub.add_parser("simulate", help="population, Monte Carlo, or curve studies")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", choices=["population", "montecarlo", "curves"], required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--jobs", type=_positive, default=1)
    p.set_defaults(func=cmd_simulate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, DataError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
