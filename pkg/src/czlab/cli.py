"""Command line entry point: czlab <subcommand> [--scenario PATH] [overrides]."""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from dataclasses import replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import arith, scenario
from .cubes import CubeTree
from .decomposition import build_instance, decay_csv, decay_diagnostics, decompose
from .goodness import GoodnessContext, classify_tree, derive_gamma, stats_csv
from .grid import build_grid
from .measure import verify_upper_doubling
from .operator import containment_check, kernel_matrix, off_diagonal_check, verify_kernel
from .studies import T1_HEADER, corona_study, goodness_study, pmap, t1_study

SCHEMA = 1
EXIT_OK = 0
EXIT_INVARIANT = 1
EXIT_USAGE = 2


def _clean(x):
    """JSON-safe copy: non-finite floats become strings, numpy scalars become Python."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, Fraction):
        return str(x)
    return x


def _csv(header: list, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _gamma(sc: scenario.Scenario, kernel) -> float:
    d = kernel.lam.d if kernel.lam is not None else sc.measure_dimension
    return sc.gamma if sc.gamma is not None else derive_gamma(d, sc.eta)


# subcommands ------------------------------------------------------------------
# each returns (summary dict, csv text, failures)

def cmd_verify_measure(sc: scenario.Scenario, threads: int):
    m = sc.build_measure()
    k = sc.build_kernel(m)
    lam = k.lam
    dbl = verify_upper_doubling(m, lam)
    kr = verify_kernel(k, m, seed=sc.seed)
    T = kernel_matrix(m, k)
    g1 = build_grid(m.coords, m.exp, 1, sc.seed)
    g2 = build_grid(m.coords, m.exp, 2, sc.seed)
    gamma = _gamma(sc, k)
    ctx = GoodnessContext(sc.r, gamma, sc.eta, lam.d).with_grids(g1, g2)
    t1, t2 = CubeTree(m, g1), CubeTree(m, g2)
    good2 = classify_tree(t2, ctx)[0]
    off = off_diagonal_check(T, t1, max(kr.c_smooth, 1e-300), lam.doubling, sc.eta, seed=sc.seed)
    cont = containment_check(T, t1, t2, good2, ctx, seed=sc.seed)
    failures = []
    if not dbl.passed:
        failures.append("upper_doubling")
    if off.violations:
        failures.append("off_diagonal")
    if cont.failures:
        failures.append("containment")
    summary = {"atoms": m.size, "dimension": m.n, "total_mass": m.total_mass, "min_gap": str(m.min_gap()),
               "diameter": str(m.diameter()), "lambda": lam.to_dict(), "doubling": dbl.to_dict(),
               "kernel": kr.to_dict(), "gamma": gamma, "off_diagonal": off.to_dict(), "containment": cont.to_dict()}
    rows = [[q, p, r, repr(ratio)] for q, p, r, ratio in off.records]
    return summary, _csv(["Q", "P", "R", "ratio"], rows), failures


def cmd_grid_stats(sc: scenario.Scenario, threads: int):
    res = goodness_study(sc.grid_rs, sc.grid_samples, sc.seed, sc.grid_gamma, sc.grid_level)
    summary = {"C": res["C"], "checks": res["checks"], "monotone": res["monotone"],
               "freq_pair": {str(row.r): row.freq_pair for row in res["rows"]}}
    return summary, stats_csv(res["rows"]), res["failures"]


def cmd_corona(sc: scenario.Scenario, threads: int):
    m = sc.build_measure()
    k = sc.build_kernel(m)
    res = corona_study(m, sc.r, _gamma(sc, k), sc.eta, k.lam.d, sc.p1, sc.corona_draws, sc.seed)
    rows = [[key, _clean(v)] for key, v in res.items() if key != "failures"]
    return res, _csv(["quantity", "value"], rows), res["failures"]


def _instance(sc: scenario.Scenario, seed: int):
    m = sc.build_measure()
    k = sc.build_kernel(m)
    return build_instance(m, k, sc.r, seed, sc.p1, sc.p2, sc.arith, k.lam.d, _gamma(sc, k))


def _decompose_one(sc: scenario.Scenario, seed: int):
    inst = _instance(sc, seed)
    return decompose(inst, sc.upsilon, sc.eps, sc.surgery_pairs)


def cmd_decompose(sc: scenario.Scenario, threads: int):
    results = pmap(lambda s: _decompose_one(sc, s), sc.seeds, threads)
    runs, failures, csv_parts = [], [], []
    for seed, res in zip(sc.seeds, results):
        runs.append({"seed": seed, **res.to_dict()})
        failures.extend(f"seed{seed}:{f}" for f in res.failures)
        body = res.ledger.pairs_csv().splitlines()
        if not csv_parts:
            csv_parts.append("seed," + body[0])
        csv_parts.extend(f"{seed},{line}" for line in body[1:])
    worst = max(r["ledger"]["residual"] for r in runs)
    return {"runs": runs, "max_residual": worst}, "\n".join(csv_parts) + "\n", failures


def cmd_t1_study(sc: scenario.Scenario, threads: int):
    res = t1_study(sc.t1_levels, p=sc.p1, seed=sc.seed, threads=threads)
    summary = {"rows": [{"level": r.level, "atoms": r.atoms, "T_loc": r.t_loc, "norm_lower": r.norm_lower,
                         "norm_upper": r.norm_upper, "ratio": r.ratio} for r in res["rows"]],
               "spread": res["spread"], "inconsistent_levels": res["inconsistent_levels"]}
    return summary, _csv(T1_HEADER, [r.to_row() for r in res["rows"]]), res["failures"]


def cmd_decay(sc: scenario.Scenario, threads: int):
    res = _decompose_one(sc, sc.seed)
    inst = res.instance
    table = decay_diagnostics(res.ledger, inst.ctx)
    failures = [] if all(t["finite"] for t in table.values()) else ["decay_not_finite"]
    return {"instance": inst.describe(), "tables": table}, decay_csv(table), failures


COMMANDS = {
    "verify-measure": cmd_verify_measure,
    "grid-stats": cmd_grid_stats,
    "corona": cmd_corona,
    "decompose": cmd_decompose,
    "t1-study": cmd_t1_study,
    "decay": cmd_decay,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="czlab", description="Local T1 testbed on atomic upper-doubling measures")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--scenario", help="TOML scenario file")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, help="thread budget (default: $CZLAB_THREADS or 1)")
        p.add_argument("--arith", choices=list(arith.MODES))
        p.add_argument("--out", help="report directory")
        if name == "grid-stats":
            p.add_argument("--r", help="r values, e.g. 4 or 2,4,6,8")
            p.add_argument("--samples", type=int)
        if name == "t1-study":
            p.add_argument("--levels", help="e.g. 4..8")
    return ap


def resolve(args) -> tuple[scenario.Scenario, int]:
    sc = scenario.load(args.scenario) if args.scenario else scenario.Scenario()
    if args.seed is not None:
        sc = replace(sc, seed=args.seed, seeds=[args.seed])
    if args.arith is not None:
        sc = replace(sc, arith=args.arith)
    if args.out is not None:
        sc = replace(sc, out=args.out)
    if getattr(args, "r", None):
        sc = replace(sc, grid_rs=scenario.parse_levels(args.r))
    if getattr(args, "samples", None) is not None:
        if args.samples < 100:
            raise scenario.ConfigError("samples", "at least 100 required")
        sc = replace(sc, grid_samples=args.samples)
    if getattr(args, "levels", None):
        sc = replace(sc, t1_levels=scenario.parse_levels(args.levels))
    threads = args.threads
    if threads is None:
        env = os.environ.get("CZLAB_THREADS")
        try:
            threads = int(env) if env else 1
        except ValueError:
            raise scenario.ConfigError("CZLAB_THREADS", f"not an integer: {env!r}") from None
    if threads < 1:
        raise scenario.ConfigError("threads", "must be at least 1")
    return sc, threads


def run(command: str, sc: scenario.Scenario, threads: int = 1) -> tuple[dict, str, int]:
    """Run one subcommand and write <out>/<command>.json and .csv; returns (report, csv, exit code)."""
    summary, table, failures = COMMANDS[command](sc, threads)
    report = {"schema": SCHEMA, "command": command, "config": sc.resolved(), "result": summary,
              "failures": list(failures), "ok": not failures}
    report = _clean(report)
    out = Path(sc.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{command}.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (out / f"{command}.csv").write_text(table)
    return report, table, EXIT_INVARIANT if failures else EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        sc, threads = resolve(args)
        report, _, code = run(args.command, sc, threads)
    except scenario.ConfigError as exc:
        print(f"czlab: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    brief = {k: report[k] for k in ("schema", "command", "ok", "failures")}
    brief["out"] = str(Path(sc.out) / f"{args.command}.json")
    print(json.dumps(brief, sort_keys=True))
    return code


if __name__ == "__main__":
    sys.exit(main())
