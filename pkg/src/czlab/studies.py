"""Multi-instance studies shared by the CLI and the acceptance suite."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import arith
from .corona import build_stopping_tree, carleson_ratio, quasi_orthogonality, sparseness_violations
from .cubes import CubeTree
from .goodness import GoodnessContext, GoodnessTemplate, badness_table, classify_tree
from .grid import build_grid
from .martingale import lp_norm
from .measure import calibrate_dominating, cantor_third
from .operator import kernel_matrix, operator_norm, sign_power_kernel, testing_constant

CANTOR_DIM = math.log(2) / math.log(3)


def pmap(fn, items, threads: int = 1) -> list:
    """Ordered map; results come back in input order whatever the thread count."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


# T_loc against the operator norm ---------------------------------------------

@dataclass
class T1Row:
    level: int
    atoms: int
    t_loc: float
    norm_lower: float
    norm_upper: float
    ratio: float

    def to_row(self) -> list:
        return [self.level, self.atoms, repr(self.t_loc), repr(self.norm_lower), repr(self.norm_upper), repr(self.ratio)]


T1_HEADER = ["level", "atoms", "T_loc", "norm_lower", "norm_upper", "ratio"]


def t1_row(level: int, s: float = CANTOR_DIM, p: float = 2.0, seed: int = 0, grid_samples: int = 8) -> T1Row:
    m = cantor_third(level)
    k = sign_power_kernel(s, 1.0, calibrate_dominating(m, s))
    T = kernel_matrix(m, k)
    rep = testing_constant(T, p, grid_samples=grid_samples, seed=seed)
    est = operator_norm(T, p, seed=seed)
    upper = est.upper if est.upper is not None else math.inf
    return T1Row(level, m.size, rep.t_loc, est.lower, upper, est.lower / (1 + rep.t_loc))


def t1_study(levels, s: float = CANTOR_DIM, p: float = 2.0, seed: int = 0, threads: int = 1) -> dict:
    rows = pmap(lambda lv: t1_row(lv, s, p, seed), levels, threads)
    ratios = [r.ratio for r in rows]
    spread = max(ratios) / min(ratios) if rows and min(ratios) > 0 else math.inf
    consistent = [r.level for r in rows if not r.t_loc <= r.norm_upper]
    failures = []
    if spread > 2:
        failures.append("t1_ratio_spread")
    if consistent:
        failures.append("t_loc_above_norm")
    return {"rows": rows, "spread": spread, "inconsistent_levels": consistent, "failures": failures}


# badness frequencies ----------------------------------------------------------

def goodness_study(rs=(2, 4, 6, 8), samples: int = 2000, seed: int = 0, gamma: float = 0.2,
                   level: int = 0, n: int = 1, fit_r: int = 4) -> dict:
    """Frequencies per r, monotonicity, and freq(r) <= C 2^(-gamma r) with C fitted at fit_r."""
    rows = badness_table(sorted(set(rs) | {fit_r}), [level], GoodnessTemplate(fit_r, gamma, n), samples, seed)
    by_r = {row.r: row for row in rows}
    C = by_r[fit_r].freq * 2.0 ** (gamma * fit_r)
    checks = []
    for r in sorted(rs):
        row = by_r[r]
        # same as C 2^(-gamma r), written so the fitting point is reproduced exactly
        bound = by_r[fit_r].freq * 2.0 ** (gamma * (fit_r - r))
        checks.append({"r": r, "freq": row.freq, "ci": row.ci_halfwidth, "bound": bound,
                       "within": row.freq - row.ci_halfwidth <= bound})
    ordered = [by_r[r].freq for r in sorted(rs)]
    monotone = all(a >= b for a, b in zip(ordered, ordered[1:]))
    failures = []
    if not monotone:
        failures.append("badness_not_monotone")
    if not all(c["within"] for c in checks):
        failures.append("badness_above_envelope")
    return {"rows": [by_r[r] for r in sorted(rs)], "C": C, "checks": checks, "monotone": monotone,
            "failures": failures}


# stopping-tree norms ------------------------------------------------------------

def corona_study(m, r: int, gamma: float, eta: float, d: float, p: float, draws: int, seed: int) -> dict:
    """Sparseness, Carleson ratio and quasi-orthogonality over random functions on grid 1."""
    g1 = build_grid(m.coords, m.exp, 1, seed)
    g2 = build_grid(m.coords, m.exp, 2, seed)
    ctx = GoodnessContext(r, gamma, eta, d).with_grids(g1, g2)
    tree = CubeTree(m, g1)
    good = classify_tree(tree, ctx)[0]
    rng = np.random.default_rng([int(seed), 202])
    sparse_viol, quasi_viol = 0, 0
    worst_quasi, worst_carleson, cubes = 0.0, 0.0, 0
    for _ in range(draws):
        f = rng.standard_normal(m.size)
        f /= lp_norm(m, f, p)
        st = build_stopping_tree(f, tree, good, arith.FLOAT)
        cubes += len(st.cubes)
        sparse_viol += len(sparseness_violations(st))
        lhs, rhs, ratio = quasi_orthogonality(st, f, p)
        worst_quasi = max(worst_quasi, ratio)
        if lhs > rhs:
            quasi_viol += 1
        if st.cubes:
            worst_carleson = max(worst_carleson, carleson_ratio(st))
    failures = []
    if sparse_viol:
        failures.append("sparseness")
    if quasi_viol:
        failures.append("quasi_orthogonality")
    return {"draws": draws, "good_cubes": int(good.sum()), "cubes": tree.count, "stopping_cubes": cubes,
            "sparseness_violations": sparse_viol, "quasi_violations": quasi_viol,
            "quasi_constant": (4.0 / 3.0) * (p / (p - 1)) ** p, "worst_quasi_ratio": worst_quasi,
            "worst_carleson_ratio": worst_carleson, "failures": failures}
