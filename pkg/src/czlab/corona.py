"""Stopping trees (corona families), their norm checks and the layer families."""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import arith
from .cubes import CubeTree
from .dyadic import format_dyadic
from .martingale import MartingaleExpansion, cube_averages, lp_norm

WHOLE = -1  # stands for R^n as a stopping parent


@dataclass
class StoppingTree:
    tree: CubeTree
    cubes: list[int]           # stopping cube ids in construction (top-down) order
    sigma: dict                # id -> <|f|>_S
    parent: dict               # id -> stopping parent id or WHOLE
    children: dict             # id -> list of stopping children
    stop_parent: np.ndarray    # for every cube id: minimal stopping cube containing it, or WHOLE
    roots: list[int]
    mode: str = arith.FLOAT
    depth: dict = field(default_factory=dict)

    @property
    def j(self) -> int:
        return self.tree.grid.j

    def is_stopping(self, c: int) -> bool:
        return c in self.sigma

    def stopping_parent(self, c: int, t: int = 0) -> int:
        s = int(self.stop_parent[c])
        for _ in range(t):
            if s == WHOLE:
                return WHOLE
            s = self.parent[s]
        return s

    def lift(self, s: int, t: int) -> int:
        """pi^t within the stopping family, starting at a stopping cube."""
        for _ in range(t):
            if s == WHOLE:
                return WHOLE
            s = self.parent[s]
        return s

    def descendants(self, s: int, t: int) -> list[int]:
        """ch^t(S)."""
        level = [s]
        for _ in range(t):
            level = [c for x in level for c in self.children[x]]
        return level

    def dump(self) -> str:
        """One line per stopping cube: level anchor sigma parent-index."""
        index = {c: i for i, c in enumerate(self.cubes)}
        lines = []
        for c in self.cubes:
            anchor = ",".join(format_dyadic(Fraction(int(a), 1 << self.tree.exp)) for a in self.tree.anchor[c])
            par = self.parent[c]
            lines.append(f"{int(self.tree.level[c])} {anchor} {float(self.sigma[c])!r} {index[par] if par != WHOLE else -1}")
        return "\n".join(lines) + "\n"


def build_stopping_tree(f, tree: CubeTree, good: np.ndarray, mode: str = arith.FLOAT) -> StoppingTree:
    fv = arith.vec(f, mode)
    absavg = cube_averages(tree, abs(fv), mode)
    roots = []
    stack = [0]
    while stack:
        c = stack.pop()
        if good[c]:
            roots.append(c)
        else:
            stack.extend(reversed(tree.children[c]))
    sigma, parent, children = {}, {}, {}
    order = []
    queue = [(r, WHOLE) for r in sorted(roots)]
    while queue:
        s, par = queue.pop(0)
        sigma[s] = absavg[s]
        parent[s] = par
        children[s] = []
        order.append(s)
        bound = 4 * absavg[s]
        stack = list(reversed(tree.children[s]))
        while stack:
            c = stack.pop()
            if absavg[c] > bound and (good[c] or good[tree.parent[c]]):
                children[s].append(c)
                queue.append((c, s))
            else:
                stack.extend(reversed(tree.children[c]))
    stop_parent = np.full(tree.count, WHOLE, dtype=np.int64)
    for c in range(tree.count):  # ids are top-down, parents come first
        if c in sigma:
            stop_parent[c] = c
        elif tree.parent[c] >= 0:
            stop_parent[c] = stop_parent[tree.parent[c]]
    depth = {}
    for s in order:
        depth[s] = 0 if parent[s] == WHOLE else depth[parent[s]] + 1
    return StoppingTree(tree, order, sigma, parent, children, stop_parent, sorted(roots), mode, depth)


def brute_force_stopping(f, tree: CubeTree, good: np.ndarray) -> set[int]:
    """Reference construction straight from the definition, by scanning all cubes."""
    absavg = cube_averages(tree, np.abs(np.asarray(f, dtype=float)))
    ids = range(tree.count)
    roots = {c for c in ids if good[c] and not any(good[a] for a in _strict_ancestors(tree, c))}
    family = set(roots)
    frontier = sorted(roots)
    while frontier:
        new = []
        for s in frontier:
            cand = [c for c in ids if c != s and tree.is_ancestor(s, c)
                    and absavg[c] > 4 * absavg[s] and (good[c] or good[tree.parent[c]])]
            for c in cand:
                between = [a for a in _strict_ancestors(tree, c) if a != s and tree.is_ancestor(s, a)]
                if not any(a in cand for a in between):
                    new.append(c)
        family.update(new)
        frontier = new
    return family


def _strict_ancestors(tree: CubeTree, c: int) -> list[int]:
    out = []
    p = int(tree.parent[c])
    while p >= 0:
        out.append(p)
        p = int(tree.parent[p])
    return out


def sparseness_violations(st: StoppingTree) -> list[tuple[int, Fraction, Fraction]]:
    """Stopping cubes whose children carry more than a quarter of their mass (exact)."""
    w = [Fraction(x) for x in st.tree.measure.weights]
    mass = {}

    def mu(c):
        if c not in mass:
            mass[c] = sum((w[a] for a in st.tree.atoms(c)), Fraction(0))
        return mass[c]

    bad = []
    for s in st.cubes:
        total = sum((mu(c) for c in st.children[s]), Fraction(0))
        if total > mu(s) / 4:
            bad.append((s, total, mu(s)))
    return bad


def carleson_ratio(st: StoppingTree) -> float:
    """max over S of sum_{S' stopping, S' subset S} mu(S') / mu(S)."""
    worst = 0.0
    mass = st.tree.mass
    memo = {}
    for s in reversed(st.cubes):
        memo[s] = mass[s] + sum(memo[c] for c in st.children[s])
        worst = max(worst, memo[s] / mass[s])
    return worst


def quasi_orthogonality(st: StoppingTree, f, p: float) -> tuple[float, float, float]:
    m = st.tree.measure
    lhs = float(sum(float(st.sigma[s]) ** p * st.tree.mass[s] for s in st.cubes))
    rhs = (4.0 / 3.0) * (p / (p - 1)) ** p * lp_norm(m, f, p) ** p
    return lhs, rhs, (lhs / rhs if rhs > 0 else 0.0)


def sigma_estimate_violations(st: StoppingTree, f, good: np.ndarray) -> list[int]:
    """Cubes Q (not roots, Q or its parent good, inside some root) with <|f|>_Q > 4 sigma(pi_S Q)."""
    tree = st.tree
    absavg = cube_averages(tree, np.abs(np.asarray(f, dtype=float)))
    bad = []
    for c in range(tree.count):
        s = int(st.stop_parent[c])
        if s == WHOLE or c in st.roots or tree.parent[c] < 0:
            continue
        if not (good[c] or good[tree.parent[c]]):
            continue
        if absavg[c] > 4 * float(st.sigma[s]) * (1 + 1e-12):
            bad.append(c)
    return bad


def coronal_projection(st: StoppingTree, exp: MartingaleExpansion, s: int) -> np.ndarray:
    tree = exp.tree
    out = arith.zeros(tree.measure.size, exp.mode)
    for c in range(tree.count):
        if st.stop_parent[c] == s and tree.children[c]:
            for ch in tree.children[c]:
                out[tree.atoms(ch)] += exp.coef[ch]
    return out


def projection_partition(st: StoppingTree, exp: MartingaleExpansion) -> dict:
    """{S: P_S f} plus the WHOLE key for differences of cubes outside every root."""
    tree = exp.tree
    out = {}
    for c in range(tree.count):
        if not tree.children[c]:
            continue
        s = int(st.stop_parent[c])
        vec = out.setdefault(s, arith.zeros(tree.measure.size, exp.mode))
        for ch in tree.children[c]:
            vec[tree.atoms(ch)] += exp.coef[ch]
    return out


def projection_sum_ratio(st: StoppingTree, exp: MartingaleExpansion, f, p: float) -> float:
    m = exp.tree.measure
    parts = projection_partition(st, exp)
    total = sum(lp_norm(m, v, p) ** p for s, v in parts.items() if s != WHOLE)
    den = lp_norm(m, f, p) ** p
    return total / den if den > 0 else 0.0


# layers --------------------------------------------------------------------

@dataclass
class LayerFamily:
    base: int                   # S in the first tree
    members: dict               # R (second tree stopping cube) -> layer index
    violations: list            # (R, k, reason)


def layer_families(st1: StoppingTree, st2: StoppingTree, inside: list[tuple[int, int, int]], r: int) -> dict:
    """inside: (P, Q, P_Q) triples with P_Q in st1's cube tree, Q in st2's.

    Layer k of R is the number of family members strictly containing R.
    Checks containment for k >= 2(r+1) and 2^(k-1) lR <= 2^r lS for k >= 1.
    """
    t1, t2 = st1.tree, st2.tree
    fam = {}
    for _p, q, pq in inside:
        s = st1.stopping_parent(pq)
        if s == WHOLE:
            continue
        rr = st2.stopping_parent(q)
        if rr == WHOLE:
            continue
        fam.setdefault(s, set()).add(rr)
    out = {}
    for s, members in fam.items():
        layer = {}
        for rr in members:
            layer[rr] = sum(1 for x in members if x != rr and t2.is_ancestor(x, rr))
        viol = []
        s_cube = t1.cube(s)
        for rr, k in layer.items():
            r_cube = t2.cube(rr)
            if k >= 2 * (r + 1) and not s_cube.contains_cube(r_cube):
                viol.append((rr, k, "containment"))
            if k >= 1 and (k - 1) + r_cube.level > r + s_cube.level:
                viol.append((rr, k, "basic_estimate"))
        out[s] = LayerFamily(s, layer, viol)
    return out
