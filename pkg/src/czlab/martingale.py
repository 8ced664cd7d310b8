"""Averages, martingale differences and square functions on a cube tree."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import arith
from .cubes import CubeTree
from .grid import Cube
from .measure import Measure


@dataclass(frozen=True)
class SupportFunction:
    measure: Measure
    values: np.ndarray

    def __post_init__(self):
        if len(self.values) != self.measure.size:
            raise ValueError("one value per atom required")

    def lp_norm(self, p: float) -> float:
        return lp_norm(self.measure, self.values, p)

    def inner(self, other: "SupportFunction"):
        return inner(self.measure, self.values, other.values)


def weights(m: Measure, mode: str = arith.FLOAT) -> np.ndarray:
    return arith.vec(m.weights, mode)


def lp_norm(m: Measure, values, p: float) -> float:
    v = np.abs(np.asarray(values, dtype=float))
    return float(np.sum(m.weights * v ** p)) ** (1.0 / p)


def inner(m: Measure, f, g):
    if np.asarray(f).dtype == object or np.asarray(g).dtype == object:
        w = arith.vec(m.weights, arith.RATIONAL)
        return np.sum(w * f * g)
    return float(np.dot(m.weights * np.asarray(f, dtype=float), np.asarray(g, dtype=float)))


def average(m: Measure, f, q: Cube):
    """<f>_Q, zero when mu(Q) = 0."""
    mask = q.contains_units(m.coords)
    if not mask.any():
        return 0.0 if np.asarray(f).dtype != object else arith.q(0)
    f = np.asarray(f)
    if f.dtype == object:
        w = arith.vec(m.weights[mask], arith.RATIONAL)
        return np.sum(w * f[mask]) / np.sum(w)
    w = m.weights[mask]
    return float(np.dot(w, f[mask]) / w.sum())


def delta(m: Measure, f, q: Cube, grid) -> dict:
    """Delta_Q f as {child cube: constant}; children of zero measure carry 0."""
    base = average(m, f, q)
    return {c: (average(m, f, c) - base if c.contains_units(m.coords).any() else 0 * base)
            for c in grid.children(q)}


def cube_averages(tree: CubeTree, f, mode: str = arith.FLOAT) -> np.ndarray:
    """<f>_Q for every cube id (all cubes in the tree have positive mass)."""
    w = weights(tree.measure, mode)
    fv = arith.vec(f, mode)
    sums = arith.zeros(tree.count, mode)
    masses = arith.zeros(tree.count, mode)
    for ids in tree.atom_cube:
        sums = sums + arith.group_sum(ids, w * fv, tree.count, mode)
        masses = masses + arith.group_sum(ids, w, tree.count, mode)
    return sums / masses


def exact_masses(tree: CubeTree, mode: str = arith.RATIONAL) -> np.ndarray:
    w = weights(tree.measure, mode)
    out = arith.zeros(tree.count, mode)
    for ids in tree.atom_cube:
        out = out + arith.group_sum(ids, w, tree.count, mode)
    return out


@dataclass
class MartingaleExpansion:
    """Top average plus per-child constants: coef[c] = <f>_c - <f>_{parent(c)}.

    Delta_Q f = sum over children c of Q of coef[c] 1_c.
    """
    tree: CubeTree
    top: object
    coef: np.ndarray
    averages: np.ndarray
    mode: str

    def delta_vector(self, qid: int) -> np.ndarray:
        out = arith.zeros(self.tree.measure.size, self.mode)
        for c in self.tree.children[qid]:
            out[self.tree.atoms(c)] = self.coef[c]
        return out

    def delta_matrix(self, ids) -> np.ndarray:
        """Atom x len(ids) matrix of difference functions."""
        out = arith.zeros((self.tree.measure.size, len(ids)), self.mode)
        for k, qid in enumerate(ids):
            for c in self.tree.children[qid]:
                out[self.tree.atoms(c), k] = self.coef[c]
        return out

    def child_values(self, qid: int) -> dict:
        return {c: self.coef[c] for c in self.tree.children[qid]}


def expand(tree: CubeTree, f, mode: str = arith.FLOAT) -> MartingaleExpansion:
    avg = cube_averages(tree, f, mode)
    coef = arith.zeros(tree.count, mode)
    par = tree.parent
    nz = par >= 0
    coef[nz] = avg[nz] - avg[par[nz]]
    return MartingaleExpansion(tree, avg[0], coef, avg, mode)


def chain_sum(tree: CubeTree, per_cube: np.ndarray, mode: str) -> np.ndarray:
    """For each atom, sum of per_cube[c] over the non-top cubes c containing it."""
    out = arith.zeros(tree.measure.size, mode)
    for ids in tree.atom_cube[1:]:
        out = out + per_cube[ids]
    return out


def reconstruct(exp: MartingaleExpansion) -> np.ndarray:
    return exp.top + chain_sum(exp.tree, exp.coef, exp.mode)


def transform(exp: MartingaleExpansion, eps) -> np.ndarray:
    """sum_Q eps_Q Delta_Q f; eps indexed by cube id (array) or a dict id -> value."""
    tree = exp.tree
    e = np.zeros(tree.count) if exp.mode == arith.FLOAT else arith.zeros(tree.count, exp.mode)
    if isinstance(eps, dict):
        for k, v in eps.items():
            e[k] = v
    else:
        e[:] = eps
    if any(abs(float(v)) > 1 for v in e):
        raise ValueError("transform coefficients must lie in [-1, 1]")
    par = tree.parent
    per = arith.zeros(tree.count, exp.mode)
    nz = par >= 0
    per[nz] = e[par[nz]] * exp.coef[nz]
    return chain_sum(tree, per, exp.mode)


def lp_ratio(m: Measure, f, g, p: float) -> float:
    den = lp_norm(m, f, p)
    return lp_norm(m, g, p) / den if den > 0 else (0.0 if lp_norm(m, g, p) == 0 else math.inf)


def square_function(tree: CubeTree, f) -> np.ndarray:
    exp = expand(tree, f)
    sq = chain_sum(tree, exp.coef ** 2, arith.FLOAT)
    return np.sqrt(sq)


def parseval_residual(tree: CubeTree, f) -> float:
    m = tree.measure
    s = square_function(tree, f)
    top = cube_averages(tree, f)[0]
    lhs = float(np.dot(m.weights, s ** 2)) + top ** 2 * m.total_mass
    rhs = float(np.dot(m.weights, np.asarray(f, dtype=float) ** 2))
    return abs(lhs - rhs) / max(rhs, 1e-300)


def conditional_expectation(tree: CubeTree, f, level: int) -> np.ndarray:
    """E_k f restricted to the support; levels below the tree's finest level act as identity."""
    if level < tree.finest:
        return np.asarray(f, dtype=float).copy()
    if level > tree.top_level:
        raise ValueError("level above the top cube")
    avg = cube_averages(tree, f)
    return avg[tree.atom_cube[tree.level_index(level)]]


def stein_ratio(tree: CubeTree, fs, p: float) -> tuple[float, float, float]:
    """(lhs, rhs, lhs/rhs) with fs[i] attached to tree.levels[i]."""
    if len(fs) != len(tree.levels):
        raise ValueError("one function per tree level required")
    m = tree.measure
    lhs2 = np.zeros(m.size)
    rhs2 = np.zeros(m.size)
    for level, fk in zip(tree.levels, fs):
        e = conditional_expectation(tree, fk, level)
        lhs2 += e ** 2
        rhs2 += np.asarray(fk, dtype=float) ** 2
    lhs = lp_norm(m, np.sqrt(lhs2), p)
    rhs = lp_norm(m, np.sqrt(rhs2), p)
    return lhs, rhs, (lhs / rhs if rhs > 0 else 0.0)


def orthogonality_defect(exp: MartingaleExpansion):
    """sum over distinct cube pairs of |<Delta_Q f, Delta_Q' f>_mu| (exact in rational mode)."""
    ids = [c for c in range(exp.tree.count) if exp.tree.children[c]]
    d = exp.delta_matrix(ids)
    w = weights(exp.tree.measure, exp.mode)
    gram = d.T.dot(d * w[:, None])
    total = 0 * gram[0, 0] if gram.size else 0
    for i in range(len(ids)):
        for k in range(len(ids)):
            if i != k:
                total += abs(gram[i, k])
    return total
