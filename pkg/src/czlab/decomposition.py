"""The bilinear form <T f1, f2> taken apart: perturbation, expansion over good
pairs, the inside/separated/nearby partition, the paraproduct/stopping/error
split, epsilon coefficients, the paraproduct regrouping, nearby surgery and
decay tables.  Every split is checked as an identity (exactly in rational mode).
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction

import gmpy2
import numpy as np

from . import arith
from .corona import WHOLE, StoppingTree, build_stopping_tree, layer_families
from .cubes import CubeTree
from .dyadic import ilog2_ceil
from .goodness import GoodnessContext, classify_tree, derive_gamma
from .grid import Cube, DyadicGrid, build_grid, cube_gap_units
from .martingale import MartingaleExpansion, chain_sum, expand, lp_norm
from .measure import Measure
from .operator import Kernel, OperatorMatrix, kernel_matrix

INSIDE, SEPARATED, NEARBY = 1, 2, 3
CLASS_NAMES = {INSIDE: "inside", SEPARATED: "separated", NEARBY: "nearby"}
FLOAT_TOL = 1e-9
EXACT_MAX_ATOMS = 2048


class DecompositionError(RuntimeError):
    """An identity that must hold by construction did not."""


class PartitionError(DecompositionError):
    pass


# exact pairings --------------------------------------------------------------

def _float_parts(x) -> tuple[np.ndarray, np.ndarray]:
    m, e = np.frexp(np.asarray(x, dtype=float))
    return np.ldexp(m, 53).astype(np.int64), (e - 53).astype(np.int64)


class Pairing:
    """<T 1_A, 1_B> = sum over x in B, y in A of w_x A[x, y] w_y, and related brackets.

    In rational mode the weighted matrix is held as integers times 2^low and
    split into signed int64 limbs, so pairings of 0/1 masks are exact integer
    matrix products.  ``raw`` results are those integers (value = raw * 2^low).
    """

    def __init__(self, T: OperatorMatrix, mode: str = arith.FLOAT, transposed: bool = False):
        self.T = T
        self.mode = arith.check_mode(mode)
        self.transposed = transposed
        self.size = T.size
        w = np.asarray(T.measure.weights, dtype=float)
        A = T.A.T if transposed else T.A
        if mode == arith.FLOAT:
            self.M = w[:, None] * A * w[None, :]
            self.M_abs = np.abs(self.M)
            self.low = 0
            return
        if self.size > EXACT_MAX_ATOMS:
            raise ValueError(f"rational mode supports at most {EXACT_MAX_ATOMS} atoms")
        ma, ea = _float_parts(A)
        mw, ew = _float_parts(w)
        e = ea + ew[:, None] + ew[None, :]
        nz = ma != 0
        self.low = int(e[nz].min()) if nz.any() else 0
        shift = np.where(nz, e - self.low, 0).astype(object)
        mwo = mw.astype(object)
        ints = (ma.astype(object) * mwo[:, None] * mwo[None, :]) << shift
        self.ints = ints
        flat = ints.reshape(-1).tolist()
        nbits = max((abs(v).bit_length() for v in flat), default=1) or 1
        n = max(self.size, 2)
        self.limb_bits = 62 - 2 * (n - 1).bit_length() - 1
        mask = (1 << self.limb_bits) - 1
        limbs = []
        for k in range(-(-nbits // self.limb_bits)):
            sh = k * self.limb_bits
            vals = [((abs(v) >> sh) & mask) * (1 if v >= 0 else -1) for v in flat]
            limbs.append(np.array(vals, dtype=np.int64).reshape(ints.shape))
        self.limbs = limbs

    @property
    def exact(self) -> bool:
        return self.mode == arith.RATIONAL

    def scale(self, raw):
        """raw integer (or mpq combination of raw integers) -> value."""
        if not self.exact:
            return raw
        if self.low >= 0:
            return gmpy2.mpq(raw) * (1 << self.low)
        return gmpy2.mpq(raw) / (1 << -self.low)

    def scale_array(self, raw: np.ndarray) -> np.ndarray:
        if not self.exact:
            return raw
        f = np.frompyfunc(self.scale, 1, 1)
        return f(raw) if raw.size else raw.astype(object)

    def _combine(self, parts: list[np.ndarray]) -> np.ndarray:
        total = parts[0].astype(object)
        for k, p in enumerate(parts[1:], 1):
            total = total + (p.astype(object) << (k * self.limb_bits))
        return total

    def pairs(self, src: np.ndarray, tst: np.ndarray, raw: bool = False) -> np.ndarray:
        """Matrix of <T 1_src[:, a], 1_tst[:, b]>, shape (b, a); masks are N x k 0/1 arrays."""
        if not self.exact:
            return tst.astype(float).T @ (self.M @ src.astype(float))
        s = src.astype(np.int64)
        t = tst.astype(np.int64).T
        out = self._combine([t @ (L @ s) for L in self.limbs]) if self.limbs else np.zeros((t.shape[0], s.shape[1]), dtype=object)
        return out if raw else self.scale_array(out)

    def block(self, rows: np.ndarray, cols: np.ndarray, tst: np.ndarray, src: np.ndarray, raw: bool = False) -> np.ndarray:
        """Like ``pairs`` on the sub-block rows x cols; tst is |rows| x b, src is |cols| x a."""
        ix = np.ix_(rows, cols)
        if not self.exact:
            return tst.astype(float).T @ (self.M[ix] @ src.astype(float))
        s = src.astype(np.int64)
        t = tst.astype(np.int64).T
        out = self._combine([t @ (L[ix] @ s) for L in self.limbs]) if self.limbs else np.zeros((t.shape[0], s.shape[1]), dtype=object)
        return out if raw else self.scale_array(out)

    def tw(self, src: np.ndarray) -> np.ndarray:
        """x -> w_x T1_src(x) for one 0/1 mask (raw integers in rational mode)."""
        if not self.exact:
            return self.M @ src.astype(float)
        s = src.astype(np.int64)
        return self._combine([L @ s for L in self.limbs]) if self.limbs else np.zeros(self.size, dtype=object)

    def form(self, g, h):
        """<T g, h>."""
        if not self.exact:
            return float(np.asarray(h, dtype=float) @ (self.M @ np.asarray(g, dtype=float)))
        g = arith.vec(g, arith.RATIONAL)
        h = arith.vec(h, arith.RATIONAL)
        return self.scale(h.dot(self.ints.dot(g)))

    def point(self, x: np.ndarray, src_atoms: np.ndarray):
        """T1_src evaluated at an arbitrary point x (not an atom of src)."""
        m = self.T.measure
        y = m.positions()[src_atoms]
        if len(src_atoms) == 0:
            return arith.q(0) if self.exact else 0.0
        xs = np.atleast_2d(np.asarray(x, dtype=float))
        k = self.T.kernel(y, xs)[:, 0] if self.transposed else self.T.kernel(xs, y)[0]
        w = m.weights[src_atoms]
        if not self.exact:
            return float(k @ w)
        return np.sum(arith.vec(k, arith.RATIONAL) * arith.vec(w, arith.RATIONAL))

    def transpose(self) -> "Pairing":
        other = object.__new__(Pairing)
        other.__dict__.update(self.__dict__)
        other.transposed = not self.transposed
        if self.exact:
            other.ints = self.ints.T
            other.limbs = [L.T for L in self.limbs]
        else:
            other.M = self.M.T
            other.M_abs = self.M_abs.T
        return other


def _close(a, b, scale, mode: str) -> tuple[bool, float]:
    """Exact equality in rational mode, relative tolerance otherwise."""
    res = arith.rel_residual(a, b, scale)
    if mode == arith.RATIONAL:
        return a == b, res
    return res <= FLOAT_TOL, res


# perturbation ----------------------------------------------------------------

def _parent_flag(tree: CubeTree, flag: np.ndarray) -> np.ndarray:
    par = tree.parent
    out = np.zeros(tree.count, dtype=bool)
    nz = par >= 0
    out[nz] = flag[par[nz]]
    return out


def _masked(coef: np.ndarray, keep: np.ndarray, mode: str) -> np.ndarray:
    out = coef.copy()
    out[~keep] = arith.q(0) if mode == arith.RATIONAL else 0.0
    return out


def perturb(f_tilde, tree: CubeTree, good: np.ndarray, mode: str = arith.FLOAT) -> np.ndarray:
    """<f~>_top 1_top plus the differences of the good cubes."""
    exp = expand(tree, f_tilde, mode)
    return exp.top + chain_sum(tree, _masked(exp.coef, _parent_flag(tree, good), mode), mode)


def bad_projection(f_tilde, tree: CubeTree, good: np.ndarray, mode: str = arith.FLOAT) -> np.ndarray:
    exp = expand(tree, f_tilde, mode)
    return chain_sum(tree, _masked(exp.coef, _parent_flag(tree, ~good), mode), mode)


@dataclass
class Side:
    """One function on one grid: tree, goodness, perturbed function, expansion, stopping tree."""
    tree: CubeTree
    good: np.ndarray
    f_tilde: np.ndarray
    f: np.ndarray
    expansion: MartingaleExpansion
    stopping: StoppingTree
    mode: str

    @property
    def active(self) -> np.ndarray:
        """Good cubes with children (the only ones with a non-trivial difference)."""
        return np.array([c for c in range(self.tree.count) if self.good[c] and self.tree.children[c]], dtype=np.int64)

    @property
    def good_ids(self) -> np.ndarray:
        return np.nonzero(self.good)[0]

    def delta_on(self, q: int) -> tuple[np.ndarray, np.ndarray]:
        """(atoms of Q, values of Delta_Q f there)."""
        atoms, vals = [], []
        for c in self.tree.children[q]:
            a = self.tree.atoms(c)
            atoms.append(a)
            vals.extend([self.expansion.coef[c]] * len(a))
        idx = np.concatenate(atoms) if atoms else np.zeros(0, dtype=np.int64)
        v = np.array(vals, dtype=object) if self.mode == arith.RATIONAL else np.array(vals, dtype=float)
        return idx, v


def make_side(tree: CubeTree, good: np.ndarray, f_tilde, mode: str = arith.FLOAT) -> Side:
    ft = np.asarray(f_tilde, dtype=float)
    f = perturb(ft, tree, good, mode)
    return Side(tree, good, ft, f, expand(tree, f, mode), build_stopping_tree(f, tree, good, mode), mode)


@dataclass
class Instance:
    measure: Measure
    T: OperatorMatrix
    ctx: GoodnessContext
    grid3: DyadicGrid
    side1: Side
    side2: Side
    p1: float
    p2: float
    mode: str
    seed: int

    def describe(self) -> dict:
        return {"atoms": self.measure.size, "r": self.ctx.r, "gamma": self.ctx.gamma, "eta": self.ctx.eta,
                "d": self.ctx.d, "p1": self.p1, "p2": self.p2, "mode": self.mode, "seed": self.seed,
                "cubes": [self.side1.tree.count, self.side2.tree.count],
                "good": [int(self.side1.good.sum()), int(self.side2.good.sum())],
                "stopping": [len(self.side1.stopping.cubes), len(self.side2.stopping.cubes)]}


def random_function(m: Measure, p: float, rng: np.random.Generator) -> np.ndarray:
    f = rng.standard_normal(m.size)
    return f / lp_norm(m, f, p)


def build_instance(m: Measure, kernel: Kernel, r: int, seed: int, p1: float = 2.0, p2: float | None = None,
                   mode: str = arith.FLOAT, d: float | None = None, gamma: float | None = None,
                   f1=None, f2=None) -> Instance:
    if not p1 > 1:
        raise ValueError("p1 must exceed 1")
    p2 = p1 / (p1 - 1) if p2 is None else p2
    eta = kernel.eta
    if d is None:
        d = kernel.lam.d if kernel.lam is not None else 1.0
    gamma = derive_gamma(d, eta) if gamma is None else gamma
    g1 = build_grid(m.coords, m.exp, 1, seed)
    g2 = build_grid(m.coords, m.exp, 2, seed)
    g3 = build_grid(m.coords, m.exp, 3, seed)
    ctx = GoodnessContext(r, gamma, eta, d).with_grids(g1, g2)
    t1, t2 = CubeTree(m, g1), CubeTree(m, g2)
    good1 = classify_tree(t1, ctx)[0]
    good2 = classify_tree(t2, ctx)[0]
    rng = np.random.default_rng([int(seed), 101])
    f1 = random_function(m, p1, rng) if f1 is None else np.asarray(f1, dtype=float)
    f2 = random_function(m, p2, rng) if f2 is None else np.asarray(f2, dtype=float)
    T = kernel_matrix(m, kernel)
    return Instance(m, T, ctx, g3, make_side(t1, good1, f1, mode), make_side(t2, good2, f2, mode),
                    p1, p2, mode, seed)


# pair classes ----------------------------------------------------------------

def classify_pair(P: Cube, Q: Cube, r: int) -> int:
    """Class of a good pair with lQ <= lP; raises PartitionError unless exactly one matches."""
    if Q.level > P.level:
        raise ValueError("classify_pair expects lQ <= lP")
    gap = cube_gap_units(Q, P)
    hits = []
    if P.contains_cube(Q) and Q.level + r < P.level:
        hits.append(INSIDE)
    if gap >= Q.side_units:
        hits.append(SEPARATED)
    if P.level - r <= Q.level and gap < Q.side_units:
        hits.append(NEARBY)
    if len(hits) != 1:
        raise PartitionError(f"pair {P} / {Q} matches {len(hits)} classes")
    return hits[0]


def _side_units(tree: CubeTree, ids: np.ndarray) -> np.ndarray:
    return np.left_shift(np.int64(1), tree.level[ids] + tree.exp)


def class_matrix(big: CubeTree, big_ids: np.ndarray, small: CubeTree, small_ids: np.ndarray,
                 r: int, strict: bool) -> tuple[np.ndarray, np.ndarray]:
    """(classes, matches): classes is 0 off the triangle or on a violation."""
    ab = big.anchor[big_ids][:, None, :]
    as_ = small.anchor[small_ids][None, :, :]
    sb = _side_units(big, big_ids)[:, None, None]
    ss = _side_units(small, small_ids)[None, :, None]
    gap = np.maximum(0, np.maximum(as_ - (ab + sb), ab - (as_ + ss))).max(axis=2)
    contained = np.all((ab <= as_) & (as_ + ss <= ab + sb), axis=2)
    lb = big.level[big_ids][:, None]
    ls = small.level[small_ids][None, :]
    tri = ls < lb if strict else ls <= lb
    ssq = ss[:, :, 0]
    inside = contained & (ls + r < lb)
    separated = gap >= ssq
    nearby = (lb - r <= ls) & (gap < ssq)
    matches = (inside.astype(np.int8) + separated + nearby) * tri
    classes = np.where(matches == 1, INSIDE * inside + SEPARATED * separated + NEARBY * nearby, 0) * tri
    return classes.astype(np.int8), matches.astype(np.int8)


def partition_check(big: Side, small: Side, r: int, strict: bool) -> dict:
    """Exhaustive: every good pair of the triangle lands in exactly one class."""
    bi, si = big.good_ids, small.good_ids
    if len(bi) == 0 or len(si) == 0:
        return {"pairs": 0, "violations": 0, "inside": 0, "separated": 0, "nearby": 0}
    classes, matches = class_matrix(big.tree, bi, small.tree, si, r, strict)
    lb = big.tree.level[bi][:, None]
    ls = small.tree.level[si][None, :]
    tri = ls < lb if strict else ls <= lb
    return {"pairs": int(tri.sum()), "violations": int((tri & (matches != 1)).sum()),
            "inside": int((classes == INSIDE).sum()), "separated": int((classes == SEPARATED).sum()),
            "nearby": int((classes == NEARBY).sum())}


# the expansion -----------------------------------------------------------------

def _children_layout(side: Side, ids: np.ndarray) -> tuple[list[int], list[int]]:
    ch, starts = [], []
    for c in ids:
        starts.append(len(ch))
        ch.extend(side.tree.children[c])
    return ch, starts


def _indicator_columns(tree: CubeTree, ids) -> np.ndarray:
    out = np.zeros((tree.measure.size, len(ids)), dtype=np.int8)
    for k, c in enumerate(ids):
        out[tree.atoms(c), k] = 1
    return out


@dataclass
class Triangle:
    """Pairs (P big, Q small) with lQ <= lP (lQ < lP when strict), T oriented so that
    values[p, q] = <T Delta_P f_big, Delta_Q f_small>."""
    name: str
    big: Side
    small: Side
    strict: bool
    r: int
    big_ids: np.ndarray
    small_ids: np.ndarray
    values: np.ndarray
    classes: np.ndarray
    totals: dict
    inside: "InsideSplit | None" = None
    epsilon: "EpsilonReport | None" = None
    regroup: "RegroupReport | None" = None
    layers: dict = field(default_factory=dict)
    surgery: "SurgeryReport | None" = None

    def pairs_of(self, cls: int) -> list[tuple[int, int]]:
        bi, si = np.nonzero(self.classes == cls)
        return [(int(self.big_ids[a]), int(self.small_ids[b])) for a, b in zip(bi, si)]

    def value(self, p: int, q: int):
        a = int(np.searchsorted(self.big_ids, p))
        b = int(np.searchsorted(self.small_ids, q))
        return self.values[a, b]


def _zero(mode: str):
    return arith.q(0) if mode == arith.RATIONAL else 0.0


def _sum(values, mode: str):
    total = _zero(mode)
    for v in values:
        total = total + v
    return total


def triangle(engine: Pairing, big: Side, small: Side, r: int, strict: bool, name: str) -> Triangle:
    mode = engine.mode
    bi, si = big.active, small.active
    totals = {k: _zero(mode) for k in ("inside", "separated", "nearby", "all")}
    if len(bi) == 0 or len(si) == 0:
        values = np.zeros((len(bi), len(si)), dtype=object if mode == arith.RATIONAL else float)
        return Triangle(name, big, small, strict, r, bi, si, values, np.zeros((len(bi), len(si)), dtype=np.int8), totals)
    bch, bst = _children_layout(big, bi)
    sch, sst = _children_layout(small, si)
    C = engine.pairs(_indicator_columns(big.tree, bch), _indicator_columns(small.tree, sch), raw=True)
    cb = big.expansion.coef[bch]
    cs = small.expansion.coef[sch]
    W = C * cs[:, None] * cb[None, :]
    V = np.add.reduceat(np.add.reduceat(W, sst, axis=0), bst, axis=1).T
    values = engine.scale_array(V)
    classes, matches = class_matrix(big.tree, bi, small.tree, si, r, strict)
    lb = big.tree.level[bi][:, None]
    ls = small.tree.level[si][None, :]
    tri = ls < lb if strict else ls <= lb
    if np.any(tri & (matches != 1)):
        raise PartitionError(f"{name}: {int((tri & (matches != 1)).sum())} pairs without a unique class")
    for cls, key in CLASS_NAMES.items():
        totals[key] = _sum(values[classes == cls].tolist(), mode)
    totals["all"] = _sum(values[tri].tolist(), mode)
    return Triangle(name, big, small, strict, r, bi, si, values, classes, totals)


@dataclass
class FormLedger:
    mode: str
    direct: object
    e1: object
    e2: object
    main: Triangle
    mirror: Triangle
    partition: dict

    @property
    def reconstructed(self):
        return self.e1 + self.e2 + self.main.totals["all"] + self.mirror.totals["all"]

    @property
    def scale(self) -> float:
        s = abs(float(self.e1)) + abs(float(self.e2))
        for tri in (self.main, self.mirror):
            if tri.values.size:
                s += float(np.sum(np.abs(tri.values.astype(float)) * (tri.classes > 0)))
        return max(s, abs(float(self.direct)))

    @property
    def residual(self) -> float:
        return arith.rel_residual(self.direct, self.reconstructed, self.scale)

    @property
    def exact_match(self) -> bool:
        return self.direct == self.reconstructed

    def to_dict(self) -> dict:
        out = {"mode": self.mode, "direct": float(self.direct), "e1": float(self.e1), "e2": float(self.e2),
               "reconstructed": float(self.reconstructed), "residual": self.residual,
               "partition": self.partition}
        if self.mode == arith.RATIONAL:
            out["exact_match"] = bool(self.exact_match)
        for tri in (self.main, self.mirror):
            d = {k: float(v) for k, v in tri.totals.items()}
            d["pairs"] = {CLASS_NAMES[c]: int((tri.classes == c).sum()) for c in CLASS_NAMES}
            if tri.inside is not None:
                d["inside_split"] = tri.inside.to_dict()
            if tri.epsilon is not None:
                d["epsilon"] = tri.epsilon.to_dict()
            if tri.regroup is not None:
                d["regroup"] = tri.regroup.to_dict()
            if tri.layers:
                d["layers"] = tri.layers
            if tri.surgery is not None:
                d["surgery"] = tri.surgery.to_dict()
            out[tri.name] = d
        return out

    def pairs_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["triangle", "P", "Q", "class", "value"])
        for tri in (self.main, self.mirror):
            bi, si = np.nonzero(tri.classes)
            for a, b in zip(bi, si):
                w.writerow([tri.name, int(tri.big_ids[a]), int(tri.small_ids[b]),
                            CLASS_NAMES[int(tri.classes[a, b])], repr(float(tri.values[a, b]))])
        return buf.getvalue()


def expand_form(inst: Instance, engine: Pairing | None = None) -> FormLedger:
    """<T f1, f2> directly and as E-terms plus both triangles of classified pair terms."""
    mode = inst.mode
    engine = engine or Pairing(inst.T, mode)
    s1, s2 = inst.side1, inst.side2
    n = inst.measure.size
    direct = engine.form(s1.f, s2.f)
    ones = np.ones((n, 1), dtype=np.int8)
    e1 = s1.expansion.top * engine.form(np.ones(n), s2.f)
    e2 = _zero(mode)
    act = s1.active
    if len(act):
        ch, _ = _children_layout(s1, act)
        colsum = engine.pairs(_indicator_columns(s1.tree, ch), ones, raw=True)[0]
        e2 = s2.expansion.top * engine.scale(np.sum(colsum * s1.expansion.coef[ch]))
    main = triangle(engine, s1, s2, inst.ctx.r, False, "main")
    mirror = triangle(engine.transpose(), s2, s1, inst.ctx.r, True, "mirror")
    part = {"main": partition_check(s1, s2, inst.ctx.r, False),
            "mirror": partition_check(s2, s1, inst.ctx.r, True)}
    return FormLedger(mode, direct, e1, e2, main, mirror, part)


# inside split -------------------------------------------------------------------

def _cube_of_level(tree: CubeTree, atom: int, level: int) -> int:
    return int(tree.atom_cube[tree.level_index(level)][atom])


def stop_parent_of_cube(st: StoppingTree, cube: Cube, atom: int) -> int:
    """Minimal stopping cube of ``st`` containing a cube of any grid (atom: one atom inside it)."""
    tree = st.tree
    if cube.level > tree.top_level:
        return WHOLE
    c = _cube_of_level(tree, atom, max(cube.level, tree.finest))
    while not tree.cube(c).contains_cube(cube):
        c = int(tree.parent[c])
        if c < 0:
            return WHOLE
    return int(st.stop_parent[c])


@dataclass
class InsideRecord:
    P: int
    Q: int
    PQ: int
    S: int
    t: int
    a: object
    para: object
    stop: object
    error: object


@dataclass
class InsideSplit:
    direct: object
    para: object
    stop: object
    error: object
    residual: float
    exact: bool
    pointwise_failures: int
    records: list

    @property
    def ok(self) -> bool:
        return self.exact and self.pointwise_failures == 0

    def to_dict(self) -> dict:
        return {"direct": float(self.direct), "para": float(self.para), "stop": float(self.stop),
                "error": float(self.error), "residual": self.residual, "identity_holds": bool(self.exact),
                "pointwise_failures": self.pointwise_failures, "pairs": len(self.records)}


class _TwCache:
    def __init__(self, engine: Pairing):
        self.engine = engine
        self.store = {}

    def get(self, key, atoms_fn):
        v = self.store.get(key)
        if v is None:
            mask = np.zeros(self.engine.size, dtype=np.int8)
            mask[atoms_fn()] = 1
            v = self.engine.tw(mask)
            self.store[key] = v
        return v


def _bracket(engine: Pairing, tw: np.ndarray, idx: np.ndarray, vals: np.ndarray):
    """<T1_X, g> for g supported on idx, given tw = w * T1_X."""
    if engine.exact:
        return engine.scale(np.dot(vals, tw[idx]))
    return float(np.dot(vals, tw[idx]))


def inside_split(engine: Pairing, tri: Triangle) -> InsideSplit:
    big, small = tri.big, tri.small
    tb, ts = big.tree, small.tree
    mode = engine.mode
    cache = _TwCache(engine)
    coef = big.expansion.coef
    records = []
    failures = 0
    deltas = {}
    for p, q in tri.pairs_of(INSIDE):
        atom = int(ts.atoms(q)[0])
        pq = _cube_of_level(tb, atom, int(tb.level[p]) - 1)
        qcube = ts.cube(q)
        if tb.parent[pq] != p or not tb.cube(pq).contains_cube(qcube):
            raise DecompositionError(f"inside pair ({p},{q}): Q is not inside a child of P")
        s = int(big.stopping.stop_parent[pq])
        if s == WHOLE:
            raise DecompositionError(f"inside pair ({p},{q}): child outside every stopping cube")
        if q not in deltas:
            deltas[q] = small.delta_on(q)
        idx, vals = deltas[q]
        a = coef[pq]
        para = a * _bracket(engine, cache.get(("c", s), lambda: tb.atoms(s)), idx, vals)
        stop = a * _bracket(engine, cache.get(("d", s, pq),
                                               lambda: np.setdiff1d(tb.atoms(s), tb.atoms(pq))), idx, vals)
        err = _zero(mode)
        for c in tb.children[p]:
            if c != pq:
                err = err + coef[c] * _bracket(engine, cache.get(("c", c), lambda: tb.atoms(c)), idx, vals)
        t = int(tb.level[p] - ts.level[q])
        records.append(InsideRecord(p, q, pq, s, t, a, para, stop, err))
        if not _pointwise_ok(big, p, pq, s, a, mode):
            failures += 1
    direct = tri.totals["inside"]
    para = _sum((r.para for r in records), mode)
    stop = _sum((r.stop for r in records), mode)
    error = _sum((r.error for r in records), mode)
    scale = sum(abs(float(r.para)) + abs(float(r.stop)) + abs(float(r.error)) for r in records)
    ok, res = _close(direct, para - stop + error, scale, mode)
    return InsideSplit(direct, para, stop, error, res, ok, failures, records)


def _pointwise_ok(side: Side, p: int, pq: int, s: int, a, mode: str) -> bool:
    """Delta_P f = a 1_S - a 1_{S minus P_Q} + sum over the other children, atomwise on S u P."""
    tree = side.tree
    coef = side.expansion.coef
    u = np.union1d(tree.atoms(s), tree.atoms(p))
    lhs = arith.zeros(len(u), mode)
    rhs = arith.zeros(len(u), mode)
    for c in tree.children[p]:
        pos = np.searchsorted(u, tree.atoms(c))
        lhs[pos] = coef[c]
        if c != pq:
            rhs[pos] = rhs[pos] + coef[c]
    rhs[np.searchsorted(u, tree.atoms(s))] += a
    rhs[np.searchsorted(u, np.setdiff1d(tree.atoms(s), tree.atoms(pq)))] -= a
    if mode == arith.RATIONAL:
        return all(x == y for x, y in zip(lhs, rhs))
    scale = max(float(np.max(np.abs(lhs))), abs(float(a)), 1e-300)
    return float(np.max(np.abs(lhs - rhs))) <= 1e-12 * scale


# epsilon coefficients -----------------------------------------------------------

@dataclass
class EpsilonReport:
    values: dict          # (Q, S) -> epsilon
    products: dict        # (Q, S) -> epsilon * sigma(S) from the defining sum
    telescoped: dict      # (Q, S) -> <f>_{P-_Q} - <f>_{P+}
    max_abs: float
    mismatches: int
    max_residual: float
    zero_sigma: list

    @property
    def bound_holds(self) -> bool:
        return self.max_abs <= 8.0

    def to_dict(self) -> dict:
        return {"count": len(self.values), "max_abs": self.max_abs, "bound": 8.0,
                "bound_holds": self.bound_holds, "telescope_mismatches": self.mismatches,
                "max_residual": self.max_residual, "zero_sigma": len(self.zero_sigma)}


def epsilon_coefficients(tri: Triangle, split: InsideSplit) -> EpsilonReport:
    big = tri.big
    mode = big.mode
    avg = big.expansion.averages
    sums, chain = {}, {}
    for rec in split.records:
        key = (rec.Q, rec.S)
        sums[key] = sums.get(key, _zero(mode)) + rec.a
        chain.setdefault(key, []).append(rec)
    values, tel, zero = {}, {}, []
    mismatches, worst, max_res = 0, 0.0, 0.0
    for key, es in sums.items():
        recs = chain[key]
        lo = min(recs, key=lambda r: big.tree.level[r.P])
        hi = max(recs, key=lambda r: big.tree.level[r.P])
        tel[key] = avg[lo.PQ] - avg[hi.P]
        sigma = big.stopping.sigma[key[1]]
        if sigma == 0:
            values[key] = _zero(mode)
            zero.append(key)
        else:
            values[key] = es / sigma
        worst = max(worst, abs(float(values[key])))
        ok, res = _close(es, tel[key], abs(float(sigma)), mode)
        max_res = max(max_res, res)
        if not ok:
            mismatches += 1
    return EpsilonReport(values, sums, tel, worst, mismatches, max_res, zero)


# paraproduct regrouping ---------------------------------------------------------

@dataclass
class RegroupReport:
    direct: object
    regrouped: object
    not_subset: object
    subset: object
    residual: float
    exact: bool
    groups_not_subset: int
    groups_subset: int
    tau_nonzero: int
    tau_invariance_failures: int

    def to_dict(self) -> dict:
        return {"direct": float(self.direct), "regrouped": float(self.regrouped),
                "not_subset": float(self.not_subset), "subset": float(self.subset),
                "residual": self.residual, "identity_holds": bool(self.exact),
                "groups_not_subset": self.groups_not_subset, "groups_subset": self.groups_subset,
                "tau_nonzero": self.tau_nonzero, "tau_invariance_failures": self.tau_invariance_failures}


def _midpoint(cube: Cube) -> np.ndarray:
    return np.array([v / 2.0 for v in cube.midpoint_units2()]) / float(1 << cube.exp)


def paraproduct_regroup(engine: Pairing, tri: Triangle, split: InsideSplit, eps: EpsilonReport) -> RegroupReport:
    big, small = tri.big, tri.small
    tb, ts = big.tree, small.tree
    st1, st2 = big.stopping, small.stopping
    mode = engine.mode
    r = tri.r
    cache = _TwCache(engine)
    taus = {}
    w_exact = arith.vec(tb.measure.weights, mode)

    def tau(x_cube: Cube, s: int, remove_atoms: np.ndarray, key):
        if key not in taus:
            taus[key] = engine.point(_midpoint(x_cube), np.setdiff1d(tb.atoms(s), remove_atoms))
        return taus[key]

    pi1_small = {}

    def pi1(c: int) -> int:
        if c not in pi1_small:
            pi1_small[c] = stop_parent_of_cube(st1, ts.cube(c), int(ts.atoms(c)[0]))
        return pi1_small[c]

    groups_ns, groups_s = set(), set()
    not_subset, subset = _zero(mode), _zero(mode)
    tau_nonzero, invariance_failures = 0, 0
    para_direct = split.para
    for (q, s), es in eps.products.items():
        idx, vals = small.delta_on(q)
        rr = int(st2.stop_parent[q])
        if rr == WHOLE:
            raise DecompositionError(f"good cube {q} outside every stopping cube")
        s_cube, r_cube = tb.cube(s), ts.cube(rr)
        tw_s = cache.get(("c", s), lambda: tb.atoms(s))
        if not s_cube.contains_cube(r_cube):
            sp = pi1(q)
            t = st1.depth[sp] - st1.depth[s]
            ind = np.isin(idx, ts.atoms(rr)) & np.isin(idx, tb.atoms(sp))
            if t <= 2 * r + 1:
                tv = _zero(mode)
            else:
                anc = st1.lift(sp, t // 2)
                tv = tau(tb.cube(sp), s, tb.atoms(anc), ("t", s, sp, t // 2))
            groups_ns.add((s, t, rr, sp))
        else:
            rp = rr
            sp = pi1(rp)
            top = rp
            while st2.parent[top] != WHOLE and pi1(st2.parent[top]) == sp:
                top = st2.parent[top]
            k = st2.depth[rp] - st2.depth[top]
            t = st1.depth[sp] - st1.depth[s]
            ind = np.isin(idx, ts.atoms(rp))
            if t <= 2 * r + 1 and k <= 2 * r + 1:
                tv = _zero(mode)
            elif k >= 2 * (r + 1):
                anc = st2.lift(rp, k // 2)
                tv = tau(ts.cube(rp), s, ts.atoms(anc), ("k", s, rp, k // 2))
            else:
                anc = st1.lift(sp, t // 2)
                tv = tau(tb.cube(sp), s, tb.atoms(anc), ("t", s, sp, t // 2))
            groups_s.add((s, t, k, sp, top, rp))
        if tv != 0:
            tau_nonzero += 1
        g = vals * ind
        with_tau = _bracket(engine, tw_s, idx, g) - tv * _weighted_sum(g, w_exact[idx], mode)
        without = _bracket(engine, tw_s, idx, g)
        ok, _ = _close(with_tau, without, abs(float(without)) + abs(float(tv)) * float(np.sum(np.abs(tb.measure.weights[idx]))), mode)
        if not ok:
            invariance_failures += 1
        if s_cube.contains_cube(r_cube):
            subset = subset + es * with_tau
        else:
            not_subset = not_subset + es * with_tau
    total = not_subset + subset
    scale = sum(abs(float(r.para)) for r in split.records)
    ok, res = _close(para_direct, total, scale, mode)
    return RegroupReport(para_direct, total, not_subset, subset, res, ok, len(groups_ns), len(groups_s),
                         tau_nonzero, invariance_failures)


def _weighted_sum(g: np.ndarray, w: np.ndarray, mode: str):
    if mode == arith.RATIONAL:
        return np.sum(g * w) if len(g) else arith.q(0)
    return float(np.dot(g, w))


def layer_report(tri: Triangle, split: InsideSplit) -> dict:
    fams = layer_families(tri.big.stopping, tri.small.stopping,
                          [(rec.P, rec.Q, rec.PQ) for rec in split.records], tri.r)
    viol = sum(len(f.violations) for f in fams.values())
    depth = max((max(f.members.values()) for f in fams.values() if f.members), default=0)
    return {"families": len(fams), "max_layer": int(depth), "violations": viol}


# nearby surgery ------------------------------------------------------------------

def layer_exponent(upsilon) -> int:
    """j with upsilon/64 <= 2^j < upsilon/32."""
    u = Fraction(upsilon)
    if not 0 < u < 1:
        raise ValueError("upsilon must lie in (0, 1)")
    return ilog2_ceil(u / 64)


def collar_mask(coords: np.ndarray, cube: Cube, width) -> np.ndarray:
    """Atoms in delta^width_R = closed (1+width)R minus closed (1-width)R."""
    w = Fraction(width)
    s = cube.side_units
    c2 = np.array(cube.midpoint_units2(), dtype=np.int64)
    d2 = np.abs(2 * coords - c2).max(axis=1)
    outer = ((w.denominator + w.numerator) * s) // w.denominator
    inner = ((w.denominator - w.numerator) * s) // w.denominator
    return (d2 <= outer) & (d2 > inner)


def layer_collar_mask(coords: np.ndarray, grid: DyadicGrid, level: int, width) -> np.ndarray:
    """Atoms in the union over the layer cubes G of delta^width_G (own cube and its neighbours)."""
    w = Fraction(width)
    if not 0 < w < 1:
        raise ValueError("collar width must lie in (0, 1)")
    s = 1 << (level + grid.exp)
    a0 = grid.anchors_units(coords, level)
    outer = ((w.denominator + w.numerator) * s) // w.denominator
    inner = ((w.denominator - w.numerator) * s) // w.denominator
    hit = np.zeros(len(coords), dtype=bool)
    n = coords.shape[1]
    for e in np.ndindex(*(3,) * n):
        a = a0 + (np.array(e, dtype=np.int64) - 1) * s
        d2 = np.abs(2 * coords - (2 * a + s)).max(axis=1)
        hit |= (d2 <= outer) & (d2 > inner)
    return hit


SET_NAMES_P = ("P_j", "P_sep", "P_bd", "Delta_P", "DeltaL_P", "bd_P", "Delta1_P", "Delta2_P")
SET_NAMES_Q = ("Q_i", "Q_sep", "Q_bd", "Delta_Q", "DeltaL_Q", "bd_Q", "Delta1_Q", "Delta2_Q")


@dataclass
class SurgerySets:
    P: int
    Q: int
    i: int               # child of Q (small grid)
    j: int               # child of P (big grid)
    upsilon: Fraction
    eps: Fraction
    layer_level: int
    sets: dict           # name -> atom index array
    values: dict         # name -> value
    checks: dict         # name -> bool

    @property
    def ok(self) -> bool:
        return all(self.checks.values())


def surgery(engine: Pairing, big: CubeTree, small: CubeTree, P: int, Q: int, i: int, j: int,
            upsilon, eps, grid3: DyadicGrid) -> SurgerySets:
    m = big.measure
    coords = m.coords
    ups, ep = Fraction(upsilon), Fraction(eps)
    qi, pj = small.cube(i), big.cube(j)
    X = small.atoms(i)
    Y = big.atoms(j)
    inter = np.intersect1d(X, Y)
    q_bd = X[collar_mask(coords[X], pj, ups)]
    q_sep = np.setdiff1d(np.setdiff1d(X, q_bd), inter)
    d_q = np.setdiff1d(inter, q_bd)
    p_bd = Y[collar_mask(coords[Y], qi, ups)]
    p_sep = np.setdiff1d(np.setdiff1d(Y, p_bd), inter)
    d_p = np.setdiff1d(inter, p_bd)
    level = min(qi.level, pj.level) + layer_exponent(ups)
    if level < grid3.k_min:
        raise DecompositionError("layer level below the third grid's range")
    gid_all = grid3.anchors_units(coords, level)
    keys = [tuple(v) for v in gid_all.tolist()]
    members = {}
    for a, k in enumerate(keys):
        members.setdefault(k, []).append(a)
    meets_q = {keys[a] for a in d_q}
    meets_p = {keys[a] for a in d_p}
    both = meets_q & meets_p
    union = np.array(sorted(a for k in both for a in members[k]), dtype=np.int64)
    checks = {}
    checks["adaptation_inside"] = bool(np.all(np.isin(union, inter)))
    dl_q = np.union1d(d_q, union)
    dl_p = np.union1d(d_p, union)
    bd_q = np.setdiff1d(union, d_q)
    bd_p = np.setdiff1d(union, d_p)
    checks["disjoint_union"] = (len(np.intersect1d(d_q, bd_q)) == 0 and len(np.intersect1d(d_p, bd_p)) == 0
                                and bool(np.all(np.isin(bd_q, np.intersect1d(q_bd, Y))))
                                and bool(np.all(np.isin(bd_p, np.intersect1d(p_bd, X)))))
    tri_ok = True
    for k in {keys[a] for a in np.union1d(X, Y)}:
        g = np.array(members[k])
        a_q = np.isin(g, dl_q).sum()
        a_p = np.isin(g, dl_p).sum()
        if not ((a_q == len(g) and a_p == len(g)) or a_q == 0 or a_p == 0):
            tri_ok = False
            break
    checks["trichotomy"] = tri_ok
    lmask = np.zeros(m.size, dtype=bool)
    cand = np.union1d(dl_q, dl_p)
    lmask[cand] = layer_collar_mask(coords[cand], grid3, level, ep)
    d1_q, d2_q = dl_q[lmask[dl_q]], dl_q[~lmask[dl_q]]
    d1_p, d2_p = dl_p[lmask[dl_p]], dl_p[~lmask[dl_p]]
    psets = (Y, p_sep, p_bd, d_p, dl_p, bd_p, d1_p, d2_p)
    qsets = (X, q_sep, q_bd, d_q, dl_q, bd_q, d1_q, d2_q)
    src = np.zeros((len(Y), len(psets)), dtype=np.int8)
    for k, s in enumerate(psets):
        src[np.searchsorted(Y, s), k] = 1
    tst = np.zeros((len(X), len(qsets)), dtype=np.int8)
    for k, s in enumerate(qsets):
        tst[np.searchsorted(X, s), k] = 1
    G = engine.block(X, Y, tst, src, raw=True)
    iq = {n: k for k, n in enumerate(SET_NAMES_Q)}
    ip = {n: k for k, n in enumerate(SET_NAMES_P)}

    def g(qn, pn):
        return G[iq[qn], ip[pn]]

    raw = {
        "full": g("Q_i", "P_j"),
        "M1": g("Q_i", "P_sep"), "M2": g("Q_i", "P_bd"), "M3": g("Delta_Q", "Delta_P"),
        "M4": g("Q_bd", "Delta_P"), "M5": g("Q_sep", "Delta_P"),
        "alpha1": g("DeltaL_Q", "DeltaL_P"), "alpha2": -g("DeltaL_Q", "bd_P"), "alpha3": -g("bd_Q", "Delta_P"),
        "beta1": g("DeltaL_Q", "Delta1_P"), "beta2": g("Delta1_Q", "Delta2_P"), "beta3": g("Delta2_Q", "Delta2_P"),
    }
    mode = engine.mode
    # float round-off is relative to the size of the entries, not of the (cancelling) sums
    mag = 0.0 if engine.exact else float(engine.M_abs[np.ix_(X, Y)].sum())

    def same(a, parts):
        if mode == arith.RATIONAL:
            return a == sum(parts)
        scale = sum(abs(float(x)) for x in parts) + abs(float(a)) + mag
        return abs(float(a) - float(sum(parts))) <= FLOAT_TOL * max(scale, 1e-300)

    checks["five_way_split"] = bool(same(raw["full"], [raw[k] for k in ("M1", "M2", "M3", "M4", "M5")]))
    checks["alpha_split"] = bool(same(raw["M3"], [raw[k] for k in ("alpha1", "alpha2", "alpha3")]))
    checks["beta_split"] = bool(same(raw["alpha1"], [raw[k] for k in ("beta1", "beta2", "beta3")]))
    sets = dict(zip(SET_NAMES_P, psets))
    sets.update(zip(SET_NAMES_Q, qsets))
    sets["intersection"] = inter
    values = {k: engine.scale(v) for k, v in raw.items()}
    return SurgerySets(P, Q, i, j, ups, ep, level, sets, values, checks)


@dataclass
class SurgeryReport:
    upsilon: Fraction
    eps: Fraction
    layer_exponent: int
    pairs: int
    cells: int
    failures: dict
    child_expansion_failures: int
    child_expansion_max_residual: float

    @property
    def ok(self) -> bool:
        return not any(self.failures.values()) and self.child_expansion_failures == 0

    def to_dict(self) -> dict:
        return {"upsilon": str(self.upsilon), "eps": str(self.eps), "layer_exponent": self.layer_exponent,
                "pairs": self.pairs, "cells": self.cells, "failures": self.failures,
                "child_expansion_failures": self.child_expansion_failures, "child_expansion_max_residual": self.child_expansion_max_residual}


CHECK_NAMES = ("five_way_split", "alpha_split", "beta_split", "trichotomy", "disjoint_union", "adaptation_inside")


def nearby_surgery(engine: Pairing, tri: Triangle, grid3: DyadicGrid, upsilon=Fraction(1, 4),
                   eps=Fraction(1, 8), max_pairs: int | None = None) -> SurgeryReport:
    """Surgery on every nearby pair (or the first max_pairs), plus the child expansion
    <T Delta_P f, Delta_Q g> = sum_ij <Delta_P f>_Pj <T1_Pj, 1_Qi> <Delta_Q g>_Qi."""
    big, small = tri.big, tri.small
    mode = engine.mode
    failures = {k: 0 for k in CHECK_NAMES}
    pairs = tri.pairs_of(NEARBY)
    if max_pairs is not None:
        pairs = pairs[:max_pairs]
    cells, child_expansion_fail, child_expansion_res = 0, 0, 0.0
    for p, q in pairs:
        total = _zero(mode)
        scale = 0.0
        for i in small.tree.children[q]:
            for j in big.tree.children[p]:
                ss = surgery(engine, big.tree, small.tree, p, q, i, j, upsilon, eps, grid3)
                cells += 1
                for k, v in ss.checks.items():
                    if not v:
                        failures[k] += 1
                term = big.expansion.coef[j] * ss.values["full"] * small.expansion.coef[i]
                total = total + term
                scale += abs(float(term))
        ok, res = _close(tri.value(p, q), total, scale, mode)
        child_expansion_res = max(child_expansion_res, res)
        if not ok:
            child_expansion_fail += 1
    return SurgeryReport(Fraction(upsilon), Fraction(eps), layer_exponent(upsilon), len(pairs), cells,
                         failures, child_expansion_fail, child_expansion_res)


# decay diagnostics -----------------------------------------------------------------

def _fit(xs: list[float], ys: list[float], slope: float) -> dict:
    """Least squares on log2|y|: the constant for a fixed slope and a free-slope fit."""
    pts = [(x, math.log2(abs(y))) for x, y in zip(xs, ys) if y != 0 and math.isfinite(y)]
    out = {"points": len(pts), "envelope_exponent": slope, "constant": None, "fitted_exponent": None}
    if not pts:
        return out
    out["constant"] = 2.0 ** (sum(ly + slope * x for x, ly in pts) / len(pts))
    if len({x for x, _ in pts}) >= 2:
        xm = sum(x for x, _ in pts) / len(pts)
        ym = sum(ly for _, ly in pts) / len(pts)
        sxx = sum((x - xm) ** 2 for x, _ in pts)
        sxy = sum((x - xm) * (ly - ym) for x, ly in pts)
        out["fitted_exponent"] = -sxy / sxx
    return out


def decay_diagnostics(ledger: FormLedger, ctx: GoodnessContext) -> dict:
    """Per-depth stopping/error sums and per-(u, m) separated sums with their envelopes."""
    eta, gamma = ctx.eta, ctx.gamma
    out = {}
    for tri in (ledger.main, ledger.mirror):
        stop_t, err_t = {}, {}
        if tri.inside is not None:
            for rec in tri.inside.records:
                stop_t[rec.t] = stop_t.get(rec.t, 0.0) + float(rec.stop)
                err_t[rec.t] = err_t.get(rec.t, 0.0) + float(rec.error)
        sep = {}
        tb, ts = tri.big.tree, tri.small.tree
        for a, b in zip(*np.nonzero(tri.classes == SEPARATED)):
            p, q = int(tri.big_ids[a]), int(tri.small_ids[b])
            P, Q = tb.cube(p), ts.cube(q)
            D = Q.side_units + cube_gap_units(Q, P) + P.side_units
            u = (D - 1).bit_length() - (P.level + P.exp) - 1
            mm = P.level - Q.level
            sep[(u, mm)] = sep.get((u, mm), 0.0) + float(tri.values[a, b])
        ts_ = sorted(stop_t)
        rows_stop = [{"t": t, "value": stop_t[t], "abs": abs(stop_t[t]),
                      "envelope": 2.0 ** (-t * eta * (1 - gamma))} for t in ts_]
        rows_err = [{"t": t, "value": err_t[t], "abs": abs(err_t[t]), "envelope": 2.0 ** (-t * eta / 4)}
                    for t in sorted(err_t)]
        rows_sep = [{"u": u, "m": mm, "value": v, "abs": abs(v), "envelope": 2.0 ** (-eta * (u + mm) / 4)}
                    for (u, mm), v in sorted(sep.items())]
        out[tri.name] = {
            "stop": rows_stop, "error": rows_err, "separated": rows_sep,
            "fit_stop": _fit(ts_, [stop_t[t] for t in ts_], eta * (1 - gamma)),
            "fit_error": _fit(sorted(err_t), [err_t[t] for t in sorted(err_t)], eta / 4),
            "fit_separated": _fit([u + mm for (u, mm) in sorted(sep)], [sep[k] for k in sorted(sep)], eta / 4),
            "finite": all(math.isfinite(r["value"]) for r in rows_stop + rows_err + rows_sep),
        }
    return out


def decay_csv(table: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["triangle", "term", "t_or_u", "m", "value", "envelope"])
    for name, d in table.items():
        for row in d["stop"]:
            w.writerow([name, "stop", row["t"], "", repr(row["value"]), repr(row["envelope"])])
        for row in d["error"]:
            w.writerow([name, "error", row["t"], "", repr(row["value"]), repr(row["envelope"])])
        for row in d["separated"]:
            w.writerow([name, "separated", row["u"], row["m"], repr(row["value"]), repr(row["envelope"])])
    return buf.getvalue()


# everything at once ------------------------------------------------------------------

@dataclass
class DecompositionResult:
    instance: Instance
    ledger: FormLedger
    failures: list

    @property
    def ok(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {"instance": self.instance.describe(), "ledger": self.ledger.to_dict(), "failures": self.failures}


def decompose(inst: Instance, upsilon=Fraction(1, 4), eps=Fraction(1, 8), surgery_pairs: int | None = None,
              engine: Pairing | None = None) -> DecompositionResult:
    """Run the whole chain and list every identity or bound that failed."""
    engine = engine or Pairing(inst.T, inst.mode)
    ledger = expand_form(inst, engine)
    failures = []
    rational = inst.mode == arith.RATIONAL
    if rational and not ledger.exact_match:
        failures.append("reconstruction")
    elif not rational and ledger.residual > FLOAT_TOL:
        failures.append("reconstruction")
    for name, part in ledger.partition.items():
        if part["violations"]:
            failures.append(f"partition:{name}")
    for tri, eng in ((ledger.main, engine), (ledger.mirror, engine.transpose())):
        tri.inside = inside_split(eng, tri)
        if not tri.inside.ok:
            failures.append(f"inside_split:{tri.name}")
        tri.epsilon = epsilon_coefficients(tri, tri.inside)
        if tri.epsilon.mismatches:
            failures.append(f"epsilon_telescope:{tri.name}")
        if not tri.epsilon.bound_holds:
            failures.append(f"epsilon_bound:{tri.name}")
        tri.regroup = paraproduct_regroup(eng, tri, tri.inside, tri.epsilon)
        if not tri.regroup.exact or tri.regroup.tau_invariance_failures:
            failures.append(f"regroup:{tri.name}")
        tri.layers = layer_report(tri, tri.inside)
        if tri.layers["violations"]:
            failures.append(f"layers:{tri.name}")
        tri.surgery = nearby_surgery(eng, tri, inst.grid3, upsilon, eps, surgery_pairs)
        if not tri.surgery.ok:
            failures.append(f"surgery:{tri.name}")
    return DecompositionResult(inst, ledger, failures)
