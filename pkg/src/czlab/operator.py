"""Kernels on atomic measures, testing constants, BMO norms, operator norms and
the off-diagonal checks."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np

from . import arith
from .cubes import CubeTree
from .dyadic import ilog2_ceil
from .goodness import GoodnessContext, theta
from .grid import Cube, build_grid, cube_gap_units
from .measure import DominatingFunction, Measure


@dataclass(frozen=True)
class Kernel:
    name: str
    evaluate: Callable[[np.ndarray, np.ndarray], np.ndarray]  # (m,n),(k,n) -> (m,k), off-diagonal
    eta: float
    lam: DominatingFunction | None = None
    antisymmetric: bool = False
    params: dict = field(default_factory=dict)

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        return self.evaluate(x, y)


def _sup_dist(x, y):
    return np.abs(x[:, None, :] - y[None, :, :]).max(axis=2)


def zero_kernel(eta: float = 1.0, lam=None) -> Kernel:
    return Kernel("zero", lambda x, y: np.zeros((x.shape[0], y.shape[0])), eta, lam, True)


def constant_kernel(c: float = 1.0, eta: float = 1.0, lam=None) -> Kernel:
    return Kernel("constant", lambda x, y: np.full((x.shape[0], y.shape[0]), float(c)), eta, lam, False, {"c": c})


def sign_power_kernel(s: float, eta: float = 1.0, lam=None) -> Kernel:
    """sign(x1 - y1) / |x - y|^s (sup norm); antisymmetric."""
    def ev(x, y):
        d = _sup_dist(x, y)
        sg = np.sign(x[:, None, 0] - y[None, :, 0])
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(d > 0, sg / d ** s, 0.0)
        return out
    return Kernel("sign-power", ev, eta, lam, True, {"s": s})


def riesz_2d_kernel(s: float, eta: float = 1.0, lam=None) -> Kernel:
    """(x1 - y1) / |x - y|^(s+1) (sup norm); antisymmetric."""
    def ev(x, y):
        d = _sup_dist(x, y)
        diff = x[:, None, 0] - y[None, :, 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(d > 0, diff / d ** (s + 1), 0.0)
        return out
    return Kernel("riesz-2d", ev, eta, lam, True, {"s": s})


def lambda_kernel(lam: DominatingFunction, eta: float = 1.0) -> Kernel:
    """K(x,y) = 1/lambda(x, |x-y|), the equality case of the size bound."""
    def ev(x, y):
        d = _sup_dist(x, y)
        with np.errstate(divide="ignore"):
            return np.where(d > 0, 1.0 / np.where(d > 0, lam(d), 1.0), 0.0)
    return Kernel("lambda", ev, eta, lam, False)


@dataclass
class OperatorMatrix:
    A: np.ndarray
    measure: Measure
    kernel: Kernel | None = None

    @property
    def size(self) -> int:
        return self.A.shape[0]

    def transpose(self) -> "OperatorMatrix":
        return OperatorMatrix(self.A.T, self.measure, self.kernel)

    def exact(self) -> np.ndarray:
        """The matrix with entries as exact rationals (floats converted without rounding)."""
        return arith.mat(self.A, arith.RATIONAL)


def kernel_matrix(m: Measure, kernel: Kernel) -> OperatorMatrix:
    x = m.positions()
    a = kernel(x, x)
    np.fill_diagonal(a, 0.0)
    if not np.all(np.isfinite(a)):
        raise ValueError("kernel is not finite at some off-diagonal pair")
    a.setflags(write=False)
    return OperatorMatrix(a, m, kernel)


def apply(T: OperatorMatrix, f) -> np.ndarray:
    f = np.asarray(f)
    if f.shape != (T.size,):
        raise ValueError("dimension mismatch")
    if f.dtype == object:
        return T.exact().dot(arith.vec(T.measure.weights, arith.RATIONAL) * f)
    return T.A @ (T.measure.weights * f)


def adjoint_apply(T: OperatorMatrix, g) -> np.ndarray:
    return apply(T.transpose(), g)


# kernel verification --------------------------------------------------------

@dataclass
class KernelReport:
    c_size: float
    c_smooth: float
    triples: int
    exhaustive: bool
    worst_size_pair: tuple | None = None
    worst_smooth_triple: tuple | None = None

    def to_dict(self) -> dict:
        return {"c_size": self.c_size, "c_smooth": self.c_smooth, "triples": self.triples,
                "exhaustive": self.exhaustive}


def verify_kernel(kernel: Kernel, m: Measure, budget: int = 200_000, seed: int = 0,
                  eta: float | None = None) -> KernelReport:
    lam = kernel.lam
    if lam is None:
        raise ValueError("kernel needs a dominating function")
    eta = kernel.eta if eta is None else eta
    x = m.positions()
    K = kernel(x, x)
    d = _sup_dist(x, x)
    off = d > 0
    if not np.all(np.isfinite(K[off])):
        raise ValueError("kernel is not finite at some off-diagonal pair")
    lam_d = np.where(off, lam(np.where(off, d, 1.0)), 1.0)
    size = np.where(off, np.abs(K) * lam_d, 0.0)
    i, k = np.unravel_index(int(np.argmax(size)), size.shape)
    c_size = float(size[i, k])
    n = m.size
    exhaustive = n ** 3 <= budget
    rng = np.random.default_rng(seed)
    if exhaustive:
        trip = np.array(np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")).reshape(3, -1)
    else:
        trip = rng.integers(0, n, size=(3, budget))
    xi, xpi, yi = trip
    c_smooth, worst = 0.0, None
    for start in range(0, xi.size, 1 << 18):
        a, b, c = xi[start:start + (1 << 18)], xpi[start:start + (1 << 18)], yi[start:start + (1 << 18)]
        dxy = d[a, c]
        dxx = d[a, b]
        ok = (dxy > 0) & (dxy >= 2 * dxx) & (dxx > 0)
        if not ok.any():
            continue
        a, b, c, dxy, dxx = a[ok], b[ok], c[ok], dxy[ok], dxx[ok]
        bound_scale = (dxy / dxx) ** eta * lam(dxy)
        # first variable and second variable conditions share the geometry
        v1 = np.abs(K[a, c] - K[b, c]) * bound_scale
        v2 = np.abs(K[c, a] - K[c, b]) * bound_scale
        v = np.maximum(v1, v2)
        j = int(np.argmax(v))
        if v[j] > c_smooth:
            c_smooth, worst = float(v[j]), (int(a[j]), int(b[j]), int(c[j]))
    return KernelReport(c_size, c_smooth, int(xi.size), exhaustive, (int(i), int(k)), worst)


# testing constants and BMO ---------------------------------------------------

@dataclass
class CubeFamily:
    """Distinct atom sets of a cube family with one representative box each."""
    descriptor: dict
    boxes: list            # (lo_units tuple, side_units) half-open boxes
    sets: list             # atom index arrays

    def __len__(self):
        return len(self.sets)


def _box_atoms(m: Measure, lo, side) -> np.ndarray:
    lo = np.array(lo, dtype=np.int64)
    inside = np.all((m.coords >= lo) & (m.coords < lo + side), axis=1)
    return np.nonzero(inside)[0]


def testing_family(m: Measure, grid_samples: int = 8, seed: int = 0, atom_centered: bool = True) -> CubeFamily:
    seen = {}
    for s in range(grid_samples):
        g = build_grid(m.coords, m.exp, 1, seed * 1000 + s)
        tree = CubeTree(m, g)
        for c in range(tree.count):
            atoms = tree.atoms(c)
            key = atoms.tobytes()
            if key not in seen:
                seen[key] = ((tuple(int(v) for v in tree.anchor[c]), 1 << (int(tree.level[c]) + m.exp)), atoms)
    radii = []
    if atom_centered and m.size > 1:
        lo_k = ilog2_ceil(m.min_gap()) - 1
        hi_k = ilog2_ceil(m.diameter()) + 2
        radii = list(range(lo_k, hi_k + 1))
        for k in radii:
            side = 1 << (k + m.exp)
            for a in range(m.size):
                lo = tuple(int(v) - side // 2 for v in m.coords[a])
                atoms = _box_atoms(m, lo, side)
                key = atoms.tobytes()
                if key not in seen:
                    seen[key] = ((lo, side), atoms)
    desc = {"grid_samples": grid_samples, "seed": seed, "atom_centered_levels": [radii[0], radii[-1]] if radii else None,
            "distinct_sets": len(seen)}
    boxes = [v[0] for v in seen.values()]
    sets = [v[1] for v in seen.values()]
    return CubeFamily(desc, boxes, sets)


@dataclass
class TestingReport:
    t_loc: float
    wbp: float
    bmo_t1: float
    bmo_tstar1: float
    family: dict
    argmax: int
    p1: float
    p2: float

    def to_dict(self) -> dict:
        return {"T_loc": self.t_loc, "wbp": self.wbp, "bmo_T1": self.bmo_t1, "bmo_Tstar1": self.bmo_tstar1,
                "family": self.family, "argmax": self.argmax, "p1": self.p1, "p2": self.p2}


def _indicator(m: Measure, fam: CubeFamily) -> np.ndarray:
    ind = np.zeros((m.size, len(fam)))
    for k, atoms in enumerate(fam.sets):
        ind[atoms, k] = 1.0
    return ind


def testing_brackets(T: OperatorMatrix, fam: CubeFamily, p1: float, p2: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per family member: (mu(Q)^-1 int_Q |T1_Q|^p1)^(1/p1), the dual bracket, and |int_Q T1_Q|/mu(Q)."""
    m = T.measure
    w = m.weights
    ind = _indicator(m, fam)
    mass = w @ ind
    t1 = T.A @ (w[:, None] * ind)
    ts1 = T.A.T @ (w[:, None] * ind)
    with np.errstate(divide="ignore", invalid="ignore"):
        b1 = ((w[:, None] * ind * np.abs(t1) ** p1).sum(axis=0) / mass) ** (1 / p1)
        b2 = ((w[:, None] * ind * np.abs(ts1) ** p2).sum(axis=0) / mass) ** (1 / p2)
        wbp = np.abs((w[:, None] * ind * t1).sum(axis=0)) / mass
    pos = mass > 0
    return np.where(pos, b1, 0.0), np.where(pos, b2, 0.0), np.where(pos, wbp, 0.0)


def bmo_norm(m: Measure, b, sigma: float, p: float, fam: CubeFamily) -> float:
    if sigma < 1:
        raise ValueError("dilation must be at least 1")
    b = np.asarray(b, dtype=float)
    w = m.weights
    best = 0.0
    for (lo, side), atoms in zip(fam.boxes, fam.sets):
        if len(atoms) == 0:
            continue
        wq = w[atoms]
        mean = np.dot(wq, b[atoms]) / wq.sum()
        big = _dilated_mass(m, lo, side, sigma)
        val = (np.dot(wq, np.abs(b[atoms] - mean) ** p) / big) ** (1 / p)
        best = max(best, float(val))
    return best


def _dilated_mass(m: Measure, lo, side, sigma: float) -> float:
    """mu of the closed sigma-dilate of the box (same centre)."""
    c2 = np.array([2 * a + side for a in lo], dtype=float)
    half = sigma * side
    inside = np.all(np.abs(2 * m.coords - c2) <= half, axis=1)
    return float(m.weights[inside].sum())


def testing_constant(T: OperatorMatrix, p1: float, p2: float | None = None, fam: CubeFamily | None = None,
                     grid_samples: int = 8, seed: int = 0) -> TestingReport:
    p2 = p1 / (p1 - 1) if p2 is None else p2
    m = T.measure
    fam = testing_family(m, grid_samples, seed) if fam is None else fam
    if len(fam) == 0:
        raise ValueError("empty cube family")
    b1, b2, wbp = testing_brackets(T, fam, p1, p2)
    both = np.maximum(b1, b2)
    k = int(np.argmax(both))
    ones = np.ones(m.size)
    t1 = apply(T, ones)
    ts1 = adjoint_apply(T, ones)
    return TestingReport(float(both[k]), float(wbp.max()), bmo_norm(m, t1, 3.0, p1, fam),
                         bmo_norm(m, ts1, 3.0, p2, fam), fam.descriptor, k, p1, p2)


# operator norms --------------------------------------------------------------

@dataclass
class NormEstimate:
    p: float
    lower: float
    upper: float | None
    method: str
    iterations: int
    converged: bool
    witness: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {"p": self.p, "lower": self.lower, "upper": self.upper, "method": self.method,
                "iterations": self.iterations, "converged": self.converged}


def _weighted(T: OperatorMatrix) -> np.ndarray:
    s = np.sqrt(T.measure.weights)
    return s[:, None] * T.A * s[None, :]


def norm2(T: OperatorMatrix, tol: float = 1e-10, budget: int = 200_000, seed: int = 0) -> NormEstimate:
    B = _weighted(T)
    if not np.any(B):
        return NormEstimate(2.0, 0.0, 0.0, "power-iteration", 0, True)
    rng = np.random.default_rng(seed)
    v = rng.normal(size=B.shape[1])
    v /= np.linalg.norm(v)
    BtB = B.T @ B
    est = 0.0
    it = 0
    converged = False
    for it in range(1, budget + 1):
        u = BtB @ v
        nu = np.linalg.norm(u)
        if nu == 0:
            break
        v_new = u / nu
        new = math.sqrt(float(v_new @ BtB @ v_new))
        if abs(new - est) <= tol * max(new, 1e-300) and np.linalg.norm(v_new - v) < 1e-6:
            est = new
            v = v_new
            converged = True
            break
        est, v = new, v_new
    s = np.sqrt(T.measure.weights)
    return NormEstimate(2.0, est, est, "power-iteration", it, converged, v / s)


def _lp(w, v, p):
    return float(np.sum(w * np.abs(v) ** p)) ** (1 / p)


def norm_lower(T: OperatorMatrix, p: float, restarts: int = 8, steps: int = 300, seed: int = 0,
               start: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Best ||Tf||_p / ||f||_p found by a nonlinear power method (projected ascent on the unit sphere)."""
    m = T.measure
    w = m.weights
    q = p / (p - 1)
    rng = np.random.default_rng(seed)
    best, best_f = 0.0, None
    starts = [start] if start is not None else []
    starts += [rng.normal(size=m.size) for _ in range(restarts)]
    for f in starts:
        f = np.asarray(f, dtype=float)
        if not np.any(f):
            continue
        f = f / _lp(w, f, p)
        for _ in range(steps):
            g = apply(T, f)
            ng = _lp(w, g, p)
            if ng == 0:
                break
            if ng > best:
                best, best_f = ng, f.copy()
            # gradient of ||Tf||_p^p w.r.t. f in L^p duality, then map back
            h = adjoint_apply(T, np.sign(g) * np.abs(g) ** (p - 1))
            nh = _lp(w, h, q)
            if nh == 0:
                break
            f_new = np.sign(h) * np.abs(h) ** (q - 1)
            f_new /= _lp(w, f_new, p)
            if np.allclose(f_new, f, atol=1e-14):
                break
            f = f_new
        ng = _lp(w, apply(T, f), p)
        if ng > best:
            best, best_f = ng, f.copy()
    return best, best_f


def norm_upper_interp(T: OperatorMatrix, p: float, n2: float) -> float:
    w = T.measure.weights
    absA = np.abs(T.A)
    n1 = float((w[:, None] * absA).sum(axis=0).max())   # L^1(mu) operator norm
    ninf = float((absA * w[None, :]).sum(axis=1).max())  # L^inf operator norm
    if p == 2:
        return n2
    if p < 2:
        th = 2 * (1 - 1 / p)
        return n1 ** (1 - th) * n2 ** th
    th = 1 - 2 / p
    return n2 ** (1 - th) * ninf ** th


def operator_norm(T: OperatorMatrix, p: float, budget: int = 200_000, seed: int = 0) -> NormEstimate:
    if not p > 1 or math.isinf(p):
        raise ValueError("p must lie in (1, inf)")
    est2 = norm2(T, budget=budget, seed=seed)
    if p == 2:
        return est2
    if est2.lower == 0:
        return NormEstimate(p, 0.0, 0.0, "zero", 0, True)
    lower, f = norm_lower(T, p, seed=seed, start=est2.witness)
    upper = norm_upper_interp(T, p, est2.upper * (1 + 1e-9))
    return NormEstimate(p, lower, max(upper, lower), "riesz-thorin(1|inf,2)", est2.iterations, est2.converged, f)


# off-diagonal decay ----------------------------------------------------------

@dataclass
class OffDiagonalReport:
    triples: int
    violations: int
    worst_ratio: float
    constant: float
    kind: str | None
    records: list

    def to_dict(self) -> dict:
        return {"triples": self.triples, "violations": self.violations, "worst_ratio": self.worst_ratio,
                "constant": self.constant, "kind": self.kind}


def dist_to_complement_units(q: Cube, p: Cube, r: Cube) -> int | None:
    """dist(Q, R \\ P) for Q subset P subset R (same grid); None when R \\ P is empty."""
    best = None
    sq, sp, sr = q.side_units, p.side_units, r.side_units
    for a_q, a_p, a_r in zip(q.anchor, p.anchor, r.anchor):
        if a_r < a_p:
            v = a_q - a_p
            best = v if best is None else min(best, v)
        if a_p + sp < a_r + sr:
            v = (a_p + sp) - (a_q + sq)
            best = v if best is None else min(best, v)
    return best


def off_diagonal_check(T: OperatorMatrix, tree: CubeTree, c_smooth: float, c_lambda: float, eta: float,
                       triples: int = 200, seed: int = 0, max_tries: int = 200_000) -> OffDiagonalReport:
    """Sample nested Q subset P subset R cubes of a tree with lQ <= dist(Q, R\\P)."""
    rng = np.random.default_rng(seed)
    m = T.measure
    x_all = m.positions()
    w = m.weights
    const = c_smooth * c_lambda / (1 - 2.0 ** -eta)
    kern = T.kernel
    recs = []
    worst, violations, kind = 0.0, 0, None
    tries = 0
    while len(recs) < triples and tries < max_tries:
        tries += 1
        qid = int(rng.integers(tree.count))
        depth = int(tree.top_level - tree.level[qid])
        if depth < 1:
            continue
        tp = int(rng.integers(0, depth + 1))
        pid = tree.ancestor(qid, tp)
        up = int(tree.top_level - tree.level[pid])
        tr = int(rng.integers(0, up + 1))
        rid = tree.ancestor(pid, tr)
        Q, P, R = tree.cube(qid), tree.cube(pid), tree.cube(rid)
        du = dist_to_complement_units(Q, P, R)
        if du is not None and du < Q.side_units:
            continue
        rp = np.setdiff1d(tree.atoms(rid), tree.atoms(pid))
        xq = np.array([[float(v) / (1 << m.exp) for v in Q.midpoint_units2()]]) / 2
        atoms_q = tree.atoms(qid)
        if len(rp) == 0:
            lhs = np.zeros(len(atoms_q))
            ratio = 0.0
        else:
            kx = T.A[np.ix_(atoms_q, rp)] @ w[rp]
            kc = (kern(xq, x_all[rp]) @ w[rp])[0]
            lhs = np.abs(kx - kc)
            bound = const * (Q.side_units / du) ** eta
            ratio = float(lhs.max() / bound) if bound > 0 else (math.inf if lhs.max() > 0 else 0.0)
        recs.append((qid, pid, rid, ratio))
        if ratio > worst:
            worst = ratio
        if ratio > 1 + 1e-9:
            violations += 1
    if violations:
        kind = "kernel_misconfiguration"
    return OffDiagonalReport(len(recs), violations, worst, const, kind, recs)


@dataclass
class ContainmentReport:
    pairs: int
    failures: int
    kineq: dict            # m -> max empirical constant
    above_top: int         # pairs whose ancestor lies above the top cube (contained by nesting)
    skipped_out_of_range: int
    records: list

    def to_dict(self) -> dict:
        return {"pairs": self.pairs, "failures": self.failures,
                "kineq": {str(k): v for k, v in self.kineq.items()},
                "above_top": self.above_top,
                "skipped_out_of_range": self.skipped_out_of_range}


def scale_index(q: Cube, p: Cube) -> int:
    """u with 2^u < D(Q,P)/lP <= 2^(u+1)."""
    D = q.side_units + cube_gap_units(q, p) + p.side_units
    ratio = Fraction(D, p.side_units)
    return ilog2_ceil(ratio) - 1


def containment_check(T: OperatorMatrix, tree1: CubeTree, tree2: CubeTree, good2: np.ndarray,
                      ctx: GoodnessContext, pairs: int = 500, seed: int = 0, m_values=None,
                      max_tries: int = 500_000) -> ContainmentReport:
    """Sample (P in D1, good Q in D2) with lQ = 2^-m lP and test Q subset pi^(u+theta(u+m)) P."""
    rng = np.random.default_rng(seed)
    g1 = tree1.grid
    m = T.measure
    x_all = m.positions()
    good_ids = np.nonzero(good2)[0]
    recs, failures, above, skipped = [], 0, 0, 0
    kineq = {}
    tries = 0
    while len(recs) < pairs and tries < max_tries and len(good_ids):
        tries += 1
        qid = int(rng.choice(good_ids))
        Q = tree2.cube(qid)
        pid = int(rng.integers(tree1.count))
        P = tree1.cube(pid)
        mm = P.level - Q.level
        if mm < 0 or (m_values is not None and mm not in m_values):
            continue
        u = scale_index(Q, P)
        t = u + theta(u + mm, ctx.r, ctx.gamma)
        if P.level + t > g1.k_max:
            # the ancestor contains the top cube; decidable only when Q sits inside it
            if not g1.top.contains_cube(Q):
                skipped += 1
                continue
            above += 1
            S = g1.top
        else:
            S = g1.parent(P, t)
        ok = S.contains_cube(Q)
        if not ok:
            failures += 1
        const = None
        if cube_gap_units(Q, P) >= Q.side_units:
            xq = np.array([[float(v) / (1 << m.exp) for v in Q.midpoint_units2()]]) / 2
            aq, ap = tree2.atoms(qid), tree1.atoms(pid)
            diff = np.abs(T.A[np.ix_(aq, ap)] - T.kernel(xq, x_all[ap]))
            mu_s = float(m.weights[S.contains_units(m.coords)].sum())
            const = float(diff.max()) * mu_s * 2.0 ** (ctx.eta * (u + mm) / 4)
            kineq[mm] = max(kineq.get(mm, 0.0), const)
        recs.append((qid, pid, u, mm, t, ok, const))
    return ContainmentReport(len(recs), failures, kineq, above, skipped, recs)
