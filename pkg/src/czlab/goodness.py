"""Goodness parameters, exact good/bad classification and badness statistics."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import mpmath
import numpy as np

from .grid import Cube, DyadicGrid


def gamma_constraints_hold(d, gamma, eta) -> bool:
    d, g, e = Fraction(d), Fraction(gamma), Fraction(eta)
    return 0 < g < 1 and d * g / (1 - g) <= e / 4 and g <= e / (2 * (d + e))


def derive_gamma(d: float, eta: float) -> float:
    if not d > 0:
        raise ValueError("d must be positive")
    if not 0 < eta <= 1:
        raise ValueError("eta must lie in (0, 1]")
    g = min(eta / (4 * d + eta), eta / (2 * (d + eta)))
    # float rounding may overshoot the exact constraint by an ulp
    while not gamma_constraints_hold(d, g, eta):
        g = math.nextafter(g, 0.0)
    return g


def theta(j: int, r: int, gamma) -> int:
    if j < 0:
        raise ValueError("j must be non-negative")
    g = Fraction(gamma)
    return math.ceil((g * j + r) / (1 - g))


@lru_cache(maxsize=4096)
def threshold_floor(level_q: int, level_p: int, gamma: Fraction, exp: int) -> int:
    """floor((lQ)^gamma (lP)^(1-gamma) * 2^exp), exact.

    dist <= threshold is equivalent to dist_units <= this value for integer dist_units.
    """
    e = level_p + exp - gamma * (level_p - level_q)
    if e.denominator == 1:
        v = int(e)
        return 1 << v if v >= 0 else 0
    # 2^e is irrational here, so the floor is well defined; tighten until the
    # enclosure does not straddle an integer
    prec = 80
    while True:
        with mpmath.workprec(prec):
            x = mpmath.power(2, mpmath.mpf(e.numerator) / e.denominator)
            # a few ulps cover the rounding of the division and the power
            slack = mpmath.ldexp(x, 8 - prec)
            lo, hi = int(mpmath.floor(x - slack)), int(mpmath.floor(x + slack))
        if lo == hi:
            return lo
        prec *= 2


def skeleton_distance(anchors: np.ndarray, side_q: int, offset: np.ndarray, side_p: int) -> np.ndarray:
    """min over P at one lattice level of dist(closure Q, boundary P), per cube, in units."""
    rel = np.mod(anchors - offset, side_p)
    d = np.minimum(rel, side_p - rel - side_q)
    return np.maximum(d, 0).min(axis=1)


@dataclass(frozen=True)
class GoodnessContext:
    r: int
    gamma: float
    eta: float
    d: float
    grids: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if self.r < 1:
            raise ValueError("r must be at least 1")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0,1)")

    @property
    def gamma_exact(self) -> Fraction:
        return Fraction(self.gamma)

    def constraints_hold(self) -> bool:
        return gamma_constraints_hold(self.d, self.gamma, self.eta)

    def theta(self, j: int) -> int:
        return theta(j, self.r, self.gamma)

    def with_grids(self, *grids) -> "GoodnessContext":
        return GoodnessContext(self.r, self.gamma, self.eta, self.d, tuple(grids))

    def scan_top(self, k: int) -> int:
        return self.grids[k - 1].k_max


def k_bad_mask(anchors: np.ndarray, level: int, exp: int, grid: DyadicGrid, r: int, gamma) -> np.ndarray:
    """Vectorised is_k_bad for cubes of one level against grid D_k (levels up to its top)."""
    g = Fraction(gamma)
    bad = np.zeros(anchors.shape[0], dtype=bool)
    side_q = 1 << (level + exp)
    for lp in range(level + r, grid.k_max + 1):
        off = np.array(grid.offset(lp), dtype=np.int64)
        dq = skeleton_distance(anchors, side_q, off, 1 << (lp + exp))
        bad |= dq <= threshold_floor(level, lp, g, exp)
    return bad


def is_vacuous(level: int, ctx: GoodnessContext) -> bool:
    return all(level + ctx.r > g.k_max for g in ctx.grids)


def is_k_bad(q: Cube, k: int, ctx: GoodnessContext) -> bool:
    grid = ctx.grids[k - 1]
    return bool(k_bad_mask(np.array([q.anchor], dtype=np.int64), q.level, q.exp, grid, ctx.r, ctx.gamma)[0])


def is_good(q: Cube, ctx: GoodnessContext) -> bool:
    return not (is_k_bad(q, 1, ctx) or is_k_bad(q, 2, ctx))


def classify_tree(tree, ctx: GoodnessContext) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(good, bad1, bad2) boolean arrays over the cube ids of a CubeTree."""
    bad1 = np.zeros(tree.count, dtype=bool)
    bad2 = np.zeros(tree.count, dtype=bool)
    for i, level in enumerate(tree.levels):
        ids = tree.level_ids[i]
        anchors = tree.anchor[ids]
        bad1[ids] = k_bad_mask(anchors, level, tree.exp, ctx.grids[0], ctx.r, ctx.gamma)
        bad2[ids] = k_bad_mask(anchors, level, tree.exp, ctx.grids[1], ctx.r, ctx.gamma)
    return ~(bad1 | bad2), bad1, bad2


def brute_force_is_bad(q: Cube, grid: DyadicGrid, r: int, gamma, window: int = 2) -> bool:
    """Reference: enumerate lattice cubes around Q level by level and compare with
    an mpmath threshold at high precision."""
    g = mpmath.mpf(Fraction(gamma).numerator) / Fraction(gamma).denominator
    for lp in range(q.level + r, grid.k_max + 1):
        home = grid.cube_at_units(q.anchor, lp)
        side = home.side_units
        thr = mpmath.power(2, q.level * g + lp * (1 - g))
        for shifts in np.ndindex(*(2 * window + 1,) * q.n):
            anchor = tuple(a + (s - window) * side for a, s in zip(home.anchor, shifts))
            p = Cube(grid.j, lp, anchor, grid.exp)
            du = _boundary_distance(q, p)
            if mpmath.mpf(du) / mpmath.power(2, grid.exp) <= thr:
                return True
    return False


def _boundary_distance(q: Cube, p: Cube) -> int:
    """dist(closure Q, boundary of P) by treating the boundary as 2n closed faces."""
    s, t = q.side_units, p.side_units
    best = None
    for axis in range(q.n):
        for face in (p.anchor[axis], p.anchor[axis] + t):
            # face: x_axis = face, other coords within [b, b+t]
            gap = max(0, face - (q.anchor[axis] + s), q.anchor[axis] - face)
            for other in range(q.n):
                if other == axis:
                    continue
                a, b = q.anchor[other], p.anchor[other]
                gap = max(gap, b - (a + s), a - (b + t))
            best = gap if best is None else min(best, gap)
    return best


# Monte-Carlo ---------------------------------------------------------------

@dataclass(frozen=True)
class GoodnessTemplate:
    """Parameters for badness sampling: Q-hat = [0, 2^level)^n shifted by grid j's bits."""
    r: int
    gamma: float
    n: int = 1
    below: int = 20  # shift bits sampled below Q-hat's level
    above: int = 12  # scan levels above Q-hat's level (k_max = level + above)


@dataclass
class BadnessStats:
    r: int
    level: int
    samples: int
    freq: float
    ci_halfwidth: float
    freq_pair: dict = field(default_factory=dict)
    k_range: tuple = ()

    def to_row(self) -> list:
        return [self.r, self.level, self.samples, f"{self.freq:.6f}", f"{self.ci_halfwidth:.6f}"]


def _ci3(p: float, n: int) -> float:
    return 3.0 * math.sqrt(p * (1 - p) / n)


def _offsets_from_bits(bits: np.ndarray) -> np.ndarray:
    """bits (samples, levels, n) -> offsets (samples, levels+1, n) in units 2^k_min."""
    weights = (np.int64(1) << np.arange(bits.shape[1], dtype=np.int64))[None, :, None]
    cum = np.cumsum(bits.astype(np.int64) * weights, axis=1)
    zero = np.zeros((bits.shape[0], 1, bits.shape[2]), dtype=np.int64)
    return np.concatenate([zero, cum], axis=1)


def sample_badness(level: int, template: GoodnessTemplate, samples: int, seed: int) -> dict:
    """Per-sample badness flags for every r' >= 1 reachable in the level range.

    Returns {r: (bad11, bad12)} boolean arrays; the same shift draws are used
    for every r, so the frequencies are comparable across r.
    """
    k_min = level - template.below
    k_max = level + template.above
    nlev = k_max - k_min + 1
    if nlev > 60:
        raise ValueError("level range too wide for int64 sampling")
    rng = np.random.default_rng([int(seed), int(level) + (1 << 16)])
    bits1 = rng.integers(0, 2, size=(samples, nlev, template.n), dtype=np.int8)
    bits2 = rng.integers(0, 2, size=(samples, nlev, template.n), dtype=np.int8)
    off1 = _offsets_from_bits(bits1)
    off2 = _offsets_from_bits(bits2)
    exp = -k_min
    q_anchor = off1[:, level - k_min, :]
    side_q = 1 << (level + exp)
    g = Fraction(template.gamma)
    per_level = {}
    for lp in range(level + 1, k_max + 1):
        side_p = 1 << (lp + exp)
        thr = threshold_floor(level, lp, g, exp)
        d1 = _skeleton_batch(q_anchor, side_q, off1[:, lp - k_min, :], side_p)
        d2 = _skeleton_batch(q_anchor, side_q, off2[:, lp - k_min, :], side_p)
        per_level[lp] = (d1 <= thr, d2 <= thr)
    out = {}
    for r in range(1, k_max - level + 2):
        b1 = np.zeros(samples, dtype=bool)
        b2 = np.zeros(samples, dtype=bool)
        for lp in range(level + r, k_max + 1):
            b1 |= per_level[lp][0]
            b2 |= per_level[lp][1]
        out[r] = (b1, b2)
    return out


def _skeleton_batch(anchor: np.ndarray, side_q: int, offset: np.ndarray, side_p: int) -> np.ndarray:
    rel = np.mod(anchor - offset, side_p)
    d = np.minimum(rel, side_p - rel - side_q)
    return np.maximum(d, 0).min(axis=1)


def estimate_bad_probability(level: int, template: GoodnessTemplate, samples: int, seed: int) -> BadnessStats:
    if samples < 100:
        raise ValueError("at least 100 samples required")
    flags = sample_badness(level, template, samples, seed)
    k_range = (level - template.below, level + template.above)
    if template.r not in flags:
        return BadnessStats(template.r, level, samples, 0.0, 0.0, {"11": 0.0, "12": 0.0}, k_range)
    b1, b2 = flags[template.r]
    p = float(np.mean(b1 | b2))
    return BadnessStats(template.r, level, samples, p, _ci3(p, samples),
                        {"11": float(b1.mean()), "12": float(b2.mean())}, k_range)


def badness_table(rs, levels, template: GoodnessTemplate, samples: int, seed: int) -> list[BadnessStats]:
    rows = []
    for level in levels:
        flags = sample_badness(level, template, samples, seed)
        for r in rs:
            if r in flags:
                b1, b2 = flags[r]
                p = float(np.mean(b1 | b2))
                pair = {"11": float(b1.mean()), "12": float(b2.mean())}
            else:
                p, pair = 0.0, {"11": 0.0, "12": 0.0}
            rows.append(BadnessStats(r, level, samples, p, _ci3(p, samples), pair,
                                     (level - template.below, level + template.above)))
    return rows


def stats_csv(rows: list[BadnessStats]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["r", "level", "samples", "freq", "ci_halfwidth"])
    for row in rows:
        w.writerow(row.to_row())
    return buf.getvalue()
