"""Shifted dyadic lattices with exact integer geometry.

Coordinates are integers in units of 2^-exp where exp = -k_min, so every
cube anchor at every level in the grid's range is an integer.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .dyadic import from_units, ilog2_ceil

# levels sampled above the support scale when looking for a top cube
TOP_SEARCH_LEVELS = 64


class GridRangeError(ValueError):
    pass


class OutOfDomainError(ValueError):
    pass


@dataclass(frozen=True)
class ShiftSequence:
    j: int
    k_min: int
    k_max: int
    bits: tuple[tuple[int, ...], ...]  # bits[k - k_min] is omega_{j,k}
    seed: int | None

    @property
    def n(self) -> int:
        return len(self.bits[0])

    def omega(self, k: int) -> tuple[int, ...]:
        if not self.k_min <= k <= self.k_max:
            raise GridRangeError(f"level {k} outside shift range [{self.k_min},{self.k_max}]")
        return self.bits[k - self.k_min]

    def offsets(self) -> np.ndarray:
        """offsets[L - k_min] = sum_{k_min <= k' < L} 2^(k'-k_min) omega_k', for L in [k_min, k_max+1]."""
        b = np.array(self.bits, dtype=object)
        out = [np.zeros(self.n, dtype=object)]
        for i in range(len(self.bits)):
            out.append(out[-1] + b[i] * (1 << i))
        return np.array(out, dtype=object)

    def truncated(self, k_max: int) -> "ShiftSequence":
        return ShiftSequence(self.j, self.k_min, k_max, self.bits[: k_max - self.k_min + 1], self.seed)

    def to_line(self) -> str:
        # bit i*n + a is omega_{k_min+i}[a]; hex, least significant first
        value = 0
        for i, vec in enumerate(self.bits):
            for a, bit in enumerate(vec):
                value |= int(bit) << (i * self.n + a)
        return f"{self.j} {self.k_min} {self.k_max} {self.n}:{value:x} {self.seed if self.seed is not None else '-'}"

    @classmethod
    def from_line(cls, line: str) -> "ShiftSequence":
        j, k_min, k_max, payload, seed = line.split()
        n_txt, hexbits = payload.split(":")
        n, value = int(n_txt), int(hexbits, 16)
        k_min, k_max = int(k_min), int(k_max)
        bits = tuple(tuple((value >> (i * n + a)) & 1 for a in range(n)) for i in range(k_max - k_min + 1))
        return cls(int(j), k_min, k_max, bits, None if seed == "-" else int(seed))


def sample_shift(seed: int, j: int, k_min: int, k_max: int, n: int = 1) -> ShiftSequence:
    if k_max < k_min:
        raise ValueError("empty level range")
    rng = np.random.default_rng([int(seed), int(j)])
    arr = rng.integers(0, 2, size=(k_max - k_min + 1, n))
    return ShiftSequence(j, k_min, k_max, tuple(tuple(int(b) for b in row) for row in arr), seed)


def zero_shift(j: int, k_min: int, k_max: int, n: int = 1) -> ShiftSequence:
    return ShiftSequence(j, k_min, k_max, tuple((0,) * n for _ in range(k_max - k_min + 1)), None)


@dataclass(frozen=True)
class Cube:
    j: int
    level: int
    anchor: tuple[int, ...]
    exp: int

    @property
    def side_units(self) -> int:
        return 1 << (self.level + self.exp)

    @property
    def side(self) -> Fraction:
        return Fraction(2) ** self.level

    @property
    def n(self) -> int:
        return len(self.anchor)

    def anchor_value(self) -> tuple[Fraction, ...]:
        return tuple(from_units(a, self.exp) for a in self.anchor)

    def midpoint_units2(self) -> tuple[int, ...]:
        """Twice the midpoint in units (always an integer)."""
        s = self.side_units
        return tuple(2 * a + s for a in self.anchor)

    def midpoint(self) -> tuple[Fraction, ...]:
        return tuple(from_units(a, self.exp) + self.side / 2 for a in self.anchor)

    def contains_units(self, pts: np.ndarray) -> np.ndarray:
        """Half-open membership for integer points of shape (m, n)."""
        a = np.array(self.anchor, dtype=np.int64)
        return np.all((pts >= a) & (pts < a + self.side_units), axis=1)

    def contains_cube(self, other: "Cube") -> bool:
        s, t = self.side_units, other.side_units
        return all(a <= b and b + t <= a + s for a, b in zip(self.anchor, other.anchor))

    def __str__(self) -> str:
        anchor = ",".join(str(v) for v in self.anchor_value())
        return f"D{self.j}[{self.level}]@({anchor})"


def cube_gap_units(q: Cube, p: Cube) -> int:
    """Sup-norm distance between the closed boxes, in units."""
    gap = 0
    s, t = q.side_units, p.side_units
    for a, b in zip(q.anchor, p.anchor):
        gap = max(gap, b - (a + s), a - (b + t))
    return gap


def dist(q: Cube, p: Cube) -> Fraction:
    return from_units(cube_gap_units(q, p), q.exp)


def long_distance(q: Cube, p: Cube) -> Fraction:
    if q.exp != p.exp:
        raise ValueError("cubes use different unit exponents")
    return q.side + dist(q, p) + p.side


def boundary_distance_units(q: Cube, p: Cube) -> int:
    """dist(closure Q, boundary P) in units, exact."""
    s, t = q.side_units, p.side_units
    inside = q.n and all(b <= a and a + s <= b + t for a, b in zip(q.anchor, p.anchor))
    if inside:
        return min(min(a - b, (b + t) - (a + s)) for a, b in zip(q.anchor, p.anchor))
    # Q meets the complement of the open box; distance to the boundary is the
    # distance to the closed box if disjoint, else 0
    g = cube_gap_units(q, p)
    return g


class DyadicGrid:
    def __init__(self, shift: ShiftSequence, top: Cube | None = None, top_attempts: int = 0):
        self.shift = shift
        self.j = shift.j
        self.exp = -shift.k_min
        self.n = shift.n
        self._off = shift.offsets()
        self.top = top
        self.top_attempts = top_attempts

    @property
    def k_min(self) -> int:
        return self.shift.k_min

    @property
    def k_max(self) -> int:
        return self.shift.k_max

    def offset(self, level: int) -> tuple[int, ...]:
        if not self.k_min <= level <= self.k_max + 1:
            raise GridRangeError(f"level {level} outside grid range")
        return tuple(int(v) for v in self._off[level - self.k_min])

    def _check_level(self, level: int):
        if not self.k_min <= level <= self.k_max:
            raise GridRangeError(f"level {level} outside grid range [{self.k_min},{self.k_max}]")

    def anchors_units(self, pts: np.ndarray, level: int) -> np.ndarray:
        """Anchors of the level cubes containing each integer point, vectorised."""
        self._check_level(level)
        sh = level + self.exp
        off = np.array(self.offset(level), dtype=np.int64)
        return ((pts - off) >> sh << sh) + off

    def cube_at_units(self, point: Sequence[int], level: int) -> Cube:
        self._check_level(level)
        sh = level + self.exp
        off = self.offset(level)
        anchor = tuple(((int(x) - o) >> sh << sh) + o for x, o in zip(point, off))
        return Cube(self.j, level, anchor, self.exp)

    def cube_containing(self, x: Sequence, level: int) -> Cube:
        scale = Fraction(1 << self.exp)
        # cube boundaries sit on unit multiples, so flooring keeps the containing cell
        pts = [math.floor(Fraction(c) * scale) for c in x]
        if self.top is not None and not self.top.contains_units(np.array([pts], dtype=np.int64))[0]:
            raise OutOfDomainError("point outside the top cube")
        return self.cube_at_units(pts, level)

    def children(self, q: Cube) -> list[Cube]:
        if q.level - 1 < self.k_min:
            raise GridRangeError("children below finest level")
        half = 1 << (q.level - 1 + self.exp)
        out = []
        for mask in range(1 << q.n):
            anchor = tuple(a + (half if (mask >> i) & 1 else 0) for i, a in enumerate(q.anchor))
            out.append(Cube(q.j, q.level - 1, anchor, q.exp))
        return out

    def parent(self, q: Cube, t: int = 1) -> Cube:
        if t < 0:
            raise ValueError("t must be non-negative")
        if t == 0:
            return q
        return self.cube_at_units(q.anchor, q.level + t)

    def unshifted_anchor(self, q: Cube) -> tuple[int, ...]:
        return tuple(a - o for a, o in zip(q.anchor, self.offset(q.level)))

    def describe(self) -> dict:
        return {"shift": self.shift.to_line(), "top": str(self.top) if self.top else None,
                "top_level": self.top.level if self.top else None, "top_attempts": self.top_attempts}


def _support_top_level(coords: np.ndarray, exp: int) -> int:
    span = int((coords.max(axis=0) - coords.min(axis=0)).max())
    if span == 0:
        return -exp
    return ilog2_ceil(Fraction(span + 1, 1 << exp))


def build_grid(coords: np.ndarray, exp: int, j: int, seed: int | None, zero: bool = False) -> DyadicGrid:
    """Grid whose top cube is the smallest-level grid cube containing all points.

    Shift bits are drawn for a generous level range once; the top is the first
    level at which one cube holds every point, and the sequence is truncated there.
    """
    n = coords.shape[1]
    k_min = -exp
    lo = max(k_min, _support_top_level(coords, exp))
    # anchors must stay inside int64
    hi = min(lo + TOP_SEARCH_LEVELS, 60 - exp)
    full = zero_shift(j, k_min, hi, n) if zero else sample_shift(seed if seed is not None else 0, j, k_min, hi, n)
    g = DyadicGrid(full)
    for level in range(lo, hi + 1):
        anchors = g.anchors_units(coords, level)
        if np.all(anchors == anchors[0]):
            top = Cube(j, level, tuple(int(v) for v in anchors[0]), exp)
            return DyadicGrid(full.truncated(level), top, top_attempts=level - lo + 1)
    raise GridRangeError("no top cube found within the sampled level range")
