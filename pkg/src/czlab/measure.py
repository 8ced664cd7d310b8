"""Finite atomic measures on R^n and their dominating functions."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dyadic import dyadic_exponent, from_units, ilog2_ceil, ilog2_floor, parse_dyadic

# extra binary digits below the finest atom coordinate, so that grid cubes
# many levels finer than the atom spacing still have integer anchors
PRECISION_PAD = 20


class MeasureError(ValueError):
    pass


class CalibrationError(ValueError):
    def __init__(self, message: str, witness=None):
        super().__init__(message)
        self.witness = witness


class Measure:
    """Weighted point set with positions stored exactly as integers times 2^-exp."""

    def __init__(self, positions: Sequence[Sequence], weights: Sequence[float], pad: int = PRECISION_PAD):
        pos = [[Fraction(c) for c in p] for p in positions]
        if not pos:
            raise MeasureError("measure needs at least one atom")
        n = len(pos[0])
        if n < 1 or any(len(p) != n for p in pos):
            raise MeasureError("inconsistent atom dimension")
        w = np.asarray(weights, dtype=float)
        if w.shape != (len(pos),):
            raise MeasureError("one weight per atom required")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise MeasureError("weights must be finite and strictly positive")
        base = max(dyadic_exponent(c) for p in pos for c in p)
        self.exp = base + pad
        scale = 1 << self.exp
        units = [[int(c * scale) for c in p] for p in pos]
        big = max(abs(u) for p in units for u in p)
        if big >= 1 << 61:
            raise MeasureError("coordinates too large for exact int64 geometry")
        self.coords = np.array(units, dtype=np.int64).reshape(len(pos), n)
        if len({tuple(r) for r in self.coords.tolist()}) != len(pos):
            raise MeasureError("atom positions must be pairwise distinct")
        self.coords.setflags(write=False)
        self.weights = w.copy()
        self.weights.setflags(write=False)
        self.n = n
        self.pad = pad

    def __len__(self) -> int:
        return self.coords.shape[0]

    @property
    def size(self) -> int:
        return self.coords.shape[0]

    @property
    def total_mass(self) -> float:
        return float(math.fsum(self.weights))

    def positions(self) -> np.ndarray:
        """Float positions (exact for the coordinate ranges used here)."""
        return self.coords.astype(float) / float(1 << self.exp)

    def position(self, i: int) -> tuple[Fraction, ...]:
        return tuple(from_units(int(u), self.exp) for u in self.coords[i])

    def permuted(self, perm: Sequence[int]) -> "Measure":
        perm = list(perm)
        return Measure([self.position(i) for i in perm], self.weights[perm], pad=self.pad)

    def sup_distances(self, rows: np.ndarray | None = None) -> np.ndarray:
        """Integer sup-norm distance matrix (units of 2^-exp)."""
        a = self.coords if rows is None else self.coords[rows]
        d = np.abs(a[:, None, :] - self.coords[None, :, :])
        return d.max(axis=2)

    def min_gap(self) -> Fraction | None:
        if self.size < 2:
            return None
        best = None
        for start in range(0, self.size, 512):
            d = self.sup_distances(np.arange(start, min(start + 512, self.size)))
            for i in range(d.shape[0]):
                d[i, start + i] = np.iinfo(np.int64).max
            v = int(d.min())
            best = v if best is None else min(best, v)
        return from_units(best, self.exp)

    def diameter(self) -> Fraction:
        span = (self.coords.max(axis=0) - self.coords.min(axis=0)).max()
        return from_units(int(span), self.exp)

    def __repr__(self) -> str:
        return f"Measure(n={self.n}, atoms={self.size}, mass={self.total_mass:.6g})"


def _radius_bound(radius, exp: int) -> int:
    """Largest integer distance (in units) inside a closed ball of this radius."""
    r = Fraction(radius) * (1 << exp)
    return math.floor(r)


def ball_mass(m: Measure, center: Sequence, radius) -> float:
    if not radius > 0:
        raise ValueError("radius must be positive")
    scale = 1 << m.exp
    inside = np.ones(m.size, dtype=bool)
    for axis, c in enumerate(center):
        cu = Fraction(c) * scale
        r = Fraction(radius) * scale
        lo, hi = math.ceil(cu - r), math.floor(cu + r)
        col = m.coords[:, axis]
        inside &= (col >= lo) & (col <= hi)
    return float(math.fsum(m.weights[inside]))


def atom_ball_masses(m: Measure, radii: Sequence) -> np.ndarray:
    """Masses of closed balls centred at every atom, shape (atoms, radii)."""
    bounds = np.array([_radius_bound(r, m.exp) for r in radii], dtype=np.int64)
    out = np.empty((m.size, len(bounds)))
    for start in range(0, m.size, 256):
        rows = np.arange(start, min(start + 256, m.size))
        d = m.sup_distances(rows)
        order = np.argsort(d, axis=1, kind="stable")
        ds = np.take_along_axis(d, order, axis=1)
        cw = np.cumsum(m.weights[order], axis=1)
        for i in range(len(rows)):
            cnt = np.searchsorted(ds[i], bounds, side="right")
            out[start + i] = np.where(cnt > 0, cw[i, np.maximum(cnt - 1, 0)], 0.0)
    return out


@dataclass(frozen=True)
class DominatingFunction:
    """lambda(x, r); x-independent in all kinds implemented here."""

    kind: str
    amplitude: float
    exponent: float
    clip: float | None = None
    table: tuple[tuple[float, float], ...] | None = None
    doubling: float = field(default=0.0)

    def __post_init__(self):
        if self.kind not in ("power", "clipped-power", "tabulated"):
            raise ValueError(f"unknown dominating kind {self.kind}")
        if self.kind != "tabulated" and not self.amplitude > 0:
            raise ValueError("amplitude must be positive")
        if self.exponent < 0:
            raise ValueError("exponent must be non-negative")
        if self.doubling == 0.0:
            object.__setattr__(self, "doubling", self._default_doubling())

    def _default_doubling(self) -> float:
        if self.kind == "tabulated":
            vals = [v for _, v in self.table or ()]
            rad = [r for r, _ in self.table or ()]
            worst = 1.0
            for i, r in enumerate(rad):
                for k, r2 in enumerate(rad):
                    if r2 * 2 == r:
                        worst = max(worst, vals[i] / vals[k])
            return worst
        return 2.0 ** self.exponent

    @property
    def d(self) -> float:
        return math.log2(self.doubling)

    def __call__(self, r, x=None):
        r = np.asarray(r, dtype=float)
        if self.kind == "power":
            return self.amplitude * r ** self.exponent
        if self.kind == "clipped-power":
            return self.amplitude * np.maximum(r, self.clip) ** self.exponent
        rad = np.array([a for a, _ in self.table])
        val = np.array([b for _, b in self.table])
        idx = np.searchsorted(rad, r, side="right") - 1
        return val[np.clip(idx, 0, len(val) - 1)]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "amplitude": self.amplitude, "exponent": self.exponent,
                "clip": self.clip, "doubling": self.doubling, "d": self.d}


@dataclass
class DoublingReport:
    passed: bool
    worst_ratio: float
    witness: tuple | None
    condition: str | None

    def to_dict(self) -> dict:
        w = None
        if self.witness is not None:
            x, r = self.witness
            w = {"x": [str(c) for c in x], "r": str(r)}
        return {"pass": self.passed, "worst_ratio": self.worst_ratio, "witness": w, "condition": self.condition}


def default_radii(m: Measure) -> list[Fraction]:
    gap = m.min_gap()
    diam = m.diameter()
    if gap is None or diam == 0:
        return [Fraction(2) ** k for k in range(-4, 5)]
    lo = ilog2_floor(gap / 4)
    hi = ilog2_ceil(diam * 4)
    return [Fraction(2) ** k for k in range(lo, hi + 1)]


def verify_upper_doubling(m: Measure, lam: DominatingFunction, radii: Sequence | None = None,
                          tol: float = 1e-12) -> DoublingReport:
    if lam.kind != "tabulated" and not lam.amplitude > 0:
        raise ValueError("dominating function needs positive amplitude")
    radii = default_radii(m) if radii is None else list(radii)
    if not radii:
        raise ValueError("radii must be nonempty")
    rf = np.array([float(r) for r in radii])
    if np.any(np.diff(rf) < 0):
        raise ValueError("radii must be sorted")
    masses = atom_ball_masses(m, radii)
    lam_r = lam(rf)
    lam_half = lam(rf / 2)
    worst, witness, cond = 0.0, None, None
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(lam_r > 0, masses / lam_r, np.inf)
    i, k = np.unravel_index(int(np.argmax(ratio)), ratio.shape)
    worst, witness, cond = float(ratio[i, k]), (m.position(int(i)), radii[k]), "mass"
    dbl = lam_r / (lam.doubling * lam_half)
    if dbl.size and float(dbl.max()) > worst:
        k = int(np.argmax(dbl))
        worst, witness, cond = float(dbl[k]), (m.position(0), radii[k]), "doubling"
    if len(rf) > 1:
        mono = lam_r[:-1] / lam_r[1:]
        if float(mono.max()) > worst:
            k = int(np.argmax(mono))
            worst, witness, cond = float(mono[k]), (m.position(0), radii[k]), "monotone"
    return DoublingReport(worst <= 1 + tol, worst, witness, cond)


def calibrate_dominating(m: Measure, s: float, radii: Sequence | None = None) -> DominatingFunction:
    if s < 0:
        raise ValueError("exponent must be non-negative")
    radii = default_radii(m) if radii is None else list(radii)
    if s == 0 and m.size >= 2:
        # a constant lambda has doubling constant 1, so d = 0 and no gamma exists
        gap = m.min_gap()
        raise CalibrationError("s=0 gives a constant dominating function with d=0 on a multi-atom measure",
                               witness=(m.position(0), gap))
    masses = atom_ball_masses(m, radii)
    rf = np.array([float(r) for r in radii])
    a = float((masses / rf ** s).max()) * (1 + 2.0 ** -20)
    return DominatingFunction("power", a, float(s))


# builtin measures ---------------------------------------------------------

def uniform_1d(m: int) -> Measure:
    if m < 1 or m & (m - 1):
        raise MeasureError("uniform-1d needs a power-of-two atom count")
    return Measure([(Fraction(i, m),) for i in range(m)], np.full(m, 1.0 / m))


def uniform_2d(m: int) -> Measure:
    if m < 1 or m & (m - 1):
        raise MeasureError("uniform-2d needs a power-of-two side count")
    pts = [(Fraction(i, m), Fraction(j, m)) for i in range(m) for j in range(m)]
    return Measure(pts, np.full(m * m, 1.0 / (m * m)))


CANTOR_ROUND_BITS = 24


def cantor_third(level: int) -> Measure:
    """Middle-thirds Cantor measure at a finite level; atoms at interval midpoints rounded to 2^-24."""
    lefts = [Fraction(0)]
    for k in range(1, level + 1):
        step = Fraction(2, 3 ** k)
        lefts = [a + b for a in lefts for b in (Fraction(0), step)]
    half = Fraction(1, 2 * 3 ** level)
    scale = 1 << CANTOR_ROUND_BITS
    pts = [(Fraction(round((a + half) * scale), scale),) for a in lefts]
    return Measure(pts, np.full(len(pts), 2.0 ** -level))


def cantor_quarter_2d(level: int) -> Measure:
    """Four-corner Cantor set with ratio 1/4; atoms at square centres (exact dyadics)."""
    corners = [(Fraction(0), Fraction(0))]
    for k in range(1, level + 1):
        step = Fraction(3, 4 ** k)
        corners = [(x + a * step, y + b * step) for x, y in corners for a in (0, 1) for b in (0, 1)]
    half = Fraction(1, 2 * 4 ** level)
    pts = [(x + half, y + half) for x, y in corners]
    return Measure(pts, np.full(len(pts), 4.0 ** -level))


def parse_measure_text(text: str) -> Measure:
    positions, weights = [], []
    n = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) < 2:
            raise MeasureError(f"line {lineno}: need coordinates and a weight")
        if n is None:
            n = len(parts) - 1
        elif len(parts) - 1 != n:
            raise MeasureError(f"line {lineno}: expected {n} coordinates")
        try:
            positions.append(tuple(parse_dyadic(p) for p in parts[:-1]))
            weights.append(float(parse_dyadic(parts[-1])) if "*" in parts[-1] else float(parts[-1]))
        except ValueError as exc:
            raise MeasureError(f"line {lineno}: {exc}") from exc
    return Measure(positions, weights)


def load_measure(path: str | Path) -> Measure:
    return parse_measure_text(Path(path).read_text())


def format_measure(m: Measure) -> str:
    lines = []
    for i in range(m.size):
        coords = " ".join(f"{int(u)}*2^{-m.exp}" for u in m.coords[i])
        lines.append(f"{coords} {float(m.weights[i])!r}")
    return "\n".join(lines) + "\n"


def from_atoms(atoms: Iterable[tuple[Sequence, float]]) -> Measure:
    atoms = list(atoms)
    return Measure([a for a, _ in atoms], [w for _, w in atoms])
