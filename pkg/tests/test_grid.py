from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from czlab.grid import (Cube, DyadicGrid, GridRangeError, OutOfDomainError, ShiftSequence, build_grid,
                        dist, long_distance, sample_shift, zero_shift)
from czlab.measure import cantor_third, uniform_2d


def std_grid(k_min=-6, k_max=0, j=1, n=1):
    return DyadicGrid(zero_shift(j, k_min, k_max, n), top=Cube(j, k_max, (0,) * n, -k_min))


def test_standard_grid_cube():
    g = std_grid()
    q = g.cube_containing([Fraction(3, 10)], -2)
    assert q.anchor_value() == (Fraction(1, 4),)
    assert q.side == Fraction(1, 4)
    assert g.cube_containing([0.3], -2) == q


def test_single_shift_bit():
    # only omega at level -1 set: level-0 cubes move by 1/2
    bits = tuple((1,) if k == -1 else (0,) for k in range(-3, 2))
    g = DyadicGrid(ShiftSequence(1, -3, 1, bits, None))
    q = g.cube_containing([Fraction(3, 5)], 0)
    assert q.anchor_value() == (Fraction(1, 2),)
    # levels at or below -1 are unshifted
    assert g.cube_containing([Fraction(3, 5)], -1).anchor_value() == (Fraction(1, 2),)
    assert g.cube_containing([Fraction(3, 5)], -2).anchor_value() == (Fraction(1, 2),)
    assert g.cube_containing([Fraction(1, 4)], 0).anchor_value() == (Fraction(-1, 2),)


def test_out_of_domain_and_range():
    g = std_grid()
    with pytest.raises(OutOfDomainError):
        g.cube_containing([Fraction(3, 2)], -1)
    with pytest.raises(GridRangeError):
        g.cube_containing([Fraction(1, 2)], -7)
    with pytest.raises(GridRangeError):
        g.children(g.cube_containing([0], -6))


def test_children_partition_parent():
    g = DyadicGrid(sample_shift(5, 1, -6, 0, n=2))
    q = g.cube_at_units((17, 40), -2)
    kids = g.children(q)
    assert len(kids) == 4 and len(set(kids)) == 4
    assert all(q.contains_cube(c) and g.parent(c) == c.__class__(q.j, q.level, q.anchor, q.exp) for c in kids)
    assert sum(c.side_units ** 2 for c in kids) == q.side_units ** 2
    assert g.parent(kids[0], 0) == kids[0]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(-5, -1), st.integers(0, 2 ** 12))
def test_nesting_and_shift_consistency(seed, level, x):
    g = DyadicGrid(sample_shift(seed, 2, -6, 4))
    q = g.cube_at_units((x,), level)
    up = g.parent(q)
    assert up.contains_cube(q)
    # anchor = unshifted anchor + accumulated shift
    off = sum((1 << (k + 6)) * g.shift.omega(k)[0] for k in range(-6, level))
    assert q.anchor[0] == g.unshifted_anchor(q)[0] + off
    assert g.unshifted_anchor(q)[0] % q.side_units == 0
    for c in g.children(q):
        assert (c.anchor[0] - g.offset(c.level)[0]) % c.side_units == 0


def test_shift_bits_are_fair():
    s = sample_shift(0, 1, -2000, 0)
    bits = np.array(s.bits).ravel()
    # 3 sigma for a fair coin over 2001 draws
    assert abs(bits.mean() - 0.5) < 3 * 0.5 / np.sqrt(bits.size)


def test_shift_line_round_trip():
    s = sample_shift(11, 3, -9, 5, n=2)
    assert ShiftSequence.from_line(s.to_line()) == s


def test_distances():
    g = std_grid()
    q = g.cube_containing([0], -3)
    p = g.cube_containing([Fraction(3, 4)], -2)
    assert dist(q, p) == Fraction(5, 8)
    assert long_distance(q, p) == Fraction(1, 8) + Fraction(5, 8) + Fraction(1, 4)
    assert long_distance(q, q) == Fraction(1, 4)


def test_build_grid_top_contains_support():
    for m in (cantor_third(5), uniform_2d(4)):
        for seed in range(5):
            g = build_grid(m.coords, m.exp, 1, seed)
            assert g.top.contains_units(m.coords).all()
            assert g.k_max == g.top.level
