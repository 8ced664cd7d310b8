import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from czlab import measure as M

CANTOR_DIM = math.log(2) / math.log(3)


def brute_ball(m, center, radius):
    """Oracle: exact sup-norm closed-ball mass by Fractions."""
    total = 0.0
    for i in range(m.size):
        if max(abs(p - Fraction(c)) for p, c in zip(m.position(i), center)) <= Fraction(radius):
            total += m.weights[i]
    return total


def test_validation():
    with pytest.raises(M.MeasureError):
        M.Measure([], [])
    with pytest.raises(M.MeasureError):
        M.Measure([(0,), (0,)], [1.0, 1.0])
    with pytest.raises(M.MeasureError):
        M.Measure([(0,), (1,)], [1.0, 0.0])
    with pytest.raises(M.MeasureError):
        M.Measure([(0,), (1, 2)], [1.0, 1.0])
    with pytest.raises(M.MeasureError):
        M.uniform_1d(12)


def test_positions_exact():
    m = M.Measure([(Fraction(3, 8),), (Fraction(-5, 4),)], [1.0, 2.0])
    assert m.position(0) == (Fraction(3, 8),)
    assert m.position(1) == (Fraction(-5, 4),)
    assert m.min_gap() == Fraction(13, 8)


def test_ball_mass_uniform8():
    m = M.uniform_1d(8)
    # atoms 2/8..6/8
    assert M.ball_mass(m, (Fraction(1, 2),), Fraction(1, 4)) == pytest.approx(5 / 8, abs=0)


def test_ball_mass_trivial_cases(cantor6):
    gap = cantor6.min_gap()
    assert M.ball_mass(cantor6, (Fraction(-1),), gap / 4) == 0.0
    assert M.ball_mass(cantor6, (Fraction(1, 2),), cantor6.diameter()) == pytest.approx(cantor6.total_mass)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 63), st.integers(-12, 1))
def test_ball_mass_matches_oracle(i, k):
    m = M.cantor_third(6)
    center = m.position(i)
    r = Fraction(2) ** k
    assert M.ball_mass(m, center, r) == pytest.approx(brute_ball(m, center, r), rel=1e-15)


def test_atom_ball_masses_agree(uniform16):
    radii = M.default_radii(uniform16)
    table = M.atom_ball_masses(uniform16, radii)
    for i in range(uniform16.size):
        for k, r in enumerate(radii):
            assert table[i, k] == pytest.approx(brute_ball(uniform16, uniform16.position(i), r), abs=1e-15)


def test_uniform16_linear_lambda_fails_below_gap(uniform16):
    # closed balls below the atom gap hold one atom: 1/16 against 2r = 1/32
    rep = M.verify_upper_doubling(uniform16, M.DominatingFunction("power", 2.0, 1.0))
    assert not rep.passed
    assert rep.worst_ratio == 2.0
    assert rep.condition == "mass"


def test_uniform16_lambda_4r_passes(uniform16):
    rep = M.verify_upper_doubling(uniform16, M.DominatingFunction("power", 4.0, 1.0))
    assert rep.passed


def test_cantor6_calibrated_passes(cantor6):
    lam = M.calibrate_dominating(cantor6, CANTOR_DIM)
    assert lam.amplitude <= 4.01
    assert M.verify_upper_doubling(cantor6, lam).passed
    assert lam.d == pytest.approx(CANTOR_DIM)


def test_two_atoms_fail_at_unit_radius():
    m = M.Measure([(0,), (1,)], [1.0, 1.0])
    rep = M.verify_upper_doubling(m, M.DominatingFunction("power", 1.0, 1.0), radii=[Fraction(1)])
    assert not rep.passed
    assert rep.worst_ratio == 2.0
    assert rep.witness[1] == 1


def test_calibrate_uniform_amplitude():
    # smallest default radius is a quarter of the gap: one atom of mass 2^-k in a ball of radius 2^-k/4
    for k in (4, 8):
        lam = M.calibrate_dominating(M.uniform_1d(2 ** k), 1.0)
        assert 4.0 <= lam.amplitude <= 4.0 * (1 + 2.0 ** -19)
        assert M.verify_upper_doubling(M.uniform_1d(2 ** k), lam).passed


def test_calibrate_single_atom_constant():
    lam = M.calibrate_dominating(M.Measure([(0,)], [1.0]), 0.0)
    assert lam.amplitude == pytest.approx(1.0, rel=1e-5)


def test_calibrate_constant_on_many_atoms_rejected(uniform16):
    with pytest.raises(M.CalibrationError):
        M.calibrate_dominating(uniform16, 0.0)


def test_lambda_monotone_and_doubling():
    lam = M.DominatingFunction("power", 3.0, 1.5)
    r = np.geomspace(1e-4, 10, 50)
    v = lam(r)
    assert np.all(np.diff(v) >= 0)
    assert np.all(v <= lam.doubling * lam(r / 2) * (1 + 1e-12))


def test_text_round_trip(cantor6):
    again = M.parse_measure_text(M.format_measure(cantor6))
    assert np.array_equal(again.coords, cantor6.coords) or again.exp != cantor6.exp
    assert [again.position(i) for i in range(again.size)] == [cantor6.position(i) for i in range(cantor6.size)]
    assert np.array_equal(again.weights, cantor6.weights)


def test_text_errors():
    with pytest.raises(M.MeasureError, match="line 2"):
        M.parse_measure_text("0.5 1\n0.1 1\n")
    with pytest.raises(M.MeasureError, match="line 1"):
        M.parse_measure_text("0.5\n")


def test_builtins_shapes():
    assert M.uniform_2d(4).size == 16
    assert M.cantor_quarter_2d(2).size == 16
    assert M.cantor_third(3).total_mass == pytest.approx(1.0)
