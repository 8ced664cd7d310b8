"""Exact dyadic rationals as (integer, exponent) pairs and text parsing."""
from __future__ import annotations

import re
from fractions import Fraction

_MANT_EXP = re.compile(r"^\s*([+-]?\d+)\s*\*\s*2\s*\^\s*\(?\s*([+-]?\d+)\s*\)?\s*$")


class DyadicError(ValueError):
    pass


def parse_dyadic(text: str) -> Fraction:
    """Parse ``m*2^e`` or a decimal literal whose value is an exact dyadic rational."""
    m = _MANT_EXP.match(text)
    if m:
        mant, e = int(m.group(1)), int(m.group(2))
        return Fraction(mant) * Fraction(2) ** e
    try:
        value = Fraction(text.strip())
    except ValueError as exc:
        raise DyadicError(f"not a number: {text!r}") from exc
    if not is_dyadic(value):
        raise DyadicError(f"{text!r} is not an exact dyadic rational")
    return value


def is_dyadic(value: Fraction) -> bool:
    d = value.denominator
    return d & (d - 1) == 0


def dyadic_exponent(value: Fraction) -> int:
    """Smallest E >= 0 with value * 2^E an integer."""
    if not is_dyadic(value):
        raise DyadicError(f"{value} is not dyadic")
    return value.denominator.bit_length() - 1


def to_units(value: Fraction | int | float, exp: int) -> int:
    """value * 2^exp as an exact integer; raises if not representable."""
    v = Fraction(value) * (Fraction(2) ** exp)
    if v.denominator != 1:
        raise DyadicError(f"{value} not representable with exponent {exp}")
    return int(v)


def from_units(units: int, exp: int) -> Fraction:
    return Fraction(int(units), 1 << exp) if exp >= 0 else Fraction(int(units) << (-exp))


def floor_div_pow2(a: int, k: int) -> int:
    return a >> k if k >= 0 else a << (-k)


def ilog2_floor(x: Fraction) -> int:
    """floor(log2 x) for positive rational x, exact."""
    if x <= 0:
        raise ValueError("log of non-positive value")
    n, d = x.numerator, x.denominator
    k = n.bit_length() - d.bit_length()
    # adjust so that 2^k <= x < 2^(k+1)
    if Fraction(2) ** k > x:
        k -= 1
    elif Fraction(2) ** (k + 1) <= x:
        k += 1
    return k


def ilog2_ceil(x: Fraction) -> int:
    k = ilog2_floor(x)
    return k if Fraction(2) ** k == x else k + 1


def format_dyadic(value: Fraction) -> str:
    if value.denominator == 1:
        return str(value.numerator)
    return f"{value.numerator}*2^{-dyadic_exponent(value)}"
