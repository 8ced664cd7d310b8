"""Float / exact-rational vector helpers shared by the numeric modules."""
from __future__ import annotations

from fractions import Fraction

import gmpy2
import numpy as np

FLOAT = "float"
RATIONAL = "rational"
MODES = (FLOAT, RATIONAL)


def check_mode(mode: str) -> str:
    if mode not in MODES:
        raise ValueError(f"arithmetic mode must be one of {MODES}")
    return mode


def q(x):
    """Exact rational from int, float, Fraction or mpq."""
    if isinstance(x, Fraction):
        return gmpy2.mpq(x.numerator, x.denominator)
    return gmpy2.mpq(x)


def vec(values, mode: str) -> np.ndarray:
    if mode == FLOAT:
        return np.asarray(values, dtype=float)
    arr = np.asarray(values, dtype=object).reshape(-1)
    return np.array([q(v) for v in arr], dtype=object).reshape(np.shape(values))


def mat(values, mode: str) -> np.ndarray:
    if mode == FLOAT:
        return np.asarray(values, dtype=float)
    a = np.asarray(values)
    out = np.empty(a.shape, dtype=object)
    flat = a.reshape(-1)
    out.reshape(-1)[:] = [q(v) for v in flat.tolist()]
    return out


def zeros(shape, mode: str) -> np.ndarray:
    if mode == FLOAT:
        return np.zeros(shape)
    out = np.empty(shape, dtype=object)
    out.reshape(-1)[:] = [gmpy2.mpq(0)] * out.size
    return out


def group_sum(ids: np.ndarray, values: np.ndarray, count: int, mode: str) -> np.ndarray:
    """out[c] = sum of values[a] over a with ids[a] == c."""
    if mode == FLOAT:
        return np.bincount(ids, weights=values, minlength=count)
    out = zeros(count, mode)
    for i, v in zip(ids.tolist(), values.tolist()):
        out[i] += v
    return out


def to_float(x) -> float:
    return float(x)


def is_zero(x) -> bool:
    return x == 0


def rel_residual(a, b, scale=None) -> float:
    """|a - b| / max(|a|, |b|, scale, tiny); exact zero in rational mode gives 0.0."""
    diff = abs(a - b)
    if diff == 0:
        return 0.0
    s = max(abs(float(a)), abs(float(b)), float(scale or 0.0), 1e-300)
    return float(diff) / s
