"""Scenario files: a TOML document resolved into measures, kernels and run parameters."""
from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from . import arith
from .measure import (Measure, calibrate_dominating, cantor_quarter_2d, cantor_third, load_measure,
                      uniform_1d, uniform_2d)
from .operator import Kernel, constant_kernel, riesz_2d_kernel, sign_power_kernel, zero_kernel


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


MEASURES = {
    "uniform-1d": (uniform_1d, 256, 1.0),
    "uniform-2d": (uniform_2d, 16, 2.0),
    "cantor-third": (cantor_third, 6, math.log(2) / math.log(3)),
    "cantor-quarter-2d": (cantor_quarter_2d, 3, 1.0),
}
KERNELS = ("zero", "constant", "sign-power", "riesz-2d")


@dataclass
class Scenario:
    measure: str = "cantor-third"
    m: int = 6
    file: str | None = None
    dimension: float | None = None   # exponent of the dominating function; builtins know theirs
    kernel: str = "sign-power"
    s: float | None = None
    c: float = 1.0
    eta: float = 1.0
    p1: float = 2.0
    p2: float | None = None
    r: int = 3
    gamma: float | None = None
    upsilon: Fraction = Fraction(1, 4)
    eps: Fraction = Fraction(1, 8)
    seed: int = 0
    seeds: list = field(default_factory=lambda: [0])
    arith: str = arith.FLOAT
    grid_samples: int = 2000
    grid_rs: list = field(default_factory=lambda: [2, 4, 6, 8])
    grid_level: int = 0
    grid_gamma: float = 0.2
    corona_draws: int = 100
    t1_levels: list = field(default_factory=lambda: [4, 5, 6, 7, 8])
    surgery_pairs: int | None = None
    out: str = "czlab-out"

    @property
    def dual(self) -> float:
        return self.p2 if self.p2 is not None else self.p1 / (self.p1 - 1)

    @property
    def measure_dimension(self) -> float:
        if self.dimension is not None:
            return self.dimension
        if self.measure == "file":
            return 1.0
        return MEASURES[self.measure][2]

    def build_measure(self) -> Measure:
        if self.measure == "file":
            return load_measure(self.file)
        return MEASURES[self.measure][0](self.m)

    def build_kernel(self, m: Measure) -> Kernel:
        dim = self.measure_dimension
        s = dim if self.s is None else self.s
        lam = calibrate_dominating(m, dim)
        if self.kernel == "zero":
            return zero_kernel(self.eta, lam)
        if self.kernel == "constant":
            return constant_kernel(self.c, self.eta, lam)
        if self.kernel == "sign-power":
            return sign_power_kernel(s, self.eta, lam)
        return riesz_2d_kernel(s, self.eta, lam)

    def resolved(self) -> dict:
        """Every field with its effective value, for embedding in reports."""
        return {
            "measure": {"builtin": self.measure, "m": self.m, "file": self.file, "dimension": self.measure_dimension},
            "kernel": {"name": self.kernel, "s": self.measure_dimension if self.s is None else self.s,
                       "c": self.c, "eta": self.eta},
            "exponents": {"p1": self.p1, "p2": self.dual},
            "goodness": {"r": self.r, "gamma": self.gamma},
            "surgery": {"upsilon": str(self.upsilon), "eps": str(self.eps), "pairs": self.surgery_pairs},
            "seed": self.seed, "seeds": list(self.seeds), "arith": self.arith,
            "grid_stats": {"samples": self.grid_samples, "rs": list(self.grid_rs), "level": self.grid_level,
                           "gamma": self.grid_gamma},
            "corona": {"draws": self.corona_draws},
            "t1": {"levels": list(self.t1_levels)},
        }


def _get(table: dict, key: str, kind, path: str, default=None):
    if key not in table:
        return default
    v = table[key]
    if kind is float and isinstance(v, int) and not isinstance(v, bool):
        v = float(v)
    if kind is int and isinstance(v, bool) or not isinstance(v, kind):
        raise ConfigError(f"{path}.{key}" if path else key, f"expected {kind.__name__}, got {type(v).__name__}")
    return v


def _fraction(table: dict, key: str, path: str, default: Fraction) -> Fraction:
    if key not in table:
        return default
    v = table[key]
    try:
        return Fraction(v) if isinstance(v, str) else Fraction(float(v))
    except (ValueError, TypeError, ZeroDivisionError):
        raise ConfigError(f"{path}.{key}", f"not a number: {v!r}") from None


def _int_list(table: dict, key: str, path: str, default: list) -> list:
    if key not in table:
        return default
    v = table[key]
    if not isinstance(v, list) or not all(isinstance(x, int) and not isinstance(x, bool) for x in v) or not v:
        raise ConfigError(f"{path}.{key}", "expected a non-empty list of integers")
    return list(v)


def _check_keys(table: dict, allowed: set, path: str):
    for k in table:
        if k not in allowed:
            raise ConfigError(f"{path}.{k}" if path else k, "unknown key")


def _table(doc: dict, key: str) -> dict:
    v = doc.get(key, {})
    if not isinstance(v, dict):
        raise ConfigError(key, "expected a table")
    return v


def from_dict(doc: dict, base_dir: Path | None = None) -> Scenario:
    _check_keys(doc, {"seed", "seeds", "arith", "out", "measure", "kernel", "exponents", "goodness",
                      "surgery", "grid_stats", "corona", "t1"}, "")
    sc = Scenario()
    sc.seed = _get(doc, "seed", int, "", 0)
    sc.seeds = _int_list(doc, "seeds", "", [sc.seed])
    sc.arith = _get(doc, "arith", str, "", arith.FLOAT)
    if sc.arith not in arith.MODES:
        raise ConfigError("arith", f"must be one of {list(arith.MODES)}")
    sc.out = _get(doc, "out", str, "", sc.out)

    t = _table(doc, "measure")
    _check_keys(t, {"builtin", "m", "file", "dimension"}, "measure")
    sc.measure = _get(t, "builtin", str, "measure", sc.measure)
    if sc.measure not in MEASURES and sc.measure != "file":
        raise ConfigError("measure.builtin", f"unknown measure {sc.measure!r}")
    sc.m = _get(t, "m", int, "measure", MEASURES.get(sc.measure, (None, 0))[1])
    sc.file = _get(t, "file", str, "measure")
    if sc.measure == "file":
        if sc.file is None:
            raise ConfigError("measure.file", "required when builtin = \"file\"")
        p = Path(sc.file)
        if not p.is_absolute() and base_dir is not None:
            p = base_dir / p
        if not p.exists():
            raise ConfigError("measure.file", f"no such file {sc.file}")
        sc.file = str(p)
    elif sc.m < 1:
        raise ConfigError("measure.m", "must be positive")
    sc.dimension = _get(t, "dimension", float, "measure")
    if sc.dimension is not None and not sc.dimension > 0:
        raise ConfigError("measure.dimension", "must be positive")

    t = _table(doc, "kernel")
    _check_keys(t, {"name", "s", "c", "eta"}, "kernel")
    sc.kernel = _get(t, "name", str, "kernel", sc.kernel)
    if sc.kernel not in KERNELS:
        raise ConfigError("kernel.name", f"unknown kernel {sc.kernel!r}")
    sc.s = _get(t, "s", float, "kernel")
    if sc.s is not None and sc.s < 0:
        raise ConfigError("kernel.s", "must be non-negative")
    sc.c = _get(t, "c", float, "kernel", 1.0)
    sc.eta = _get(t, "eta", float, "kernel", 1.0)
    if not 0 < sc.eta <= 1:
        raise ConfigError("kernel.eta", "must lie in (0, 1]")

    t = _table(doc, "exponents")
    _check_keys(t, {"p1", "p2"}, "exponents")
    sc.p1 = _get(t, "p1", float, "exponents", 2.0)
    if not (sc.p1 > 1 and math.isfinite(sc.p1)):
        raise ConfigError("exponents.p1", "must lie in (1, inf)")
    sc.p2 = _get(t, "p2", float, "exponents")
    if sc.p2 is not None and not (sc.p2 > 1 and math.isfinite(sc.p2)):
        raise ConfigError("exponents.p2", "must lie in (1, inf)")

    t = _table(doc, "goodness")
    _check_keys(t, {"r", "gamma"}, "goodness")
    sc.r = _get(t, "r", int, "goodness", 3)
    if sc.r < 1:
        raise ConfigError("goodness.r", "must be at least 1")
    sc.gamma = _get(t, "gamma", float, "goodness")
    if sc.gamma is not None and not 0 < sc.gamma < 1:
        raise ConfigError("goodness.gamma", "must lie in (0, 1)")

    t = _table(doc, "surgery")
    _check_keys(t, {"upsilon", "eps", "pairs"}, "surgery")
    sc.upsilon = _fraction(t, "upsilon", "surgery", sc.upsilon)
    sc.eps = _fraction(t, "eps", "surgery", sc.eps)
    for name in ("upsilon", "eps"):
        if not 0 < getattr(sc, name) < 1:
            raise ConfigError(f"surgery.{name}", "must lie in (0, 1)")
    sc.surgery_pairs = _get(t, "pairs", int, "surgery")

    t = _table(doc, "grid_stats")
    _check_keys(t, {"samples", "rs", "level", "gamma"}, "grid_stats")
    sc.grid_samples = _get(t, "samples", int, "grid_stats", sc.grid_samples)
    if sc.grid_samples < 100:
        raise ConfigError("grid_stats.samples", "at least 100 required")
    sc.grid_rs = _int_list(t, "rs", "grid_stats", sc.grid_rs)
    if min(sc.grid_rs) < 1:
        raise ConfigError("grid_stats.rs", "entries must be at least 1")
    sc.grid_level = _get(t, "level", int, "grid_stats", 0)
    sc.grid_gamma = _get(t, "gamma", float, "grid_stats", sc.grid_gamma)
    if not 0 < sc.grid_gamma < 1:
        raise ConfigError("grid_stats.gamma", "must lie in (0, 1)")

    t = _table(doc, "corona")
    _check_keys(t, {"draws"}, "corona")
    sc.corona_draws = _get(t, "draws", int, "corona", sc.corona_draws)
    if sc.corona_draws < 1:
        raise ConfigError("corona.draws", "must be positive")

    t = _table(doc, "t1")
    _check_keys(t, {"levels"}, "t1")
    sc.t1_levels = _int_list(t, "levels", "t1", sc.t1_levels)
    if min(sc.t1_levels) < 1:
        raise ConfigError("t1.levels", "entries must be at least 1")
    return sc


def load(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        doc = tomllib.loads(path.read_text())
    except OSError as exc:
        raise ConfigError("scenario", f"cannot read {path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("scenario", f"invalid TOML: {exc}") from None
    return from_dict(doc, path.parent)


def parse_levels(text: str) -> list[int]:
    """'4..8' or '4,5,7'."""
    try:
        if ".." in text:
            a, b = text.split("..", 1)
            lo, hi = int(a), int(b)
            if hi < lo:
                raise ValueError
            return list(range(lo, hi + 1))
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError("levels", f"expected 'a..b' or a comma list, got {text!r}") from None
