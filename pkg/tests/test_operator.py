import math
from fractions import Fraction

import numpy as np
import pytest

from czlab import arith
from czlab.cubes import CubeTree
from czlab.goodness import GoodnessContext, classify_tree
from czlab.grid import Cube, build_grid
from czlab.measure import DominatingFunction, Measure, calibrate_dominating, uniform_1d
from czlab.operator import (Kernel, OperatorMatrix, adjoint_apply, apply, bmo_norm, constant_kernel,
                            containment_check, dist_to_complement_units, kernel_matrix, lambda_kernel, norm2,
                            off_diagonal_check, operator_norm, scale_index, sign_power_kernel, verify_kernel, zero_kernel)
from czlab.operator import testing_brackets as brackets, testing_constant as t_loc_of, testing_family as family_of

from conftest import CANTOR_DIM


@pytest.fixture(scope="module")
def two_atoms():
    m = Measure([(Fraction(1, 4),), (Fraction(3, 4),)], [0.5, 0.5])
    return kernel_matrix(m, constant_kernel(1.0))


@pytest.fixture(scope="module")
def cantor_sign(cantor6):
    lam = calibrate_dominating(cantor6, CANTOR_DIM)
    k = sign_power_kernel(CANTOR_DIM, 1.0, lam)
    return k, kernel_matrix(cantor6, k)


def random_matrix(m, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((m.size, m.size))
    np.fill_diagonal(a, 0.0)
    return OperatorMatrix(a, m)


def test_zero_kernel(cantor6):
    lam = calibrate_dominating(cantor6, CANTOR_DIM)
    k = zero_kernel(1.0, lam)
    rep = verify_kernel(k, cantor6)
    assert rep.c_size == 0 and rep.c_smooth == 0
    T = kernel_matrix(cantor6, k)
    assert t_loc_of(T, 2.0).t_loc == 0
    est = operator_norm(T, 2.0)
    assert est.lower == est.upper == 0
    assert operator_norm(T, 3.0).upper == 0


def test_sign_kernel_size_constant_is_amplitude(cantor_sign):
    k, _ = cantor_sign
    rep = verify_kernel(k, cantor_sign[1].measure)
    assert rep.c_size == pytest.approx(k.lam.amplitude, rel=1e-12)
    assert math.isfinite(rep.c_smooth) and rep.c_smooth > 0


def test_lambda_kernel_size_one(cantor6):
    lam = calibrate_dominating(cantor6, CANTOR_DIM)
    rep = verify_kernel(lambda_kernel(lam), cantor6)
    assert rep.c_size == pytest.approx(1.0, rel=1e-12)


def test_smoothness_exhaustive_small(uniform16):
    lam = calibrate_dominating(uniform16, 1.0)
    k = sign_power_kernel(1.0, 1.0, lam)
    rep = verify_kernel(k, uniform16)
    assert rep.exhaustive
    # oracle: brute-force triple scan
    x = uniform16.positions()[:, 0]
    worst = 0.0
    for a in range(16):
        for b in range(16):
            for c in range(16):
                dxy, dxx = abs(x[a] - x[c]), abs(x[a] - x[b])
                if dxx > 0 and dxy >= 2 * dxx:
                    K = lambda u, v: np.sign(u - v) / abs(u - v)
                    v = max(abs(K(x[a], x[c]) - K(x[b], x[c])), abs(K(x[c], x[a]) - K(x[c], x[b])))
                    worst = max(worst, v * (dxy / dxx) * lam(dxy))
    assert rep.c_smooth == pytest.approx(worst, rel=1e-12)


def test_nonfinite_kernel_rejected(uniform16):
    bad = Kernel("bad", lambda x, y: np.full((x.shape[0], y.shape[0]), np.inf), 1.0)
    with pytest.raises(ValueError):
        kernel_matrix(uniform16, bad)


def test_apply_two_atoms(two_atoms):
    assert np.allclose(apply(two_atoms, np.zeros(2)), 0)
    f = np.array([3.0, 7.0])
    assert apply(two_atoms, f).tolist() == [3.5, 1.5]
    fr = arith.vec([Fraction(1, 3), 5], arith.RATIONAL)
    assert list(apply(two_atoms, fr)) == [Fraction(5, 2), Fraction(1, 6)]
    with pytest.raises(ValueError):
        apply(two_atoms, np.zeros(3))


def test_duality(cantor_sign):
    _, T = cantor_sign
    m = T.measure
    rng = np.random.default_rng(0)
    for _ in range(10):
        f, g = rng.standard_normal(m.size), rng.standard_normal(m.size)
        lhs = np.dot(m.weights * apply(T, f), g)
        rhs = np.dot(m.weights * f, adjoint_apply(T, g))
        assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)
    fr = arith.vec(rng.integers(-5, 5, m.size), arith.RATIONAL)
    gr = arith.vec(rng.integers(-5, 5, m.size), arith.RATIONAL)
    w = arith.vec(m.weights, arith.RATIONAL)
    assert np.sum(w * apply(T, fr) * gr) == np.sum(w * fr * adjoint_apply(T, gr))


def test_two_atom_norm_and_testing(two_atoms):
    assert norm2(two_atoms).lower == pytest.approx(0.5, abs=1e-12)
    rep = t_loc_of(two_atoms, 2.0)
    # full cube: T1_Q = (w2, w1) = (1/2, 1/2); singletons give 0
    assert rep.t_loc == pytest.approx(0.5, abs=1e-15)
    single = Measure([(Fraction(0),)], [1.0])
    assert t_loc_of(kernel_matrix(single, constant_kernel(1.0)), 2.0).t_loc == 0


def test_norm2_matches_svd_and_dominates_samples():
    m = uniform_1d(64)
    for seed in range(3):
        T = random_matrix(m, seed)
        est = norm2(T)
        s = np.sqrt(m.weights)
        exact = np.linalg.norm(s[:, None] * T.A * s[None, :], 2)
        assert est.lower == pytest.approx(exact, rel=1e-6)
        rng = np.random.default_rng(seed)
        f = rng.standard_normal((1000, m.size))
        f /= np.sqrt((m.weights * f ** 2).sum(axis=1))[:, None]
        tf = (T.A @ (m.weights[:, None] * f.T)).T
        sampled = np.sqrt((m.weights * tf ** 2).sum(axis=1)).max()
        assert sampled <= est.upper * (1 + 1e-9)


@pytest.mark.parametrize("p", [1.5, 3.0])
def test_norm_bounds_ordered(p):
    m = uniform_1d(16)
    for seed in range(50):
        est = operator_norm(random_matrix(m, seed), p, seed=seed)
        assert est.lower <= est.upper


def test_testing_brackets_below_norm(cantor_sign):
    _, T = cantor_sign
    fam = family_of(T.measure, grid_samples=4)
    b1, b2, _ = brackets(T, fam, 2.0, 2.0)
    n = norm2(T).upper
    assert b1.max() <= n * (1 + 1e-9) and b2.max() <= n * (1 + 1e-9)
    assert len(fam) == fam.descriptor["distinct_sets"]


def test_bmo(uniform16):
    fam = family_of(uniform16, grid_samples=2)
    assert bmo_norm(uniform16, np.full(16, 3.0), 3.0, 2.0, fam) == pytest.approx(0, abs=1e-12)
    half = (np.arange(16) < 8).astype(float)
    # a cube holding both halves equally has bracket 1/2, and a(1-a) <= 1/4 caps every cube
    assert bmo_norm(uniform16, half, 1.0, 2.0, fam) == pytest.approx(0.5, abs=1e-12)
    rng = np.random.default_rng(0)
    for _ in range(20):
        b = rng.standard_normal(16)
        assert bmo_norm(uniform16, b, 3.0, 2.0, fam) <= 2 * np.abs(b).max()
    with pytest.raises(ValueError):
        bmo_norm(uniform16, half, 0.5, 2.0, fam)


def test_off_diagonal_cantor(cantor_sign):
    k, T = cantor_sign
    tree = CubeTree(T.measure, build_grid(T.measure.coords, T.measure.exp, 1, 0))
    c_smooth = verify_kernel(k, T.measure).c_smooth
    rep = off_diagonal_check(T, tree, c_smooth, k.lam.doubling, 1.0)
    assert rep.triples == 200 and rep.violations == 0 and rep.kind is None
    # claiming far more regularity than the kernel has is caught
    forced = off_diagonal_check(T, tree, c_smooth, k.lam.doubling, 3.0)
    assert forced.violations > 0 and forced.kind == "kernel_misconfiguration"


def test_dist_to_complement():
    e = 4
    R = Cube(1, 0, (0,), e)
    P = Cube(1, -1, (8,), e)
    Q = Cube(1, -3, (10,), e)
    assert dist_to_complement_units(Q, P, R) == 2
    assert dist_to_complement_units(Q, R, R) is None


def test_scale_index():
    e = 4
    P = Cube(1, 0, (0,), e)
    assert scale_index(Cube(1, -2, (0,), e), P) == 0       # D/lP = 1.25
    assert scale_index(Cube(1, -2, (48,), e), P) == 1      # D = 1/4 + 2 + 1 = 3.25
    assert scale_index(Cube(1, -2, (24,), e), P) == 0      # D = 1/4 + 1/2 + 1 = 1.75


def test_containment_uniform256():
    m = uniform_1d(256)
    lam = calibrate_dominating(m, 1.0)
    T = kernel_matrix(m, sign_power_kernel(1.0, 1.0, lam))
    for seed in range(2):
        g1, g2 = build_grid(m.coords, m.exp, 1, seed), build_grid(m.coords, m.exp, 2, seed)
        ctx = GoodnessContext(3, 0.99, 1.0, 1.0).with_grids(g1, g2)
        t1, t2 = CubeTree(m, g1), CubeTree(m, g2)
        rep = containment_check(T, t1, t2, classify_tree(t2, ctx)[0], ctx, seed=seed)
        assert rep.pairs == 500 and rep.failures == 0
        assert rep.kineq and all(math.isfinite(v) for v in rep.kineq.values())
