import math
from fractions import Fraction

import numpy as np
import pytest

from czlab import arith
from czlab.decomposition import (EXACT_MAX_ATOMS, INSIDE, NEARBY, SEPARATED, DecompositionResult, Pairing,
                                 PartitionError, bad_projection, build_instance, class_matrix, classify_pair,
                                 collar_mask, decay_csv, decay_diagnostics, decompose, expand_form, layer_exponent,
                                 nearby_surgery, perturb, surgery)
from czlab.grid import Cube
from czlab.martingale import expand
from czlab.measure import Measure, calibrate_dominating, cantor_third, uniform_1d
from czlab.operator import constant_kernel, sign_power_kernel, zero_kernel

from conftest import CANTOR_DIM

F, R = arith.FLOAT, arith.RATIONAL


def sign_instance(m, d, r, seed, mode=F, gamma=0.99, p1=2.0):
    k = sign_power_kernel(d, 1.0, calibrate_dominating(m, d))
    return build_instance(m, k, r, seed, p1, mode=mode, gamma=gamma)


@pytest.fixture(scope="module")
def c6_rational(cantor6):
    return [decompose(sign_instance(cantor6, CANTOR_DIM, 3, s, R)) for s in range(3)]


@pytest.fixture(scope="module")
def c6_float(cantor6):
    return [decompose(sign_instance(cantor6, CANTOR_DIM, 3, s, F)) for s in range(3)]


# brute-force oracle: every pair term from per-atom difference vectors ----------------

def delta_vectors(side):
    return {int(p): np.array(side.expansion.delta_vector(p), dtype=float) for p in side.active}


def oracle_ledger(inst):
    m, A = inst.measure, inst.T.A
    w = m.weights
    M = w[:, None] * A * w[None, :]
    s1, s2 = inst.side1, inst.side2
    d1, d2 = delta_vectors(s1), delta_vectors(s2)
    out = {"direct": float(np.asarray(s2.f, float) @ M @ np.asarray(s1.f, float))}
    out["e1"] = float(s1.expansion.top) * float(np.asarray(s2.f, float) @ M @ np.ones(m.size))
    out["e2"] = float(s2.expansion.top) * float(np.ones(m.size) @ M @ sum(d1.values(), np.zeros(m.size)))
    for name, big, small, db, ds, MM, strict in (("main", s1, s2, d1, d2, M, False),
                                                  ("mirror", s2, s1, d2, d1, M.T, True)):
        tot = {INSIDE: 0.0, SEPARATED: 0.0, NEARBY: 0.0}
        for p, vp in db.items():
            P = big.tree.cube(p)
            for q, vq in ds.items():
                Q = small.tree.cube(q)
                if Q.level > P.level or (strict and Q.level == P.level):
                    continue
                tot[classify_pair(P, Q, inst.ctx.r)] += float(vq @ MM @ vp)
        out[name] = tot
    return out


@pytest.mark.parametrize("seed", range(3))
def test_ledger_matches_oracle(uniform16, seed):
    inst = sign_instance(uniform16, 1.0, 2, seed)
    led = expand_form(inst)
    ora = oracle_ledger(inst)
    assert float(led.direct) == pytest.approx(ora["direct"], rel=1e-12, abs=1e-14)
    assert float(led.e1) == pytest.approx(ora["e1"], rel=1e-12, abs=1e-14)
    assert float(led.e2) == pytest.approx(ora["e2"], rel=1e-12, abs=1e-14)
    for name, tri in (("main", led.main), ("mirror", led.mirror)):
        for cls, key in ((INSIDE, "inside"), (SEPARATED, "separated"), (NEARBY, "nearby")):
            assert float(tri.totals[key]) == pytest.approx(ora[name][cls], rel=1e-10, abs=1e-13)
    assert led.residual <= 1e-12


def test_two_atom_hand_ledger():
    # weights 1/2 at 1/4 and 3/4, K = 1 off the diagonal: <Tf, g> = (f2 g1 + f1 g2) / 4
    m = Measure([(Fraction(1, 4),), (Fraction(3, 4),)], [0.5, 0.5])
    k = constant_kernel(1.0, 1.0, calibrate_dominating(m, 1.0))
    f, g = [3.0, -1.0], [2.0, 5.0]
    for mode in (F, R):
        inst = build_instance(m, k, 1, 0, mode=mode, gamma=0.5, f1=f, f2=g)
        led = expand_form(inst)
        assert led.direct == (f[1] * g[0] + f[0] * g[1]) / 4
        assert led.reconstructed == led.direct if mode == R else led.residual <= 1e-15


def test_zero_kernel_ledger(cantor6):
    k = zero_kernel(1.0, calibrate_dominating(cantor6, CANTOR_DIM))
    res = decompose(build_instance(cantor6, k, 3, 0, gamma=0.99))
    led = res.ledger
    assert led.direct == 0 and led.e1 == 0 and led.e2 == 0
    assert all(v == 0 for tri in (led.main, led.mirror) for v in tri.totals.values())
    assert res.ok
    table = decay_diagnostics(led, res.instance.ctx)
    assert all(row["value"] == 0 for t in table.values() for key in ("stop", "error", "separated") for row in t[key])


# perturbation ----------------------------------------------------------------------

def test_perturb_identities(cantor6):
    inst = sign_instance(cantor6, CANTOR_DIM, 3, 1)
    side = inst.side1
    ft = side.f_tilde
    assert np.allclose(side.f + bad_projection(ft, side.tree, side.good), ft, atol=1e-12)
    # oracle: sum of Delta_Q f~ over bad cubes, built from difference vectors
    ex = expand(side.tree, ft)
    bad = sum((ex.delta_vector(c) for c in range(side.tree.count) if side.tree.children[c] and not side.good[c]),
              np.zeros(cantor6.size))
    assert np.allclose(ft - side.f, bad, atol=1e-12)
    assert np.allclose(perturb(np.full(cantor6.size, 1.5), side.tree, side.good), 1.5)
    fr = arith.vec(np.random.default_rng(0).integers(-9, 9, cantor6.size), R)
    assert all(perturb(fr, side.tree, side.good, R) + bad_projection(fr, side.tree, side.good, R) == fr)


def test_perturb_all_good():
    m = uniform_1d(16)
    side = sign_instance(m, 1.0, 40, 0).side1
    assert side.good.all()
    assert np.array_equal(side.f, side.f_tilde) or np.allclose(side.f, side.f_tilde, atol=1e-15)


# pair classes -----------------------------------------------------------------------

def test_classify_examples():
    e, r = 8, 2
    P = Cube(1, 0, (0,), e)
    assert classify_pair(P, Cube(2, -3, (64,), e), r) == INSIDE          # lP = 2^(r+1) lQ, Q inside
    assert classify_pair(P, Cube(2, -3, (512,), e), r) == SEPARATED      # far away
    assert classify_pair(P, Cube(2, 0, (256,), e), r) == NEARBY          # equal size, touching
    with pytest.raises(PartitionError):
        classify_pair(P, Cube(2, -5, (256,), e), r)                      # tiny cube just outside P
    with pytest.raises(ValueError):
        classify_pair(Cube(1, -1, (0,), e), P, r)


def test_class_matrix_matches_scalar():
    rng = np.random.default_rng(0)
    e = 10
    from czlab.cubes import CubeTree
    from czlab.grid import build_grid
    m = uniform_1d(64)
    t1, t2 = CubeTree(m, build_grid(m.coords, m.exp, 1, 3)), CubeTree(m, build_grid(m.coords, m.exp, 2, 3))
    bi, si = np.arange(t1.count), np.arange(t2.count)
    classes, matches = class_matrix(t1, bi, t2, si, 2, False)
    for a, b in zip(rng.integers(0, t1.count, 400), rng.integers(0, t2.count, 400)):
        P, Q = t1.cube(int(a)), t2.cube(int(b))
        if Q.level > P.level:
            assert classes[a, b] == 0
            continue
        try:
            assert classes[a, b] == classify_pair(P, Q, 2)
        except PartitionError:
            assert matches[a, b] != 1 and classes[a, b] == 0


def test_partition_exhaustive(c6_float, c6_rational):
    for res in c6_float + c6_rational:
        for part in res.ledger.partition.values():
            assert part["violations"] == 0
            assert part["pairs"] == part["inside"] + part["separated"] + part["nearby"]


# identities --------------------------------------------------------------------------

def test_rational_chain_exact(c6_rational):
    for res in c6_rational:
        led = res.ledger
        assert led.exact_match and led.residual == 0
        assert res.failures == [] and res.ok
        for tri in (led.main, led.mirror):
            assert tri.inside.exact and tri.inside.pointwise_failures == 0
            assert tri.epsilon.mismatches == 0 and tri.epsilon.max_abs <= 8
            assert tri.regroup.exact and tri.regroup.tau_invariance_failures == 0
            assert tri.surgery.ok
    # the suite is not vacuous: inside pairs and nearby pairs occur
    assert sum(len(r.ledger.main.inside.records) for r in c6_rational) > 0
    assert sum(r.ledger.main.surgery.pairs for r in c6_rational) > 0


def test_float_chain(c6_float, c6_rational):
    for fl, ra in zip(c6_float, c6_rational):
        assert fl.ok, fl.failures
        assert fl.ledger.residual <= 1e-9
        assert float(fl.ledger.direct) == pytest.approx(float(ra.ledger.direct), rel=1e-12)


def test_inside_records_against_oracle(c6_float):
    res = c6_float[0]
    inst = res.instance
    w = inst.measure.weights
    M = w[:, None] * inst.T.A * w[None, :]
    tri = res.ledger.main
    tb = tri.big.tree
    for rec in tri.inside.records[:60]:
        dq = np.array(tri.small.expansion.delta_vector(rec.Q), dtype=float)
        one = lambda ids: np.isin(np.arange(inst.measure.size), ids).astype(float)
        para = rec.a * dq @ M @ one(tb.atoms(rec.S))
        stop = rec.a * dq @ M @ one(np.setdiff1d(tb.atoms(rec.S), tb.atoms(rec.PQ)))
        err = sum(tri.big.expansion.coef[c] * dq @ M @ one(tb.atoms(c)) for c in tb.children[rec.P] if c != rec.PQ)
        assert rec.para == pytest.approx(para, rel=1e-10, abs=1e-15)
        assert rec.stop == pytest.approx(stop, rel=1e-10, abs=1e-15)
        assert rec.error == pytest.approx(err, rel=1e-10, abs=1e-15)
        assert rec.para - rec.stop + rec.error == pytest.approx(float(tri.value(rec.P, rec.Q)), rel=1e-9, abs=1e-15)


def test_epsilon_telescoping_exact(c6_rational):
    for res in c6_rational:
        eps = res.ledger.main.epsilon
        for key, v in eps.products.items():
            assert v == eps.telescoped[key]


def test_no_inside_pairs_gives_zero(uniform16):
    # r so large that no good pair can be inside
    res = decompose(sign_instance(uniform16, 1.0, 40, 0))
    for tri in (res.ledger.main, res.ledger.mirror):
        assert tri.inside.records == []
        assert tri.inside.para == tri.inside.stop == tri.inside.error == 0
        assert tri.regroup.regrouped == 0
        assert tri.epsilon.values == {}
    assert res.ok


# surgery -------------------------------------------------------------------------------

def test_layer_exponent():
    assert layer_exponent(Fraction(1, 4)) == -8
    assert layer_exponent(Fraction(1, 2)) == -7
    assert layer_exponent(Fraction(3, 8)) == -7
    with pytest.raises(ValueError):
        layer_exponent(1)


@pytest.mark.parametrize("mode", [F, R])
@pytest.mark.parametrize("r", [2, 3])
def test_surgery_uniform64(mode, r):
    inst = sign_instance(uniform_1d(64), 1.0, r, 2, mode)
    led = expand_form(inst)
    eng = Pairing(inst.T, mode)
    rep = nearby_surgery(eng, led.main, inst.grid3, Fraction(1, 4), Fraction(1, 8))
    assert rep.pairs > 0 and rep.cells >= rep.pairs
    assert rep.ok, rep.failures


def test_surgery_disjoint_cells_give_zero(cantor6):
    inst = sign_instance(cantor6, CANTOR_DIM, 3, 0, R)
    led = expand_form(inst)
    eng = Pairing(inst.T, R)
    tri = led.main
    seen = 0
    for p, q in tri.pairs_of(NEARBY):
        for i in tri.small.tree.children[q]:
            for j in tri.big.tree.children[p]:
                ss = surgery(eng, tri.big.tree, tri.small.tree, p, q, i, j, Fraction(1, 4), Fraction(1, 8), inst.grid3)
                assert ss.ok
                if len(ss.sets["intersection"]) == 0:
                    seen += 1
                    assert ss.values["M3"] == 0
                    assert ss.values["alpha1"] == ss.values["alpha2"] == ss.values["alpha3"] == 0
    assert seen > 0


def test_collar_monotone():
    m = uniform_1d(256)
    cube = Cube(1, -3, (3 << (m.exp - 3),), m.exp)
    prev = np.zeros(m.size, dtype=bool)
    for u in (Fraction(1, 16), Fraction(1, 8), Fraction(1, 4), Fraction(1, 2), Fraction(3, 4)):
        cur = collar_mask(m.coords, cube, u)
        assert np.all(cur[prev])
        prev = cur
    # half-width 1/4 collar of [3/8, 1/2): |x - 7/16| in (3/64, 5/64]
    x = m.positions()[:, 0]
    expect = (np.abs(x - 7 / 16) <= 5 / 64) & (np.abs(x - 7 / 16) > 3 / 64)
    assert np.array_equal(collar_mask(m.coords, cube, Fraction(1, 4)), expect)


# engine --------------------------------------------------------------------------------

def test_exact_pairing_matches_fractions(uniform16):
    inst = sign_instance(uniform16, 1.0, 2, 0)
    eng = Pairing(inst.T, R)
    rng = np.random.default_rng(0)
    A = inst.T.exact()
    w = arith.vec(uniform16.weights, R)
    for _ in range(5):
        src = rng.integers(0, 2, (16, 3)).astype(np.int8)
        tst = rng.integers(0, 2, (16, 2)).astype(np.int8)
        got = eng.pairs(src, tst)
        for a in range(3):
            for b in range(2):
                ref = sum(w[x] * A[x, y] * w[y] for x in range(16) for y in range(16) if tst[x, b] and src[y, a])
                assert got[b, a] == ref
    assert eng.transpose().transpose().ints is not None


def test_rational_size_limit():
    m = uniform_1d(4096)
    k = constant_kernel(1.0)
    from czlab.operator import kernel_matrix
    assert m.size > EXACT_MAX_ATOMS
    with pytest.raises(ValueError):
        Pairing(kernel_matrix(m, k), R)


# decay -----------------------------------------------------------------------------------

def test_decay_table(c6_float):
    res = c6_float[0]
    table = decay_diagnostics(res.ledger, res.instance.ctx)
    assert set(table) == {"main", "mirror"}
    assert all(t["finite"] for t in table.values())
    assert any(t["separated"] for t in table.values())
    for res in c6_float:
        ctx = res.instance.ctx
        for t in decay_diagnostics(res.ledger, ctx).values():
            fit = t["fit_stop"]["fitted_exponent"]
            assert fit is not None and fit >= ctx.eta * (1 - ctx.gamma) - 0.25
    text = decay_csv(table)
    assert text.splitlines()[0] == "triangle,term,t_or_u,m,value,envelope"


def test_result_serialises(c6_rational):
    d = c6_rational[0].to_dict()
    assert d["ledger"]["exact_match"] is True
    assert isinstance(c6_rational[0], DecompositionResult)
