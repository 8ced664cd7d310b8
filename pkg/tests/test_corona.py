import numpy as np
import pytest

from czlab import arith
from czlab.corona import (WHOLE, brute_force_stopping, build_stopping_tree, carleson_ratio, coronal_projection,
                          layer_families, projection_partition, projection_sum_ratio, quasi_orthogonality,
                          sigma_estimate_violations, sparseness_violations)
from czlab.cubes import CubeTree
from czlab.goodness import GoodnessContext, classify_tree
from czlab.grid import build_grid
from czlab.martingale import expand, lp_norm, reconstruct
from czlab.measure import uniform_1d


def setting(m, seed=0, r=3, gamma=0.99):
    g1 = build_grid(m.coords, m.exp, 1, seed)
    g2 = build_grid(m.coords, m.exp, 2, seed)
    ctx = GoodnessContext(r, gamma, 1.0, 1.0).with_grids(g1, g2)
    t1, t2 = CubeTree(m, g1), CubeTree(m, g2)
    return t1, t2, classify_tree(t1, ctx)[0], classify_tree(t2, ctx)[0]


def random_fs(m, k, seed):
    rng = np.random.default_rng(seed)
    for _ in range(k):
        yield rng.standard_normal(m.size) * rng.exponential(1, m.size) ** 3


def test_constant_function_roots_only(cantor6):
    t1, _, good, _ = setting(cantor6)
    st = build_stopping_tree(np.full(cantor6.size, 2.0), t1, good)
    assert st.roots and st.cubes == st.roots
    assert all(st.parent[s] == WHOLE for s in st.roots)
    lhs, rhs, _ = quasi_orthogonality(st, np.full(cantor6.size, 2.0), 2.0)
    assert lhs == pytest.approx(4.0 * sum(t1.mass[s] for s in st.roots))
    assert lhs <= rhs


def test_roots_are_maximal_good(cantor6):
    t1, _, good, _ = setting(cantor6, 2)
    st = build_stopping_tree(np.ones(cantor6.size), t1, good)
    for s in st.roots:
        assert good[s]
        p = t1.parent[s]
        while p >= 0:
            assert not good[p]
            p = t1.parent[p]


def test_spike_matches_brute_force(uniform16):
    t1, _, good, _ = setting(uniform16, 1, r=2)
    for a in range(16):
        f = np.zeros(16)
        f[a] = 1.0
        st = build_stopping_tree(f, t1, good)
        assert set(st.cubes) == brute_force_stopping(f, t1, good)


@pytest.mark.parametrize("seed", range(4))
def test_random_trees_match_brute_force(cantor6, seed):
    t1, _, good, _ = setting(cantor6, seed)
    for f in random_fs(cantor6, 5, seed):
        st = build_stopping_tree(f, t1, good)
        assert set(st.cubes) == brute_force_stopping(f, t1, good)


def test_sparseness_carleson_quasi(cantor6):
    t1, _, good, _ = setting(cantor6, 5)
    for f in random_fs(cantor6, 100, 11):
        st = build_stopping_tree(f, t1, good)
        assert sparseness_violations(st) == []
        if st.cubes:
            assert carleson_ratio(st) <= 4 / 3 + 1e-12
        lhs, rhs, _ = quasi_orthogonality(st, f, 1.5)
        assert lhs <= rhs
        assert sigma_estimate_violations(st, f, good) == []


def test_rational_tree_matches_float(cantor6):
    t1, _, good, _ = setting(cantor6, 6)
    f = np.random.default_rng(0).integers(-30, 30, cantor6.size)
    a = build_stopping_tree(f, t1, good)
    b = build_stopping_tree(f, t1, good, arith.RATIONAL)
    assert a.cubes == b.cubes


def test_stopping_parent_against_scan(cantor6):
    t1, _, good, _ = setting(cantor6, 7)
    f = next(random_fs(cantor6, 1, 7))
    st = build_stopping_tree(f, t1, good)
    for c in range(t1.count):
        holders = [s for s in st.cubes if s == c or t1.is_ancestor(s, c)]
        expect = max(holders, key=lambda s: -int(t1.level[s])) if holders else WHOLE
        assert st.stopping_parent(c) == expect
        if st.is_stopping(c):
            assert st.stopping_parent(c) == c
            assert st.stopping_parent(c, 1) == st.parent[c]
    deep = max(st.depth.values(), default=0) + 2
    assert all(st.stopping_parent(s, deep) == WHOLE for s in st.cubes)


def test_order_independence(cantor6):
    perm = np.random.default_rng(3).permutation(cantor6.size)
    other = cantor6.permuted(perm)
    f = next(random_fs(cantor6, 1, 3))
    t1, _, good, _ = setting(cantor6, 8)
    u1, _, good_u, _ = setting(other, 8)
    a = build_stopping_tree(f, t1, good)
    b = build_stopping_tree(f[perm], u1, good_u)
    assert sorted(a.dump().splitlines()) == sorted(b.dump().splitlines())


def test_projections(cantor6):
    t1, _, good, _ = setting(cantor6, 9)
    for f in random_fs(cantor6, 10, 9):
        st = build_stopping_tree(f, t1, good)
        ex = expand(t1, f)
        parts = projection_partition(st, ex)
        total = ex.top + sum(parts.values())
        assert np.allclose(total, f, atol=1e-10)
        for s in st.cubes:
            assert np.allclose(coronal_projection(st, ex, s), parts.get(s, 0.0))
        assert projection_sum_ratio(st, ex, f, 2.0) <= 1 + 1e-12
    st = build_stopping_tree(np.ones(cantor6.size), t1, good)
    ex = expand(t1, np.ones(cantor6.size))
    assert all(np.allclose(coronal_projection(st, ex, s), 0) for s in st.cubes)


def test_projections_exact(uniform16):
    t1, _, good, _ = setting(uniform16, 2, r=2)
    f = arith.vec(np.random.default_rng(2).integers(-9, 9, 16), arith.RATIONAL)
    st = build_stopping_tree(f, t1, good, arith.RATIONAL)
    ex = expand(t1, f, arith.RATIONAL)
    assert all(ex.top + sum(projection_partition(st, ex).values()) == f)


def layers_oracle(st1, st2, triples):
    """Family and layer indices straight from cube geometry."""
    t1, t2 = st1.tree, st2.tree

    def minimal(st, tree, c):
        cube = tree.cube(c)
        holders = [s for s in st.cubes if tree.cube(s).contains_cube(cube)]
        return min(holders, key=lambda s: tree.level[s]) if holders else WHOLE

    fam = {}
    for _p, q, pq in triples:
        s, rr = minimal(st1, t1, pq), minimal(st2, t2, q)
        if WHOLE not in (s, rr):
            fam.setdefault(s, set()).add(rr)
    return {s: {rr: sum(1 for x in mem if x != rr and t2.cube(x).contains_cube(t2.cube(rr))) for rr in mem}
            for s, mem in fam.items()}


def test_layers_against_oracle():
    m = uniform_1d(64)
    for seed in range(3):
        t1, t2, g1, g2 = setting(m, seed, r=2)
        f1, f2 = list(random_fs(m, 2, seed))
        st1, st2 = build_stopping_tree(f1, t1, g1), build_stopping_tree(f2, t2, g2)
        rng = np.random.default_rng(seed)
        triples = [(0, int(q), int(p)) for q, p in zip(rng.integers(0, t2.count, 300), rng.integers(0, t1.count, 300))]
        fams = layer_families(st1, st2, triples, 2)
        assert {s: f.members for s, f in fams.items()} == layers_oracle(st1, st2, triples)
    assert layer_families(st1, st2, [], 2) == {}
