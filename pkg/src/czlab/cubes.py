"""The finite tree of positive-measure cubes of one grid over one measure."""
from __future__ import annotations

import numpy as np

from .grid import Cube, DyadicGrid, GridRangeError
from .measure import Measure


class ResolutionError(ValueError):
    pass


class CubeTree:
    """Cubes of ``grid`` with mu(Q) > 0, from the top cube down to the level
    at which every cube holds a single atom.

    Cube ids are assigned level by level from the top; ``level_ids[i]`` lists the
    ids at ``levels[i]`` and ``atom_cube[i][a]`` is the id of the cube holding atom a.
    """

    def __init__(self, measure: Measure, grid: DyadicGrid):
        if grid.top is None:
            raise ValueError("grid has no top cube")
        if grid.exp != measure.exp:
            raise ValueError("grid and measure use different precision")
        self.measure = measure
        self.grid = grid
        self.exp = grid.exp
        pts = measure.coords
        levels, atom_cube, level_ids = [], [], []
        anchors, cube_level, parent, mass = [], [], [], []
        prev = None
        level = grid.top.level
        w = measure.weights
        while True:
            if level < grid.k_min:
                raise ResolutionError("atoms not separated within the grid's level range")
            a = grid.anchors_units(pts, level)
            uniq, inv = np.unique(a, axis=0, return_inverse=True)
            inv = inv.reshape(-1)
            # keep ids in first-atom order for determinism independent of unique's sort
            base = len(cube_level)
            ids = base + inv
            levels.append(level)
            atom_cube.append(ids)
            level_ids.append(np.arange(base, base + len(uniq)))
            for k in range(len(uniq)):
                anchors.append(tuple(int(v) for v in uniq[k]))
                cube_level.append(level)
            mass.extend(np.bincount(inv, weights=w, minlength=len(uniq)).tolist())
            if prev is None:
                parent.extend([-1] * len(uniq))
            else:
                par = np.full(len(uniq), -1)
                par[inv] = prev
                parent.extend(par.tolist())
            prev = ids
            if len(uniq) == measure.size:
                break
            level -= 1
        self.levels = levels
        self.atom_cube = atom_cube
        self.level_ids = level_ids
        self.anchor = np.array(anchors, dtype=np.int64).reshape(len(anchors), measure.n)
        self.level = np.array(cube_level, dtype=np.int64)
        self.parent = np.array(parent, dtype=np.int64)
        self.mass = np.array(mass)
        self.count = len(cube_level)
        self.finest = levels[-1]
        self.top_level = levels[0]
        children = [[] for _ in range(self.count)]
        for c in range(self.count):
            p = self.parent[c]
            if p >= 0:
                children[p].append(c)
        self.children = children
        self.n_atoms = np.bincount(np.concatenate(atom_cube), minlength=self.count)
        self._atoms = None
        self._index = {(int(self.level[c]), tuple(self.anchor[c].tolist())): c for c in range(self.count)}

    def level_index(self, level: int) -> int:
        return self.top_level - level

    def atoms(self, c: int) -> np.ndarray:
        if self._atoms is None:
            out = [None] * self.count
            for i, ids in enumerate(self.atom_cube):
                order = np.argsort(ids, kind="stable")
                sorted_ids = ids[order]
                bounds = np.searchsorted(sorted_ids, self.level_ids[i])
                ends = np.append(bounds[1:], len(ids))
                for k, cid in enumerate(self.level_ids[i]):
                    out[cid] = np.sort(order[bounds[k]:ends[k]])
            self._atoms = out
        return self._atoms[c]

    def cube(self, c: int) -> Cube:
        return Cube(self.grid.j, int(self.level[c]), tuple(int(v) for v in self.anchor[c]), self.exp)

    def find(self, q: Cube) -> int | None:
        return self._index.get((q.level, tuple(q.anchor)))

    def ancestor(self, c: int, t: int) -> int:
        for _ in range(t):
            c = int(self.parent[c])
            if c < 0:
                raise GridRangeError("ancestor above the top cube")
        return c

    def indicator(self, c: int) -> np.ndarray:
        v = np.zeros(self.measure.size)
        v[self.atoms(c)] = 1.0
        return v

    def indicator_matrix(self, ids=None) -> np.ndarray:
        """Atom x cube 0/1 matrix."""
        ids = np.arange(self.count) if ids is None else np.asarray(ids)
        pos = {int(c): k for k, c in enumerate(ids)}
        out = np.zeros((self.measure.size, len(ids)))
        for i, level_map in enumerate(self.atom_cube):
            for a, c in enumerate(level_map):
                k = pos.get(int(c))
                if k is not None:
                    out[a, k] = 1.0
        return out

    def is_ancestor(self, a: int, c: int) -> bool:
        """a contains c (a == c allowed)."""
        la = int(self.level[a])
        if la < self.level[c]:
            return False
        return self.ancestor(c, la - int(self.level[c])) == a
