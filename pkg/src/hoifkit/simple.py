"""Elementary comparison estimators: the sorted-difference estimator of
E[cov(A, Y | X)] and the subcube pair estimators of sigma^2 and tau."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from hoifkit.model import Dataset


def _columns(data):
    if isinstance(data, Dataset):
        return data.y, data.a, data.x
    y, a, x = data
    x = np.asarray(x, dtype=float)
    return np.asarray(y, dtype=float), None if a is None else np.asarray(a, dtype=float), x.reshape(len(x), -1)


def difference_estimator(data, return_info: bool = False):
    """N^{-1} sum over consecutive sorted pairs of (Y_{2i+1} - Y_{2i})(A_{2i+1} - A_{2i}).

    Observations are sorted by X (ties by original index).  With an odd sample
    size the last sorted observation is dropped and the drop is reported.
    """
    y, a, x = _columns(data)
    if x.shape[1] != 1:
        raise ValueError("the difference estimator needs one-dimensional X")
    if a is None:
        raise ValueError("the difference estimator needs A")
    order = np.argsort(x[:, 0], kind="stable")
    dropped = len(order) % 2 == 1
    if dropped:
        order = order[:-1]
    N = len(order)
    if N < 2:
        raise ValueError("need at least two observations")
    ys, as_ = y[order], a[order]
    value = float(np.sum((ys[1::2] - ys[0::2]) * (as_[1::2] - as_[0::2])) / N)
    if return_info:
        return value, {"N": N, "dropped_last": dropped}
    return value


@dataclass(frozen=True)
class SubcubeIndex:
    """Partition of [0, 1]^d into k = m^d equal cubes.

    Observation indices are grouped by cube: the occupants of ``cubes[c]`` are
    ``order[starts[c]:starts[c] + counts[c]]`` in increasing index order.
    """

    k: int
    d: int
    per_axis: int
    cube_of: np.ndarray
    cubes: np.ndarray
    order: np.ndarray
    starts: np.ndarray
    counts: np.ndarray

    @classmethod
    def build(cls, x, k: int) -> "SubcubeIndex":
        x = np.asarray(x, dtype=float)
        x = x.reshape(len(x), -1)
        d = x.shape[1]
        if k < 1:
            raise ValueError("k must be at least 1")
        m = int(round(k ** (1.0 / d)))
        if m**d != k:
            raise ValueError(f"k={k} is not a perfect power of the dimension {d}")
        cell = np.minimum(np.floor(x * m).astype(np.int64), m - 1)
        cube = np.zeros(len(x), dtype=np.int64)
        for j in range(d):
            cube = cube * m + cell[:, j]
        order = np.argsort(cube, kind="stable")
        cubes, starts, counts = np.unique(cube[order], return_index=True, return_counts=True)
        return cls(k, d, m, cube, cubes, order, starts, counts)

    def occupants(self, cube: int) -> np.ndarray:
        pos = np.searchsorted(self.cubes, cube)
        if pos == len(self.cubes) or self.cubes[pos] != cube:
            return np.empty(0, dtype=np.int64)
        return self.order[self.starts[pos]:self.starts[pos] + self.counts[pos]]

    def qualifying(self) -> list[int]:
        """Cubes with at least two occupants, in increasing cube order."""
        return [int(c) for c in self.cubes[self.counts >= 2]]

    def pairs(self, rng: np.random.Generator | None = None) -> np.ndarray:
        """One (i, j) pair per qualifying cube; cubes with more than two occupants
        draw their pair without replacement from ``rng``."""
        sel = np.flatnonzero(self.counts >= 2)
        out = np.empty((len(sel), 2), dtype=np.int64)
        out[:, 0] = self.order[self.starts[sel]]
        out[:, 1] = self.order[self.starts[sel] + 1]
        crowded = np.flatnonzero(self.counts[sel] > 2)
        if len(crowded) and rng is None:
            raise ValueError("a generator is needed for cubes with more than two occupants")
        for row in crowded:
            c = sel[row]
            members = self.order[self.starts[c]:self.starts[c] + self.counts[c]]
            out[row] = rng.choice(members, size=2, replace=False)
        return out


def recommended_subcubes(n: int, beta: float, d: int = 1) -> int:
    """k = n^{2/(1 + 4 beta/d)} rounded to a perfect d-th power."""
    s = beta / d
    m = max(1, int(round(n ** (2.0 / (1.0 + 4.0 * s) / d))))
    return m**d


def subcube_variance(data, k: int, rng: np.random.Generator | None = None) -> float:
    """Average of (Y_i - Y_j)^2 / 2 over one pair in every cube with two or more observations."""
    y, _, x = _columns(data)
    pairs = SubcubeIndex.build(x, k).pairs(rng)
    if len(pairs) == 0:
        raise ValueError("no subcube holds two observations")
    diff = y[pairs[:, 0]] - y[pairs[:, 1]]
    return float(np.mean(diff**2 / 2.0))


def subcube_tau(data, k: int, rng: np.random.Generator | None = None) -> float:
    """Root in tau of sum over pairs {Y_i - Y_j - tau (A_i - A_j)}(A_i - A_j) / 2."""
    y, a, x = _columns(data)
    if a is None:
        raise ValueError("subcube tau needs A")
    pairs = SubcubeIndex.build(x, k).pairs(rng)
    if len(pairs) == 0:
        raise ValueError("no subcube holds two observations")
    da = a[pairs[:, 0]] - a[pairs[:, 1]]
    dy = y[pairs[:, 0]] - y[pairs[:, 1]]
    den = float(np.sum(da**2))
    if den == 0.0 or not math.isfinite(den):
        raise ValueError("no treatment variation within any qualifying subcube")
    return float(np.sum(dy * da) / den)
