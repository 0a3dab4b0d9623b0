"""Distinct-index U-statistics: brute force, fast chain contraction, degeneration.

V_n of an m-ary kernel is the average of the kernel over all ordered tuples of
distinct sample indices.  For chain-product kernels

    a_{i1}^T M^{(1)}_{i2} ... M^{(m-2)}_{i_{m-1}} b_{im}

the distinct-index sum is recovered from unrestricted sums by Mobius inversion on
the lattice of set partitions: every partition pi of the positions assigns one
free sample index per block, A(pi) is a single tensor contraction, and

    D = sum_pi mu(pi) A(pi),   mu(pi) = prod_B (-1)^{|B|-1} (|B|-1)!.

Mid matrices of the structured form w_i L_i R_i^T - S are expanded so that the
per-sample tensors are never materialized; a constant factor S occupying a
position lets that position drop out of the index set (the average of a kernel
that ignores one argument is the lower-order average of the remaining ones).
"""

from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

MAX_CHAIN_ORDER = 6
BRUTE_BUDGET = 5_000_000
_CHAIN_LETTERS = "abcdefghij"
_SAMPLE_LETTERS = "nopqrstuvw"
_FLOP_RE = re.compile(r"Optimized FLOP count:\s*([0-9.eE+]+)")


@dataclass(frozen=True)
class RankOneMid:
    """Per-sample mid matrix w_i L_i R_i^T - S without forming the n x k x k tensor.

    ``w`` has shape (n,), ``left`` (n, k_in), ``right`` (n, k_out) and ``shift``
    is a constant (k_in, k_out) matrix or None for no shift.
    """

    w: np.ndarray
    left: np.ndarray
    right: np.ndarray
    shift: np.ndarray | None = None

    @property
    def shape_in(self) -> int:
        return self.left.shape[1]

    @property
    def shape_out(self) -> int:
        return self.right.shape[1]

    def dense(self) -> np.ndarray:
        mats = self.w[:, None, None] * self.left[:, :, None] * self.right[:, None, :]
        if self.shift is not None:
            mats = mats - self.shift[None, :, :]
        return mats


@dataclass(frozen=True)
class ChainKernel:
    """Chain-product kernel head_{i1}^T mid_{i2} ... tail_{im}.

    ``mids`` entries are either dense arrays of shape (n, k_u, k_{u+1}) or
    :class:`RankOneMid` instances.
    """

    head: np.ndarray
    tail: np.ndarray
    mids: tuple = ()

    def __post_init__(self):
        head = np.asarray(self.head, dtype=float)
        tail = np.asarray(self.tail, dtype=float)
        if head.ndim != 2 or tail.ndim != 2:
            raise ValueError("head and tail must be (n, k) arrays")
        n = head.shape[0]
        if tail.shape[0] != n:
            raise ValueError("head and tail disagree on the sample size")
        width = head.shape[1]
        mids = []
        for mid in self.mids:
            if isinstance(mid, RankOneMid):
                if mid.left.shape[0] != n or mid.right.shape[0] != n or mid.w.shape != (n,):
                    raise ValueError("structured mid has wrong sample size")
                if mid.shift is not None and mid.shift.shape != (mid.shape_in, mid.shape_out):
                    raise ValueError("structured mid shift has wrong shape")
                k_in, k_out = mid.shape_in, mid.shape_out
            else:
                mid = np.asarray(mid, dtype=float)
                if mid.ndim != 3 or mid.shape[0] != n:
                    raise ValueError("dense mid must be an (n, k_in, k_out) array")
                k_in, k_out = mid.shape[1], mid.shape[2]
            if k_in != width:
                raise ValueError(f"chain shape mismatch: {width} feeds a mid expecting {k_in}")
            width = k_out
            mids.append(mid)
        if width != tail.shape[1]:
            raise ValueError(f"chain shape mismatch: {width} feeds a tail of width {tail.shape[1]}")
        object.__setattr__(self, "head", head)
        object.__setattr__(self, "tail", tail)
        object.__setattr__(self, "mids", tuple(mids))

    @property
    def m(self) -> int:
        return len(self.mids) + 2

    @property
    def n(self) -> int:
        return self.head.shape[0]

    def evaluate(self, *idx) -> np.ndarray:
        """Kernel value at (possibly batched) index arrays, one per position."""
        if len(idx) != self.m:
            raise ValueError("wrong number of indices")
        vec = self.head[idx[0]]
        for mid, i in zip(self.mids, idx[1:-1]):
            if isinstance(mid, RankOneMid):
                coef = mid.w[i] * np.sum(vec * mid.left[i], axis=-1)
                new = coef[..., None] * mid.right[i]
                if mid.shift is not None:
                    new = new - vec @ mid.shift
                vec = new
            else:
                vec = np.einsum("...x,...xy->...y", vec, mid[i])
        return np.sum(vec * self.tail[idx[-1]], axis=-1)


@dataclass
class OpCounter:
    """Accumulates the contraction cost reported by ``numpy.einsum_path``."""

    flops: float = 0.0
    contractions: int = 0
    terms: list = field(default_factory=list)

    def add(self, flops: float) -> None:
        self.flops += flops
        self.contractions += 1


def set_partitions(items: Sequence) -> list[list[list]]:
    """All set partitions of ``items`` in a fixed, deterministic order."""
    items = list(items)
    if not items:
        return [[]]
    first, rest = items[0], items[1:]
    out = []
    for part in set_partitions(rest):
        out.append([[first]] + part)
        for i in range(len(part)):
            out.append(part[:i] + [[first] + part[i]] + part[i + 1:])
    return out


def mobius_coefficient(partition: Sequence[Sequence]) -> int:
    """mu(0, pi) on the partition lattice."""
    coef = 1
    for block in partition:
        size = len(block)
        coef *= (-1) ** (size - 1) * math.factorial(size - 1)
    return coef


_PARTITION_CACHE: dict[int, list] = {}


def _partitions_with_mobius(r: int) -> list:
    if r not in _PARTITION_CACHE:
        parts = set_partitions(range(r))
        _PARTITION_CACHE[r] = [(mobius_coefficient(p), p) for p in parts]
    return _PARTITION_CACHE[r]


def falling_factorial(n: int, r: int) -> float:
    out = 1.0
    for i in range(r):
        out *= n - i
    return out


def _contract(subscripts: str, operands: list, counter: OpCounter | None) -> float:
    # indices carried by a single operand are summed out first; einsum's path
    # search never does this and would otherwise pay for an n x n intermediate
    inputs = subscripts.split("->")[0].split(",")
    counts: dict = {}
    for sub in inputs:
        for c in sub:
            counts[c] = counts.get(c, 0) + 1
    reduced_subs, reduced_ops = [], []
    for sub, op in zip(inputs, operands):
        keep = "".join(c for c in sub if counts[c] > 1)
        if keep != sub:
            if counter is not None:
                counter.add(float(np.size(op)))
            op = np.einsum(f"{sub}->{keep}", op)
        reduced_subs.append(keep)
        reduced_ops.append(op)
    subscripts = ",".join(reduced_subs) + "->"
    if counter is not None:
        _, info = np.einsum_path(subscripts, *reduced_ops, optimize="greedy")
        match = _FLOP_RE.search(info)
        counter.add(float(match.group(1)) if match else 0.0)
    return float(np.einsum(subscripts, *reduced_ops, optimize="greedy"))


def _expand_terms(kernel: ChainKernel) -> list:
    """Expand structured shifts into (sign, position-operands) terms.

    Each term is a list with one entry per chain position: either
    ("sample", [(array, chain-letters), ...]) or ("const", (matrix, chain-letters)).
    """
    m = kernel.m
    positions = []
    positions.append([("sample", [(kernel.head, _CHAIN_LETTERS[0])])])
    for u, mid in enumerate(kernel.mids, start=1):
        lin, lout = _CHAIN_LETTERS[u - 1], _CHAIN_LETTERS[u]
        if isinstance(mid, RankOneMid):
            options = [(1, ("sample", [(mid.w, ""), (mid.left, lin), (mid.right, lout)]))]
            if mid.shift is not None:
                options.append((-1, ("const", (mid.shift, lin + lout))))
            positions.append(options)
        else:
            positions.append([(1, ("sample", [(mid, lin + lout)]))])
    positions.append([("sample", [(kernel.tail, _CHAIN_LETTERS[m - 2])])])
    head_opt = [(1, positions[0][0])]
    tail_opt = [(1, positions[-1][0])]
    choices = [head_opt] + positions[1:-1] + [tail_opt]
    terms = []
    for combo in itertools.product(*choices):
        sign = 1
        term = []
        for s, entry in combo:
            sign *= s
            term.append(entry)
        terms.append((sign, term))
    return terms


def vn_chain(kernel: ChainKernel, n: int | None = None, counter: OpCounter | None = None) -> float:
    """Exact V_n of a chain kernel via partition-lattice inclusion-exclusion."""
    m = kernel.m
    if m > MAX_CHAIN_ORDER:
        raise ValueError(f"chain order {m} exceeds the supported maximum {MAX_CHAIN_ORDER}")
    n_obs = kernel.n
    if n is not None and n != n_obs:
        raise ValueError("n does not match the kernel's sample size")
    if n_obs < m:
        raise ValueError(f"need n >= m, got n={n_obs}, m={m}")
    total = 0.0
    for sign, term in _expand_terms(kernel):
        sample_pos = [entry[1] for entry in term if entry[0] == "sample"]
        consts = [entry[1] for entry in term if entry[0] == "const"]
        r = len(sample_pos)
        distinct = 0.0
        for mu, partition in _partitions_with_mobius(r):
            operands, subs = [], []
            for b, block in enumerate(partition):
                letter = _SAMPLE_LETTERS[b]
                for pos in block:
                    for arr, chain in sample_pos[pos]:
                        operands.append(arr)
                        subs.append(letter + chain)
            for mat, chain in consts:
                operands.append(mat)
                subs.append(chain)
            distinct += mu * _contract(",".join(subs) + "->", operands, counter)
        total += sign * distinct / falling_factorial(n_obs, r)
    return total


def vn_brute(kernel: Callable, data: Sequence, m: int) -> float:
    """V_n by enumerating every ordered tuple of distinct indices."""
    n = len(data)
    if m < 1:
        raise ValueError("m must be positive")
    if n < m:
        raise ValueError(f"need n >= m, got n={n}, m={m}")
    if not (n <= 14 or m <= 3):
        raise ValueError("brute-force enumeration restricted to n <= 14 or m <= 3")
    count = falling_factorial(n, m)
    if count > BRUTE_BUDGET:
        raise ValueError(f"enumeration budget exceeded: {count:.0f} tuples")
    total = 0.0
    for tup in itertools.permutations(range(n), m):
        total += kernel(*(data[i] for i in tup))
    return total / count


def chain_kernel_function(kernel: ChainKernel) -> Callable:
    """The chain kernel as an ordinary function of sample indices."""

    def func(*idx):
        return float(kernel.evaluate(*[np.asarray(i) for i in idx]))

    return func


@dataclass(frozen=True)
class DiscreteLaw:
    """A finite distribution over arbitrary atoms."""

    atoms: tuple
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if probs.ndim != 1 or len(probs) != len(self.atoms):
            raise ValueError("probs must match atoms")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError("probabilities must be nonnegative and sum to one")
        object.__setattr__(self, "atoms", tuple(self.atoms))
        object.__setattr__(self, "probs", probs)

    def __len__(self) -> int:
        return len(self.atoms)


@dataclass(frozen=True)
class TabulatedKernel:
    """A kernel stored as a table over atom indices of a discrete law."""

    table: np.ndarray
    law: DiscreteLaw

    def index_of(self, obs) -> int:
        for i, atom in enumerate(self.law.atoms):
            if np.array_equal(np.asarray(atom, dtype=object), np.asarray(obs, dtype=object)):
                return i
        raise KeyError(f"{obs!r} is not an atom of the reference law")

    def __call__(self, *obs) -> float:
        return float(self.table[tuple(self.index_of(o) for o in obs)])

    def conditional_mean(self, keep: Sequence[int]) -> np.ndarray:
        """E[kernel | arguments in ``keep``] as a table over those arguments."""
        out = self.table
        m = self.table.ndim
        for axis in sorted(set(range(m)) - set(keep), reverse=True):
            out = np.tensordot(out, self.law.probs, axes=([axis], [0]))
        return out


def tabulate(kernel: Callable, law: DiscreteLaw, m: int) -> np.ndarray:
    size = len(law)
    if size**m > 2**25:
        raise ValueError("tabulation budget exceeded")
    table = np.empty((size,) * m)
    for idx in itertools.product(range(size), repeat=m):
        table[idx] = kernel(*(law.atoms[i] for i in idx))
    return table


def degenerate_project(kernel: Callable, ref: DiscreteLaw, m: int) -> TabulatedKernel:
    """Hoeffding degeneration d_m: apply (I - E_u) to every argument u.

    The product over arguments of (I - E_u) expands into the alternating sum of
    conditional expectations given each subset of the arguments.
    """
    if not isinstance(ref, DiscreteLaw):
        raise TypeError("degenerate_project needs a discrete reference law")
    table = tabulate(kernel, ref, m)
    for axis in range(m):
        mean = np.tensordot(table, ref.probs, axes=([axis], [0]))
        table = table - np.expand_dims(mean, axis)
    return TabulatedKernel(table, ref)


def max_conditional_mean(table: np.ndarray, probs: np.ndarray) -> float:
    """Largest |E[kernel | all but one argument]| of a tabulated kernel."""
    worst = 0.0
    for axis in range(table.ndim):
        mean = np.tensordot(table, probs, axes=([axis], [0]))
        worst = max(worst, float(np.max(np.abs(mean))) if mean.size else abs(float(mean)))
    return worst
