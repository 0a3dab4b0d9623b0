"""Ordered tensor-product bases, orthonormalization under a fitted density,
and per-sample design rows.

Haar ordering (any d): the constant father first, then resolution levels
j = 0, 1, ... in increasing order.  Within a level the 2^d - 1 tensor types
(tuples over {father, mother} with at least one mother) come in lexicographic
order, and within a type the translations are lexicographic.  The first
2^{d(j+1)} functions therefore span the piecewise constants on the dyadic grid
of side 2^{-(j+1)}, and every k is realized by truncation.

Polynomial ordering: products of shifted Legendre polynomials
sqrt(2n+1) P_n(2x - 1), ordered by total degree and then lexicographically.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field

import numpy as np

from hoifkit.model import FunctionalSpec, check_scaling

KINDS = ("tensor_haar", "tensor_wavelet", "tensor_poly")
MODES = ("gram_sqrt_inverse", "backward_gram_schmidt")
COND_LIMIT = 1e12
REGULARIZE_ABOVE = 1e8


def _as2d(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return x


def _haar_index(d: int, size: int):
    """Level, type and translation arrays for the first ``size`` Haar functions."""
    levels = [0]
    types = [np.zeros(d, dtype=int)]
    shifts = [np.zeros(d, dtype=int)]
    kinds = [t for t in itertools.product((0, 1), repeat=d) if any(t)]
    j = 0
    while len(levels) < size:
        trans = list(itertools.product(range(2**j), repeat=d))
        for t in kinds:
            for l in trans:
                levels.append(j)
                types.append(np.array(t))
                shifts.append(np.array(l))
                if len(levels) == size:
                    break
            if len(levels) == size:
                break
        j += 1
    return np.array(levels), np.array(types), np.array(shifts)


def _poly_index(d: int, size: int) -> np.ndarray:
    out = []
    deg = 0
    while len(out) < size:
        combos = sorted(t for t in itertools.product(range(deg + 1), repeat=d) if sum(t) == deg)
        out.extend(combos)
        deg += 1
    return np.array(out[:size])


@dataclass(frozen=True)
class BasisSystem:
    kind: str
    d: int
    max_size: int
    vanishing_moments: int = 0
    _levels: np.ndarray = field(default=None, repr=False)
    _types: np.ndarray = field(default=None, repr=False)
    _shifts: np.ndarray = field(default=None, repr=False)
    _degrees: np.ndarray = field(default=None, repr=False)

    @property
    def is_haar(self) -> bool:
        return self.kind in ("tensor_haar", "tensor_wavelet")

    def evaluate(self, x, lo: int, hi: int) -> np.ndarray:
        """Values of the ordered functions lo..hi-1 (0-based) at points x."""
        if not 0 <= lo < hi <= self.max_size:
            raise ValueError(f"basis range ({lo}, {hi}] invalid for size {self.max_size}")
        x = _as2d(x)
        if x.shape[1] != self.d:
            raise ValueError(f"points have dimension {x.shape[1]}, basis has {self.d}")
        if self.is_haar:
            return self._eval_haar(x, lo, hi)
        return self._eval_poly(x, lo, hi)

    def _eval_haar(self, x, lo, hi):
        x = np.minimum(x, np.nextafter(1.0, 0.0))
        lev = self._levels[lo:hi]
        typ = self._types[lo:hi]
        sh = self._shifts[lo:hi]
        out = np.empty((x.shape[0], hi - lo))
        for start in range(0, hi - lo, 512):
            stop = min(start + 512, hi - lo)
            scale = 2.0 ** lev[start:stop]
            u = scale[None, :, None] * x[:, None, :] - sh[None, start:stop, :]
            inside = (u >= 0.0) & (u < 1.0)
            mother = np.where(u < 0.5, 1.0, -1.0)
            factor = np.where(typ[None, start:stop, :] == 1, mother, 1.0) * inside
            amp = scale ** (self.d / 2.0)
            out[:, start:stop] = amp[None, :] * np.prod(factor, axis=2)
        return out

    def _eval_poly(self, x, lo, hi):
        deg = self._degrees[lo:hi]
        top = int(deg.max())
        norms = np.sqrt(2.0 * np.arange(top + 1) + 1.0)
        out = np.ones((x.shape[0], hi - lo))
        for j in range(self.d):
            vander = np.polynomial.legendre.legvander(2.0 * x[:, j] - 1.0, top) * norms
            out *= vander[:, deg[:, j]]
        return out

    def level_of(self, k: int) -> int:
        """Finest Haar level among the first k functions (-1 for the constant)."""
        if k <= 1:
            return -1
        return int(self._levels[k - 1])

    def level_boundaries(self) -> list[int]:
        """Sizes 2^{dj} at which complete Haar resolution levels end."""
        if not self.is_haar:
            return list(range(1, self.max_size + 1))
        out, j = [], 0
        while 2 ** (self.d * j) <= self.max_size:
            out.append(2 ** (self.d * j))
            j += 1
        return out

    def quadrature_hint(self, k: int) -> tuple[int, int]:
        """(cells per axis, Gauss order) integrating products of two of the first
        k functions exactly against a piecewise-constant density."""
        if self.is_haar:
            return 2 ** (self.level_of(k) + 1), 1
        top = int(self._degrees[:k].max()) if k else 0
        return 1, top + 1


def build_basis(kind: str, d: int, K_max: int, vanishing_moments: int = 0) -> BasisSystem:
    if kind not in KINDS:
        raise ValueError(f"unknown basis kind '{kind}'")
    if int(K_max) != K_max or K_max < 1:
        raise ValueError(f"basis size must be a positive integer, got {K_max}")
    if d < 1:
        raise ValueError("dimension must be at least 1")
    if kind == "tensor_wavelet" and vanishing_moments != 0:
        raise ValueError("only the Haar member (zero vanishing moments) of the wavelet family is available")
    K_max = int(K_max)
    if kind == "tensor_poly":
        return BasisSystem(kind, d, K_max, 0, _degrees=_poly_index(d, K_max))
    lev, typ, sh = _haar_index(d, K_max)
    return BasisSystem(kind, d, K_max, vanishing_moments, lev, typ, sh)


def eval_basis(basis: BasisSystem, x, k0: int, k1: int) -> np.ndarray:
    """Values of the functions with 1-based indices k0+1..k1 at one point or at rows of x."""
    if k1 <= k0:
        raise ValueError(f"empty basis range [{k0 + 1}, {k1}]")
    single = np.asarray(x).ndim <= 1 and (np.asarray(x).size == basis.d)
    vals = basis.evaluate(np.atleast_2d(np.asarray(x, dtype=float)).reshape(-1, basis.d), k0, k1)
    return vals[0] if single else vals


def reference_quadrature(basis: BasisSystem, density, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Points and weights for integrals against the fitted density."""
    cells, order = basis.quadrature_hint(k)
    kind = type(density).__name__
    if kind == "FunctionDensity":
        cells, order = max(cells, 64), max(order, 8)
    return density.quadrature(cells, order)


def gram_matrix(basis: BasisSystem, density, k: int) -> np.ndarray:
    pts, wts = reference_quadrature(basis, density, k)
    phi = basis.evaluate(pts, 0, k)
    return (phi * wts[:, None]).T @ phi


def _regularize(gram: np.ndarray) -> np.ndarray:
    """Add lambda I (lambda = 1e-10 trace/k) when the raw Gram matrix is poorly
    conditioned; a well-conditioned Gram is used as is so whitening stays exact."""
    k = gram.shape[0]
    raw = np.linalg.eigvalsh(gram)
    if raw[0] > 0 and raw[-1] / raw[0] <= REGULARIZE_ABOVE:
        return gram
    lam = 1e-10 * np.trace(gram) / k
    reg = gram + lam * np.eye(k)
    eig = np.linalg.eigvalsh(reg)
    if eig[0] <= 0 or eig[-1] / eig[0] > COND_LIMIT:
        raise np.linalg.LinAlgError(f"Gram matrix too ill-conditioned (condition {eig[-1] / max(eig[0], 1e-300):.3g})")
    return reg


def orthonormalize(basis: BasisSystem, density, k: int, mode: str = "gram_sqrt_inverse") -> np.ndarray:
    """k x k transform T with T phi orthonormal in L2 of the density."""
    if mode not in MODES:
        raise ValueError(f"unknown orthonormalization mode '{mode}'")
    if type(density).__name__ == "UniformDensity":
        return np.eye(k)
    gram = _regularize(gram_matrix(basis, density, k))
    if mode == "gram_sqrt_inverse":
        vals, vecs = np.linalg.eigh(gram)
        return (vecs / np.sqrt(vals)) @ vecs.T
    rev = gram[::-1, ::-1]
    chol = np.linalg.cholesky(rev)
    inv = np.linalg.solve(chol, np.eye(k))
    return inv[::-1, ::-1]


@dataclass(frozen=True)
class DesignMatrix:
    rows: np.ndarray
    gram_transform: np.ndarray
    weight: np.ndarray
    basis: BasisSystem
    k: int
    mode: str

    def rows_at(self, x, spec: FunctionalSpec, fit) -> np.ndarray:
        """Design rows for arbitrary points (same transform and weights)."""
        x = _as2d(x)
        q2 = spec.bdot(x, fit) * spec.pdot(x, fit) * fit.varsigma_hat(x)
        if np.any(q2 <= 0):
            raise ValueError("Bdot*Pdot*varsigma_hat must be positive")
        phi = self.basis.evaluate(x, 0, self.k)
        return (phi @ self.gram_transform.T) / np.sqrt(q2)[:, None]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["sample"] + [f"z{j + 1}" for j in range(self.k)])
            for i, row in enumerate(self.rows):
                writer.writerow([i] + [format(v, ".17g") for v in row])


_TRANSFORM_CACHE: dict = {}


def cached_transform(basis: BasisSystem, density, k: int, mode: str) -> np.ndarray:
    key = (id(basis), id(density), k, mode)
    hit = _TRANSFORM_CACHE.get(key)
    if hit is not None and hit[0] is basis and hit[1] is density:
        return hit[2]
    transform = orthonormalize(basis, density, k, mode)
    if len(_TRANSFORM_CACHE) > 64:
        _TRANSFORM_CACHE.clear()
    _TRANSFORM_CACHE[key] = (basis, density, transform)
    return transform


def build_design(basis: BasisSystem, data, spec: FunctionalSpec, fit, k: int, mode: str = "gram_sqrt_inverse") -> DesignMatrix:
    """Rows Z_i = T phi_k(X_i) / sqrt(varsigma_hat Bdot Pdot)(X_i) on the estimation points.

    ``data`` is a Dataset (its estimation split is used) or an array of points.
    """
    if k > basis.max_size:
        raise ValueError(f"k={k} exceeds the basis size {basis.max_size}")
    x = data.estimation().x if hasattr(data, "estimation") else _as2d(data)
    pts, _ = reference_quadrature(basis, fit.f_hat, k)
    check_scaling(spec, pts, fit)
    q2 = check_scaling(spec, x, fit)
    transform = cached_transform(basis, fit.f_hat, k, mode)
    weight = 1.0 / np.sqrt(q2)
    phi = basis.evaluate(x, 0, k)
    if type(fit.f_hat).__name__ != "UniformDensity":
        phi = phi @ transform.T
    rows = phi * weight[:, None]
    return DesignMatrix(rows, transform, weight, basis, k, mode)


def whitening_error(design: DesignMatrix, spec: FunctionalSpec, fit) -> float:
    """max |E_ref[Q^2 Z Z^T] - I| under the fitted reference measure."""
    pts, wts = reference_quadrature(design.basis, fit.f_hat, design.k)
    q2 = spec.bdot(pts, fit) * spec.pdot(pts, fit) * fit.varsigma_hat(pts)
    z = design.rows_at(pts, spec, fit)
    gram = (z * (wts * q2)[:, None]).T @ z
    return float(np.max(np.abs(gram - np.eye(design.k))))


def projection_coefficients(basis: BasisSystem, h, k: int, cells: int = 1024, order: int = 4) -> np.ndarray:
    """Lebesgue inner products <phi_l, h> for the first k functions (d = 1 or 2)."""
    from hoifkit.nuisance import tensor_quadrature

    pts, wts = tensor_quadrature(basis.d, cells, order)
    return basis.evaluate(pts, 0, k).T @ (wts * h(pts))


def projection_error(basis: BasisSystem, h, k: int, cells: int = 1024, order: int = 4) -> float:
    """L2(Lebesgue) norm of h minus its projection on the first k functions."""
    from hoifkit.nuisance import tensor_quadrature

    pts, wts = tensor_quadrature(basis.d, cells, order)
    phi = basis.evaluate(pts, 0, k)
    hv = h(pts)
    coef = phi.T @ (wts * hv)
    resid = hv - phi @ coef
    return float(np.sqrt(np.sum(wts * resid**2)))
