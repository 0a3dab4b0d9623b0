"""Training-sample nuisance estimates: series regressions, densities, CV selection.

Generic identities used throughout: with varsigma(x) = E[H1 | X = x],

    b(x) = -E[H3 | X = x] / varsigma(x),   p(x) = -E[H2 | X = x] / varsigma(x),

and g(x) = varsigma(x) f(x).  Densities are represented as objects that can be
evaluated pointwise and that expose a quadrature rule (points, weights) for
integrals against the density; the quadrature drives the orthonormalization of
the basis under the fitted reference measure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from hoifkit.model import Dataset, FunctionalSpec

DEFAULT_SIGMA_G = 1e-3
DEFAULT_C_INF = 1e3


def _as2d(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return x


def _gauss_legendre_cells(cells: int, order: int) -> tuple[np.ndarray, np.ndarray]:
    """1-d composite Gauss-Legendre rule on [0,1] with ``cells`` equal cells."""
    nodes, weights = np.polynomial.legendre.leggauss(order)
    nodes = 0.5 * (nodes + 1.0)
    weights = 0.5 * weights
    left = np.arange(cells) / cells
    pts = (left[:, None] + nodes[None, :] / cells).reshape(-1)
    wts = np.tile(weights / cells, cells)
    return pts, wts


def tensor_quadrature(d: int, cells: int, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Lebesgue quadrature on [0,1]^d: composite Gauss-Legendre per axis."""
    p1, w1 = _gauss_legendre_cells(cells, order)
    grids = np.meshgrid(*([p1] * d), indexing="ij")
    wgrids = np.meshgrid(*([w1] * d), indexing="ij")
    pts = np.stack([g.reshape(-1) for g in grids], axis=1)
    wts = np.prod(np.stack([w.reshape(-1) for w in wgrids], axis=1), axis=1)
    return pts, wts


class Density:
    """Interface: ``__call__(x)`` gives density values, ``quadrature(cells, order)``
    gives points and weights integrating against the density."""

    d: int

    def __call__(self, x) -> np.ndarray:  # pragma: no cover - interface
        raise NotImplementedError

    def quadrature(self, cells: int = 1, order: int = 1) -> tuple[np.ndarray, np.ndarray]:
        pts, wts = tensor_quadrature(self.d, cells, order)
        return pts, wts * self(pts)


@dataclass(frozen=True)
class UniformDensity(Density):
    d: int = 1

    def __call__(self, x) -> np.ndarray:
        return np.ones(_as2d(x).shape[0])


@dataclass(frozen=True)
class FunctionDensity(Density):
    """A density given by a callable of x (used for smooth truths)."""

    func: Callable
    d: int = 1

    def __call__(self, x) -> np.ndarray:
        return np.asarray(self.func(_as2d(x)), dtype=float)


@dataclass(frozen=True)
class HistogramDensity(Density):
    """Piecewise-constant density on a regular grid of ``cells_per_dim``^d cells."""

    cells_per_dim: int
    values: np.ndarray
    d: int = 1

    def cell_index(self, x) -> np.ndarray:
        x = _as2d(x)
        m = self.cells_per_dim
        idx = np.minimum((x * m).astype(int), m - 1)
        flat = np.zeros(x.shape[0], dtype=int)
        for j in range(self.d):
            flat = flat * m + idx[:, j]
        return flat

    def __call__(self, x) -> np.ndarray:
        return self.values[self.cell_index(x)]

    def quadrature(self, cells: int = 1, order: int = 1):
        cells = max(cells, self.cells_per_dim)
        if cells % self.cells_per_dim:
            cells = cells * self.cells_per_dim
        return super().quadrature(cells, order)


@dataclass(frozen=True)
class DiscreteDensity(Density):
    """Point masses at ``atoms``; evaluation returns the mass at an atom."""

    atoms: np.ndarray
    probs: np.ndarray

    @property
    def d(self) -> int:
        return self.atoms.shape[1]

    def atom_index(self, x) -> np.ndarray:
        x = _as2d(x)
        dist = np.abs(x[:, None, :] - self.atoms[None, :, :]).max(axis=2)
        idx = dist.argmin(axis=1)
        if np.any(dist[np.arange(len(idx)), idx] > 1e-9):
            raise ValueError("point is not an atom of the discrete density")
        return idx

    def __call__(self, x) -> np.ndarray:
        return self.probs[self.atom_index(x)]

    def quadrature(self, cells: int = 1, order: int = 1):
        return self.atoms, self.probs


def clip_signed(values: np.ndarray, floor: float) -> np.ndarray:
    """Push |values| up to ``floor`` while keeping the sign (zero maps to +floor)."""
    sign = np.where(values < 0, -1.0, 1.0)
    return sign * np.maximum(np.abs(values), floor)


@dataclass(frozen=True)
class NuisanceFit:
    """Fitted b, p, varsigma = E[H1 | X] and density f, with clipping applied.

    ``g_hat = varsigma_hat * f_hat``.  Clipping: |varsigma_hat| >= sigma_g with
    its sign kept, f_hat >= sigma_g (inside the density), |b_hat|, |p_hat| <= c_inf.
    """

    b_raw: Callable
    p_raw: Callable
    varsigma_raw: Callable
    f_hat: Density
    sigma_g: float = DEFAULT_SIGMA_G
    c_inf: float = DEFAULT_C_INF
    meta: dict = field(default_factory=dict)

    def b_hat(self, x) -> np.ndarray:
        return np.clip(np.asarray(self.b_raw(_as2d(x)), dtype=float), -self.c_inf, self.c_inf)

    def p_hat(self, x) -> np.ndarray:
        return np.clip(np.asarray(self.p_raw(_as2d(x)), dtype=float), -self.c_inf, self.c_inf)

    def varsigma_hat(self, x) -> np.ndarray:
        return clip_signed(np.asarray(self.varsigma_raw(_as2d(x)), dtype=float), self.sigma_g)

    def g_hat(self, x) -> np.ndarray:
        return self.varsigma_hat(x) * self.f_hat(x)

    def replace(self, **changes) -> "NuisanceFit":
        from dataclasses import replace

        return replace(self, **changes)


def _least_squares(phi: np.ndarray, target: np.ndarray) -> np.ndarray:
    coef, *_ = np.linalg.lstsq(phi, target, rcond=None)
    return coef


def _series_function(basis, coef: np.ndarray) -> Callable:
    k = len(coef)

    def func(x):
        return basis.evaluate(_as2d(x), 0, k) @ coef

    return func


def fit_series_regression(train: Dataset, basis, k: int, target: str = "b", spec: FunctionalSpec | None = None, c_inf: float = DEFAULT_C_INF, sigma_g: float = DEFAULT_SIGMA_G) -> Callable:
    """Least-squares series estimate of b or p on the first k basis functions.

    Without a functional, ``target='b'`` regresses Y and ``target='p'`` regresses A.
    With a functional the generic ratio -E[H3|X]/E[H1|X] (or H2 for p) is used,
    each conditional mean fitted by the same series least squares.
    """
    if target not in ("b", "p"):
        raise ValueError("target must be 'b' or 'p'")
    if k > train.n:
        raise ValueError(f"series size k={k} exceeds the training size {train.n}")
    phi = basis.evaluate(train.x, 0, k)
    if spec is None:
        outcome = train.y if target == "b" else train.a
        coef = _least_squares(phi, outcome)
        raw = _series_function(basis, coef)
        return lambda x: np.clip(raw(x), -c_inf, c_inf)
    h1, h2, h3, _ = spec.h_terms(train.y, train.a, train.x)
    numer = _series_function(basis, _least_squares(phi, h3 if target == "b" else h2))
    vs = varsigma_function(spec, train, basis, k)

    def ratio(x):
        return np.clip(-numer(x) / clip_signed(vs(x), sigma_g), -c_inf, c_inf)

    return ratio


def known_varsigma(spec: FunctionalSpec) -> Callable | None:
    """E[H1 | X] when it does not depend on unknown nuisances."""
    value = {"ExpProduct1a": -1.0, "ExpCondCov1b": 1.0, "VarWeightedATE1c": 1.0, "TrialSquare4": -1.0, "BallResidual5": -1.0}.get(spec.id)
    if value is None:
        return None
    return lambda x: np.full(_as2d(x).shape[0], value)


def varsigma_function(spec: FunctionalSpec, train: Dataset, basis, k: int) -> Callable:
    known = known_varsigma(spec)
    if known is not None:
        return known
    h1, *_ = spec.h_terms(train.y, train.a, train.x)
    phi = basis.evaluate(train.x, 0, k)
    return _series_function(basis, _least_squares(phi, h1))


def fit_density(train: Dataset, k: int, method: str = "histogram", basis=None, sigma_g: float = DEFAULT_SIGMA_G) -> Density:
    """Density of X on [0,1]^d from the training sample.

    ``histogram``: k equal cells (k must be a perfect d-th power), each cell
    value count*k/n, clipped below at sigma_g and renormalized.
    ``series``: projection estimate on the first k basis functions, clipped
    and renormalized on a histogram of resolution matching the basis.
    """
    d = train.d
    n = train.n
    if k > n:
        raise ValueError(f"density size k={k} exceeds the training size {n}")
    if method == "histogram":
        m = int(round(k ** (1.0 / d)))
        if m**d != k:
            raise ValueError(f"histogram size {k} is not a {d}-th power")
        hist = HistogramDensity(m, np.zeros(k), d)
        counts = np.bincount(hist.cell_index(train.x), minlength=k).astype(float)
        values = counts * k / n
        values = np.maximum(values, sigma_g)
        values = values / values.mean()
        return HistogramDensity(m, values, d)
    if method == "series":
        if basis is None:
            raise ValueError("series density needs a basis")
        coef = basis.evaluate(train.x, 0, k).mean(axis=0)
        cells, order = basis.quadrature_hint(k)
        raw = FunctionDensity(lambda x: basis.evaluate(_as2d(x), 0, k) @ coef, d)
        pts, wts = tensor_quadrature(d, cells, order)
        vals = np.maximum(raw(pts), sigma_g)
        total = float(np.sum(wts * vals))
        return FunctionDensity(lambda x: np.maximum(basis.evaluate(_as2d(x), 0, k) @ coef, sigma_g) / total, d)
    raise ValueError(f"unknown density method '{method}'")


def fit_nuisance(train: Dataset, spec: FunctionalSpec, basis, k_b: int, k_p: int | None = None, k_f: int | None = None, density: str = "histogram", sigma_g: float = DEFAULT_SIGMA_G, c_inf: float = DEFAULT_C_INF) -> NuisanceFit:
    """Fit b_hat, p_hat, varsigma_hat and f_hat on the training sample."""
    k_p = k_b if k_p is None else k_p
    b = fit_series_regression(train, basis, k_b, "b", spec, c_inf, sigma_g)
    p = fit_series_regression(train, basis, k_p, "p", spec, c_inf, sigma_g)
    vs = varsigma_function(spec, train, basis, k_b)
    if k_f is None:
        f_hat: Density = UniformDensity(train.d)
    else:
        f_hat = fit_density(train, k_f, density, basis, sigma_g)
    meta = {"k_b": k_b, "k_p": k_p, "k_f": k_f, "density": density if k_f else "uniform"}
    return NuisanceFit(b, p, vs, f_hat, sigma_g, c_inf, meta)


def rate_optimal_size(n: int, beta: float, d: int) -> int:
    """k = ceil(n^{d/(2 beta + d)})."""
    return int(np.ceil(n ** (d / (2.0 * beta + d))))


def split_sample(n: int, fraction: float | None = None, epsilon: float | None = None, rng=None) -> np.ndarray:
    """Training mask.  Default: ceil(n/2) training points.  With ``epsilon`` the
    estimation part has size floor(n^{1-epsilon})."""
    if epsilon is not None:
        n_est = max(1, int(np.floor(n ** (1.0 - epsilon))))
        n_train = n - n_est
    elif fraction is not None:
        n_train = int(np.ceil(fraction * n))
    else:
        n_train = int(np.ceil(n / 2))
    n_train = min(max(n_train, 0), n - 1)
    mask = np.zeros(n, dtype=bool)
    order = np.arange(n) if rng is None else rng.permutation(n)
    mask[order[:n_train]] = True
    return mask


@dataclass(frozen=True)
class CVResult:
    selected: int
    b_hat: Callable
    risks: dict
    skipped: list
    candidates: dict


def _moment_fit(phi: np.ndarray, a: np.ndarray, y: np.ndarray, pi0: np.ndarray) -> np.ndarray:
    """Solve sum_i (Y_i - A_i alpha^T phi_i) phi_i (A_i - pi0_i) = 0."""
    resid = a - pi0
    lhs = (phi * (resid * a)[:, None]).T @ phi
    rhs = phi.T @ (resid * y)
    if np.linalg.cond(lhs) > 1e12:
        raise np.linalg.LinAlgError("singular moment system")
    return np.linalg.solve(lhs, rhs)


def trial_risk(b_func: Callable, y, a, x, pi0: Callable) -> float:
    """Empirical risk mean[sigma0^{-2}(Y - (A - pi0) b(X))^2]."""
    p0 = pi0(x)
    s2 = p0 * (1.0 - p0)
    return float(np.mean((y - (a - p0) * b_func(x)) ** 2 / s2))


def cv_select(train: Dataset, pi0, basis, s_max: int, seed: int = 0) -> CVResult:
    """Select the series size for the trial contrast b by validation risk.

    The training set is split in half (seeded); on the candidate half, for each
    s the moment equations with instrument (A - pi0) give b^(s); the validation
    risk is minimized over s.
    """
    pi0 = pi0 if callable(pi0) else (lambda x, v=float(pi0): np.full(_as2d(x).shape[0], v))
    rng = np.random.Generator(np.random.Philox(seed))
    order = rng.permutation(train.n)
    half = train.n // 2
    cand, val = order[:half], order[half:]
    xc, ac, yc = train.x[cand], train.a[cand], train.y[cand]
    risks, skipped, candidates = {}, [], {}
    for s in range(1, s_max + 1):
        phi = basis.evaluate(xc, 0, s)
        try:
            coef = _moment_fit(phi, ac, yc, pi0(xc))
        except np.linalg.LinAlgError:
            skipped.append(s)
            continue
        func = _series_function(basis, coef)
        candidates[s] = func
        risks[s] = trial_risk(func, train.y[val], train.a[val], train.x[val], pi0)
    if not risks:
        raise ValueError("every candidate moment system was singular")
    best = min(risks, key=lambda s: (risks[s], s))
    return CVResult(best, candidates[best], risks, skipped, candidates)
