"""Truth generators, the exact-expectation oracle and a Monte Carlo driver.

Discrete truths put X on a finite grid of cell midpoints and give (A, Y) a
finite conditional support, so every expectation in the library can be
computed exactly by enumeration.  Smooth truths use series with a prescribed
coefficient decay (or lacunary Weierstrass sums for exact Holder exponents)
and Gaussian outcome noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from hoifkit.model import Dataset, FunctionalSpec, Observation
from hoifkit.nuisance import DiscreteDensity, FunctionDensity, NuisanceFit, tensor_quadrature
from hoifkit.ustat import DiscreteLaw

ENUMERATION_BUDGET = 2**25


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator keyed by a 64-bit seed."""
    return np.random.Generator(np.random.Philox(int(seed) % 2**64))


def grid_atoms(G: int, d: int = 1) -> np.ndarray:
    """Midpoints of a regular grid with G cells in total (G must be a d-th power)."""
    m = int(round(G ** (1.0 / d)))
    if m**d != G:
        raise ValueError(f"G={G} is not a {d}-th power")
    mids = (np.arange(m) + 0.5) / m
    grids = np.meshgrid(*([mids] * d), indexing="ij")
    return np.stack([g.reshape(-1) for g in grids], axis=1)


@dataclass(frozen=True)
class DiscreteTruth:
    """Finite law of O = (Y, A, X).

    ``atoms`` (G, d) and ``px`` (G,) give the law of X; the support points of
    (A, Y) | X are listed flat: ``xi`` (L,) indexes the X-atom, ``a`` and ``y``
    the values and ``cond`` the conditional probabilities.
    """

    atoms: np.ndarray
    px: np.ndarray
    xi: np.ndarray
    a: np.ndarray
    y: np.ndarray
    cond: np.ndarray

    def __post_init__(self):
        if abs(self.px.sum() - 1.0) > 1e-12:
            raise ValueError("X probabilities must sum to one")
        sums = np.bincount(self.xi, weights=self.cond, minlength=len(self.px))
        if np.max(np.abs(sums - 1.0)) > 1e-12:
            raise ValueError("conditional probabilities must sum to one per atom")

    @property
    def G(self) -> int:
        return len(self.px)

    @property
    def L(self) -> int:
        return len(self.xi)

    @property
    def d(self) -> int:
        return self.atoms.shape[1]

    @property
    def w(self) -> np.ndarray:
        """Joint probabilities of the support points."""
        return self.px[self.xi] * self.cond

    @property
    def x(self) -> np.ndarray:
        """Covariate of every support point, shape (L, d)."""
        return self.atoms[self.xi]

    def columns(self):
        return self.y, self.a, self.x

    def density(self) -> DiscreteDensity:
        return DiscreteDensity(self.atoms, self.px)

    def cond_mean(self, values) -> np.ndarray:
        """E[v | X = atom] for support-point values v, per atom."""
        return np.bincount(self.xi, weights=self.cond * np.asarray(values, dtype=float), minlength=self.G)

    def expect(self, values) -> float:
        return float(np.sum(self.w * np.asarray(values, dtype=float)))

    def atom_index(self, x) -> np.ndarray:
        return self.density().atom_index(x)

    def nuisances(self, spec: FunctionalSpec) -> dict:
        """varsigma, b, p at every atom under this law."""
        h1, h2, h3, h4 = spec.h_terms(self.y, self.a, self.x)
        vs = self.cond_mean(h1)
        b = -self.cond_mean(h3) / vs
        p = -self.cond_mean(h2) / vs
        return {"varsigma": vs, "b": b, "p": p, "g": vs * self.px}

    def psi(self, spec: FunctionalSpec) -> float:
        nu = self.nuisances(spec)
        return self.h_mean(spec, nu["b"], nu["p"])

    def h_mean(self, spec: FunctionalSpec, b_atoms, p_atoms) -> float:
        """E[H(b*, p*)] for per-atom values of b*, p*."""
        h1, h2, h3, h4 = spec.h_terms(self.y, self.a, self.x)
        b = np.asarray(b_atoms)[self.xi]
        p = np.asarray(p_atoms)[self.xi]
        return self.expect(b * p * h1 + b * h2 + p * h3 + h4)

    def lookup(self, values) -> Callable:
        values = np.asarray(values, dtype=float).copy()
        dens = self.density()
        return lambda x: values[dens.atom_index(x)]

    def as_fit(self, spec: FunctionalSpec, sigma_g: float = 1e-6, c_inf: float = 1e6) -> NuisanceFit:
        """The nuisances of this law packaged as a fit (theta-hat = this law)."""
        nu = self.nuisances(spec)
        return NuisanceFit(self.lookup(nu["b"]), self.lookup(nu["p"]), self.lookup(nu["varsigma"]), self.density(), sigma_g, c_inf, {"source": "discrete"})

    def law(self) -> DiscreteLaw:
        atoms = [(float(self.y[i]), float(self.a[i]), tuple(self.x[i])) for i in range(self.L)]
        return DiscreteLaw(tuple(atoms), self.w / self.w.sum())

    def observations(self) -> list[Observation]:
        return [Observation(self.y[i], self.a[i], tuple(self.x[i])) for i in range(self.L)]

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        w = self.w
        return rng.choice(self.L, size=n, p=w / w.sum())

    def sample(self, n: int, seed: int, train_fraction: float = 0.0) -> Dataset:
        rng = make_rng(seed)
        idx = self.sample_indices(n, rng)
        train = np.zeros(n, dtype=bool)
        train[: int(math.ceil(train_fraction * n))] = True
        return Dataset(self.y[idx], self.a[idx], self.x[idx], train)


def random_discrete_truth(rng: np.random.Generator, G: int = 8, d: int = 1, n_y: int = 2, pi0: Callable | None = None, y_scale: float = 1.0, atoms: np.ndarray | None = None, a_min: float = 0.15) -> DiscreteTruth:
    """Random law on grid atoms with binary A and n_y outcome values per (X, A).

    With ``pi0`` the propensity P(A=1 | X) is fixed to pi0(x); otherwise it is
    drawn in [a_min, 1 - a_min].
    """
    atoms = grid_atoms(G, d) if atoms is None else atoms
    G = atoms.shape[0]
    px = rng.uniform(0.5, 1.5, G)
    px = px / px.sum()
    pa = pi0(atoms) if pi0 is not None else rng.uniform(a_min, 1 - a_min, G)
    xi, a, y, cond = [], [], [], []
    for g in range(G):
        for av in (0.0, 1.0):
            pr = rng.uniform(0.3, 1.0, n_y)
            pr = pr / pr.sum()
            vals = rng.normal(0.0, y_scale, n_y) + rng.normal()
            for v, q in zip(vals, pr):
                xi.append(g)
                a.append(av)
                y.append(v)
                cond.append(q * (pa[g] if av == 1.0 else 1.0 - pa[g]))
    cond = np.array(cond)
    xi = np.array(xi)
    cond = cond / np.bincount(xi, weights=cond, minlength=G)[xi]
    return DiscreteTruth(atoms, px, xi, np.array(a), np.array(y), cond)


def exact_expectation(kernel: Callable, truth: DiscreteTruth, m: int, chunk: int = 2**17) -> float:
    """E over m i.i.d. draws of kernel(i_1, ..., i_m), kernel taking index arrays
    into the truth's support points (vectorized)."""
    L = truth.L
    if L**m > ENUMERATION_BUDGET:
        raise ValueError(f"enumeration budget exceeded: {L}^{m} tuples")
    w = truth.w
    total = 0.0
    size = L**m
    shape = (L,) * m
    for start in range(0, size, chunk):
        flat = np.arange(start, min(start + chunk, size))
        idx = np.unravel_index(flat, shape)
        wt = np.ones(len(flat))
        for i in idx:
            wt = wt * w[i]
        total += float(np.sum(wt * kernel(*idx)))
    return total


# ----------------------------------------------------------------------------
# Smooth truths


def cosine_series(beta: float, rng: np.random.Generator, terms: int = 64, scale: float = 1.0, d: int = 1) -> Callable:
    """Random series sum_l c_l cos(pi l x) with |c_l| = scale * l^{-(beta/d + 1/2)}.

    For d > 1 the series is applied to each coordinate and summed.
    """
    l = np.arange(1, terms + 1)
    signs = rng.choice([-1.0, 1.0], size=(d, terms))
    coef = scale * l ** (-(beta / d + 0.5)) * signs

    def func(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.zeros(x.shape[0])
        for j in range(d):
            out += np.cos(np.pi * np.outer(x[:, j], l)) @ coef[j]
        return out

    return func


def weierstrass(beta: float, rng: np.random.Generator, levels: int = 14, scale: float = 1.0) -> Callable:
    """Lacunary sum sum_j 2^{-j beta} cos(2^j pi x + phase_j): Holder-beta exactly (0 < beta < 1)."""
    phases = rng.uniform(0, 2 * np.pi, levels)
    j = np.arange(levels)
    amp = scale * 2.0 ** (-j * beta)
    freq = np.pi * 2.0**j

    def func(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))[:, 0]
        return np.cos(np.outer(x, freq) + phases) @ amp

    return func


@dataclass(frozen=True)
class SmoothTruth:
    """Continuous law: X has density ``f`` on [0,1]^d, P(A=1|X) = ``pi``,
    Y | A, X ~ Normal(mu(a, x), sigma(a, x)^2)."""

    d: int
    f: Callable
    pi: Callable
    mu: Callable
    sigma: Callable
    f_max: float = 3.0
    hermite_order: int = 20
    meta: dict = field(default_factory=dict)

    def cond_mean_h(self, func: Callable, x) -> np.ndarray:
        """E[func(y, a, x) | X = x] by Gauss-Hermite integration over Y."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        nodes, weights = np.polynomial.hermite_e.hermegauss(self.hermite_order)
        weights = weights / weights.sum()
        out = np.zeros(x.shape[0])
        for av in (0.0, 1.0):
            pa = self.pi(x) if av == 1.0 else 1.0 - self.pi(x)
            mu, sd = self.mu(av, x), self.sigma(av, x)
            acc = np.zeros(x.shape[0])
            a_col = np.full(x.shape[0], av)
            for z, wq in zip(nodes, weights):
                acc += wq * func(mu + sd * z, a_col, x)
            out += pa * acc
        return out

    def nuisance_functions(self, spec: FunctionalSpec) -> dict:
        def vs(x):
            return self.cond_mean_h(lambda y, a, xx: spec.h_terms(y, a, xx)[0], x)

        def b(x):
            return -self.cond_mean_h(lambda y, a, xx: spec.h_terms(y, a, xx)[2], x) / vs(x)

        def p(x):
            return -self.cond_mean_h(lambda y, a, xx: spec.h_terms(y, a, xx)[1], x) / vs(x)

        return {"varsigma": vs, "b": b, "p": p}

    def psi(self, spec: FunctionalSpec, cells: int = 256, order: int = 8) -> float:
        nu = self.nuisance_functions(spec)
        pts, wts = tensor_quadrature(self.d, cells if self.d == 1 else 64, order)
        bv, pv = nu["b"](pts), nu["p"](pts)

        def hfun(y, a, x):
            h1, h2, h3, h4 = spec.h_terms(y, a, x)
            return bv * pv * h1 + bv * h2 + pv * h3 + h4

        return float(np.sum(wts * self.f(pts) * self.cond_mean_h(hfun, pts)))

    def mean_of(self, func: Callable, cells: int = 256, order: int = 8) -> float:
        """E[func(X)] under the covariate law."""
        pts, wts = tensor_quadrature(self.d, cells if self.d == 1 else 64, order)
        return float(np.sum(wts * self.f(pts) * func(pts)))

    def as_fit(self, spec: FunctionalSpec, sigma_g: float = 1e-6, c_inf: float = 1e6) -> NuisanceFit:
        nu = self.nuisance_functions(spec)
        return NuisanceFit(nu["b"], nu["p"], nu["varsigma"], FunctionDensity(self.f, self.d), sigma_g, c_inf, {"source": "truth"})

    def draw(self, n: int, rng: np.random.Generator):
        xs = []
        need = n
        while need > 0:
            cand = rng.uniform(size=(2 * need + 16, self.d))
            keep = rng.uniform(size=len(cand)) * self.f_max < self.f(cand)
            xs.append(cand[keep][:need])
            need -= len(xs[-1])
        x = np.concatenate(xs)[:n]
        a = (rng.uniform(size=n) < self.pi(x)).astype(float)
        mu = np.where(a == 1.0, self.mu(1.0, x), self.mu(0.0, x))
        sd = np.where(a == 1.0, self.sigma(1.0, x), self.sigma(0.0, x))
        y = mu + sd * rng.standard_normal(n)
        return y, a, x

    def sample(self, n: int, seed: int, train_fraction: float = 0.0) -> Dataset:
        if n < 2:
            raise ValueError("n must be at least 2")
        y, a, x = self.draw(n, make_rng(seed))
        train = np.zeros(n, dtype=bool)
        train[: int(math.ceil(train_fraction * n))] = True
        return Dataset(y, a, x, train)


def generate_data(truth, n: int, seed: int, train_fraction: float = 0.0) -> Dataset:
    """i.i.d. sample of size n, deterministic in (truth, n, seed)."""
    if n < 2:
        raise ValueError("n must be at least 2")
    return truth.sample(n, seed, train_fraction)


# ----------------------------------------------------------------------------
# Monte Carlo driver


def rate_slope(xs, ys) -> tuple[float, float]:
    """Least-squares slope of log(ys) on log(xs) and its standard error."""
    lx = np.log(np.asarray(xs, dtype=float))
    ly = np.log(np.asarray(ys, dtype=float))
    if len(lx) < 2:
        raise ValueError("need at least two points")
    design = np.column_stack([np.ones_like(lx), lx])
    coef, *_ = np.linalg.lstsq(design, ly, rcond=None)
    resid = ly - design @ coef
    dof = len(lx) - 2
    if dof <= 0:
        return float(coef[1]), 0.0
    s2 = resid @ resid / dof
    cov = s2 * np.linalg.inv(design.T @ design)
    return float(coef[1]), float(np.sqrt(cov[1, 1]))


CSV_COLUMNS = ("rep", "n", "k", "m", "estimator", "psi_hat", "W", "lo", "hi", "covered", "truth_psi")


@dataclass
class MonteCarloSummary:
    rows: list
    bias: float
    variance: float
    mse: float
    coverage: float
    coverage_se: float
    reps: int

    def as_dict(self) -> dict:
        return {"reps": self.reps, "bias": self.bias, "variance": self.variance, "mse": self.mse, "coverage": self.coverage, "coverage_se": self.coverage_se}


def monte_carlo(experiment: Callable[[int, int], dict], reps: int, base_seed: int = 0, workers: int = 1) -> MonteCarloSummary:
    """Run ``experiment(rep, seed)`` for rep = 0..reps-1 with seed = base_seed + rep.

    Each call returns a dict with at least psi_hat and truth_psi; optional
    keys lo, hi (for coverage), W, n, k, m, estimator.  With workers > 1 the
    reps run on a thread pool; results keep rep order, so the summary does
    not depend on the worker count.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(lambda r: experiment(r, base_seed + r), range(reps)))
    else:
        outs = [experiment(rep, base_seed + rep) for rep in range(reps)]
    rows = []
    for rep, raw in enumerate(outs):
        out = dict(raw)
        out["rep"] = rep
        if "lo" in out and "hi" in out:
            out["covered"] = bool(out["lo"] <= out["truth_psi"] <= out["hi"])
        rows.append(out)
    est = np.array([r["psi_hat"] for r in rows])
    truth = np.array([r["truth_psi"] for r in rows])
    err = est - truth
    bias = math.fsum(err) / reps
    var = float(np.var(est, ddof=1)) if reps > 1 else 0.0
    mse = math.fsum(err**2) / reps
    cov_flags = [r["covered"] for r in rows if "covered" in r]
    coverage = float(np.mean(cov_flags)) if cov_flags else float("nan")
    cov_se = float(np.sqrt(coverage * (1 - coverage) / len(cov_flags))) if cov_flags else float("nan")
    return MonteCarloSummary(rows, bias, var, mse, coverage, cov_se, reps)
