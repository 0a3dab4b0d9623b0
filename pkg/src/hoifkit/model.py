"""Observation model, functional registry and pointwise evaluation of H(b, p).

Every functional handled here has a first-order influence function of the form

    H(b, p) = b p H1 + b H2 + p H3 + H4,

with H1..H4 known functions of one observation O = (Y, A, X).  The analyst
also picks two scaling functions Bdot(x), Pdot(x); the defaults make the
weight Bdot * Pdot * E[H1 | X] equal to one at the fitted nuisances.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

FUNCTIONAL_IDS = (
    "ExpProduct1a",
    "ExpCondCov1b",
    "VarWeightedATE1c",
    "MARMean2a",
    "MNARMean2b",
    "TrialSquare4",
    "BallResidual5",
)

_BINARY_A = {"VarWeightedATE1c", "MARMean2a", "MNARMean2b", "TrialSquare4"}


@dataclass(frozen=True)
class Observation:
    y: float
    a: float
    x: tuple

    def __post_init__(self):
        x = tuple(float(v) for v in np.atleast_1d(self.x))
        if any(v < 0.0 or v > 1.0 for v in x):
            raise ValueError(f"covariate {x} outside the unit cube")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "a", float(self.a))


@dataclass(frozen=True)
class Dataset:
    """Columns of n observations plus a boolean training mask."""

    y: np.ndarray
    a: np.ndarray
    x: np.ndarray
    train: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        a = np.asarray(self.a, dtype=float).reshape(-1)
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        train = np.asarray(self.train, dtype=bool).reshape(-1)
        n = len(y)
        if len(a) != n or x.shape[0] != n or len(train) != n:
            raise ValueError("dataset columns have inconsistent lengths")
        if np.any(x < 0.0) or np.any(x > 1.0):
            raise ValueError("covariates must lie in the unit cube")
        if n > 0 and train.all():
            raise ValueError("the estimation split is empty")
        for name, arr in (("y", y), ("a", a), ("x", x), ("train", train)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_arrays(cls, y, a, x, train=None) -> "Dataset":
        n = len(np.asarray(y).reshape(-1))
        if train is None:
            train = np.zeros(n, dtype=bool)
        return cls(y, a, x, train)

    @classmethod
    def from_observations(cls, observations, train=None) -> "Dataset":
        y = [o.y for o in observations]
        a = [o.a for o in observations]
        x = [o.x for o in observations]
        return cls.from_arrays(y, a, x, train)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def n_est(self) -> int:
        return int((~self.train).sum())

    def observations(self) -> list[Observation]:
        return [Observation(self.y[i], self.a[i], tuple(self.x[i])) for i in range(self.n)]

    def subset(self, mask) -> "Dataset":
        y = self.y[mask]
        return Dataset(y, self.a[mask], self.x[mask], np.zeros(len(y), dtype=bool))

    def estimation(self) -> "Dataset":
        return self.subset(~self.train)

    def training(self) -> "Dataset":
        return self.subset(self.train)

    def with_split(self, train) -> "Dataset":
        return Dataset(self.y, self.a, self.x, train)


@dataclass(frozen=True)
class SmoothnessConfig:
    beta_b: float
    beta_p: float
    beta_g: float
    d: int = 1
    C_b: float = 1.0
    C_p: float = 1.0
    C_g: float = 1.0
    planner_only: bool = False

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("dimension must be at least 1")
        if self.beta_g <= 0:
            raise ValueError("beta_g must be positive")
        for name in ("beta_b", "beta_p"):
            val = getattr(self, name)
            if val < 0 or (val == 0 and not self.planner_only):
                raise ValueError(f"{name} must be positive (zero allowed only for planner queries)")

    @property
    def beta(self) -> float:
        return 0.5 * (self.beta_b + self.beta_p)

    @property
    def delta(self) -> float:
        lo, hi = sorted((self.beta_b, self.beta_p))
        if lo == 0:
            return float("inf")
        return hi / lo - 1.0


HFunc = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
ScaleFunc = Callable[[np.ndarray, Any], np.ndarray]


@dataclass(frozen=True)
class FunctionalSpec:
    """H1..H4 of one functional plus the scaling choices Bdot, Pdot.

    The H functions take column arrays (y, a, x) with x of shape (n, d).  The
    scaling functions take (x, fit) because some defaults depend on fitted
    nuisances (for example Pdot = p_hat for the missing-at-random mean).
    ``varsigma_sign`` records the sign of E[H1 | X] when it is known a priori.
    """

    id: str
    h1: HFunc
    h2: HFunc
    h3: HFunc
    h4: HFunc
    bdot: ScaleFunc
    pdot: ScaleFunc
    options: dict = field(default_factory=dict)
    binary_a: bool = False
    varsigma_sign: int | None = None
    c_star: float = 1e6

    def h_terms(self, y, a, x):
        y = np.asarray(y, dtype=float)
        a = np.asarray(a, dtype=float)
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[0] != y.shape[0] and x.shape[1] == y.shape[0]:
            x = x.T
        if self.binary_a and np.any((a != 0) & (a != 1)):
            raise ValueError(f"{self.id} requires a binary treatment indicator")
        n = y.shape[0]
        return tuple(np.broadcast_to(np.asarray(h(y, a, x), dtype=float), (n,)) for h in (self.h1, self.h2, self.h3, self.h4))


def _const(value: float) -> HFunc:
    return lambda y, a, x: np.full(np.shape(y), float(value))


def _scale_const(value: float) -> ScaleFunc:
    return lambda x, fit=None: np.full(np.asarray(x).shape[0], float(value))


def _sign_scale_b(x, fit):
    return np.sign(fit.varsigma_hat(x))


def _sign_scale_p(x, fit):
    return 1.0 / np.abs(fit.varsigma_hat(x))


def _require(options: dict, key: str, func_id: str):
    if key not in options or options[key] is None:
        raise ValueError(f"functional {func_id} needs option '{key}'")
    return options[key]


def _as_xfunc(value, name: str) -> Callable:
    if callable(value):
        return value
    if np.isscalar(value):
        return lambda x: np.full(np.atleast_2d(x).shape[0], float(value))
    raise ValueError(f"option '{name}' must be a function of x or a constant")


def make_functional(func_id: str, bdot=None, pdot=None, **options) -> FunctionalSpec:
    """Build the registered functional ``func_id`` with its default scalings.

    ``bdot`` and ``pdot`` override the defaults; constants are checked against
    the known sign of E[H1 | X].  Options: ``tau`` (1c), ``alpha`` (2b),
    ``pi0`` and ``c`` and ``b_ref`` (4), ``b_ref`` (5).
    """
    if func_id not in FUNCTIONAL_IDS:
        raise ValueError(f"unknown functional id '{func_id}'")
    sign = None
    if func_id == "ExpProduct1a":
        h = (_const(-1.0), lambda y, a, x: a, lambda y, a, x: y, _const(0.0))
        defaults = (_scale_const(1.0), _scale_const(-1.0))
        sign = -1
    elif func_id in ("ExpCondCov1b", "VarWeightedATE1c"):
        tau = 0.0
        if func_id == "VarWeightedATE1c":
            tau = float(_require(options, "tau", func_id))
        h = (
            _const(1.0),
            lambda y, a, x: -a,
            lambda y, a, x: -(y - tau * a),
            lambda y, a, x: a * (y - tau * a),
        )
        defaults = (_scale_const(1.0), _scale_const(1.0))
        sign = 1
    elif func_id == "MARMean2a":
        h = (lambda y, a, x: -a, _const(1.0), lambda y, a, x: a * y, _const(0.0))
        defaults = (_scale_const(-1.0), lambda x, fit: fit.p_hat(x))
        sign = -1
    elif func_id == "MNARMean2b":
        alpha = float(_require(options, "alpha", func_id))
        h = (
            lambda y, a, x: -np.exp(-alpha * y) * a,
            lambda y, a, x: 1.0 - a,
            lambda y, a, x: a * y * np.exp(-alpha * y),
            lambda y, a, x: a * y,
        )
        defaults = (_sign_scale_b, _sign_scale_p)
        sign = -1
    elif func_id == "TrialSquare4":
        pi0 = _as_xfunc(_require(options, "pi0", func_id), "pi0")
        cfun = _as_xfunc(options.get("c", 0.0), "c")
        b_ref = options.get("b_ref")
        bref = _as_xfunc(b_ref, "b_ref") if b_ref is not None else None

        def s2(x):
            p0 = pi0(x)
            return p0 * (1.0 - p0)

        def h4(y, a, x):
            out = (a - pi0(x)) * cfun(x)
            if bref is not None:
                br = bref(x)
                out = out - 2.0 * (a - pi0(x)) * y * br / s2(x) + br**2
            return out

        h = (
            lambda y, a, x: 1.0 - 2.0 * a * (a - pi0(x)) / s2(x),
            lambda y, a, x: (a - pi0(x)) * y / s2(x),
            lambda y, a, x: (a - pi0(x)) * y / s2(x),
            h4,
        )
        defaults = (_scale_const(1.0), _scale_const(-1.0))
        sign = -1
    else:  # BallResidual5
        bref = _as_xfunc(_require(options, "b_ref", func_id), "b_ref")
        h = (
            _const(-1.0),
            lambda y, a, x: y,
            lambda y, a, x: y,
            lambda y, a, x: -2.0 * bref(x) * y + bref(x) ** 2,
        )
        defaults = (_scale_const(1.0), _scale_const(-1.0))
        sign = -1

    bd = defaults[0] if bdot is None else _as_scale(bdot)
    pd = defaults[1] if pdot is None else _as_scale(pdot)
    if (bdot is not None or pdot is not None) and sign is not None:
        _check_constant_signs(bdot, pdot, defaults, sign, func_id)
    return FunctionalSpec(
        id=func_id,
        h1=h[0],
        h2=h[1],
        h3=h[2],
        h4=h[3],
        bdot=bd,
        pdot=pd,
        options=dict(options),
        binary_a=func_id in _BINARY_A,
        varsigma_sign=sign,
    )


def _as_scale(value) -> ScaleFunc:
    if callable(value):
        return value
    return _scale_const(float(value))


def _check_constant_signs(bdot, pdot, defaults, sign, func_id):
    probe = np.full((1, 1), 0.5)
    vals = []
    for given, default in ((bdot, defaults[0]), (pdot, defaults[1])):
        if given is None:
            try:
                vals.append(float(default(probe, None)[0]))
            except AttributeError:
                return  # default depends on a fit; checked later on data
        elif np.isscalar(given):
            vals.append(float(given))
        else:
            return
    if vals[0] * vals[1] * sign < 0:
        raise ValueError(f"scaling choice violates Bdot*Pdot*E[H1|X] >= 0 for {func_id}")
    if vals[0] == 0 or vals[1] == 0:
        raise ValueError("Bdot and Pdot must be nonzero")


def h_value(spec: FunctionalSpec, obs, b_val, p_val):
    """H(b, p) = b p H1 + b H2 + p H3 + H4 at one observation or at columns."""
    if isinstance(obs, Observation):
        y, a, x = np.array([obs.y]), np.array([obs.a]), np.array([obs.x])
        h1, h2, h3, h4 = spec.h_terms(y, a, x)
        return float((b_val * p_val * h1 + b_val * h2 + p_val * h3 + h4)[0])
    y, a, x = obs
    h1, h2, h3, h4 = spec.h_terms(y, a, x)
    return b_val * p_val * h1 + b_val * h2 + p_val * h3 + h4


def residuals(spec: FunctionalSpec, obs, fit):
    """(eps, delta) = ((H1 p_hat + H2) Bdot, (H1 b_hat + H3) Pdot)."""
    single = isinstance(obs, Observation)
    if single:
        y, a, x = np.array([obs.y]), np.array([obs.a]), np.array([obs.x])
    else:
        y, a, x = obs
        x = np.atleast_2d(np.asarray(x, dtype=float))
    h1, h2, h3, _ = spec.h_terms(y, a, x)
    eps = (h1 * fit.p_hat(x) + h2) * spec.bdot(x, fit)
    delta = (h1 * fit.b_hat(x) + h3) * spec.pdot(x, fit)
    if single:
        return float(eps[0]), float(delta[0])
    return eps, delta


def check_scaling(spec: FunctionalSpec, x: np.ndarray, fit) -> np.ndarray:
    """Validate the sign and ratio conditions on the scalings at points x.

    Returns the weight Bdot * Pdot * varsigma_hat at x.
    """
    bd = spec.bdot(x, fit)
    pd = spec.pdot(x, fit)
    q2 = bd * pd * fit.varsigma_hat(x)
    if np.any(q2 <= 0) or not np.all(np.isfinite(q2)):
        raise ValueError("Bdot*Pdot*varsigma_hat must be positive at every training point")
    if np.any(bd == 0) or np.any(pd == 0):
        raise ValueError("Bdot and Pdot must be nonzero")
    ratio = max(np.max(np.abs(pd / bd)), np.max(np.abs(bd / pd)))
    if ratio > spec.c_star:
        raise ValueError(f"|Pdot/Bdot| ratio {ratio:.3g} exceeds the configured bound {spec.c_star:.3g}")
    return q2
