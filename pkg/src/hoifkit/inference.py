"""Confidence balls for regression functions, regime sets, and confidence sets
for implicitly defined parameters obtained by inverting functional-level tests."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from hoifkit.hoif import EstimateReport, normal_quantile
from hoifkit.model import Dataset

BALL_MODES = ("empirical_norm", "lebesgue_norm")


def _points(est_data) -> np.ndarray:
    if isinstance(est_data, Dataset):
        d = est_data.estimation() if est_data.train.any() else est_data
        return d.x
    x = np.asarray(est_data, dtype=float)
    return x.reshape(len(x), -1)


@dataclass
class ConfidenceBall:
    """{b*: ||b* - center||^2 <= radius_sq}, the squared norm taken empirically
    over the stored points (or under Lebesgue measure in the alternative mode)."""

    center: Callable
    radius_sq: float
    alpha: float
    mode: str
    psi_hat: float
    W: float
    points: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def empty(self) -> bool:
        return self.radius_sq < 0

    def distance_sq(self, b_star: Callable) -> float:
        if self.mode == "empirical_norm":
            diff = np.asarray(b_star(self.points), dtype=float) - np.asarray(self.center(self.points), dtype=float)
            return float(np.mean(diff**2))
        from hoifkit.nuisance import tensor_quadrature

        pts, wts = tensor_quadrature(self.points.shape[1], 256, 4)
        diff = np.asarray(b_star(pts), dtype=float) - np.asarray(self.center(pts), dtype=float)
        return float(np.sum(wts * diff**2))

    def contains(self, b_star: Callable) -> bool:
        return self.distance_sq(b_star) <= self.radius_sq

    def as_dict(self) -> dict:
        return {"radius_sq": self.radius_sq, "alpha": self.alpha, "mode": self.mode, "psi_hat": self.psi_hat, "W": self.W, "empty": self.empty}


def confidence_ball(est_data, b_hat: Callable, report: EstimateReport, alpha: float = 0.1, mode: str = "empirical_norm") -> ConfidenceBall:
    """Ball around b_hat with squared radius psi_hat + z_{1-alpha} W, where the report
    estimates E[(b - b_hat)^2]."""
    if mode not in BALL_MODES:
        raise ValueError(f"unknown ball mode '{mode}'")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    radius_sq = report.psi_hat + normal_quantile(1.0 - alpha) * report.W
    diag = {}
    if mode == "lebesgue_norm":
        diag["caveat"] = "the Lebesgue-norm ball can have a slower minimax rate than the empirical-norm ball"
    if radius_sq < 0:
        diag["empty"] = True
    return ConfidenceBall(b_hat, float(radius_sq), alpha, mode, report.psi_hat, report.W, _points(est_data), diag)


def regime_of(b: Callable) -> Callable:
    """The treatment regime x -> 1[b(x) > 0]."""
    return lambda x: (np.asarray(b(x)) > 0).astype(float)


def regime_set_membership(b_star: Callable, ball: ConfidenceBall) -> bool:
    """Whether the regime 1[b*(x) > 0] is certified by b* belonging to the ball."""
    return ball.contains(b_star)


@dataclass
class TauConfidenceSet:
    grid: np.ndarray
    accepted: np.ndarray
    psi: np.ndarray
    W: np.ndarray
    alpha: float
    z: float

    @property
    def values(self) -> np.ndarray:
        return self.grid[self.accepted]

    @property
    def interval_hull(self) -> tuple:
        vals = self.values
        if len(vals) == 0:
            return (math.nan, math.nan)
        return (float(vals.min()), float(vals.max()))

    @property
    def spacing(self) -> float:
        return float(np.max(np.diff(np.sort(self.grid)))) if len(self.grid) > 1 else 0.0

    def contains(self, tau: float) -> bool:
        """Whether tau lies in the hull of the accepted grid points."""
        lo, hi = self.interval_hull
        return bool(lo <= tau <= hi)

    def as_dict(self) -> dict:
        lo, hi = self.interval_hull
        return {
            "grid": [float(t) for t in self.grid],
            "accepted": [float(t) for t in self.values],
            "hull": [lo, hi],
            "spacing": self.spacing,
            "alpha": self.alpha,
        }


def invert_ci_for_tau(tau_grid, estimator: Callable, alpha: float = 0.1) -> TauConfidenceSet:
    """Grid points where -z < psi_hat(tau)/W(tau) < z, with z = z_{1 - alpha/2}."""
    grid = np.asarray(tau_grid, dtype=float)
    z = normal_quantile(1.0 - alpha / 2.0)
    psi = np.empty(len(grid))
    W = np.empty(len(grid))
    for i, t in enumerate(grid):
        psi[i], W[i] = estimator(float(t))
    if np.any(~(W > 0)):
        raise ValueError("the standard error must be positive on the whole grid")
    accepted = np.abs(psi / W) < z
    return TauConfidenceSet(grid, accepted, psi, W, alpha, z)


def solve_tau(estimator: Callable, bracket: tuple, affine: bool = False, rtol: float = 1e-10, max_iter: int = 200) -> float:
    """Root of tau -> psi_hat(tau) inside the bracket.

    With ``affine`` the root comes from the two bracket values in closed form;
    otherwise bisection runs until |psi_hat| <= rtol * scale.
    """
    lo, hi = float(bracket[0]), float(bracket[1])
    f_lo, f_hi = float(estimator(lo)), float(estimator(hi))
    scale = max(abs(f_lo), abs(f_hi), 1e-300)
    if affine:
        slope = (f_hi - f_lo) / (hi - lo)
        if slope == 0:
            raise ValueError("psi_hat does not depend on tau")
        return lo - f_lo / slope
    if f_lo == 0:
        return lo
    if f_hi == 0:
        return hi
    if np.sign(f_lo) == np.sign(f_hi):
        raise ValueError("psi_hat has no sign change over the bracket")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        f_mid = float(estimator(mid))
        if abs(f_mid) <= rtol * scale or hi - lo <= 4 * np.finfo(float).eps * max(abs(lo), abs(hi), 1.0):
            return mid
        if np.sign(f_mid) == np.sign(f_lo):
            lo, f_lo = mid, f_mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
