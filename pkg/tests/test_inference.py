import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hoifkit.hoif import EstimateReport, normal_quantile
from hoifkit.inference import (
    confidence_ball,
    invert_ci_for_tau,
    regime_of,
    regime_set_membership,
    solve_tau,
)
from hoifkit.model import Dataset
from hoifkit.sim import make_rng


def fake_report(psi, w):
    return EstimateReport(psi, [psi], [w**2], w**2, (math.nan, math.nan, 0.1))


def points(n=50, seed=0):
    return make_rng(seed).uniform(size=(n, 1))


def center(x):
    return np.sin(2 * np.pi * np.atleast_2d(x)[:, 0])


def test_ball_radius_and_center_membership():
    ball = confidence_ball(points(), center, fake_report(0.02, 0.01), alpha=0.1)
    assert ball.radius_sq == pytest.approx(0.02 + normal_quantile(0.9) * 0.01)
    assert ball.contains(center)
    assert regime_set_membership(center, ball)
    empty = confidence_ball(points(), center, fake_report(-0.05, 0.01), alpha=0.1)
    assert empty.empty and not empty.contains(center)
    assert empty.diagnostics["empty"]


def test_ball_uses_empirical_norm():
    x = points(40)
    ball = confidence_ball(x, center, fake_report(0.01, 0.0), alpha=0.1)
    shifted = lambda z: center(z) + 0.1
    assert ball.distance_sq(shifted) == pytest.approx(0.01)
    # a change away from every sample point does not affect membership
    spike = lambda z: center(z) + 50.0 * (np.abs(np.atleast_2d(z)[:, 0] - 2.0) < 1e-9)
    assert ball.contains(spike) == ball.contains(center)
    far = lambda z: center(z) + 0.2
    assert not ball.contains(far)


def test_ball_uses_estimation_split():
    rng = make_rng(1)
    train = np.arange(20) < 10
    data = Dataset.from_arrays(np.zeros(20), np.zeros(20), rng.uniform(size=(20, 1)), train)
    ball = confidence_ball(data, center, fake_report(0.1, 0.01))
    np.testing.assert_array_equal(ball.points, data.x[10:])


def test_lebesgue_ball_and_errors():
    ball = confidence_ball(points(), center, fake_report(0.01, 0.0), mode="lebesgue_norm")
    assert "caveat" in ball.diagnostics
    # integral of (0.3 x)^2 over [0, 1] is 0.03
    assert ball.distance_sq(lambda z: center(z) + 0.3 * np.atleast_2d(z)[:, 0]) == pytest.approx(0.03, rel=1e-10)
    with pytest.raises(ValueError):
        confidence_ball(points(), center, fake_report(0.0, 0.0), mode="sup_norm")
    with pytest.raises(ValueError):
        confidence_ball(points(), center, fake_report(0.0, 0.0), alpha=1.0)
    d = json.loads(json.dumps(ball.as_dict()))
    assert d["mode"] == "lebesgue_norm" and not d["empty"]


def test_regime_of():
    reg = regime_of(lambda x: np.atleast_2d(x)[:, 0] - 0.5)
    np.testing.assert_array_equal(reg(np.array([[0.2], [0.5], [0.9]])), [0.0, 0.0, 1.0])


def test_empirical_norm_substitution_error():
    # |psi_emp(b) - psi| <= 3 n^{-1/2} sqrt(empirical fourth moment) in almost every draw
    diff = lambda x: 0.5 * np.cos(3 * x[:, 0]) + x[:, 0] ** 2
    grid = (np.arange(2**14) + 0.5) / 2**14
    psi = np.mean(diff(grid[:, None]) ** 2)
    n, hits = 300, 0
    for rep in range(500):
        d = diff(make_rng(rep).uniform(size=(n, 1)))
        hits += abs(np.mean(d**2) - psi) <= 3 * np.sqrt(np.mean(d**4) / n)
    assert hits / 500 >= 0.99


def affine_estimator(a, v, w):
    return lambda t: (a - v * t, w)


def test_inversion_linear_case():
    a, v, w = 1.0, 2.0, 0.1
    grid = np.linspace(-1, 2, 3001)
    tset = invert_ci_for_tau(grid, affine_estimator(a, v, w), alpha=0.1)
    z = normal_quantile(0.95)
    lo, hi = (a - z * w) / v, (a + z * w) / v
    inside = grid[(grid > lo) & (grid < hi)]
    assert tset.interval_hull == (inside.min(), inside.max())
    assert tset.spacing == pytest.approx(0.001)
    assert tset.contains(0.5) and not tset.contains(1.0)


def test_inversion_zero_and_empty():
    grid = np.linspace(0, 1, 11)
    full = invert_ci_for_tau(grid, lambda t: (0.0, 1.0))
    np.testing.assert_array_equal(full.values, grid)
    none = invert_ci_for_tau(grid, lambda t: (10.0, 1.0))
    assert len(none.values) == 0 and math.isnan(none.interval_hull[0])
    assert not none.contains(0.5)
    with pytest.raises(ValueError):
        invert_ci_for_tau(grid, lambda t: (0.0, 0.0))
    d = json.loads(json.dumps(full.as_dict()))
    assert d["hull"] == [0.0, 1.0]


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_inversion_duality_and_reparameterization(seed):
    rng = make_rng(seed)
    c = rng.normal(size=3)
    est = lambda t: (c[0] + c[1] * t + c[2] * np.sin(3 * t), 0.2 + 0.1 * t**2)
    grid = np.sort(rng.uniform(-2, 2, 40))
    tset = invert_ci_for_tau(grid, est, alpha=0.2)
    z = normal_quantile(0.9)
    for t, ok in zip(grid, tset.accepted):
        psi, w = est(t)
        assert ok == (psi - z * w < 0 < psi + z * w)
    # strictly increasing reparameterization u = exp(t)
    other = invert_ci_for_tau(np.exp(grid), lambda u: est(np.log(u)), alpha=0.2)
    np.testing.assert_array_equal(other.accepted, tset.accepted)
    np.testing.assert_allclose(other.values, np.exp(tset.values))


def test_solve_tau():
    a, v = 1.3, 0.4
    assert solve_tau(lambda t: a - v * t, (0.0, 1.0), affine=True) == pytest.approx(a / v, rel=1e-12)
    root = solve_tau(lambda t: t**3 - 2.0, (0.0, 2.0))
    assert root == pytest.approx(2 ** (1 / 3), rel=1e-9)
    with pytest.raises(ValueError):
        solve_tau(lambda t: t**2 + 1.0, (-1.0, 1.0))
    with pytest.raises(ValueError):
        solve_tau(lambda t: 3.0, (0.0, 1.0), affine=True)
    assert solve_tau(lambda t: t, (0.0, 1.0)) == 0.0


def test_root_inside_hull_on_draws():
    # noisy affine estimators: the root sits inside the accepted hull
    grid = np.linspace(-3, 3, 601)
    for rep in range(50):
        rng = make_rng(rep)
        a = 0.5 + 0.1 * rng.normal()
        est = affine_estimator(a, 1.0, 0.1)
        tset = invert_ci_for_tau(grid, est)
        root = solve_tau(lambda t: est(t)[0], (-3, 3), affine=True)
        lo, hi = tset.interval_hull
        assert lo - tset.spacing <= root <= hi + tset.spacing
        assert abs(root - 0.5 * (lo + hi)) <= hi - lo
