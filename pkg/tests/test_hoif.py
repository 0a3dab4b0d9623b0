import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import (
    cholesky_rows,
    exact_cross_covariance,
    loop_vn,
    mod_order_means,
    mod_weighted_gram,
    order_means,
    perturbed_fit,
    psi_tilde,
    support_terms,
    tabulate_chain,
)

from hoifkit.basis import build_basis, build_design
from hoifkit.hoif import (
    EstimateReport,
    Pieces,
    alt_bias_gap_formula,
    alt_third_order_bias,
    compute_pieces,
    confidence_interval,
    eb_closed_form,
    eb_mod_closed_form,
    estimate_psi_mk,
    estimate_psi_mk_mod,
    exact_mean_mod,
    exact_order_means,
    order_term,
    oracle_estimation_bias,
    oracle_truncation_bias,
    reweighted_gram,
    standard_chain,
    support_pieces,
    variance_components,
    w2_order2,
    w2_order3,
    w2_randomized,
)
from hoifkit.model import make_functional
from hoifkit.nuisance import DiscreteDensity, NuisanceFit
from hoifkit.sim import make_rng, random_discrete_truth, rate_slope
from hoifkit.ustat import max_conditional_mean

POLY = build_basis("tensor_poly", 1, 8)


def specs():
    return [
        make_functional("ExpProduct1a"),
        make_functional("ExpCondCov1b"),
        make_functional("MARMean2a"),
        make_functional("MNARMean2b", alpha=0.3),
    ]


def setup(seed, spec, G=8, exact=(), n=9):
    rng = make_rng(seed)
    truth = random_discrete_truth(rng, G=G)
    fit = perturbed_fit(truth, spec, rng, exact=exact)
    data = truth.sample(n, seed + 1)
    return truth, fit, data


def test_order_one_is_plugin():
    spec = make_functional("ExpCondCov1b")
    truth, fit, data = setup(1, spec)
    rep = estimate_psi_mk(data, spec, fit, POLY, 1, 4, variance=False)
    h1, h2, h3, h4 = spec.h_terms(data.y, data.a, data.x)
    b, p = fit.b_hat(data.x), fit.p_hat(data.x)
    assert rep.psi_hat == pytest.approx(np.mean(b * p * h1 + b * h2 + p * h3 + h4), abs=1e-14)
    assert rep.per_order == [rep.psi_hat]


def test_second_order_kernel_product_form_1a():
    spec = make_functional("ExpProduct1a")
    truth, fit, data = setup(2, spec)
    k = 4
    rep = estimate_psi_mk(data, spec, fit, POLY, 2, k, variance=False)
    z = cholesky_rows(POLY, k, spec, fit, data.x)
    left = (data.a - fit.p_hat(data.x))[:, None] * z
    right = z * (data.y - fit.b_hat(data.x))[:, None]
    want = loop_vn(lambda i, j: left[i] @ right[j], data.n, 2)
    assert rep.per_order[1] == pytest.approx(want, abs=1e-12)


@pytest.mark.parametrize("spec", specs(), ids=lambda s: s.id)
def test_orders_match_explicit_loops(spec):
    truth, fit, data = setup(3, spec, n=7)
    k = 3
    rep = estimate_psi_mk(data, spec, fit, POLY, 4, k, variance=False)
    y, a, x = data.y, data.a, data.x
    h1, h2, h3, _ = spec.h_terms(y, a, x)
    eps = (h1 * fit.p_hat(x) + h2) * spec.bdot(x, fit)
    dlt = (h1 * fit.b_hat(x) + h3) * spec.pdot(x, fit)
    w = spec.pdot(x, fit) * spec.bdot(x, fit) * h1
    z = cholesky_rows(POLY, k, spec, fit, x)
    M = w[:, None, None] * z[:, :, None] * z[:, None, :] - np.eye(k)
    o2 = -loop_vn(lambda i, j: eps[i] * z[i] @ z[j] * dlt[j], 7, 2)
    o3 = loop_vn(lambda i, j, l: eps[i] * z[i] @ M[j] @ z[l] * dlt[l], 7, 3)
    o4 = -loop_vn(lambda i, j, l, q: eps[i] * z[i] @ M[j] @ M[l] @ z[q] * dlt[q], 7, 4)
    np.testing.assert_allclose(rep.per_order[1:], [o2, o3, o4], atol=1e-11)


def test_consecutive_orders_differ_by_one_chain_term():
    spec = make_functional("ExpCondCov1b")
    truth, fit, data = setup(4, spec, n=30)
    reps = [estimate_psi_mk(data, spec, fit, POLY, m, 5, variance=False) for m in (1, 2, 3, 4)]
    design = build_design(POLY, data.x, spec, fit, 5)
    pieces = compute_pieces(spec, fit, design.rows, data.y, data.a, data.x)
    for m in (2, 3, 4):
        assert reps[m - 1].psi_hat - reps[m - 2].psi_hat == pytest.approx(order_term(pieces, m), abs=1e-12)


@pytest.mark.parametrize("spec", specs(), ids=lambda s: s.id)
def test_estimation_bias_closed_form_matches_exact_means(spec):
    for seed in range(5):
        truth, fit, _ = setup(10 + seed, spec)
        for m in (2, 3):
            for k in (2, 5):
                orc = oracle_estimation_bias(truth, spec, fit, POLY, m, k)
                t = support_terms(truth, spec, fit, POLY, k)
                independent = math.fsum(order_means(truth, t, m)) - psi_tilde(truth, spec, t)
                assert abs(orc.EB_m - independent) <= 1e-10
                assert abs(orc.EB_m - orc.details["EB_enumeration"]) <= 1e-10


@pytest.mark.parametrize("which", ["b", "p", "g"])
@pytest.mark.parametrize("spec", specs(), ids=lambda s: s.id)
def test_triple_robustness(spec, which):
    for seed in range(3):
        truth, fit, _ = setup(20 + seed, spec, exact=(which,))
        for m in (2, 3):
            for k in (3, 6):
                t = support_terms(truth, spec, fit, POLY, k)
                assert abs(math.fsum(order_means(truth, t, m)) - psi_tilde(truth, spec, t)) <= 1e-12
                design = build_design(POLY, truth.atoms, spec, fit, k)
                assert abs(eb_closed_form(truth, spec, fit, design, m)) <= 1e-12


def test_correct_p_gives_unbiased_estimator_of_psi():
    spec = make_functional("ExpCondCov1b")
    truth, fit, _ = setup(30, spec, exact=("p",))
    psi = truth.psi(spec)
    for k in (1, 3, 8):
        t = support_terms(truth, spec, fit, POLY, k)
        for m in (1, 2, 3, 4):
            assert abs(math.fsum(order_means(truth, t, m)) - psi) <= 1e-12
        design = build_design(POLY, truth.atoms, spec, fit, k)
        assert abs(math.fsum(exact_order_means(truth, spec, fit, design, 3)) - psi) <= 1e-12


@pytest.mark.parametrize("spec", specs(), ids=lambda s: s.id)
def test_truncation_bias_routes(spec):
    for seed in range(5):
        truth, fit, _ = setup(40 + seed, spec)
        for k in (1, 4, 7):
            orc = oracle_truncation_bias(truth, spec, fit, POLY, k)
            t = support_terms(truth, spec, fit, POLY, k)
            assert abs(orc.psi_tilde_k - psi_tilde(truth, spec, t)) <= 1e-12
            assert abs(orc.TB_k - orc.details["TB_projection"]) <= 1e-12
            assert orc.psi_true == pytest.approx(truth.psi(spec), abs=1e-15)


def test_truncation_bias_vanishes_when_error_in_span():
    spec = make_functional("ExpCondCov1b")
    rng = make_rng(50)
    truth = random_discrete_truth(rng, G=8)
    nu = truth.nuisances(spec)
    phi = POLY.evaluate(truth.atoms, 0, 3)
    b_hat = nu["b"] - phi @ rng.normal(size=3)
    probs = truth.px * np.exp(rng.normal(0, 0.3, truth.G))
    fit = NuisanceFit(truth.lookup(b_hat), truth.lookup(nu["p"] + rng.normal(size=truth.G)), lambda x: np.ones(len(x)), DiscreteDensity(truth.atoms, probs / probs.sum()))
    # varsigma = 1 for this functional, so Q = 1 and the span condition is on b - b_hat itself
    assert abs(oracle_truncation_bias(truth, spec, fit, POLY, 3).TB_k) <= 1e-12
    assert abs(oracle_truncation_bias(truth, spec, fit, POLY, 2).TB_k) > 1e-6


def test_truncated_parameter_is_product_of_projections_1a():
    spec = make_functional("ExpProduct1a")
    rng = make_rng(51)
    truth = random_discrete_truth(rng, G=8)
    nu = truth.nuisances(spec)
    fit = NuisanceFit(lambda x: np.zeros(len(x)), lambda x: np.zeros(len(x)), lambda x: -np.ones(len(x)), truth.density())
    k = 3
    orc = oracle_truncation_bias(truth, spec, fit, POLY, k)
    # L2(f) projections of b and p on the first k polynomials
    phi = POLY.evaluate(truth.atoms, 0, k)
    gram = (phi * truth.px[:, None]).T @ phi
    proj = lambda h: phi @ np.linalg.solve(gram, phi.T @ (truth.px * h))
    assert orc.psi_tilde_k == pytest.approx(np.sum(truth.px * proj(nu["b"]) * proj(nu["p"])), abs=1e-12)


def test_bias_order_in_misspecification_size():
    spec = make_functional("ExpCondCov1b")
    rng = make_rng(52)
    truth = random_discrete_truth(rng, G=8)
    nu = truth.nuisances(spec)
    db, dp, dv, df = (rng.normal(size=truth.G) for _ in range(4))
    ts = [0.04, 0.02, 0.01]
    for m in (2, 3, 4):
        biases = []
        for t in ts:
            probs = truth.px * np.exp(t * df)
            fit = NuisanceFit(truth.lookup(nu["b"] + t * db), truth.lookup(nu["p"] + t * dp), truth.lookup(nu["varsigma"] * np.exp(t * dv)), DiscreteDensity(truth.atoms, probs / probs.sum()))
            design = build_design(POLY, truth.atoms, spec, fit, 3)
            biases.append(abs(eb_closed_form(truth, spec, fit, design, m)))
        slope, _ = rate_slope(ts, biases)
        assert slope >= m + 1 - 0.3


@pytest.mark.parametrize("j", [2, 3, 4])
def test_kernels_degenerate_under_fitted_law(j):
    for spec in specs():
        truth = random_discrete_truth(make_rng(60 + j), G=4)
        fit = truth.as_fit(spec)
        design = build_design(POLY, truth.atoms, spec, fit, 3)
        pieces = support_pieces(truth, spec, fit, design)
        table = tabulate_chain(standard_chain(pieces, j), truth.L)
        assert max_conditional_mean(table, truth.w) <= 1e-10


def test_orders_uncorrelated_under_fitted_law():
    spec = make_functional("MARMean2a")
    truth = random_discrete_truth(make_rng(70), G=4)
    fit = truth.as_fit(spec)
    design = build_design(POLY, truth.atoms, spec, fit, 3)
    pieces = support_pieces(truth, spec, fit, design)
    tables = {1: pieces.h - truth.psi(spec)}
    for j in (2, 3):
        tables[j] = tabulate_chain(standard_chain(pieces, j), truth.L)
    for a, b in ((1, 2), (1, 3), (2, 3)):
        assert abs(exact_cross_covariance(tables[a], tables[b], truth.w, 10)) <= 1e-10
    assert exact_cross_covariance(tables[2], tables[2], truth.w, 10) > 1e-8


# -- multi-robust estimator


def g_of(truth, spec, values=None):
    nu = truth.nuisances(spec)
    return truth.lookup(nu["g"] if values is None else values)


def test_mod_with_fitted_g_reproduces_standard():
    spec = make_functional("ExpCondCov1b")
    truth, fit, data = setup(80, spec, n=12)
    std = estimate_psi_mk(data, spec, fit, POLY, 4, 4, variance=False)
    mod = estimate_psi_mk_mod(data, spec, fit, [fit.g_hat, fit.g_hat], POLY, 4, 4, variance=False)
    np.testing.assert_allclose(mod.per_order, std.per_order, atol=1e-12)


def test_mod_third_order_matches_display_loop():
    spec = make_functional("ExpCondCov1b")
    truth, fit, data = setup(81, spec, n=6)
    g3 = g_of(truth, spec)
    k = 3
    rep = estimate_psi_mk_mod(data, spec, fit, [g3], POLY, 3, k, variance=False)
    x = data.x
    h1, h2, h3, _ = spec.h_terms(data.y, data.a, x)
    eps = (h1 * fit.p_hat(x) + h2) * spec.bdot(x, fit)
    dlt = (h1 * fit.b_hat(x) + h3) * spec.pdot(x, fit)
    w = spec.pdot(x, fit) * spec.bdot(x, fit) * h1
    z = cholesky_rows(POLY, k, spec, fit, x)
    E3 = mod_weighted_gram(truth, spec, fit, POLY, k, g3)
    E3_inv = np.linalg.inv(E3)

    def kern(i, j, l):
        return eps[i] * z[i] @ (w[j] * np.outer(z[j], z[j]) - np.eye(k)) @ E3_inv @ z[l] * dlt[l]

    assert rep.per_order[2] == pytest.approx(loop_vn(kern, 6, 3), abs=1e-12)


@pytest.mark.parametrize("spec", specs(), ids=lambda s: s.id)
def test_mod_unbiased_when_extra_g_correct(spec):
    for seed in range(3):
        truth, fit, _ = setup(90 + seed, spec)
        k = 4
        t = support_terms(truth, spec, fit, POLY, k)
        target = psi_tilde(truth, spec, t)
        wrong = g_of(truth, spec, truth.nuisances(spec)["g"] * np.exp(make_rng(seed).normal(0, 0.3, truth.G)))
        for extras in ([g_of(truth, spec)], [wrong, g_of(truth, spec)], [g_of(truth, spec), wrong]):
            m = len(extras) + 2
            e_lib = [reweighted_gram(build_design(POLY, truth.atoms, spec, fit, k), fit, g) for g in extras]
            design = build_design(POLY, truth.atoms, spec, fit, k)
            assert abs(exact_mean_mod(truth, spec, fit, design, e_lib, m) - target) <= 1e-10
            e_ind = [mod_weighted_gram(truth, spec, fit, POLY, k, g) for g in extras]
            assert abs(math.fsum(mod_order_means(truth, t, e_ind, m)) - target) <= 1e-10
        # with every fit wrong the bias is the closed form and is not zero
        e_lib = [reweighted_gram(design, fit, wrong)]
        eb = eb_mod_closed_form(truth, spec, fit, design, e_lib, 3)
        assert abs(exact_mean_mod(truth, spec, fit, design, e_lib, 3) - target - eb) <= 1e-10
        assert abs(eb) > 1e-8


def test_mod_argument_checks():
    spec = make_functional("ExpCondCov1b")
    truth, fit, data = setup(95, spec)
    with pytest.raises(ValueError):
        estimate_psi_mk_mod(data, spec, fit, [], POLY, 2, 3)
    with pytest.raises(ValueError):
        estimate_psi_mk_mod(data, spec, fit, [fit.g_hat], POLY, 4, 3)


# -- variance estimates


def brute_w2(kernel, n, j):
    """C(n,j)^{-1} V_n[h_sym^2] by explicit loops."""
    import itertools

    def hsym(*idx):
        return np.mean([kernel(*p) for p in itertools.permutations(idx)])

    return loop_vn(lambda *idx: hsym(*idx) ** 2, n, j) / math.comb(n, j)


def small_pieces(seed, n, k=3):
    rng = make_rng(seed)
    return Pieces(rng.normal(size=n), rng.normal(size=n), rng.normal(size=n), rng.uniform(0.5, 1.5, n), rng.normal(size=(n, k)))


def test_w2_order2_matches_loops():
    pc = small_pieces(1, 7)
    kern = lambda i, j: -pc.u[i] @ pc.v[j]
    assert w2_order2(pc, (0, 3)) == pytest.approx(brute_w2(kern, 7, 2), rel=1e-12)
    kern_sub = lambda i, j: -pc.u[i, 1:3] @ pc.v[j, 1:3]
    assert w2_order2(pc, (1, 3)) == pytest.approx(brute_w2(kern_sub, 7, 2), rel=1e-12)


def test_w2_order3_matches_loops():
    pc = small_pieces(2, 7)
    M = pc.w[:, None, None] * pc.z[:, :, None] * pc.z[:, None, :] - np.eye(3)
    kern = lambda i, j, l: pc.u[i] @ M[j] @ pc.v[l]
    assert w2_order3(pc, [((0, 3), (0, 3))]) == pytest.approx(brute_w2(kern, 7, 3), rel=1e-11)


def test_w2_randomized_is_unbiased():
    pc = small_pieces(3, 8)
    exact = w2_order3(pc, [((0, 3), (0, 3))])
    ker = standard_chain(pc, 3)
    draws = [w2_randomized([(1.0, ker)], 3, 8, 400, seed) for seed in range(200)]
    se = np.std(draws, ddof=1) / np.sqrt(len(draws))
    assert abs(np.mean(draws) - exact) <= 4 * se


def test_variance_components():
    pc = small_pieces(4, 10)
    comps, info = variance_components(pc, 4, tuples=2000, seed=5)
    assert comps[0] == pytest.approx(np.var(pc.h, ddof=1) / 10)
    assert all(c >= 0 for c in comps)
    assert info["randomized_orders"] == [4] and info["tuples"] == 2000 and info["seed"] == 5
    comps2, _ = variance_components(pc, 4, j_exact_max=2, tuples=2000, seed=5)
    assert comps2[:2] == comps[:2]
    with pytest.raises(ValueError):
        variance_components(small_pieces(5, 5), 3)
    with pytest.raises(ValueError):
        variance_components(pc, 2, j_exact_max=4)


def test_variance_estimate_unbiased_by_enumeration():
    spec = make_functional("ExpCondCov1b")
    truth = random_discrete_truth(make_rng(100), G=2)
    fit = truth.as_fit(spec)
    design = build_design(POLY, truth.atoms, spec, fit, 2)
    sp = support_pieces(truth, spec, fit, design)
    n = 4
    from oracles import enumerate_datasets

    e_w1 = e_w2 = e_if1 = e_if1_sq = e_if2 = e_if2_sq = 0.0
    for idx, prob in enumerate_datasets(truth, n):
        pc = Pieces(sp.h[idx], sp.eps[idx], sp.delta[idx], sp.w[idx], sp.z[idx])
        comps, _ = variance_components(pc, 2)
        if1 = float(np.mean(pc.h))
        if2 = order_term(pc, 2)
        e_w1 += prob * comps[0]
        e_w2 += prob * comps[1]
        e_if1 += prob * if1
        e_if1_sq += prob * if1**2
        e_if2 += prob * if2
        e_if2_sq += prob * if2**2
    assert abs(e_w1 - (e_if1_sq - e_if1**2)) <= 1e-10
    assert abs(e_w2 - (e_if2_sq - e_if2**2)) <= 1e-10


# -- intervals and reports


def report(psi, w2):
    return EstimateReport(psi, [psi], [w2], w2, (0.0, 0.0, 0.05), {"n": 100, "k": 400, "m": 2})


def test_interval_worked_example():
    lo, hi, alpha = confidence_interval(report(1.0, 0.01), 0.05)
    assert lo == pytest.approx(1 - 1.959964 * 0.1, abs=1e-7)
    assert hi == pytest.approx(1 + 1.959964 * 0.1, abs=1e-7)
    assert alpha == 0.05


def test_bias_corrected_interval():
    rep = report(0.5, 0.04)
    plain = confidence_interval(rep, 0.1)
    assert confidence_interval(rep, 0.1, "bias_corrected", C_bias=0.0) == plain
    wide = confidence_interval(rep, 0.1, "bias_corrected", C_bias=2.0)
    assert wide[1] - plain[1] == pytest.approx(2.0 * math.sqrt(4.0 / 100), rel=1e-12)
    with pytest.raises(ValueError):
        confidence_interval(rep, 1.5)
    with pytest.raises(ValueError):
        confidence_interval(report(0.0, 0.0).__class__(0.0, [], [], 0.0, (0, 0, 0.1)), 0.1, "bias_corrected", C_bias=1.0)


def test_report_invariants_and_serialization():
    spec = make_functional("ExpCondCov1b")
    truth, fit, data = setup(110, spec, n=40)
    rep = estimate_psi_mk(data, spec, fit, POLY, 3, 4, alpha=0.1)
    assert rep.psi_hat == pytest.approx(math.fsum(rep.per_order))
    assert rep.W2_total == pytest.approx(math.fsum(rep.variance_components))
    assert rep.W2_total >= 0
    assert rep.interval == confidence_interval(rep, 0.1)
    d = rep.as_dict()
    assert d["config"]["functional"] == "ExpCondCov1b" and d["config"]["m"] == 3 and d["config"]["k"] == 4
    assert [row[0] for row in rep.order_table()] == [1, 2, 3]
    with pytest.raises(ValueError):
        estimate_psi_mk(data, spec, fit, POLY, 0, 4)


# -- alternative third-order kernel


def alt_setup(seed, keep_f=False, keep_b=False):
    spec = make_functional("ExpCondCov1b")
    rng = make_rng(seed)
    truth = random_discrete_truth(rng, G=8)
    nu = truth.nuisances(spec)
    t = truth.atoms[:, 0] - 0.5
    b_hat = nu["b"] if keep_b else nu["b"] - 0.2 * (t**2 - 1 / 12)
    p_hat = nu["p"] - 0.2 * t
    probs = truth.px if keep_f else truth.px * (1 + 0.5 * t)
    fit = NuisanceFit(truth.lookup(b_hat), truth.lookup(p_hat), lambda x: np.ones(len(x)), DiscreteDensity(truth.atoms, probs / probs.sum()))
    return truth, spec, fit


def test_alt_kernel_equal_when_density_correct():
    truth, spec, fit = alt_setup(120, keep_f=True)
    std, star = alt_third_order_bias(truth, spec, fit, build_basis("tensor_poly", 1, 8), 2)
    assert std == pytest.approx(star, abs=1e-14)


def test_alt_kernel_zero_when_b_correct():
    truth, spec, fit = alt_setup(121, keep_b=True)
    std, star = alt_third_order_bias(truth, spec, fit, build_basis("tensor_poly", 1, 8), 2)
    assert abs(std) <= 1e-14 and abs(star) <= 1e-14


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=15, deadline=None)
def test_alt_kernel_gap_formula(seed):
    truth, spec, fit = alt_setup(seed)
    basis = build_basis("tensor_poly", 1, 8)
    std, star = alt_third_order_bias(truth, spec, fit, basis, 2)
    assert abs((star - std) - alt_bias_gap_formula(truth, spec, fit, basis, 2)) <= 1e-10


def test_alt_kernel_requires_unit_h1():
    truth = random_discrete_truth(make_rng(3), G=4)
    spec = make_functional("MARMean2a")
    with pytest.raises(ValueError):
        alt_third_order_bias(truth, spec, truth.as_fit(spec), POLY, 2)
