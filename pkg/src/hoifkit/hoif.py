"""Higher-order influence function estimators, variance estimates and bias oracles.

Notation (all per estimation-sample observation):
    eps   = (H1 p_hat + H2) Bdot
    delta = (H1 b_hat + H3) Pdot
    w     = Pdot Bdot H1
    Z     = design row (k-vector)
    u = eps Z,  v = Z delta,  M = w Z Z^T - I.

The order-j correction is (-1)^{j-1} V_n[u_{i1}^T M_{i2} ... M_{i_{j-1}} v_{ij}]
(with j - 2 mid factors), and psi_hat_{m,k} is the plug-in mean of H(b_hat, p_hat)
plus the corrections of orders 2..m.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

from hoifkit.basis import BasisSystem, DesignMatrix, build_design
from hoifkit.model import Dataset, FunctionalSpec, h_value, residuals
from hoifkit.ustat import ChainKernel, RankOneMid, vn_chain

DEFAULT_W2_TUPLES = 2_000_000


@dataclass(frozen=True)
class Pieces:
    """Per-observation ingredients of every kernel."""

    h: np.ndarray
    eps: np.ndarray
    delta: np.ndarray
    w: np.ndarray
    z: np.ndarray

    @property
    def n(self) -> int:
        return len(self.h)

    @property
    def u(self) -> np.ndarray:
        return self.eps[:, None] * self.z

    @property
    def v(self) -> np.ndarray:
        return self.z * self.delta[:, None]


def compute_pieces(spec: FunctionalSpec, fit, z: np.ndarray, y, a, x) -> Pieces:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    h1, *_ = spec.h_terms(y, a, x)
    h = h_value(spec, (y, a, x), fit.b_hat(x), fit.p_hat(x))
    eps, delta = residuals(spec, (y, a, x), fit)
    w = spec.pdot(x, fit) * spec.bdot(x, fit) * h1
    return Pieces(np.asarray(h), eps, delta, w, np.asarray(z, dtype=float))


def identity_block(r_in: tuple[int, int], r_out: tuple[int, int]) -> np.ndarray | None:
    """Rectangular identity I[i, j] = 1 when the absolute indices coincide."""
    lo = max(r_in[0], r_out[0])
    hi = min(r_in[1], r_out[1])
    if hi <= lo:
        return None
    block = np.zeros((r_in[1] - r_in[0], r_out[1] - r_out[0]))
    t = np.arange(lo, hi)
    block[t - r_in[0], t - r_out[0]] = 1.0
    return block


def block_chain(pieces: Pieces, ranges) -> ChainKernel:
    """Chain kernel u[r1]^T prod (w Z[r_{l-1}] Z[r_l]^T - I_block) v[r_last].

    ``ranges`` lists the (lo, hi] slots for positions 1..j-1 (0-based lo).
    """
    ranges = [tuple(r) for r in ranges]
    if not ranges:
        raise ValueError("a chain needs at least one slot")
    for lo, hi in ranges:
        if not 0 <= lo < hi <= pieces.z.shape[1]:
            raise ValueError(f"range ({lo}, {hi}] does not fit the design of width {pieces.z.shape[1]}")
    z = pieces.z
    head = pieces.eps[:, None] * z[:, ranges[0][0]:ranges[0][1]]
    tail = z[:, ranges[-1][0]:ranges[-1][1]] * pieces.delta[:, None]
    mids = []
    for r_in, r_out in zip(ranges[:-1], ranges[1:]):
        mids.append(RankOneMid(pieces.w, z[:, r_in[0]:r_in[1]], z[:, r_out[0]:r_out[1]], identity_block(r_in, r_out)))
    return ChainKernel(head, tail, tuple(mids))


def standard_chain(pieces: Pieces, j: int, k: int | None = None) -> ChainKernel:
    k = pieces.z.shape[1] if k is None else k
    return block_chain(pieces, [(0, k)] * (j - 1))


def order_term(pieces: Pieces, j: int, k: int | None = None, counter=None) -> float:
    """(-1)^{j-1} V_n of the order-j chain (j >= 2) on the first k design columns."""
    if j < 2:
        raise ValueError("chain terms start at order 2")
    return (-1) ** (j - 1) * vn_chain(standard_chain(pieces, j, k), counter=counter)


# ----------------------------------------------------------------------------
# variance estimates


def _sym_sq_order2(cmat: np.ndarray) -> float:
    n = cmat.shape[0]
    sym = 0.5 * (cmat + cmat.T)
    sq = sym**2
    return float((sq.sum() - np.trace(sq)) / (n * (n - 1)))


def w2_order2(pieces: Pieces, r: tuple[int, int]) -> float:
    """C(n,2)^{-1} V_n[h_sym^2] for h(a,b) = -u_a[r] . v_b[r]."""
    n = pieces.n
    cmat = pieces.u[:, r[0]:r[1]] @ pieces.v[:, r[0]:r[1]].T
    return _sym_sq_order2(cmat) / math.comb(n, 2)


def w2_order3(pieces: Pieces, rects) -> float:
    """C(n,3)^{-1} V_n[h_sym^2] for h(a,b,c) = sum_rect u_a[r1]^T (w_b Z_b[r1] Z_b[r2]^T - I) v_c[r2]."""
    n = pieces.n
    if n < 6:
        raise ValueError("third-order variance needs n >= 6")
    u, v, z, w = pieces.u, pieces.v, pieces.z, pieces.w
    ps, rs = [], []
    cmat = np.zeros((n, n))
    for r1, r2 in rects:
        ps.append(u[:, r1[0]:r1[1]] @ z[:, r1[0]:r1[1]].T)
        rs.append(z[:, r2[0]:r2[1]] @ v[:, r2[0]:r2[1]].T)
        block = identity_block(r1, r2)
        if block is not None:
            cmat += u[:, r1[0]:r1[1]] @ block @ v[:, r2[0]:r2[1]].T
    total = 0.0
    idx = np.arange(n)
    for a in range(n):
        x1 = -cmat[a][None, :] + sum((w * p[a])[:, None] * r for p, r in zip(ps, rs))
        x3 = w[a] * sum(np.outer(p[:, a], r[a, :]) for p, r in zip(ps, rs)) - cmat
        x4 = sum(p * (w * r[:, a])[None, :] for p, r in zip(ps, rs)) - cmat[:, a][:, None]
        hs = (x1 + x1.T + x3 + x3.T + x4 + x4.T) / 6.0
        sq = hs**2
        sq[idx, idx] = 0.0
        sq[a, :] = 0.0
        sq[:, a] = 0.0
        total += float(sq.sum())
    return total / (n * (n - 1) * (n - 2)) / math.comb(n, 3)


def _distinct_tuples(n: int, j: int, count: int, rng: np.random.Generator) -> np.ndarray:
    out = rng.integers(0, n, size=(count, j))
    while True:
        srt = np.sort(out, axis=1)
        bad = np.any(srt[:, 1:] == srt[:, :-1], axis=1)
        if not bad.any():
            return out
        out[bad] = rng.integers(0, n, size=(int(bad.sum()), j))


def w2_randomized(kernels, j: int, n: int, tuples: int, seed: int, chunk: int = 4096) -> float:
    """Unbiased estimate of C(n,j)^{-1} E[h_sym^2] from uniformly drawn distinct tuples.

    ``kernels`` is a list of (coefficient, ChainKernel) pairs of order j whose sum is h.
    """
    import itertools

    rng = np.random.Generator(np.random.Philox(seed))
    perms = list(itertools.permutations(range(j)))
    acc = 0.0
    done = 0
    while done < tuples:
        size = min(chunk, tuples - done)
        tup = _distinct_tuples(n, j, size, rng)
        hsym = np.zeros(size)
        for perm in perms:
            idx = [tup[:, p] for p in perm]
            for coef, ker in kernels:
                hsym += coef * ker.evaluate(*idx)
        hsym /= len(perms)
        acc += float(np.sum(hsym**2))
        done += size
    return acc / tuples / math.comb(n, j)


def variance_components(pieces: Pieces, m: int, k: int | None = None, j_exact_max: int = 3, tuples: int | None = None, seed: int = 0) -> tuple[list, dict]:
    """[W2_1, W2_22, ..., W2_mm] and bookkeeping (seed, tuple counts)."""
    if j_exact_max not in (2, 3):
        raise ValueError("j_exact_max must be 2 or 3")
    n = pieces.n
    if n < 2 * m:
        raise ValueError(f"variance estimation needs n >= 2m (n={n}, m={m})")
    k = pieces.z.shape[1] if k is None else k
    comps = [float(np.var(pieces.h, ddof=1) / n) if n > 1 else 0.0]
    info = {"seed": seed, "randomized_orders": [], "tuples": None}
    for j in range(2, m + 1):
        if j == 2:
            comps.append(w2_order2(pieces, (0, k)))
        elif j == 3 and j_exact_max >= 3:
            comps.append(w2_order3(pieces, [((0, k), (0, k))]))
        else:
            count = tuples if tuples is not None else int(min(DEFAULT_W2_TUPLES, n**3))
            info["randomized_orders"].append(j)
            info["tuples"] = count
            comps.append(w2_randomized([(1.0, standard_chain(pieces, j, k))], j, n, count, seed + j))
    return comps, info


# ----------------------------------------------------------------------------
# reports and intervals


def normal_quantile(p: float) -> float:
    """Inverse standard normal CDF."""
    if not 0.0 < p < 1.0:
        raise ValueError("probability must lie in (0, 1)")
    return NormalDist().inv_cdf(p)


@dataclass
class EstimateReport:
    psi_hat: float
    per_order: list
    variance_components: list
    W2_total: float
    interval: tuple
    config: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    @property
    def W(self) -> float:
        return math.sqrt(max(self.W2_total, 0.0))

    def as_dict(self) -> dict:
        return {
            "psi_hat": self.psi_hat,
            "per_order": list(self.per_order),
            "variance_components": list(self.variance_components),
            "W2_total": self.W2_total,
            "W": self.W,
            "interval": {"lo": self.interval[0], "hi": self.interval[1], "alpha": self.interval[2]},
            "config": self.config,
            "diagnostics": self.diagnostics,
        }

    def order_table(self) -> list[tuple]:
        rows = []
        for j, val in enumerate(self.per_order, start=1):
            w2 = self.variance_components[j - 1] if j - 1 < len(self.variance_components) else float("nan")
            rows.append((j, val, w2))
        return rows


def confidence_interval(report: EstimateReport, alpha: float = 0.05, mode: str = "plain", C_bias: float = 0.0, n: int | None = None, k: int | None = None, m: int | None = None) -> tuple:
    """psi_hat +- z_{alpha/2} W, optionally widened by C_bias sqrt(max(1,(k/n)^{m-1})/n)."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if mode not in ("plain", "inflated", "bias_corrected"):
        raise ValueError(f"unknown interval mode '{mode}'")
    z = normal_quantile(1.0 - alpha / 2.0)
    half = z * report.W
    if mode == "bias_corrected":
        n = report.config.get("n") if n is None else n
        k = report.config.get("k") if k is None else k
        m = report.config.get("m") if m is None else m
        if n is None or k is None or m is None:
            raise ValueError("bias-corrected interval needs n, k and m")
        half += C_bias * math.sqrt(max(1.0, (k / n) ** (m - 1)) / n)
    return (report.psi_hat - half, report.psi_hat + half, alpha)


def _finish(per_order, comps, alpha, config, diagnostics) -> EstimateReport:
    psi = float(math.fsum(per_order))
    w2 = float(math.fsum(comps)) if comps else 0.0
    rep = EstimateReport(psi, list(per_order), list(comps), w2, (float("nan"), float("nan"), alpha), config, diagnostics)
    if comps:
        rep.interval = confidence_interval(rep, alpha)
    return rep


def _estimation_columns(est_data):
    if isinstance(est_data, Dataset):
        d = est_data.estimation() if est_data.train.any() else est_data
        return d.y, d.a, d.x
    return est_data


def estimate_from_pieces(pieces: Pieces, m: int, k: int | None = None, alpha: float = 0.05, variance: bool = True, j_exact_max: int = 3, tuples: int | None = None, seed: int = 0, config: dict | None = None) -> EstimateReport:
    if m < 1:
        raise ValueError("m must be at least 1")
    k = pieces.z.shape[1] if k is None else k
    per_order = [float(np.mean(pieces.h))]
    for j in range(2, m + 1):
        per_order.append(order_term(pieces, j, k))
    comps, info = variance_components(pieces, m, k, j_exact_max, tuples, seed) if variance else ([], {})
    cfg = {"m": m, "k": k, "n": pieces.n}
    cfg.update(config or {})
    return _finish(per_order, comps, alpha, cfg, {"variance": info})


def estimate_psi_mk(est_data, spec: FunctionalSpec, fit, basis: BasisSystem, m: int, k: int, mode: str = "gram_sqrt_inverse", alpha: float = 0.05, variance: bool = True, j_exact_max: int = 3, tuples: int | None = None, seed: int = 0, design: DesignMatrix | None = None) -> EstimateReport:
    """psi_hat_{m,k}: plug-in mean plus chain corrections of orders 2..m."""
    y, a, x = _estimation_columns(est_data)
    if design is None:
        design = build_design(basis, x, spec, fit, k, mode)
    elif design.k < k:
        raise ValueError("supplied design is narrower than k")
    pieces = compute_pieces(spec, fit, design.rows, y, a, x)
    cfg = {"basis": basis.kind, "K_max": basis.max_size, "functional": spec.id, "mode": design.mode}
    return estimate_from_pieces(pieces, m, k, alpha, variance, j_exact_max, tuples, seed, cfg)


def variance_hat(est_data, spec: FunctionalSpec, fit, basis: BasisSystem, m: int, k: int, j_exact_max: int = 3, mode: str = "gram_sqrt_inverse", tuples: int | None = None, seed: int = 0) -> list:
    y, a, x = _estimation_columns(est_data)
    design = build_design(basis, x, spec, fit, k, mode)
    pieces = compute_pieces(spec, fit, design.rows, y, a, x)
    return variance_components(pieces, m, k, j_exact_max, tuples, seed)[0]


# ----------------------------------------------------------------------------
# multi-robust estimator


def reweighted_gram(design: DesignMatrix, fit, g_extra) -> np.ndarray:
    """E_s = sum_q w_q (g_s / g_hat)(x_q) T phi phi^T T^T under the fitted reference measure."""
    from hoifkit.basis import reference_quadrature

    pts, wts = reference_quadrature(design.basis, fit.f_hat, design.k)
    ratio = np.asarray(g_extra(pts), dtype=float) / fit.g_hat(pts)
    phi = design.basis.evaluate(pts, 0, design.k) @ design.gram_transform.T
    return (phi * (wts * ratio)[:, None]).T @ phi


def mod_chain(pieces: Pieces, j: int, e_mats: list) -> ChainKernel:
    """Order-j chain of the multi-robust estimator (e_mats holds E_3..E_m)."""
    z = pieces.z
    k = z.shape[1]
    eye = np.eye(k)
    mids = [RankOneMid(pieces.w, z, z, eye)]
    for s in range(3, j):
        inv = np.linalg.inv(e_mats[s - 3])
        mids.append(RankOneMid(pieces.w, z @ inv, z, eye))
    tail = pieces.v @ np.linalg.inv(e_mats[j - 3])
    return ChainKernel(pieces.u, tail, tuple(mids))


def estimate_psi_mk_mod(est_data, spec: FunctionalSpec, fit, extra_g_fits: list, basis: BasisSystem, m: int, k: int, mode: str = "gram_sqrt_inverse", alpha: float = 0.05, variance: bool = True, seed: int = 0) -> EstimateReport:
    """Multi-robust estimator: order-s positions whitened by extra fits g_3..g_m."""
    if m < 3:
        raise ValueError("the multi-robust estimator needs m >= 3")
    if len(extra_g_fits) != m - 2:
        raise ValueError(f"need {m - 2} extra fits, got {len(extra_g_fits)}")
    y, a, x = _estimation_columns(est_data)
    design = build_design(basis, x, spec, fit, k, mode)
    pieces = compute_pieces(spec, fit, design.rows, y, a, x)
    e_mats = [reweighted_gram(design, fit, g) for g in extra_g_fits]
    per_order = [float(np.mean(pieces.h)), order_term(pieces, 2, k)]
    for j in range(3, m + 1):
        per_order.append((-1) ** (j - 1) * vn_chain(mod_chain(pieces, j, e_mats)))
    comps = []
    info = {}
    if variance:
        comps = [float(np.var(pieces.h, ddof=1) / pieces.n), w2_order2(pieces, (0, k))]
        count = int(min(DEFAULT_W2_TUPLES, pieces.n**3))
        for j in range(3, m + 1):
            comps.append(w2_randomized([(1.0, mod_chain(pieces, j, e_mats))], j, pieces.n, min(count, 200_000), seed + j))
        info = {"seed": seed, "randomized_orders": list(range(3, m + 1))}
    cfg = {"m": m, "k": k, "n": pieces.n, "basis": basis.kind, "functional": spec.id, "estimator": "psi_mod"}
    return _finish(per_order, comps, alpha, cfg, {"variance": info})


# ----------------------------------------------------------------------------
# exact bias oracles on discrete truths


@dataclass
class BiasOracle:
    TB_k: float
    EB_m: float
    psi_tilde_k: float
    psi_true: float
    details: dict = field(default_factory=dict)


def _atom_quantities(truth, spec, fit, design):
    """Per-atom truth and fit quantities used by the closed forms."""
    atoms = truth.atoms
    nu = truth.nuisances(spec)
    bd = spec.bdot(atoms, fit)
    pd = spec.pdot(atoms, fit)
    q2 = bd * pd * nu["varsigma"]
    z = design.rows_at(atoms, spec, fit)
    return {
        "px": truth.px,
        "q2": q2,
        "dB": (nu["b"] - fit.b_hat(atoms)) / bd,
        "dP": (nu["p"] - fit.p_hat(atoms)) / pd,
        "z": z,
        "bd": bd,
        "pd": pd,
        "nu": nu,
    }


def truncation_pieces(truth, spec, fit, design) -> dict:
    q = _atom_quantities(truth, spec, fit, design)
    wq = q["px"] * q["q2"]
    z = q["z"]
    sigma = (z * wq[:, None]).T @ z
    avec = z.T @ (wq * q["dB"])
    cvec = z.T @ (wq * q["dP"])
    q.update({"Sigma": sigma, "a": avec, "c": cvec})
    return q


def oracle_truncation_bias(truth, spec: FunctionalSpec, fit, basis: BasisSystem, k: int, mode: str = "gram_sqrt_inverse", tol: float = 1e-9) -> BiasOracle:
    """psi_tilde_k from the closed-form truncated parameters and the projection formula."""
    design = build_design(basis, truth.atoms, spec, fit, k, mode)
    tp = truncation_pieces(truth, spec, fit, design)
    eta = np.linalg.solve(tp["Sigma"], tp["a"])
    alp = np.linalg.solve(tp["Sigma"], tp["c"])
    atoms = truth.atoms
    b_tilde = fit.b_hat(atoms) + tp["bd"] * (tp["z"] @ eta)
    p_tilde = fit.p_hat(atoms) + tp["pd"] * (tp["z"] @ alp)
    psi_tilde = truth.h_mean(spec, b_tilde, p_tilde)
    psi = truth.psi(spec)
    # double projection: residuals of Q dB and Q dP on Q Z in L2(truth)
    root = np.sqrt(tp["px"] * tp["q2"])
    design_w = root[:, None] * tp["z"]
    rb = root * tp["dB"] - design_w @ np.linalg.lstsq(design_w, root * tp["dB"], rcond=None)[0]
    rp = root * tp["dP"] - design_w @ np.linalg.lstsq(design_w, root * tp["dP"], rcond=None)[0]
    tb_proj = float(rb @ rp)
    tb = psi_tilde - psi
    if abs(tb - tb_proj) > tol * (1.0 + abs(psi)):
        raise RuntimeError(f"truncation bias routes disagree: {tb} vs {tb_proj}")
    return BiasOracle(tb, float("nan"), psi_tilde, psi, {"TB_projection": tb_proj, "eta": eta, "alpha": alp})


def eb_closed_form(truth, spec, fit, design, m: int) -> float:
    """(-1)^{m-1} c^T (Sigma - I)^{m-1} Sigma^{-1} a."""
    tp = truncation_pieces(truth, spec, fit, design)
    sigma = tp["Sigma"]
    dmat = sigma - np.eye(sigma.shape[0])
    vec = np.linalg.solve(sigma, tp["a"])
    for _ in range(m - 1):
        vec = dmat @ vec
    return float((-1) ** (m - 1) * tp["c"] @ vec)


def support_pieces(truth, spec, fit, design) -> Pieces:
    y, a, x = truth.columns()
    return compute_pieces(spec, fit, design.rows_at(x, spec, fit), y, a, x)


def exact_order_means(truth, spec, fit, design, m: int) -> list:
    """Exact expectations of the plug-in term and each chain term, by enumeration."""
    from hoifkit.sim import exact_expectation

    pieces = support_pieces(truth, spec, fit, design)
    out = [truth.expect(pieces.h)]
    for j in range(2, m + 1):
        ker = standard_chain(pieces, j)
        out.append((-1) ** (j - 1) * exact_expectation(ker.evaluate, truth, j))
    return out


def oracle_estimation_bias(truth, spec: FunctionalSpec, fit, basis: BasisSystem, m: int, k: int, mode: str = "gram_sqrt_inverse", tol: float = 1e-9) -> BiasOracle:
    """Closed-form estimation bias checked against exact enumeration of E[psi_hat_{m,k}]."""
    tb = oracle_truncation_bias(truth, spec, fit, basis, k, mode)
    design = build_design(basis, truth.atoms, spec, fit, k, mode)
    eb = eb_closed_form(truth, spec, fit, design, m)
    means = exact_order_means(truth, spec, fit, design, m)
    eb_enum = float(math.fsum(means)) - tb.psi_tilde_k
    if abs(eb - eb_enum) > tol * (1.0 + abs(tb.psi_tilde_k)):
        raise RuntimeError(f"estimation bias routes disagree: {eb} vs {eb_enum}")
    details = dict(tb.details)
    details.update({"EB_enumeration": eb_enum, "order_means": means})
    return BiasOracle(tb.TB_k, eb, tb.psi_tilde_k, tb.psi_true, details)


def eb_mod_closed_form(truth, spec, fit, design, e_mats: list, m: int) -> float:
    """(-1)^{m-1} c^T D prod_{s=3..m}[E_s^{-1}(Sigma - E_s)] Sigma^{-1} a."""
    tp = truncation_pieces(truth, spec, fit, design)
    sigma = tp["Sigma"]
    row = tp["c"] @ (sigma - np.eye(sigma.shape[0]))
    for s in range(3, m + 1):
        emat = e_mats[s - 3]
        row = row @ np.linalg.solve(emat, sigma - emat)
    return float((-1) ** (m - 1) * row @ np.linalg.solve(sigma, tp["a"]))


def exact_mean_mod(truth, spec, fit, design, e_mats: list, m: int) -> float:
    from hoifkit.sim import exact_expectation

    pieces = support_pieces(truth, spec, fit, design)
    total = truth.expect(pieces.h)
    total += -exact_expectation(standard_chain(pieces, 2).evaluate, truth, 2)
    for j in range(3, m + 1):
        total += (-1) ** (j - 1) * exact_expectation(mod_chain(pieces, j, e_mats).evaluate, truth, j)
    return total


def alt_third_order_bias(truth, spec: FunctionalSpec, fit, basis: BasisSystem, k: int, mode: str = "gram_sqrt_inverse") -> tuple[float, float]:
    """Estimation biases of the third-order estimator with the standard and the
    alternative (star) kernel; valid when H1 == 1."""
    from hoifkit.basis import reference_quadrature
    from hoifkit.sim import exact_expectation

    y, a, x = truth.columns()
    h1, *_ = spec.h_terms(y, a, x)
    if not np.all(h1 == 1.0):
        raise ValueError("the alternative third-order kernel is defined for H1 == 1")
    design = build_design(basis, truth.atoms, spec, fit, k, mode)
    pieces = support_pieces(truth, spec, fit, design)
    tb = oracle_truncation_bias(truth, spec, fit, basis, k, mode)
    second = truth.expect(pieces.h) - exact_expectation(standard_chain(pieces, 2).evaluate, truth, 2)
    std = exact_expectation(standard_chain(pieces, 3).evaluate, truth, 3)
    pts, wts = reference_quadrature(basis, fit.f_hat, k)
    zbar_mean = design.rows_at(pts, spec, fit).T @ wts
    z, eps, dlt = pieces.z, pieces.eps, pieces.delta

    def star(i1, i2, i3):
        k12 = np.sum(z[i1] * z[i2], axis=1)
        k13 = np.sum(z[i1] * z[i3], axis=1)
        return dlt[i1] * (h1[i2] * k12 - z[i1] @ zbar_mean) * k13 * eps[i3]

    star_mean = exact_expectation(star, truth, 3)
    return second + std - tb.psi_tilde_k, second + star_mean - tb.psi_tilde_k


def alt_bias_gap_formula(truth, spec, fit, basis: BasisSystem, k: int, mode: str = "gram_sqrt_inverse", reweight: bool = True) -> float:
    """E_hat[Pi[dP'] {Pi_perp[dB'] Pi[df] - Pi[dB'] Pi_perp[df]}] under the fitted law.

    With ``reweight`` the errors are dB' = (f/f_hat) dB and dP' = (f/f_hat) dP,
    which makes the identity exact; without it this is the leading-order display.
    Requires H1 == 1, so that varsigma = 1 and the reference is f_hat.
    """
    from hoifkit.basis import reference_quadrature

    design = build_design(basis, truth.atoms, spec, fit, k, mode)
    pts, wts = reference_quadrature(basis, fit.f_hat, k)
    atoms_idx = truth.atom_index(pts)
    nu = truth.nuisances(spec)
    ratio = truth.px[atoms_idx] / fit.f_hat(pts)
    db = nu["b"][atoms_idx] - fit.b_hat(pts)
    dp = nu["p"][atoms_idx] - fit.p_hat(pts)
    if reweight:
        db, dp = ratio * db, ratio * dp
    df = ratio - 1.0
    z = design.rows_at(pts, spec, fit)

    def proj(h):
        return z @ (z.T @ (wts * h))

    pb, pp, pf = proj(db), proj(dp), proj(df)
    return float(np.sum(wts * pp * ((db - pb) * pf - pb * (df - pf))))
