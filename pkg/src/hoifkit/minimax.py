"""Rate planning and the rectangle / block estimators for the sub-root-n regime.

Exponents are written for rates n^{-e}; sizes for k = n^{e}.  With s = beta/d
and H = (3 + 4s) / (1 + 4s), the hyperbola partition uses the size sequence

    e_{-2} = 0 (k = 0),  e_{-1} = H - 1 = 2/(1 + 4s),  e_0 = 1,
    e_{2s+2} = (1 + Delta) e_{2s} + q          (even indices, increasing)
    e_{2s+1} = H - e_{2s+2}                     (odd indices, decreasing)

ending at e_{2J+1} = e_{2J+2} = H/2.  Rectangles use (lo, hi] index ranges with
the head (eps) coordinate first and the tail (delta) coordinate second.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from hoifkit.basis import BasisSystem, build_design
from hoifkit.hoif import (
    DEFAULT_W2_TUPLES,
    EstimateReport,
    Pieces,
    _estimation_columns,
    _finish,
    block_chain,
    compute_pieces,
    order_term,
    w2_order2,
    w2_order3,
    w2_randomized,
)
from hoifkit.model import FunctionalSpec, SmoothnessConfig
from hoifkit.ustat import vn_chain

EQ_TOL = 1e-9
J_LIMIT = 10_000
DEFAULT_M_CEILING = 6


# ----------------------------------------------------------------------------
# exponent arithmetic


def _ratio(sm: SmoothnessConfig) -> float:
    """(Delta + 1) / (Delta + 2), which tends to 1 as Delta grows without bound."""
    lo, hi = sorted((sm.beta_b, sm.beta_p))
    if lo == 0:
        return 1.0
    return (hi / lo) / (hi / lo + 1.0)


def _rate(beta: float, d: int) -> float:
    """Exponent beta / (d + 2 beta) of a nonparametric regression estimate."""
    return beta / (d + 2.0 * beta)


def target_exponent(sm: SmoothnessConfig) -> float:
    s = sm.beta / sm.d
    return 0.5 if s >= 0.25 else 4.0 * s / (1.0 + 4.0 * s)


def eb_exponent(sm: SmoothnessConfig, m: int) -> float:
    """Order of EB_m: (m-1) beta_g/(2 beta_g + d) + beta_b/(d + 2 beta_b) + beta_p/(d + 2 beta_p)."""
    return (m - 1) * _rate(sm.beta_g, sm.d) + _rate(sm.beta_b, sm.d) + _rate(sm.beta_p, sm.d)


def k_exponent_for_order(sm: SmoothnessConfig, m: int) -> float:
    """k balancing the squared truncation bias k^{-4s} against k^{m-1}/n^m."""
    s = sm.beta / sm.d
    return m / (m - 1.0 + 4.0 * s)


def eq12_threshold(sm: SmoothnessConfig) -> float:
    """Lower bound on beta_g/d above which the rate 4s/(1+4s) is attainable."""
    s = sm.beta / sm.d
    r = _ratio(sm)
    return s * 2.0 * r * (1.0 - 4.0 * s) / ((1.0 + 4.0 * s) - 4.0 * s * (1.0 - 4.0 * s) * r)


def eq41_threshold(sm: SmoothnessConfig) -> float:
    """Right-hand side of the condition on 2(beta_g/d) / (2 beta_g/d + 1)."""
    s = sm.beta / sm.d
    return 4.0 * s * (1.0 - 4.0 * s) / (1.0 + 4.0 * s) * _ratio(sm)


def g_scale(sm: SmoothnessConfig) -> float:
    g = sm.beta_g / sm.d
    return 2.0 * g / (2.0 * g + 1.0)


def m_star(sm: SmoothnessConfig) -> int:
    """Order appearing in the conjectured rate below the cut."""
    s = sm.beta / sm.d
    g = sm.beta_g / sm.d
    inner = s * (4.0 * s + (1.0 - 4.0 * s) * (1.0 + 2.0 * g) / g)
    return int(math.ceil(math.sqrt(max(inner, 0.0)) - (1.0 + 2.0 * s) - 1e-12))


def conjectured_exponent(sm: SmoothnessConfig) -> float:
    """Exponent e of log(n) n^{-e} for the rate conjectured below the cut."""
    s = sm.beta / sm.d
    g = sm.beta_g / sm.d
    return 0.5 - g / (1.0 + 2.0 * g) * (m_star(sm) + 1) ** 2 / (2.0 * s)


def m_eq413(sm: SmoothnessConfig) -> int:
    """Integer order from the displayed formula: int{(4b/(d+4b) - r_b - r_p)(2 + d/b_g) + 1} + 1."""
    d = sm.d
    inner = (4.0 * sm.beta / (d + 4.0 * sm.beta) - _rate(sm.beta_b, d) - _rate(sm.beta_p, d)) * (2.0 + d / sm.beta_g) + 1.0
    return int(math.floor(inner + 1e-12)) + 1


def round_size(n: float, exponent: float, K_max: int | None = None, admissible=None) -> int:
    """max(1, round(n^exponent)), snapped to the nearest admissible size <= K_max (ties downward)."""
    k = max(1, int(round(n**exponent)))
    if admissible is not None:
        sizes = sorted(int(a) for a in admissible if K_max is None or a <= K_max)
        if not sizes:
            raise ValueError("no admissible basis size within K_max")
        k = min(sizes, key=lambda a: (abs(a - k), a))
    if K_max is not None:
        k = min(k, int(K_max))
    return k


# ----------------------------------------------------------------------------
# rate plan


@dataclass
class RatePlan:
    regime: str
    s: float
    delta: float
    target_exponent: float
    k_exponent: float
    k_size: int
    m_opt: int
    tb_exponent: float
    eb_exponent: float
    sd_exponent: float
    eq12_threshold: float
    eq41_threshold: float
    eq41_holds: bool
    eq41_equality: bool
    m_star: int
    m_eq413: int
    eb2_exponent: float
    tau2_bias_exponent: float
    g_known: bool
    n: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def rate_plan(sm: SmoothnessConfig, n: int, g_known: bool = False, K_max: int | None = None, m_max: int = 50) -> RatePlan:
    if n < 2:
        raise ValueError("planning needs n >= 2")
    if (sm.beta_b == 0 or sm.beta_p == 0) and not sm.planner_only:
        raise ValueError("a zero smoothness exponent is allowed only for planner queries")
    s = sm.beta / sm.d
    if abs(s - 0.25) <= 1e-12:
        regime = "boundary"
    elif s > 0.25:
        regime = "root_n"
    else:
        regime = "sub_root_n"
    target = target_exponent(sm)
    k_exp = 1.0 / (4.0 * s) if regime != "sub_root_n" else 2.0 / (1.0 + 4.0 * s)
    if g_known:
        m_opt = 2
        eb = math.inf
    else:
        m_opt = next((m for m in range(2, m_max + 1) if eb_exponent(sm, m) > target + 1e-12), m_max)
        eb = eb_exponent(sm, m_opt)
    sd = 0.5 + 0.5 * (m_opt - 1) * max(0.0, k_exp - 1.0)
    gs, thr41 = g_scale(sm), eq41_threshold(sm)
    return RatePlan(
        regime=regime,
        s=s,
        delta=sm.delta,
        target_exponent=target,
        k_exponent=k_exp,
        k_size=round_size(n, k_exp, K_max),
        m_opt=m_opt,
        tb_exponent=2.0 * s * k_exp,
        eb_exponent=eb,
        sd_exponent=sd,
        eq12_threshold=eq12_threshold(sm),
        eq41_threshold=thr41,
        eq41_holds=gs > thr41 + EQ_TOL,
        eq41_equality=abs(gs - thr41) <= EQ_TOL,
        m_star=m_star(sm),
        m_eq413=m_eq413(sm),
        eb2_exponent=eb_exponent(sm, 2),
        tau2_bias_exponent=_rate(sm.beta_b, sm.d),
        g_known=g_known,
        n=int(n),
    )


# ----------------------------------------------------------------------------
# rectangles and the hyperbola partition


@dataclass(frozen=True)
class Rect:
    """Lattice points (s1, s2) with head_lo < s1 <= head_hi and tail_lo < s2 <= tail_hi."""

    head_lo: int
    head_hi: int
    tail_lo: int
    tail_hi: int

    @property
    def empty(self) -> bool:
        return self.head_hi <= self.head_lo or self.tail_hi <= self.tail_lo

    @property
    def area(self) -> int:
        return 0 if self.empty else (self.head_hi - self.head_lo) * (self.tail_hi - self.tail_lo)

    def overlap(self, other: "Rect") -> int:
        h = min(self.head_hi, other.head_hi) - max(self.head_lo, other.head_lo)
        t = min(self.tail_hi, other.tail_hi) - max(self.tail_lo, other.tail_lo)
        return max(h, 0) * max(t, 0)

    @property
    def ranges(self) -> list[tuple[int, int]]:
        return [(self.head_lo, self.head_hi), (self.tail_lo, self.tail_hi)]

    def transpose(self) -> "Rect":
        return Rect(self.tail_lo, self.tail_hi, self.head_lo, self.head_hi)


@dataclass
class PartitionPlan:
    J: int
    c_star: float
    q: float
    exponents: dict
    sizes: dict
    omega: list
    complement: list
    equality_case: bool = False
    swapped: bool = False
    n: float = 0.0
    info: dict = field(default_factory=dict)

    def k(self, idx: int) -> int:
        return 0 if idx == -2 else self.sizes[idx]

    @property
    def k_outer(self) -> int:
        return self.sizes[-1]

    def as_dict(self) -> dict:
        return {
            "J": self.J,
            "c_star": self.c_star,
            "q": self.q,
            "exponents": {str(i): e for i, e in sorted(self.exponents.items())},
            "sizes": {str(i): k for i, k in sorted(self.sizes.items())},
            "omega": [[r.head_lo, r.head_hi, r.tail_lo, r.tail_hi] for r in self.omega],
            "complement": [[r.head_lo, r.head_hi, r.tail_lo, r.tail_hi] for r in self.complement],
            "equality_case": self.equality_case,
            "swapped": self.swapped,
            "n": self.n,
            "info": self.info,
        }


def c_star(sm: SmoothnessConfig) -> float:
    s = sm.beta / sm.d
    delta = sm.delta
    return g_scale(sm) * (delta + 2.0) / (4.0 * s) - 2.0 * (delta + 2.0) / (4.0 * s + 1.0) + (3.0 + 4.0 * s) / (1.0 + 4.0 * s)


def _geometric(ratio: float, terms: int) -> float:
    return float(sum(ratio ** (l - 1) for l in range(1, terms + 1)))


def omega_rects(k, J: int) -> list[Rect]:
    """The 2(J+1) + 1 rectangles whose union lies under the hyperbola.

    ``k`` maps index -> size (index -2 gives 0).
    """
    out = []
    for s in range(J + 1):
        out.append(Rect(k(2 * s - 2), k(2 * s - 1), k(2 * s - 2), k(2 * s)))
        out.append(Rect(k(2 * s - 2), k(2 * s), k(2 * s), k(2 * s - 1)))
    out.append(Rect(k(2 * J), k(2 * J + 1), k(2 * J), k(2 * J + 1)))
    return out


def complement_rects(k, J: int) -> list[Rect]:
    out = []
    for s in range(J + 1):
        out.append(Rect(k(2 * s), k(2 * s - 1), k(2 * s + 1), k(2 * s - 1)))
        out.append(Rect(k(2 * s + 1), k(2 * s - 1), k(2 * s), k(2 * s + 1)))
    return out


def _assemble(J, cst, q, exps, n, n_sizes, K_max, admissible, equality, swapped, info) -> PartitionPlan:
    base = n if n_sizes is None else n_sizes
    sizes = {i: round_size(base, e, K_max, admissible) for i, e in exps.items()}
    # rounding must not break the interleaving
    for s in range(1, J + 2):
        sizes[2 * s] = max(sizes[2 * s], sizes[2 * s - 2])
    sizes[2 * J + 1] = sizes[2 * J + 2]
    for s in range(J, -1, -1):
        sizes[2 * s - 1] = max(sizes[2 * s - 1], sizes[2 * s + 1])
    sizes[-1] = max(sizes[-1], sizes[0])

    def kk(i):
        return 0 if i == -2 else sizes[i]

    omega = [r for r in omega_rects(kk, J) if not r.empty]
    comp = [r for r in complement_rects(kk, J) if not r.empty]
    if swapped:
        omega = [r.transpose() for r in omega]
        comp = [r.transpose() for r in comp]
    return PartitionPlan(J, cst, q, exps, sizes, omega, comp, equality, swapped, float(base), info)


def hyperbola_partition(sm: SmoothnessConfig, n: float, n_sizes: float | None = None, K_max: int | None = None, admissible=None) -> PartitionPlan:
    """J, c*, q and the size sequence of the third-order partition estimator.

    ``n_sizes`` (default n) is the base used to turn exponents into integer
    sizes; the exponents and J themselves do not depend on n except in the
    equality case, where J = ceil(ln n).
    """
    if n < 2:
        raise ValueError("planning needs n >= 2")
    if sm.beta_b <= 0 or sm.beta_p <= 0:
        raise ValueError("the partition needs positive beta_b and beta_p")
    s = sm.beta / sm.d
    if s >= 0.25:
        raise ValueError("the partition estimator targets beta/d < 1/4")
    swapped = sm.beta_p < sm.beta_b
    gs, thr = g_scale(sm), eq41_threshold(sm)
    if gs < thr - EQ_TOL:
        raise ValueError(f"condition on beta_g violated: {gs:.6g} < {thr:.6g}")
    delta = sm.delta
    cst = c_star(sm)
    H = (3.0 + 4.0 * s) / (1.0 + 4.0 * s)
    exps = {-1: H - 1.0, 0: 1.0}
    equality = abs(gs - thr) <= EQ_TOL
    if equality:
        J = int(math.ceil(math.log(n)))
        step = (H / 2.0 - 1.0) / (J + 1)
        q = float("nan")
        for t in range(1, J + 2):
            exps[2 * t] = 1.0 + t * step
    else:
        J = 0
        while (1.0 + delta) ** (J + 1) + cst * _geometric(1.0 + delta, J + 1) <= H / 2.0:
            J += 1
            if J > J_LIMIT:
                raise ValueError("partition depth diverges; the condition on beta_g is too close to equality")
        q = (H / 2.0 - (1.0 + delta) ** (J + 1)) / _geometric(1.0 + delta, J + 1)
        for t in range(1, J + 2):
            exps[2 * t] = (1.0 + delta) ** t + q * _geometric(1.0 + delta, t)
    exps[2 * J + 2] = H / 2.0
    for t in range(0, J + 1):
        exps[2 * t + 1] = H - exps[2 * t + 2]
    info = {"H": H, "g_scale": gs, "eq41_threshold": thr, "rectangle_terms": 2 * J + 3}
    return _assemble(J, cst, q, exps, n, n_sizes, K_max, admissible, equality, swapped, info)


def collapsed_plan(k: int) -> PartitionPlan:
    """Degenerate plan with every size equal to k: Omega is the full square (0, k]^2."""
    exps = {-1: 1.0, 0: 1.0, 1: 1.0, 2: 1.0}
    sizes = {-1: k, 0: k, 1: k, 2: k}

    def kk(i):
        return 0 if i == -2 else sizes[i]

    omega = [r for r in omega_rects(kk, 0) if not r.empty]
    return PartitionPlan(0, float("nan"), float("nan"), exps, sizes, omega, [], False, False, float(k), {"collapsed": True})


def check_partition(plan: PartitionPlan, rel_tol: float = 1e-12) -> dict:
    """Interleaving, hyperbola products and the disjoint cover, checked on exponents and sizes."""
    J, e, k = plan.J, plan.exponents, plan.sizes
    evens = [e[2 * s] for s in range(J + 2)]
    odds = [e[2 * s + 1] for s in range(-1, J + 1)]
    strict = all(a < b for a, b in zip(evens, evens[1:])) and all(a > b for a, b in zip(odds, odds[1:]))
    strict = strict and abs(e[2 * J + 1] - e[2 * J + 2]) <= rel_tol and evens[-2] < odds[-2]
    H = plan.info.get("H", e[-1] + 1.0)
    hyper = max(abs(e[2 * s + 1] + e[2 * s + 2] - H) for s in range(-1, J + 1))
    ke = [k[2 * s] for s in range(J + 2)]
    ko = [k[2 * s + 1] for s in range(-1, J + 1)]
    size_order = all(a <= b for a, b in zip(ke, ke[1:])) and all(a >= b for a, b in zip(ko, ko[1:])) and k[2 * J + 1] == k[2 * J + 2]
    full = Rect(0, k[-1], 0, k[-1])
    pieces = plan.omega + plan.complement
    overlap = sum(a.overlap(b) for i, a in enumerate(pieces) for b in pieces[i + 1:])
    inside = all(full.overlap(r) == r.area for r in pieces)
    cover = sum(r.area for r in pieces) == full.area
    return {
        "interleaving": bool(strict),
        "hyperbola_error": float(hyper),
        "sizes_ordered": bool(size_order),
        "disjoint": overlap == 0 and inside,
        "cover": bool(cover),
    }


# ----------------------------------------------------------------------------
# block statistics


def _check_ranges(ranges, width: int) -> list[tuple[int, int]]:
    out = []
    for r in ranges:
        lo, hi = int(r[0]), int(r[1])
        if not 0 <= lo < hi:
            raise ValueError(f"empty or malformed range ({lo}, {hi}]")
        if hi > width:
            raise ValueError(f"range ({lo}, {hi}] exceeds the design width {width}")
        out.append((lo, hi))
    return out


def um_from_pieces(pieces: Pieces, ranges) -> float:
    """V_m of the block chain on per-position ranges (no sign)."""
    ranges = _check_ranges(ranges, pieces.z.shape[1])
    if len(ranges) + 1 > 6:
        raise ValueError("block statistics support orders up to 6")
    return vn_chain(block_chain(pieces, ranges))


def _pieces(est_data, spec, fit, basis, width, mode) -> Pieces:
    y, a, x = _estimation_columns(est_data)
    if width > basis.max_size:
        raise ValueError(f"design width {width} exceeds the basis size {basis.max_size}")
    design = build_design(basis, x, spec, fit, width, mode)
    return compute_pieces(spec, fit, design.rows, y, a, x)


def u3_rectangle(est_data, spec: FunctionalSpec, fit, basis: BasisSystem, rect: Rect, width: int | None = None, mode: str = "backward_gram_schmidt") -> float:
    """Third-order rectangle statistic on a design of the given width (default: the far vertex)."""
    if rect.empty:
        raise ValueError("empty rectangle")
    width = max(rect.head_hi, rect.tail_hi) if width is None else width
    return um_from_pieces(_pieces(est_data, spec, fit, basis, width, mode), rect.ranges)


def um_block(est_data, spec: FunctionalSpec, fit, basis: BasisSystem, ranges, width: int | None = None, mode: str = "backward_gram_schmidt") -> float:
    """Order-m block statistic with per-position ranges (m = len(ranges) + 1)."""
    if len(ranges) + 1 > 6:
        raise ValueError("block statistics support orders up to 6")
    if any(int(hi) <= int(lo) for lo, hi in ranges):
        raise ValueError("every range must be non-empty")
    width = max(int(hi) for _, hi in ranges) if width is None else width
    return um_from_pieces(_pieces(est_data, spec, fit, basis, width, mode), ranges)


def _variance_bookkeeping(plan: PartitionPlan, n: int, sm: SmoothnessConfig | None) -> dict:
    k = plan.k
    out = {
        "rectangles": len(plan.omega),
        "second_order": k(-1) / n**2,
        "third_order_blocks": [k(2 * s) * k(2 * s - 1) / n**3 for s in range(plan.J + 1)],
        "final_square": k(2 * plan.J + 1) ** 2 / n**3,
    }
    if sm is not None:
        s = sm.beta / sm.d
        out["per_rectangle_order"] = n ** (-8.0 * s / (4.0 * s + 1.0))
    return out


def estimate_psi3_KJ(est_data, spec: FunctionalSpec, fit, basis: BasisSystem, plan: PartitionPlan, omega: list | None = None, mode: str = "backward_gram_schmidt", alpha: float = 0.05, variance: bool = True, sm: SmoothnessConfig | None = None) -> EstimateReport:
    """psi_hat_{2, k_{-1}} plus the third-order statistic summed over Omega."""
    rects = plan.omega if omega is None else [r for r in omega if not r.empty]
    width = plan.k_outer
    pieces = _pieces(est_data, spec, fit, basis, width, mode)
    per_order = [float(np.mean(pieces.h)), order_term(pieces, 2, width)]
    per_order.append(float(math.fsum(um_from_pieces(pieces, r.ranges) for r in rects)))
    comps = []
    if variance:
        n = pieces.n
        comps = [float(np.var(pieces.h, ddof=1) / n), w2_order2(pieces, (0, width))]
        comps.append(w2_order3(pieces, [tuple(r.ranges) for r in rects]) if rects else 0.0)
    cfg = {"estimator": "psi3_KJ", "k_outer": width, "J": plan.J, "n": pieces.n, "functional": spec.id, "basis": basis.kind}
    diag = {"variance_orders": _variance_bookkeeping(plan, pieces.n, sm), "plan": plan.as_dict()}
    return _finish(per_order, comps, alpha, cfg, diag)


# ----------------------------------------------------------------------------
# the efficient estimator


def _positions(v: int, base: tuple[int, int], special: dict) -> list[tuple[int, int]]:
    return [special.get(l, base) for l in range(1, v)]


def eff_term_blocks(plan: PartitionPlan, v: int) -> dict:
    """Range lists of every block in H*_v, G(s, v) (s = 1..J) and Q_v; empty blocks dropped."""
    k = plan.k
    base = (0, k(0))
    terms = {}
    h = [_positions(v, base, {})]
    for u in range(1, v):
        h.append(_positions(v, base, {u: (k(0), k(-1))}))
    terms[f"H*_{v}"] = h
    for s in range(1, plan.J + 1):
        g = []
        for u in range(1, v - 1):
            g.append(_positions(v, base, {u: (k(2 * s - 2), k(2 * s - 1)), u + 1: (k(2 * s - 2), k(2 * s))}))
            g.append(_positions(v, base, {u: (k(2 * s - 2), k(2 * s)), u + 1: (k(2 * s), k(2 * s - 1))}))
        terms[f"G({s},{v})"] = g
    tail = (k(2 * plan.J), k(2 * plan.J + 1))
    terms[f"Q_{v}"] = [_positions(v, base, {u: tail, u + 1: tail}) for u in range(1, v - 1)]
    return {name: [b for b in blocks if all(hi > lo for lo, hi in b)] for name, blocks in terms.items()}


def eff_terms(pieces: Pieces, plan: PartitionPlan, m: int) -> dict:
    """Values of H*_v, G(s, v), Q_v for v = 4..m (unsigned)."""
    out = {}
    for v in range(4, m + 1):
        for name, blocks in eff_term_blocks(plan, v).items():
            out[name] = float(math.fsum(um_from_pieces(pieces, b) for b in blocks))
    return out


def estimate_psi_eff(est_data, spec: FunctionalSpec, fit, basis: BasisSystem, sm: SmoothnessConfig | None = None, n: int | None = None, plan: PartitionPlan | None = None, m: int | None = None, m_ceiling: int = DEFAULT_M_CEILING, mode: str = "backward_gram_schmidt", alpha: float = 0.05, variance: bool = False, tuples: int | None = None, seed: int = 0) -> EstimateReport:
    """psi3_KJ plus the alternating sums of H*_v, G(s, v) and Q_v for v = 4..m."""
    if m is None:
        if sm is None:
            raise ValueError("either the smoothness configuration or m is required")
        m = max(3, m_eq413(sm))
    if m > m_ceiling:
        raise ValueError(f"order {m} exceeds the configured ceiling {m_ceiling}")
    if m < 3:
        raise ValueError("the efficient estimator has order at least 3")
    if plan is None:
        if sm is None:
            raise ValueError("a plan or a smoothness configuration is required")
        n_plan = n if n is not None else len(_estimation_columns(est_data)[0])
        plan = hyperbola_partition(sm, n_plan, K_max=basis.max_size)
    width = plan.k_outer
    pieces = _pieces(est_data, spec, fit, basis, width, mode)
    base = estimate_psi3_KJ(est_data, spec, fit, basis, plan, mode=mode, alpha=alpha, variance=variance, sm=sm)
    terms = eff_terms(pieces, plan, m)
    per_order = list(base.per_order)
    for v in range(4, m + 1):
        names = eff_term_blocks(plan, v).keys()
        per_order.append((-1) ** (v - 1) * math.fsum(terms[name] for name in names))
    comps = list(base.variance_components)
    if variance:
        count = tuples if tuples is not None else int(min(DEFAULT_W2_TUPLES, pieces.n**3))
        for v in range(4, m + 1):
            kernels = [(1.0, block_chain(pieces, b)) for blocks in eff_term_blocks(plan, v).values() for b in blocks]
            comps.append(w2_randomized(kernels, v, pieces.n, count, seed + v) if kernels else 0.0)
    cfg = dict(base.config)
    cfg.update({"estimator": "psi_eff", "m": m})
    diag = dict(base.diagnostics)
    diag["terms"] = terms
    return _finish(per_order, comps, alpha, cfg, diag)


def plan_within(sm: SmoothnessConfig, n: float, K_max: int, admissible=None) -> PartitionPlan:
    """Hyperbola partition whose outer size k_{-1} fits K_max.

    When n^{e_{-1}} exceeds K_max the sizes are computed from the smaller base
    K_max^{1/e_{-1}}; the exponents (and J) are unchanged.
    """
    plan = hyperbola_partition(sm, n)
    if plan.k_outer <= K_max:
        return hyperbola_partition(sm, n, K_max=K_max, admissible=admissible)
    base = K_max ** (1.0 / plan.exponents[-1]) * (1.0 - 1e-12)
    return hyperbola_partition(sm, n, n_sizes=base, K_max=K_max, admissible=admissible)
