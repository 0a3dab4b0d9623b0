import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hoifkit.sim import make_rng
from hoifkit.ustat import (
    ChainKernel,
    DiscreteLaw,
    OpCounter,
    RankOneMid,
    chain_kernel_function,
    degenerate_project,
    falling_factorial,
    max_conditional_mean,
    mobius_coefficient,
    set_partitions,
    tabulate,
    vn_brute,
    vn_chain,
)


def random_chain(rng, n, m, kmax=4, structured=None):
    widths = [int(rng.integers(1, kmax + 1)) for _ in range(m - 1)]
    head = rng.normal(size=(n, widths[0]))
    tail = rng.normal(size=(n, widths[-1]))
    mids = []
    for u in range(m - 2):
        k_in, k_out = widths[u], widths[u + 1]
        use_rank_one = rng.uniform() < 0.5 if structured is None else structured
        if use_rank_one:
            shift = rng.normal(size=(k_in, k_out)) if rng.uniform() < 0.7 else None
            mids.append(RankOneMid(rng.normal(size=n), rng.normal(size=(n, k_in)), rng.normal(size=(n, k_out)), shift))
        else:
            mids.append(rng.normal(size=(n, k_in, k_out)))
    return ChainKernel(head, tail, tuple(mids))


def brute(kernel):
    return vn_brute(chain_kernel_function(kernel), list(range(kernel.n)), kernel.m)


def test_brute_hand_example():
    assert vn_brute(lambda u, v: u * v, [1.0, 2.0, 3.0], 2) == pytest.approx(22 / 6)


def test_brute_order_one_is_mean():
    data = [0.5, 2.0, -1.0, 4.0]
    assert vn_brute(lambda u: u, data, 1) == pytest.approx(np.mean(data))


def test_brute_symmetrization_invariant():
    data = list(make_rng(1).normal(size=6))
    kern = lambda u, v, w: u * v**2 - w
    sym = lambda u, v, w: np.mean([kern(*p) for p in itertools.permutations((u, v, w))])
    assert vn_brute(kern, data, 3) == pytest.approx(vn_brute(sym, data, 3), rel=1e-12)


def test_brute_errors():
    with pytest.raises(ValueError):
        vn_brute(lambda u, v: u, [1.0], 2)
    with pytest.raises(ValueError):
        vn_brute(lambda *o: 0.0, list(range(15)), 4)


def test_order_two_closed_form():
    rng = make_rng(2)
    a, b = rng.normal(size=(9, 3)), rng.normal(size=(9, 3))
    n = 9
    want = (a.sum(0) @ b.sum(0) - np.sum(a * b)) / (n * (n - 1))
    assert vn_chain(ChainKernel(a, b)) == pytest.approx(want, rel=1e-12)


def test_order_three_small_instance():
    k = random_chain(make_rng(3), 8, 3, structured=False)
    assert vn_chain(k) == pytest.approx(brute(k), rel=1e-12, abs=1e-12)


def test_order_four_coincidence_of_ends():
    k = random_chain(make_rng(4), 10, 4)
    assert vn_chain(k) == pytest.approx(brute(k), rel=1e-10, abs=1e-10)


@given(st.integers(0, 2**32 - 1), st.integers(2, 4))
@settings(max_examples=40, deadline=None)
def test_chain_matches_brute(seed, m):
    rng = make_rng(seed)
    n = int(rng.integers(m, 9))
    k = random_chain(rng, n, m)
    ref = brute(k)
    assert abs(vn_chain(k) - ref) <= 1e-10 * (1 + abs(ref))


@pytest.mark.parametrize("m", [5, 6])
def test_high_orders(m):
    k = random_chain(make_rng(10 + m), 7, m, kmax=2)
    ref = brute(k)
    assert abs(vn_chain(k) - ref) <= 1e-10 * (1 + abs(ref))


def test_order_limit_and_shapes():
    rng = make_rng(5)
    with pytest.raises(ValueError):
        vn_chain(random_chain(rng, 8, 7, kmax=1))
    with pytest.raises(ValueError):
        ChainKernel(np.ones((4, 2)), np.ones((4, 3)))
    with pytest.raises(ValueError):
        ChainKernel(np.ones((4, 2)), np.ones((4, 3)), (np.ones((4, 3, 3)),))
    with pytest.raises(ValueError):
        vn_chain(ChainKernel(np.ones((2, 1)), np.ones((2, 1)), (np.ones((2, 1, 1)),)))


def test_partition_lattice():
    bell = [len(set_partitions(range(r))) for r in range(1, 7)]
    assert bell == [1, 2, 5, 15, 52, 203]
    # sum of mu over all partitions of an r-set is 0 for r >= 2
    for r in range(2, 6):
        assert sum(mobius_coefficient(p) for p in set_partitions(range(r))) == 0
    assert mobius_coefficient([[0, 1, 2], [3]]) == 2
    assert falling_factorial(6, 3) == 120


def test_cost_grows_linearly_in_n():
    rng = make_rng(6)
    costs = []
    for n in (200, 400, 800):
        k = ChainKernel(rng.normal(size=(n, 3)), rng.normal(size=(n, 3)), (rng.normal(size=(n, 3, 3)), RankOneMid(rng.normal(size=n), rng.normal(size=(n, 3)), rng.normal(size=(n, 3)), np.eye(3))))
        counter = OpCounter()
        vn_chain(k, counter=counter)
        costs.append(counter.flops)
    assert costs[1] / costs[0] == pytest.approx(2.0, rel=0.1)
    assert costs[2] / costs[1] == pytest.approx(2.0, rel=0.1)


def small_law(seed=7, size=4):
    rng = make_rng(seed)
    probs = rng.uniform(0.5, 1.5, size)
    return DiscreteLaw(tuple(float(v) for v in rng.normal(size=size)), probs / probs.sum())


def test_degenerate_first_order():
    law = small_law()
    mu = float(np.sum(law.probs * np.array(law.atoms)))
    proj = degenerate_project(lambda o: o, law, 1)
    np.testing.assert_allclose(proj.table, np.array(law.atoms) - mu, atol=1e-15)


def test_degenerate_already_degenerate_unchanged():
    law = small_law()
    mu = float(np.sum(law.probs * np.array(law.atoms)))
    kern = lambda u, v: (u - mu) * (v - mu)
    proj = degenerate_project(kern, law, 2)
    np.testing.assert_allclose(proj.table, tabulate(kern, law, 2), atol=1e-14)


def test_degenerate_kills_lower_order_kernel():
    law = small_law()
    proj = degenerate_project(lambda u, v: u, law, 2)
    np.testing.assert_allclose(proj.table, 0.0, atol=1e-15)


@given(st.integers(0, 2**32 - 1), st.integers(1, 3))
@settings(max_examples=25, deadline=None)
def test_projection_is_degenerate(seed, m):
    law = small_law(seed, 3)
    rng = make_rng(seed + 1)
    coef = rng.normal(size=m + 1)
    kern = lambda *o: coef[0] + sum(c * np.sin(v * (j + 1)) for j, (c, v) in enumerate(zip(coef[1:], o))) * np.prod(o)
    proj = degenerate_project(kern, law, m)
    assert max_conditional_mean(proj.table, law.probs) <= 1e-12
    assert proj(*law.atoms[:m]) == pytest.approx(proj.table[tuple(range(m))])


def test_degenerate_requires_discrete_law():
    with pytest.raises(TypeError):
        degenerate_project(lambda o: o, [0.0, 1.0], 1)


def exact_moment(stats, law, n):
    """E over n i.i.d. draws from a discrete law of prod of V_n statistics."""
    total = 0.0
    for sample in itertools.product(range(len(law)), repeat=n):
        w = np.prod(law.probs[list(sample)])
        value = 1.0
        for kern, m in stats:
            acc = sum(kern.table[tuple(sample[i] for i in tup)] for tup in itertools.permutations(range(n), m))
            value *= acc / math.perm(n, m)
        total += w * value
    return total


def test_orders_uncorrelated():
    law = small_law(8, 3)
    rng = make_rng(9)
    tabs = {}
    for m in (1, 2, 3):
        c = rng.normal(size=3)
        tabs[m] = degenerate_project(lambda *o: np.prod([1 + c[j] * o[j] + o[j] ** 2 for j in range(len(o))]), law, m)
    n = 4
    for m1, m2 in ((1, 2), (1, 3), (2, 3)):
        assert abs(exact_moment([(tabs[m1], m1), (tabs[m2], m2)], law, n)) <= 1e-10
    assert abs(exact_moment([(tabs[2], 2)], law, n)) <= 1e-12
    assert exact_moment([(tabs[2], 2), (tabs[2], 2)], law, n) > 1e-6
