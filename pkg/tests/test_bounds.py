import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, special, stats

from revman.bounds import (
    CellData,
    capped_profile,
    cell_bounds,
    expected_capped_demand,
    expected_capped_demand_gamma,
    grid_uniform_revenue,
    lower_bound_g,
    upper_bound_g,
)


def test_capped_demand_examples():
    assert expected_capped_demand(0.0, 5) == 0.0
    assert expected_capped_demand(1.0, 1) == pytest.approx(1 - math.exp(-1), abs=1e-15)
    assert expected_capped_demand(1.0, 2) == pytest.approx(2 - 3 * math.exp(-1), abs=1e-15)
    assert expected_capped_demand(3.0, 0) == 0.0
    # direct pmf sum
    q, C = 7.3, 9
    direct = sum(min(j, C) * stats.poisson.pmf(j, q) for j in range(200))
    assert expected_capped_demand(q, C) == pytest.approx(direct, rel=1e-13)


def test_capped_demand_gamma_examples():
    assert expected_capped_demand_gamma(0.0, 4, 2.0) == 0.0
    assert expected_capped_demand_gamma(1.0, 1, 1.0) == pytest.approx(0.5, abs=1e-15)
    # large capacity: the mixture mean lam * q
    assert expected_capped_demand_gamma(0.8, 400, 2.5) == pytest.approx(2.0, rel=1e-12)


@pytest.mark.parametrize("q,C,lam", [(0.3, 1, 0.7), (2.0, 5, 3.63), (15.0, 12, 2.62), (40.0, 30, 1.2)])
def test_negative_binomial_equals_quadrature(q, C, lam):
    f = lambda z: expected_capped_demand(q * z, C) * stats.gamma.pdf(z, lam)
    quad = integrate.quad(f, 0, np.inf, epsabs=1e-13, epsrel=1e-12, limit=400)[0]
    assert expected_capped_demand_gamma(q, C, lam) == pytest.approx(quad, rel=1e-8, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.01, 50.0), st.integers(1, 40), st.floats(0.3, 8.0))
def test_capped_demand_gamma_shape(q, C, lam):
    prof = capped_profile(np.array([q, q * 1.01]), C + 2, lam)
    assert prof[1, C] > prof[0, C]  # increasing in q
    inc = np.diff(prof[0])  # P(D > c)
    exact = special.betainc(np.arange(C + 2) + 1.0, lam, q / (1 + q))
    # tails are one minus a cumulative sum, so accuracy is absolute (a few dozen ulps of 1)
    assert np.allclose(inc, exact, rtol=1e-10, atol=5e-14)
    # increasing in C wherever the tail mass is resolvable in double precision, and concave
    assert np.all(inc >= 0) and np.all(inc[exact > 1e-14] > 0)
    assert np.all(np.diff(inc) <= 1e-15)


def test_capped_profile_domain():
    with pytest.raises(ValueError):
        capped_profile(np.array([-1.0]), 3)
    with pytest.raises(ValueError):
        capped_profile(np.array([1.0]), 3, lam=0.0)


LI = (0.4, -0.2)
PRICES = np.array([[1.0, 1.3, 1.7], [1.1, 1.5, 2.0]])
EPS, LAMS, CAP = 3.0, (2.0, 1.5), 20


def _tail(g, d, k):
    q = math.exp(LI[d]) * PRICES[d, k] ** (-EPS)
    return expected_capped_demand_gamma(q * g, CAP, LAMS[d])


def test_lower_bound_round_trip_and_max():
    g_star = 3.7
    tails = np.zeros((2, 3))
    tails[1, 2] = _tail(g_star, 1, 2)
    g, binding, flags, cand = lower_bound_g(tails, LI, PRICES, EPS, LAMS, CAP)
    assert g == pytest.approx(g_star, rel=1e-6) and binding == ("b", 3) and flags == ()
    tails = np.array([[_tail(2.0, 0, k) for k in range(3)], [_tail(1.0 + k, 1, k) for k in range(3)]])
    g, binding, _, cand = lower_bound_g(tails, LI, PRICES, EPS, LAMS, CAP)
    assert np.all(g >= cand) and g == pytest.approx(3.0, rel=1e-6)
    for d in range(2):
        for k in range(3):
            assert abs(_tail(cand[d, k], d, k) - tails[d, k]) < 1e-6 * tails[d, k]


def test_lower_bound_edge_cases():
    g, binding, flags, _ = lower_bound_g(np.zeros((2, 3)), LI, PRICES, EPS, LAMS, CAP)
    assert g == 0.0 and binding == (None, None)
    tails = np.zeros((2, 3))
    tails[0, 0] = CAP
    g, _, flags, _ = lower_bound_g(tails, LI, PRICES, EPS, LAMS, CAP)
    assert math.isinf(g) and "infeasible_lower" in flags


def test_grid_uniform_revenue_examples():
    assert grid_uniform_revenue(1.0, LI, PRICES, EPS, LAMS, 0)[0] == 0.0
    # one destination without demand: all seats go to the other
    _, _, split = grid_uniform_revenue(2.0, (0.0, -800.0), PRICES, EPS, LAMS, 9)
    assert split == (9, 0)
    # symmetric destinations, K = 1, two seats: split (1, 1)
    p = np.array([[1.2], [1.2]])
    rev, k, split = grid_uniform_revenue(1.5, (0.0, 0.0), p, 2.0, (2.0, 2.0), 2)
    q = 1.5 * 1.2**-2.0
    assert split == (1, 1) and k == 1
    assert rev == pytest.approx(2 * 1.2 * expected_capped_demand_gamma(q, 1, 2.0), rel=1e-13)


def test_grid_uniform_revenue_matches_enumeration():
    g = 2.4
    best = -1.0
    for k in range(3):
        for ca in range(CAP + 1):
            r = sum(
                PRICES[d, k] * expected_capped_demand_gamma(math.exp(LI[d]) * g * PRICES[d, k] ** -EPS, c, LAMS[d])
                for d, c in ((0, ca), (1, CAP - ca))
            )
            best = max(best, r)
    assert grid_uniform_revenue(g, LI, PRICES, EPS, LAMS, CAP)[0] == pytest.approx(best, rel=1e-13)


def test_upper_bound_round_trip_and_monotone():
    g_star = 5.5
    r = grid_uniform_revenue(g_star, LI, PRICES, EPS, LAMS, CAP)[0]
    g, k, split, flags = upper_bound_g(r, LI, PRICES, EPS, LAMS, CAP)
    assert g == pytest.approx(g_star, rel=1e-6) and flags == ()
    assert abs(grid_uniform_revenue(g, LI, PRICES, EPS, LAMS, CAP)[0] - r) < 1e-6 * r
    assert upper_bound_g(2 * r, LI, PRICES, EPS, LAMS, CAP)[0] > g
    assert upper_bound_g(0.0, LI, PRICES, EPS, LAMS, CAP)[3] == ("nonpositive_revenue",)


def test_inconsistent_cell_is_flagged():
    # large sales with tiny revenue: lower bound above upper bound
    tails = np.array([[15.0, 10.0, 5.0], [15.0, 10.0, 5.0]])
    cell = CellData("x", LI, PRICES, CAP, tails, 0.5)
    b = cell_bounds(cell, EPS, LAMS)
    assert b.g_lower > b.g_upper and "upper_below_lower" in b.flags and not b.consistent


def test_complete_regime_grid_revenue_dominates():
    inc = grid_uniform_revenue(2.0, LI, PRICES, EPS, LAMS, CAP)[0]
    comp = grid_uniform_revenue(2.0, LI, PRICES, EPS, LAMS, CAP, regime="complete")[0]
    assert comp >= inc
