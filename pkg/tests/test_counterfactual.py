import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from revman.alpha import DEFAULT_TABLE as T, Regime, StoppingTime, StoppingTimeM, Uniform
from revman.bounds import CellBounds
from revman.counterfactual import (
    SCENARIO_IDS,
    interval_from_factors,
    preallocate,
    ratio_interval,
    ratio_interval_bruteforce,
    revenue_interval,
    scenario,
    train_factors,
    uniform_without_preallocation,
)
from revman.demand import City, DemandPrimitives, TrainInstance

THETA = DemandPrimitives(epsilon=3.0, beta=(1.0, -0.5), lambda_a=2.0, lambda_b=1.5)


def _train(i, W, C, xa=(0.2, 0.1), xb=(-0.4, 0.3)):
    return TrainInstance(
        i, "R", W, {"a": (City("A", xa),), "b": (City("B", xb), City("B2", (0.0, 0.0)))}, C,
        {"a": (20.0, 30.0, 45.0), "b": (15.0, 25.0, 35.0)},
    )


TRAINS = [_train(0, "w1", 6), _train(1, "w1", 4), _train(2, "w2", 5, xa=(0.5, 0.0))]
BOUNDS = {"w1": CellBounds("w1", 2.0, 5.0), "w2": CellBounds("w2", 1.0, 1.5)}


def test_scenario_catalogue():
    assert len(SCENARIO_IDS) == 16
    assert scenario("s.5").strategy == StoppingTime()
    with pytest.raises(KeyError):
        scenario("x.9")


def test_preallocate_symmetric():
    for C in range(0, 13):
        curve = T.curve(StoppingTime(), Regime.COMPLETE, C, 3.0, 2.0)
        ca, cb = preallocate(C, "optimal", (curve, curve))
        assert ca + cb == C
        assert min(ca, cb) == C // 2


def test_preallocate_matches_enumeration():
    C = 14
    ca_curve = T.curve(StoppingTime(), Regime.INCOMPLETE, C, 3.0, 2.0)
    cb_curve = T.curve(StoppingTime(), Regime.INCOMPLETE, C, 3.0, 1.5)
    best = max(range(C + 1), key=lambda c: (3 * ca_curve[c] + cb_curve[C - c], -c))
    assert preallocate(C, "optimal", (ca_curve, cb_curve), (3.0, 1.0)) == (best, C - best)
    assert best > C // 2


def test_preallocate_rules_and_errors():
    assert preallocate(0, "optimal") == (0, 0)
    assert preallocate(10, "match", avg_a=3.4) == (3, 7)
    assert preallocate(10, "match", avg_a=3.5) == (4, 6)
    with pytest.raises(ValueError):
        preallocate(-1)
    with pytest.raises(ValueError):
        preallocate(5, "match", avg_a=7.0)
    with pytest.raises(ValueError):
        preallocate(5, "optimal")
    with pytest.raises(ValueError):
        preallocate(5, "lottery", curves=([0] * 6, [0] * 6))


def test_three_train_toy_by_hand():
    eps = THETA.epsilon
    total_lo = total_hi = 0.0
    for tr in TRAINS:
        w = [math.exp(tr.log_index(d, THETA.beta) / eps) for d in "ab"]
        lams = (THETA.lambda_a, THETA.lambda_b)
        best = max(
            range(tr.capacity + 1),
            key=lambda c: (
                w[0] * T.alpha(StoppingTime(), Regime.INCOMPLETE, c, eps, lams[0])
                + w[1] * T.alpha(StoppingTime(), Regime.INCOMPLETE, tr.capacity - c, eps, lams[1]),
                -c,
            ),
        )
        f = w[0] * T.alpha(StoppingTime(), Regime.INCOMPLETE, best, eps, lams[0]) + w[1] * T.alpha(
            StoppingTime(), Regime.INCOMPLETE, tr.capacity - best, eps, lams[1]
        )
        b = BOUNDS[tr.W]
        total_lo += f * b.g_lower ** (1 / eps)
        total_hi += f * b.g_upper ** (1 / eps)
    iv = revenue_interval(TRAINS, THETA, BOUNDS, StoppingTime(), "incomplete")
    assert iv.lower == pytest.approx(total_lo / 3, rel=1e-12)
    assert iv.upper == pytest.approx(total_hi / 3, rel=1e-12)


@pytest.mark.parametrize("strategy", [Uniform(), Uniform(grid=True), StoppingTime(), StoppingTimeM(2, True)])
def test_degenerate_bounds_give_a_point(strategy):
    pts = {"w1": CellBounds("w1", 3.0, 3.0), "w2": CellBounds("w2", 1.2, 1.2)}
    iv = revenue_interval(TRAINS, THETA, pts, strategy, "incomplete")
    assert iv.lower == pytest.approx(iv.upper, rel=1e-12)
    assert iv.lower > 0


def test_homogeneity_in_scale():
    s = 7.0
    scaled = {w: CellBounds(w, b.g_lower * s, b.g_upper * s) for w, b in BOUNDS.items()}
    for strat in (Uniform(), StoppingTime()):
        a = revenue_interval(TRAINS, THETA, BOUNDS, strat, "complete")
        b = revenue_interval(TRAINS, THETA, scaled, strat, "complete")
        assert b.lower == pytest.approx(a.lower * s ** (1 / 3), rel=1e-12)
        assert b.upper == pytest.approx(a.upper * s ** (1 / 3), rel=1e-12)
    u1 = uniform_without_preallocation(TRAINS, THETA, BOUNDS, "incomplete")
    u2 = uniform_without_preallocation(TRAINS, THETA, scaled, "incomplete")
    assert u2.lower == pytest.approx(u1.lower * s ** (1 / 3), rel=1e-9)


def test_uniform_without_preallocation_orderings():
    c = uniform_without_preallocation(TRAINS, THETA, BOUNDS, "complete")
    i = uniform_without_preallocation(TRAINS, THETA, BOUNDS, "incomplete")
    assert 0 < i.lower <= c.lower * (1 + 1e-9)
    assert i.lower < i.upper


def test_match_rule_needs_route_sales():
    with pytest.raises(ValueError):
        train_factors(TRAINS, THETA, StoppingTime(), "incomplete", BOUNDS, "match", avg_a={})
    f = train_factors(TRAINS, THETA, StoppingTime(), "incomplete", BOUNDS, "match", avg_a={"R": 2.0})
    assert [tuple(s) for s in f.splits] == [(2, 4), (2, 2), (2, 3)]


def test_missing_cell():
    with pytest.raises(KeyError, match="w2"):
        revenue_interval(TRAINS, THETA, {"w1": BOUNDS["w1"]}, StoppingTime(), "incomplete")


def test_interval_from_factors():
    lo, hi = interval_from_factors([1.0, 2.0], np.array([1.0, 8.0]), np.array([8.0, 8.0]), 3.0)
    assert (lo, hi) == pytest.approx((2.5, 3.0))


def test_ratio_collapses_for_proportional_factors():
    f2 = np.array([1.0, 2.0, 3.5])
    assert ratio_interval(1.7 * f2, f2, [1, 2, 3], [4, 5, 6], 3.0) == pytest.approx((1.7, 1.7))


def test_ratio_point_when_bounds_coincide():
    f1, f2, g = np.array([1.0, 3.0, 2.0]), np.array([2.0, 1.0, 2.0]), np.array([1.0, 4.0, 2.0])
    lo, hi = ratio_interval(f1, f2, g, g, 2.0)
    r = np.sum(f1 * g**0.5) / np.sum(f2 * g**0.5)
    assert lo == pytest.approx(r, rel=1e-12) and hi == pytest.approx(r, rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_ratio_matches_corner_enumeration(seed):
    rng = np.random.default_rng(seed)
    n = 8
    f1, f2 = rng.uniform(0.2, 3, n), rng.uniform(0.2, 3, n)
    gl = rng.uniform(0.1, 2, n)
    gu = gl * rng.uniform(1, 10, n)
    exact = ratio_interval(f1, f2, gl, gu, 4.0)
    brute = ratio_interval_bruteforce(f1, f2, gl, gu, 4.0)
    assert exact == pytest.approx(brute, abs=1e-6)


def test_ratio_errors():
    with pytest.raises(ValueError):
        ratio_interval([1.0, -1.0], [1.0, 1.0], [1, 1], [2, 2], 3.0)
    with pytest.raises(ValueError):
        ratio_interval([1.0, 2.0], [1.0, 1.0], [3, 1], [2, 2], 3.0)
    with pytest.raises(ValueError):
        ratio_interval_bruteforce(np.ones(21), np.ones(21), np.ones(21), np.ones(21), 3.0)


def test_revenue_interval_rejects_empty():
    with pytest.raises(ValueError):
        revenue_interval([], THETA, BOUNDS, StoppingTime(), "incomplete")
