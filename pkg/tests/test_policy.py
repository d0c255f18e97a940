import math

import numpy as np
import pytest
from scipy import optimize

from revman.alpha import FullDynamic, Regime, StoppingTime, StoppingTimeM, Uniform, alpha_coefficient
from revman.demand import ArrivalShape
from revman.policy import (
    GammaBelief,
    PolicyState,
    evaluate_policy_mc,
    markup_price,
    optimal_price,
    posterior_update,
)


def _q_star(eps=2.0):
    res = optimize.minimize_scalar(lambda x: -math.exp(-x / eps) * (1 - math.exp(-math.exp(x))),
                                   bounds=(-5, 5), method="bounded", options={"xatol": 1e-12})
    return math.exp(res.x)


def test_posterior_update():
    b = GammaBelief(2.0, 1.0)
    assert posterior_update(b, 0.5, True) == GammaBelief(3.0, 1.5)
    assert posterior_update(b, 0.5, False) == GammaBelief(2.0, 1.5)
    assert posterior_update(b, 0.0, False) == b
    assert GammaBelief(3.0, 1.5).mean == 2.0 and GammaBelief(3.0, 1.5).var == pytest.approx(4 / 3)
    with pytest.raises(ValueError):
        posterior_update(b, -0.1, False)
    with pytest.raises(ValueError):
        GammaBelief(0.0, 1.0)


def test_markup():
    assert markup_price(2.0, 5.0) == 10.0
    assert markup_price(4.0, 3.0) == pytest.approx(4.0)
    for bad in [(1.0, 1.0), (2.0, 0.0), (2.0, -1.0)]:
        with pytest.raises(ValueError):
            markup_price(*bad)


def test_stopping_time_one_seat_price():
    p = optimal_price(StoppingTime(), "complete", PolicyState(seats=1, xi=1.0), 2.0, 1)
    assert p == pytest.approx(_q_star() ** -0.5, rel=1e-6)
    assert p == pytest.approx(0.8921, abs=5e-4)


@pytest.mark.parametrize("xi", [0.5, 4.0])
def test_uniform_price_scales_with_demand(xi):
    p = optimal_price(Uniform(), "complete", PolicyState(seats=1, xi=xi), 2.0, 1)
    assert p == pytest.approx((xi / _q_star()) ** 0.5, rel=1e-6)


def test_uniform_large_capacity_is_unconstrained():
    # with ample seats the uniform price is the markup-free monopoly solution p -> 0,
    # so revenue is governed by the capacity constraint; compare with alpha
    C, eps = 200, 3.0
    a = alpha_coefficient(Uniform(), "complete", C, eps)
    # near-deterministic demand: revenue ~ p * C with q* ~ C, so alpha ~ C^(1-1/eps)
    assert a == pytest.approx(C ** (1 - 1 / eps), rel=0.05)
    p = optimal_price(Uniform(), "complete", PolicyState(seats=C, xi=1.0), eps, C)
    assert p ** (-eps) == pytest.approx(C, rel=0.1)


def test_state_validation():
    with pytest.raises(ValueError):
        optimal_price(StoppingTime(), "complete", PolicyState(seats=0, xi=1.0), 2.0, 1)
    with pytest.raises(ValueError):
        optimal_price(StoppingTime(), "complete", PolicyState(seats=1), 2.0, 1)
    with pytest.raises(ValueError):  # belief shape must equal prior shape plus sales
        optimal_price(StoppingTime(), "incomplete", PolicyState(seats=2, belief=GammaBelief(2.0, 1.3), price=1.0), 3.0, 3, lam0=2.0)
    with pytest.raises(ValueError):
        optimal_price(StoppingTime(), "incomplete", PolicyState(seats=3), 3.0, 3, lam0=2.0)


def test_increasing_fares_never_fall():
    s = StoppingTimeM(12, True)
    for mu in (1.2, 3.0, 20.0):
        st = PolicyState(seats=3, fares_left=10, belief=GammaBelief(4.0, mu), elapsed_mass=0.6, price=2.5)
        assert optimal_price(s, "incomplete", st, 3.0, 5, lam0=2.0) >= 2.5
    # without the constraint, a pessimistic belief lowers the price
    free = PolicyState(seats=3, fares_left=10, belief=GammaBelief(4.0, 20.0), elapsed_mass=0.6, price=2.5)
    assert optimal_price(StoppingTimeM(12), "incomplete", free, 3.0, 5, lam0=2.0) < 2.5


def test_learning_lowers_price_after_slow_sales():
    base = PolicyState(seats=3, belief=GammaBelief(2.0, 1.0), elapsed_mass=0.0)
    slow = PolicyState(seats=3, belief=GammaBelief(2.0, 3.0), elapsed_mass=0.5)
    p0 = optimal_price(Uniform(), "incomplete", base, 3.0, 3, lam0=2.0)
    p1 = optimal_price(FullDynamic(), "incomplete", slow, 3.0, 3, lam0=2.0)
    assert p1 < p0


def test_zero_capacity_revenue():
    r = evaluate_policy_mc(StoppingTime(), "incomplete", 0, 3.0, 2.0, 200, seed=1)
    assert r.mean_revenue == 0.0 and r.mean_load == 0.0


def test_mc_requires_enough_reps():
    with pytest.raises(ValueError):
        evaluate_policy_mc(StoppingTime(), "complete", 2, 3.0, None, 10, seed=1)


@pytest.mark.parametrize("strategy,regime,C,lam", [
    (FullDynamic(), "complete", 1, None),
    (StoppingTime(), "incomplete", 3, 2.0),
    (StoppingTimeM(2, True), "incomplete", 4, 2.0),
])
def test_mc_matches_coefficient(strategy, regime, C, lam):
    r = evaluate_policy_mc(strategy, regime, C, 3.0, lam, 20_000, seed=11)
    a = alpha_coefficient(strategy, regime, C, 3.0, lam)
    assert abs(r.mean_revenue - a) < 4 * r.se_revenue


def test_revenue_invariant_to_arrival_shape():
    args = (StoppingTime(), "incomplete", 3, 3.0, 2.0, 20_000)
    flat = evaluate_policy_mc(*args, seed=4)
    step = evaluate_policy_mc(*args, seed=5, shape=ArrivalShape.step(0.3, 5.0))
    assert abs(flat.mean_revenue - step.mean_revenue) < 4 * math.hypot(flat.se_revenue, step.se_revenue)


def test_particle_filter_agrees_with_conjugate_posterior():
    rng = np.random.default_rng(3)
    lam, exposure, sales = 2.0, 1.7, 4
    post = GammaBelief(lam, 1.0)
    for u in np.full(sales, exposure / sales):
        post = posterior_update(post, u, True)
    eta = rng.gamma(lam, 1.0, 200_000)
    logw = sales * np.log(eta) - eta * exposure
    w = np.exp(logw - logw.max())
    w /= w.sum()
    assert np.sum(w * eta) == pytest.approx(post.mean, rel=0.01)
    assert np.sum(w * eta**2) - np.sum(w * eta) ** 2 == pytest.approx(post.var, rel=0.03)
