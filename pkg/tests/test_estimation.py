import math
import warnings
from types import SimpleNamespace

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from revman import estimation as E
from revman import synthetic as S


def _toy(copies=3, scale=1.0, pa=(10.0, 25.0), pb=(12.0, 20.0), sold=((30, 10), (20, 20))):
    rows = []
    for t in range(copies):
        for k in range(2):
            for d, p, n in (("a", pa[k], sold[k][0]), ("b", pb[k], sold[k][1])):
                rows.append(dict(train_id=t, route="R", fare_class=k + 1, dest_group=d, price=p * scale, n_sold=n))
    return E.SalesPanel(pd.DataFrame(rows))


def test_two_class_closed_form():
    fit = E.fit_conditional_logit(_toy())
    # logit(share_b) = f - eps ln(pb/pa) in each class
    expected = (math.log(3.0)) / (math.log(1.2) - math.log(0.8))
    assert fit.converged
    assert fit.epsilon[0] == pytest.approx(expected, rel=1e-8)


def test_price_scale_equivariance():
    a = E.fit_conditional_logit(_toy())
    b = E.fit_conditional_logit(_toy(scale=7.5))
    assert b.epsilon[0] == pytest.approx(a.epsilon[0], rel=1e-9)


def test_constant_relative_prices_not_identified():
    with pytest.raises(E.IdentificationError):
        E.fit_conditional_logit(_toy(pa=(10.0, 20.0), pb=(12.0, 24.0)))


def test_panel_validation():
    bad = _toy().records.copy()
    bad.loc[0, "n_sold"] = -1
    with pytest.raises(ValueError):
        E.SalesPanel(bad)
    with pytest.raises(ValueError):
        E.SalesPanel(_toy().records.drop(columns="price"))


def _small(panel, n=120):
    return panel.subset(np.isin(panel.train_ids, panel.train_ids[:n]))


def test_logit_score_matches_finite_differences(full_panel):
    panel = _small(full_panel)
    rng = np.random.default_rng(0)
    fe = [rng.normal(0, 0.3, s) for s in E.block_shapes(panel)]
    eps = 3.7
    ll, sf, se = E.logit_loglik(panel, eps, fe)
    h = 1e-6
    fd = (E.logit_loglik(panel, eps + h, fe)[0] - E.logit_loglik(panel, eps - h, fe)[0]) / (2 * h)
    assert se[0] == pytest.approx(fd, rel=1e-6)
    b = 0
    bump = [f.copy() for f in fe]
    bump[b][0, 0] += h
    up = E.logit_loglik(panel, eps, bump)[0]
    bump[b][0, 0] -= 2 * h
    dn = E.logit_loglik(panel, eps, bump)[0]
    assert sf[b][0, 0] == pytest.approx((up - dn) / (2 * h), rel=1e-5, abs=1e-7)


def test_logit_weights_equal_duplication():
    w = E.fit_conditional_logit(_toy(copies=2, sold=((30, 10), (20, 20))), weights=[3.0, 0.0])
    d = E.fit_conditional_logit(_toy(copies=3, sold=((30, 10), (20, 20))))
    assert w.epsilon[0] == pytest.approx(d.epsilon[0], rel=1e-9)


def test_destination_stage_exact_data(full_panel):
    beta = np.array([2.23, 0.20, -2.07, 0.34])
    ids = full_panel.train_ids
    designs, index = E._design(full_panel, ids)
    truth = E._ratio_and_jac(designs, beta)[0][index]
    fake = SimpleNamespace(fe=truth + 0.3, train_ids=ids)
    fit = E.fit_destination_effects(fake, full_panel, intercept=True)
    assert fit.beta == pytest.approx(beta, abs=1e-6)
    assert fit.intercept == pytest.approx(0.3, abs=1e-6)
    assert fit.r2 == pytest.approx(1.0, abs=1e-10)


def test_gamma_ratio_recovers_shapes():
    rng = np.random.default_rng(1)
    r = np.log(rng.gamma(2.62, size=40_000) / rng.gamma(3.63, size=40_000))
    fit = E.fit_gamma_ratio(r)
    assert fit.converged
    assert fit.lambda_a == pytest.approx(3.63, rel=0.05)
    assert fit.lambda_b == pytest.approx(2.62, rel=0.05)


def test_gamma_ratio_symmetry_and_weights():
    rng = np.random.default_rng(2)
    r = np.log(rng.gamma(1.5, size=500) / rng.gamma(4.0, size=500))
    f, g = E.fit_gamma_ratio(r), E.fit_gamma_ratio(-r)
    assert (f.lambda_a, f.lambda_b) == pytest.approx((g.lambda_b, g.lambda_a), rel=1e-6)
    w = rng.integers(0, 4, r.size).astype(float)
    fw = E.fit_gamma_ratio(r, weights=w)
    fd = E.fit_gamma_ratio(np.repeat(r, w.astype(int)))
    assert (fw.lambda_a, fw.lambda_b) == pytest.approx((fd.lambda_a, fd.lambda_b), rel=1e-6)
    assert E.beta_prime_loglik(r, 4.0, 1.5) == pytest.approx(
        np.sum(stats.betaprime(1.5, 4.0).logpdf(np.exp(r)) + r), rel=1e-10
    )


def test_gamma_ratio_degenerate_sample():
    fit = E.fit_gamma_ratio(np.full(50, 0.2))
    assert not fit.converged
    with pytest.raises(ValueError):
        E.fit_gamma_ratio([0.1] * 5)
    with pytest.raises(ValueError):
        E.fit_gamma_ratio([0.1] * 20 + [np.nan])


def test_full_pipeline_close_to_truth(full_estimates):
    p = full_estimates.params()
    assert p["epsilon"] == pytest.approx(4.04, abs=0.4)
    assert p["lambda_a"] == pytest.approx(3.63, rel=0.35)
    assert p["lambda_b"] == pytest.approx(2.62, rel=0.35)


def test_two_elasticities():
    # low classes rarely sell under the ladder, so the split sits where both sides have sales
    cfg = S.SyntheticConfig(seed=8, epsilon=3.0, epsilon_late=5.0, split_class=10, train_scale=0.5)
    panel = E.SalesPanel.from_world(S.generate(cfg))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = E.fit_conditional_logit(panel, split_class=10)
    se = np.sqrt(np.diag(np.linalg.inv(-fit.hessian)))
    assert abs(fit.epsilon[0] - 3.0) < 4 * se[0]
    assert abs(fit.epsilon[1] - 5.0) < 4 * se[1]


def test_separability_on_equal_price_routes(full_panel):
    sub = full_panel.restrict_routes(["Marseille", "Mulhouse"])
    res = E.separability_test(sub)
    assert res.joint_pvalue > 0.001
    assert np.all(np.abs(res.coef) < 0.1)
    with pytest.raises(ValueError):
        E.separability_test(full_panel)


def test_separability_detects_class_effect():
    rows = []
    rng = np.random.default_rng(5)
    for t in range(200):
        for k in (1, 2, 3):
            share = 0.3 if k < 3 else 0.6
            nb = rng.binomial(30, share)
            for d, n in (("a", 30 - nb), ("b", nb)):
                rows.append(dict(train_id=t, route="R", fare_class=k, dest_group=d, price=10.0 * k, n_sold=n))
    res = E.separability_test(E.SalesPanel(pd.DataFrame(rows)))
    assert res.joint_pvalue < 1e-6
    assert res.coef[-1] == pytest.approx(0.3, abs=0.03)


def test_aggregation_is_attenuated(full_panel):
    for level in E.AGG_LEVELS:
        assert E.aggregate_and_regress(full_panel, level).coef > -4.04 * 0.8, level
    with pytest.raises(ValueError):
        E.aggregate_and_regress(full_panel, "year")


def test_aggregation_unbiased_with_exogenous_prices():
    world = S.generate(S.SyntheticConfig(seed=2, pricing="exogenous"))
    fit = E.aggregate_and_regress(E.SalesPanel.from_world(world), "train")
    assert abs(fit.coef + 4.04) < 4 * fit.se


def test_aggregation_needs_price_variation():
    rows = [dict(train_id=t, route="R", fare_class=1, dest_group=d, price=10.0, n_sold=5 + t, date="2024-01-01")
            for t in range(10) for d in "ab"]
    with pytest.raises(E.IdentificationError):
        E.aggregate_and_regress(E.SalesPanel(pd.DataFrame(rows)), "train-dest")
