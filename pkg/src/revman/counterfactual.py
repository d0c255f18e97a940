"""Counterfactual revenues: assembly over trains, seat pre-allocation and intervals.

For a strategy ``r`` and information regime ``I`` the expected revenue of a
train factors as

    R_T = g0(W_T)^(1/eps) * sum_d alpha_r(C_dT, eps, lambda_d) * exp(X_dT' beta / eps),

where ``exp(X_dT' beta)`` aggregates the cities of destination group d.
Replacing g0 by its identified bounds and averaging over trains bounds the
mean counterfactual revenue.  The best single grid fare is not of this
form and is evaluated directly at both bounds (it is increasing in g).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Hashable, Mapping, Sequence

import numpy as np
from scipy import optimize

from .alpha import (
    DEFAULT_TABLE,
    AlphaTable,
    FullDynamic,
    IntermediateK,
    Regime,
    StoppingTime,
    StoppingTimeM,
    Uniform,
)
from .bounds import CellBounds, capped_profile, gamma_quantile_rule, grid_uniform_revenue
from .demand import DemandPrimitives, TrainInstance


@dataclass(frozen=True)
class RevenueInterval:
    lower: float
    upper: float
    strategy: object = None
    regime: str | None = None

    def __post_init__(self):
        if self.lower > self.upper * (1 + 1e-12):
            raise ValueError("lower bound exceeds upper bound")


@dataclass(frozen=True)
class Scenario:
    id: str
    label: str
    strategy: object
    regime: Regime
    preallocation: str  # "optimal" or "match"


SCENARIOS: tuple[Scenario, ...] = (
    Scenario("u.1", "Incomplete information, constrained prices", Uniform(grid=True), Regime.INCOMPLETE, "optimal"),
    Scenario("u.2", "Incomplete information, unconstrained prices", Uniform(), Regime.INCOMPLETE, "optimal"),
    Scenario("u.3", "Complete information, constrained prices", Uniform(grid=True), Regime.COMPLETE, "optimal"),
    Scenario("u.4", "Complete information, unconstrained prices", Uniform(), Regime.COMPLETE, "optimal"),
    Scenario("s.1", "Incomplete information, 2 increasing fares", StoppingTimeM(2, True), Regime.INCOMPLETE, "match"),
    Scenario("s.2", "Incomplete information, 2 fares", StoppingTimeM(2), Regime.INCOMPLETE, "match"),
    Scenario("s.3", "Incomplete information, 12 increasing fares", StoppingTimeM(12, True), Regime.INCOMPLETE, "match"),
    Scenario("s.4", "Incomplete information, 12 fares", StoppingTimeM(12), Regime.INCOMPLETE, "match"),
    Scenario("s.5", "Incomplete information", StoppingTime(), Regime.INCOMPLETE, "optimal"),
    Scenario("s.6", "Complete information, 2 increasing fares", StoppingTimeM(2, True), Regime.COMPLETE, "match"),
    Scenario("s.7", "Complete information, 2 fares", StoppingTimeM(2), Regime.COMPLETE, "match"),
    Scenario("s.8", "Complete information, 12 increasing fares", StoppingTimeM(12, True), Regime.COMPLETE, "match"),
    Scenario("s.9", "Complete information, 12 fares", StoppingTimeM(12), Regime.COMPLETE, "match"),
    Scenario("s.10", "Complete information", StoppingTime(), Regime.COMPLETE, "optimal"),
    Scenario("f.1", "Incomplete information", FullDynamic(), Regime.INCOMPLETE, "optimal"),
    Scenario("f.2", "Complete information", FullDynamic(), Regime.COMPLETE, "optimal"),
)

SCENARIO_IDS = tuple(s.id for s in SCENARIOS)


def scenario(sid: str) -> Scenario:
    for s in SCENARIOS:
        if s.id == sid:
            return s
    raise KeyError(f"unknown scenario {sid!r}; known: {', '.join(SCENARIO_IDS)}")


# --------------------------------------------------------------------------
# Pre-allocation
# --------------------------------------------------------------------------


def preallocate(
    C_total: int,
    rule: str = "optimal",
    curves: tuple[np.ndarray, np.ndarray] | None = None,
    weights: tuple[float, float] = (1.0, 1.0),
    avg_a: float | None = None,
) -> tuple[int, int]:
    """Split ``C_total`` seats between destinations a and b.

    ``optimal`` maximizes ``w_a curve_a[c] + w_b curve_b[C - c]`` by
    enumeration (first maximizer, so ties go to fewer seats for a);
    ``match`` rounds the observed mean a-sales ``avg_a``.
    """
    C_total = int(C_total)
    if C_total < 0:
        raise ValueError("capacity must be non-negative")
    if C_total == 0:
        return (0, 0)
    if rule == "match":
        if avg_a is None or not 0 <= avg_a <= C_total:
            raise ValueError("match rule needs 0 <= avg_a <= C_total")
        ca = int(math.floor(avg_a + 0.5))
        return (ca, C_total - ca)
    if rule != "optimal":
        raise ValueError(f"unknown pre-allocation rule {rule!r}")
    if curves is None:
        raise ValueError("optimal rule needs per-destination revenue curves")
    ca_curve = np.asarray(curves[0], dtype=float)[: C_total + 1]
    cb_curve = np.asarray(curves[1], dtype=float)[: C_total + 1]
    total = weights[0] * ca_curve + weights[1] * cb_curve[::-1]
    ca = int(np.argmax(total))
    return (ca, C_total - ca)


# --------------------------------------------------------------------------
# Per-train factors
# --------------------------------------------------------------------------


class TrainFactors:
    """Per-train revenue factors for one scenario.

    For alpha-type strategies ``factor[T] = sum_d alpha_d exp(X_d'b/eps)`` so
    that revenue is ``factor * g^(1/eps)``; grid-constrained uniform pricing
    stores the revenues at ``g_lower`` and ``g_upper`` directly.
    """

    def __init__(self, factor=None, rev_lower=None, rev_upper=None, splits=None, loads=None):
        self.factor = factor
        self.rev_lower = rev_lower
        self.rev_upper = rev_upper
        self.splits = splits
        self.loads = loads

    @property
    def scale_free(self) -> bool:
        return self.factor is not None

    def revenues(self, gl: np.ndarray, gu: np.ndarray, eps: float):
        if self.scale_free:
            return self.factor * gl ** (1 / eps), self.factor * gu ** (1 / eps)
        return self.rev_lower, self.rev_upper


def _curve(table: AlphaTable, strategy, regime, C, eps, lam) -> np.ndarray:
    return table.curve(strategy, regime, C, eps, lam)


def _load_or_nan(table, strategy, regime, C, eps, lam):
    if C == 0:
        return 0.0
    try:
        return table.load(strategy, regime, C, eps, lam, formula="argmax")
    except ValueError:
        return float("nan")


def train_factors(
    trains: Sequence[TrainInstance],
    theta: DemandPrimitives,
    strategy,
    regime,
    bounds: Mapping[Hashable, CellBounds] | None = None,
    preallocation: str = "optimal",
    avg_a: Mapping[str, float] | None = None,
    table: AlphaTable | None = None,
    split_strategy=None,
) -> TrainFactors:
    """Revenue factors for every train.

    ``avg_a`` maps route to mean observed a-sales for the ``match`` rule.
    ``split_strategy`` overrides the strategy used to choose an optimal
    split (the intermediate-K curve reuses the stopping-time split).
    """
    table = table or DEFAULT_TABLE
    regime = Regime(regime)
    eps = theta.epsilon
    lams = (theta.lambda_a, theta.lambda_b)
    n = len(trains)
    if isinstance(strategy, Uniform) and strategy.grid:
        if bounds is None:
            raise ValueError("grid-constrained uniform pricing needs cell bounds")
        lo, hi = np.empty(n), np.empty(n)
        cache: dict = {}
        for i, tr in enumerate(trains):
            b = _cell(bounds, tr.W)
            li = (tr.log_index("a", theta.beta), tr.log_index("b", theta.beta))
            prices = tr.price_array()
            out = []
            for g in (b.g_lower, b.g_upper):
                key = (li, prices.tobytes(), tr.capacity, g)
                if key not in cache:
                    cache[key] = grid_uniform_revenue(g, li, prices, eps, lams, tr.capacity, regime.value)[0] if g > 0 else 0.0
                out.append(cache[key])
            lo[i], hi[i] = out
        return TrainFactors(rev_lower=lo, rev_upper=hi)

    factor = np.empty(n)
    splits = np.empty((n, 2), dtype=int)
    loads = np.empty(n)
    curves: dict = {}
    fixed: dict = {}
    for i, tr in enumerate(trains):
        w = tuple(math.exp(tr.log_index(d, theta.beta) / eps) for d in ("a", "b"))
        C = tr.capacity
        if preallocation == "match":
            if avg_a is None or tr.route not in avg_a:
                raise ValueError(f"no observed a-sales for route {tr.route!r}")
            split = preallocate(C, "match", avg_a=avg_a[tr.route])
        else:
            key = (C,)
            if key not in curves:
                s = split_strategy or strategy
                curves[key] = tuple(_curve(table, s, regime, C, eps, lams[d]) for d in range(2))
            split = preallocate(C, "optimal", curves[key], w)
        vals, ld = [], 0.0
        for d in range(2):
            key = (d, split[d])
            if key not in fixed:
                a = table.alpha(strategy, regime, split[d], eps, lams[d])
                fixed[key] = (a, _load_or_nan(table, strategy, regime, split[d], eps, lams[d]))
            vals.append(fixed[key][0] * w[d])
            ld += fixed[key][1] * split[d]
        factor[i] = vals[0] + vals[1]
        splits[i] = split
        loads[i] = ld / C if C else 0.0
    return TrainFactors(factor=factor, splits=splits, loads=loads)


def _cell(bounds, W):
    try:
        return bounds[W]
    except KeyError:
        raise KeyError(f"no bounds for cell {W!r}") from None


def cell_arrays(trains: Sequence[TrainInstance], bounds: Mapping[Hashable, CellBounds]):
    gl = np.array([_cell(bounds, t.W).g_lower for t in trains], dtype=float)
    gu = np.array([_cell(bounds, t.W).g_upper for t in trains], dtype=float)
    return gl, gu


def revenue_interval(
    trains: Sequence[TrainInstance],
    theta: DemandPrimitives,
    bounds: Mapping[Hashable, CellBounds],
    strategy,
    regime,
    preallocation: str = "optimal",
    avg_a: Mapping[str, float] | None = None,
    table: AlphaTable | None = None,
) -> RevenueInterval:
    """Bounds on the mean revenue per train under ``strategy``."""
    if len(trains) == 0:
        raise ValueError("no trains")
    f = train_factors(trains, theta, strategy, regime, bounds, preallocation, avg_a, table)
    gl, gu = cell_arrays(trains, bounds)
    lo, hi = f.revenues(gl, gu, theta.epsilon)
    return RevenueInterval(float(lo.mean()), float(hi.mean()), strategy, Regime(regime).value)


def interval_from_factors(factor, gl, gu, eps) -> tuple[float, float]:
    """Mean of ``factor * g^(1/eps)`` at both bounds."""
    factor = np.asarray(factor, dtype=float)
    return float(np.mean(factor * gl ** (1 / eps))), float(np.mean(factor * gu ** (1 / eps)))


# --------------------------------------------------------------------------
# Ratios
# --------------------------------------------------------------------------


def _ratio_equation(r, f1, f2, a, b):
    # a = weight on the signed term, b - a = extra weight on the positive part
    d = f1 - r * f2
    return float(np.sum(a * d + (b - a) * np.maximum(d, 0.0)))


def ratio_interval(f1, f2, g_lower, g_upper, epsilon: float) -> tuple[float, float]:
    """Identified set of ``E[f1 g^(1/eps)] / E[f2 g^(1/eps)]`` when each
    train's ``g`` is only known to lie in ``[g_lower, g_upper]``.

    The upper end solves ``E[gL (f1 - r f2) + (gU - gL)(f1 - r f2)_+] = 0``
    and the lower end the same with the roles of the bounds swapped (all
    ``g`` raised to ``1/eps``); both sides decrease in ``r``.
    """
    f1 = np.asarray(f1, dtype=float)
    f2 = np.asarray(f2, dtype=float)
    if np.any(f1 <= 0) or np.any(f2 <= 0):
        raise ValueError("factors must be positive")
    gl = np.asarray(g_lower, dtype=float) ** (1 / epsilon)
    gu = np.asarray(g_upper, dtype=float) ** (1 / epsilon)
    if np.any(gl > gu):
        raise ValueError("g_lower exceeds g_upper")
    lo_r = float(np.min(f1 / f2))
    hi_r = float(np.max(f1 / f2))
    if lo_r == hi_r:
        return lo_r, hi_r
    out = []
    for a, b in ((gl, gu), (gu, gl)):
        h = lambda r: _ratio_equation(r, f1, f2, a, b)
        if h(lo_r) < 0 or h(hi_r) > 0:
            raise ArithmeticError("ratio equation has no sign change on the bracket")
        out.append(optimize.brentq(h, lo_r, hi_r, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500))
    r_upper, r_lower = out
    return float(r_lower), float(r_upper)


def ratio_interval_bruteforce(f1, f2, g_lower, g_upper, epsilon: float) -> tuple[float, float]:
    """Extremes over the ``2^N`` corner assignments (small N only)."""
    f1 = np.asarray(f1, dtype=float)
    f2 = np.asarray(f2, dtype=float)
    n = f1.size
    if n > 20:
        raise ValueError("too many trains for enumeration")
    corners = (np.arange(2**n)[:, None] >> np.arange(n)) & 1
    g = np.where(corners == 1, np.asarray(g_upper, dtype=float), np.asarray(g_lower, dtype=float)) ** (1 / epsilon)
    r = (g * f1).sum(1) / (g * f2).sum(1)
    return float(r.min()), float(r.max())


# --------------------------------------------------------------------------
# Uniform pricing without pre-allocation
# --------------------------------------------------------------------------


def uniform_without_preallocation(
    trains: Sequence[TrainInstance],
    theta: DemandPrimitives,
    bounds: Mapping[Hashable, CellBounds],
    regime,
    n_nodes: int = 48,
    table: AlphaTable | None = None,
) -> RevenueInterval:
    """One price for both destinations, seats shared first come first served.

    Complete information: ``max_p p E[D((xi_a + xi_b) p^-eps) ^ C]``, which is
    ``alpha_u(C) (xi_a + xi_b)^(1/eps)`` for the unconstrained uniform
    coefficient without the gamma factor.  Incomplete information: the price
    maximizes the expectation over both shocks.  Expectations over
    ``(eta_a, eta_b)`` use a product gamma rule.
    """
    table = table or DEFAULT_TABLE
    regime = Regime(regime)
    eps = theta.epsilon
    xa, wa = gamma_quantile_rule(theta.lambda_a, n_nodes)
    xb, wb = gamma_quantile_rule(theta.lambda_b, n_nodes)
    W = wa[:, None] * wb[None, :]
    gl, gu = cell_arrays(trains, bounds)
    cache: dict = {}
    per = np.empty((len(trains), 2))
    for i, tr in enumerate(trains):
        sa, sb = (math.exp(tr.log_index(d, theta.beta)) for d in ("a", "b"))
        C = tr.capacity
        key = (sa, sb, C)
        if key not in cache:
            S = sa * xa[:, None] + sb * xb[None, :]
            if regime is Regime.COMPLETE:
                base = table.raw(Uniform(), regime, C, eps, None) * float(np.sum(W * S ** (1 / eps)))
            else:
                s_flat, w_flat = S.ravel(), W.ravel()

                def neg(logp):
                    p = math.exp(logp)
                    return -p * float(w_flat @ capped_profile(s_flat * p ** (-eps), C)[:, C])

                # revenue is p^(1-eps) E[...] scaled: search over log price
                mean_s = float(np.sum(W * S))
                p0 = (mean_s / max(C, 1)) ** (1 / eps)
                res = optimize.minimize_scalar(neg, bracket=(math.log(p0) - 1, math.log(p0) + 1))
                base = -res.fun
            cache[key] = base
        # revenue at level g: S scales by g, so revenue scales by g^(1/eps)
        per[i] = cache[key] * np.array([gl[i], gu[i]]) ** (1 / eps)
    return RevenueInterval(float(per[:, 0].mean()), float(per[:, 1].mean()), Uniform(), regime.value)


# --------------------------------------------------------------------------
# Scenario table
# --------------------------------------------------------------------------


def _mean_load(loads) -> float:
    if loads is None or not np.isfinite(loads).any():
        return float("nan")
    return float(np.nanmean(loads))


def scenario_rows(
    trains: Sequence[TrainInstance],
    theta: DemandPrimitives,
    bounds: Mapping[Hashable, CellBounds],
    observed_mean_revenue: float,
    avg_a: Mapping[str, float],
    scenario_ids: Sequence[str] = SCENARIO_IDS,
    table: AlphaTable | None = None,
) -> tuple[list[dict], dict]:
    """One row per scenario with revenue bounds, ratios to the observed
    revenue and the expected load; also returns the per-train factors."""
    gl, gu = cell_arrays(trains, bounds)
    rows, factors = [], {}
    for sid in scenario_ids:
        sc = scenario(sid)
        f = train_factors(trains, theta, sc.strategy, sc.regime, bounds, sc.preallocation, avg_a, table)
        factors[sid] = f
        lo, hi = f.revenues(gl, gu, theta.epsilon)
        lo_m, hi_m = float(lo.mean()), float(hi.mean())
        rows.append(
            {
                "id": sid,
                "label": sc.label,
                "regime": sc.regime.value,
                "strategy": sc.strategy.label,
                "lower": lo_m,
                "upper": hi_m,
                "lower_over_observed": lo_m / observed_mean_revenue if observed_mean_revenue > 0 else float("nan"),
                "upper_over_observed": hi_m / observed_mean_revenue if observed_mean_revenue > 0 else float("nan"),
                "load": _mean_load(f.loads),
            }
        )
    return rows, factors


def intermediate_k_rows(
    trains: Sequence[TrainInstance],
    theta: DemandPrimitives,
    bounds: Mapping[Hashable, CellBounds],
    pcts: Sequence[float],
    table: AlphaTable | None = None,
) -> list[dict]:
    """Revenue bounds along the intermediate-K curve in both regimes.

    Every point uses the optimal stopping-time split of its regime so that
    the curve isolates the effect of K.
    """
    table = table or DEFAULT_TABLE
    eps = theta.epsilon
    lams = (theta.lambda_a, theta.lambda_b)
    gl, gu = cell_arrays(trains, bounds)
    rows = []
    for regime in (Regime.INCOMPLETE, Regime.COMPLETE):
        base = train_factors(trains, theta, StoppingTime(), regime, bounds, "optimal", None, table)
        splits = base.splits
        w = np.array([[math.exp(t.log_index(d, theta.beta) / eps) for d in ("a", "b")] for t in trains])
        keys = {(d, int(c)) for d in range(2) for c in splits[:, d]}
        curve = {k: table.intermediate_curve(regime, k[1], eps, lams[k[0]], list(pcts)) for k in keys}
        for j, pct in enumerate(pcts):
            fac = np.array(
                [sum(curve[(d, int(splits[i, d]))][j] * w[i, d] for d in range(2)) for i in range(len(trains))]
            )
            lo, hi = interval_from_factors(fac, gl, gu, eps)
            rows.append({"regime": regime.value, "pct": float(pct), "lower": lo, "upper": hi})
    return rows
