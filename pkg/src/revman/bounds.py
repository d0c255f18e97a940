"""Set identification of the demand level g0(W) from moment inequalities.

Lower bound: buyers who paid any fare at or above ``p_dk`` would also have
bought at ``p_dk``, and no train sells more than its capacity, so the mean
of ``sum_{j>=k} n_dj`` over trains in a cell cannot exceed
``Q_dk(g) = E[C ^ D(e^{X_d'b} p_dk^-eps g eta_d)]``.  Inverting each
``Q_dk`` and taking the largest root bounds g0 from below.

Upper bound: observed revenue beats, on average, the best single grid fare
with an optimal seat split, ``R(g) <= E[R_obs | W]``.  Since ``R`` is
increasing, inverting it at the observed mean bounds g0 from above.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np
from scipy import optimize, special, stats

BRACKET = (1e-8, 1e8)
MAX_ITER = 200


# --------------------------------------------------------------------------
# Capped expectations
# --------------------------------------------------------------------------


def _check_q(q):
    q = np.asarray(q, dtype=float)
    if np.any(q < 0) or not np.all(np.isfinite(q)):
        raise ValueError("q must be finite and non-negative")
    return q


def capped_profile(q, cmax: int, lam: float | None = None) -> np.ndarray:
    """``E[D ^ c]`` for ``c = 0..cmax``, stacked on a trailing axis.

    ``D`` is Poisson(q) when ``lam`` is None and negative binomial with size
    ``lam`` and success probability ``1/(1+q)`` otherwise (a Poisson whose
    mean ``q z`` is mixed over ``z ~ Gamma(lam, 1)``).  Uses
    ``E[D ^ c] = sum_{j<c} P(D > j)``.
    """
    q = _check_q(q)
    cmax = int(cmax)
    if cmax < 0:
        raise ValueError("capacity must be non-negative")
    j = np.arange(cmax)
    qq = q[..., None]
    # log pmf by index, accumulated in log space so that P(D > j) keeps
    # full relative accuracy when it is close to one or to zero
    with np.errstate(divide="ignore", invalid="ignore"):
        if lam is None:
            logpmf = -qq + j * np.log(qq) - special.gammaln(j + 1.0)
            logpmf = np.where(qq > 0, logpmf, np.where(j == 0, 0.0, -np.inf))
        else:
            if not lam > 0:
                raise ValueError("lam must be positive")
            lp = np.log1p(qq)
            logpmf = (
                special.gammaln(j + lam) - special.gammaln(lam) - special.gammaln(j + 1.0)
                - lam * lp + j * (np.log(qq) - lp)
            )
            logpmf = np.where(qq > 0, logpmf, np.where(j == 0, 0.0, -np.inf))
    logcdf = np.logaddexp.accumulate(logpmf, axis=-1)
    sf = np.maximum(-np.expm1(np.minimum(logcdf, 0.0)), 0.0)
    zero = np.zeros(q.shape + (1,))
    return np.concatenate([zero, np.cumsum(sf, axis=-1)], axis=-1)


def expected_capped_demand(q, C: int):
    """``E[min(D, C)]`` for ``D ~ Poisson(q)``."""
    out = capped_profile(q, C)[..., int(C)]
    return float(out) if np.ndim(out) == 0 else out


def expected_capped_demand_gamma(q, C: int, lam: float):
    """``int E[min(D(q z), C)] g_{lam,1}(z) dz`` via the negative binomial."""
    out = capped_profile(q, C, lam)[..., int(C)]
    return float(out) if np.ndim(out) == 0 else out


# --------------------------------------------------------------------------
# Cell data
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CellData:
    """Sufficient statistics for one covariate cell.

    ``log_index[d]`` is ``ln sum_{c in d} exp(X_c' beta)``; ``prices`` and
    ``tail_means`` have shape (2, K) with rows a and b; ``tail_means[d, k]``
    is the cell average of ``sum_{j>=k} n_dj``.
    """

    cell: Hashable
    log_index: tuple
    prices: np.ndarray
    capacity: int
    tail_means: np.ndarray
    mean_revenue: float
    n_trains: int = 1


@dataclass(frozen=True)
class CellBounds:
    cell: Hashable
    g_lower: float
    g_upper: float
    binding: tuple = (None, None)  # (destination, fare class) attaining the lower bound
    k_star: int | None = None  # best grid fare at g_upper
    split: tuple | None = None
    flags: tuple = field(default=())

    @property
    def consistent(self) -> bool:
        return self.g_lower <= self.g_upper and "infeasible_lower" not in self.flags


def _solve_increasing(f, target: float, lo: float, hi: float) -> float:
    """Root of ``f(g) = target`` for increasing ``f``, bisecting in log g."""
    if not target > 0:
        return 0.0
    # grow the bracket geometrically until it straddles the target
    n = 0
    while f(lo) > target and n < MAX_ITER:
        lo /= 1e4
        n += 1
    while f(hi) < target and n < MAX_ITER:
        hi *= 1e4
        n += 1
    if not (f(lo) <= target <= f(hi)):
        raise ArithmeticError("failed to bracket the inversion target")
    h = lambda x: f(math.exp(x)) - target
    x = optimize.brentq(h, math.log(lo), math.log(hi), xtol=1e-13, rtol=4 * np.finfo(float).eps, maxiter=MAX_ITER)
    return math.exp(x)


def capped_q(log_index: float, price: float, epsilon: float) -> float:
    return math.exp(log_index) * price ** (-epsilon)


def lower_bound_g(
    tail_means,
    log_index: Sequence[float],
    prices,
    epsilon: float,
    lambdas: Sequence[float],
    capacity: int,
):
    """Largest inversion of the capped-demand moments.

    Returns ``(g_lower, (d, k), flags, candidates)`` where ``candidates``
    has shape (2, K) and holds each individual inversion (``inf`` when the
    target reaches capacity, which no finite demand level can rationalize).
    """
    tail_means = np.asarray(tail_means, dtype=float)
    prices = np.asarray(prices, dtype=float)
    if not np.all(np.isfinite(tail_means)):
        raise ValueError("tail means must be finite")
    cand = np.zeros_like(tail_means)
    flags = []
    for d in range(2):
        for k in range(tail_means.shape[1]):
            target = tail_means[d, k]
            if target <= 0:
                continue
            if target >= capacity * (1 - 1e-12):
                cand[d, k] = np.inf
                continue
            scale = capped_q(log_index[d], prices[d, k], epsilon)
            f = lambda g, s=scale, lam=lambdas[d]: expected_capped_demand_gamma(s * g, capacity, lam)
            cand[d, k] = _solve_increasing(f, target, *BRACKET)
    if np.isinf(cand).any():
        flags.append("infeasible_lower")
    d, k = np.unravel_index(int(np.argmax(cand)), cand.shape)
    g = float(cand[d, k])
    binding = ("ab"[d], int(k) + 1) if g > 0 else (None, None)
    return g, binding, tuple(flags), cand


# --------------------------------------------------------------------------
# Best single-fare revenue
# --------------------------------------------------------------------------


def gamma_quantile_rule(lam: float, n_nodes: int = 96, n_panels: int = 12):
    """Nodes and weights for ``E[h(eta)]``, ``eta ~ Gamma(lam, 1)``.

    Composite Gauss-Legendre in ``s = ln eta`` over the central
    ``[1e-10, 1 - 1e-12]`` probability range.  In log scale the gamma
    density is smooth and thin-tailed, and unlike Gauss-Laguerre the rule
    stays accurate when ``h`` saturates at small ``eta``.
    """
    lo = math.log(stats.gamma.ppf(1e-10, lam))
    hi = math.log(stats.gamma.isf(1e-12, lam))
    x, w = np.polynomial.legendre.leggauss(max(2, n_nodes // n_panels))
    e = np.linspace(lo, hi, n_panels + 1)
    a, b = e[:-1, None], e[1:, None]
    s = ((a + b) / 2 + (b - a) / 2 * x[None, :]).ravel()
    ws = ((b - a) / 2 * w[None, :]).ravel()
    dens = np.exp(lam * s - np.exp(s) - special.gammaln(lam))
    return np.exp(s), ws * dens


def _best_split(rev_a: np.ndarray, rev_b: np.ndarray, capacity: int):
    """Max over c of rev_a[..., c] + rev_b[..., C - c]; first maximizer wins."""
    total = rev_a + rev_b[..., ::-1]
    c = np.argmax(total, axis=-1)
    return np.take_along_axis(total, c[..., None], axis=-1)[..., 0], c


def grid_uniform_revenue(
    g: float,
    log_index: Sequence[float],
    prices,
    epsilon: float,
    lambdas: Sequence[float],
    capacity: int,
    regime: str = "incomplete",
    n_nodes: int = 96,
):
    """Expected revenue of the best single grid fare with an optimal split.

    ``regime='incomplete'`` is the weak-optimality benchmark: fare and split
    are chosen knowing only the cell, so each destination's demand is a
    gamma mixture.  ``regime='complete'`` lets the seller pick fare and
    split after seeing ``(eta_a, eta_b)``; the outer expectation uses a
    product of :func:`gamma_quantile_rule` with ``n_nodes`` per axis.

    Returns ``(revenue, k_star, (C_a, C_b))`` with ``k_star`` 1-based
    (``None`` in the complete regime, where it is state dependent).
    """
    prices = np.asarray(prices, dtype=float)
    capacity = int(capacity)
    if capacity <= 0 or g <= 0:
        return 0.0, None, (0, 0)
    base = np.array([math.exp(log_index[d]) * g for d in range(2)])
    q = base[:, None] * prices ** (-epsilon)  # (2, K)
    if regime == "incomplete":
        rev = [prices[d][:, None] * capped_profile(q[d], capacity, lambdas[d]) for d in range(2)]
        tot, c = _best_split(rev[0], rev[1], capacity)
        k = int(np.argmax(tot))
        ca = int(c[k])
        return float(tot[k]), k + 1, (ca, capacity - ca)
    if regime != "complete":
        raise ValueError(f"unknown regime {regime!r}")
    nodes, weights = [], []
    for d in range(2):
        x, w = gamma_quantile_rule(lambdas[d], n_nodes)
        nodes.append(x)
        weights.append(w)
    # per destination: (nodes, K, C+1)
    rev = [
        prices[d][None, :, None] * capped_profile(q[d][None, :] * nodes[d][:, None], capacity)
        for d in range(2)
    ]
    best = np.full((len(nodes[0]), len(nodes[1])), -np.inf)
    for k in range(prices.shape[1]):
        tot, _ = _best_split(rev[0][:, None, k, :], rev[1][None, :, k, :], capacity)
        best = np.maximum(best, tot)
    val = float(weights[0] @ best @ weights[1])
    return val, None, None


def upper_bound_g(
    mean_revenue: float,
    log_index: Sequence[float],
    prices,
    epsilon: float,
    lambdas: Sequence[float],
    capacity: int,
):
    """Invert the best single-fare revenue at the observed mean revenue.

    Returns ``(g_upper, k_star, split, flags)``.
    """
    if not mean_revenue > 0:
        return 0.0, None, None, ("nonpositive_revenue",)
    f = lambda g: grid_uniform_revenue(g, log_index, prices, epsilon, lambdas, capacity)[0]
    g = _solve_increasing(f, mean_revenue, *BRACKET)
    _, k, split = grid_uniform_revenue(g, log_index, prices, epsilon, lambdas, capacity)
    return g, k, split, ()


def cell_bounds(cell: CellData, epsilon: float, lambdas: Sequence[float]) -> CellBounds:
    gl, binding, fl, _ = lower_bound_g(
        cell.tail_means, cell.log_index, cell.prices, epsilon, lambdas, cell.capacity
    )
    gu, k, split, fu = upper_bound_g(
        cell.mean_revenue, cell.log_index, cell.prices, epsilon, lambdas, cell.capacity
    )
    flags = tuple(fl) + tuple(fu)
    if gu < gl:
        flags += ("upper_below_lower",)
    return CellBounds(cell.cell, gl, gu, binding, k, split, flags)


def compute_bounds(cells: Sequence[CellData], epsilon: float, lambdas: Sequence[float]) -> list[CellBounds]:
    return [cell_bounds(c, epsilon, lambdas) for c in cells]


def bounds_to_csv_rows(bounds: Sequence[CellBounds]) -> list[dict]:
    rows = []
    for b in bounds:
        rows.append(
            {
                "cell": b.cell,
                "g_lower": repr(float(b.g_lower)),
                "g_upper": repr(float(b.g_upper)),
                "binding": "" if b.binding[0] is None else f"{b.binding[0]}{b.binding[1]}",
                "k_star": "" if b.k_star is None else b.k_star,
                "flags": ";".join(b.flags),
            }
        )
    return rows
