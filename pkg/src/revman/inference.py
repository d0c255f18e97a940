"""Subsampling test that a counterfactual strategy beats observed revenue.

The parameter of interest is ``Delta_l``, the gap between the lower bound
of mean counterfactual revenue and mean observed revenue.  The lower bound
involves a maximum over moment inversions, so its sampling law is
approximated by recomputing the statistic on stratified subsamples of size
``b`` drawn without replacement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .bounds import (
    BRACKET,
    CellData,
    _solve_increasing,
    capped_profile,
    capped_q,
    expected_capped_demand_gamma,
    lower_bound_g,
)


@dataclass(frozen=True)
class TestResult:
    delta_l_hat: float
    statistic: float  # sqrt(N) * delta_l_hat
    critical_value: float
    p_value_upper: float
    reject: bool
    alpha: float
    b: int
    n_sub: int

    def as_dict(self) -> dict:
        return {
            "delta_l_hat": self.delta_l_hat,
            "statistic": self.statistic,
            "critical_value": self.critical_value,
            "p_value_upper": self.p_value_upper,
            "reject": self.reject,
            "alpha": self.alpha,
            "b": self.b,
            "n_sub": self.n_sub,
        }


__test__ = False  # keep pytest from collecting TestResult


def subsample_test(
    strata: Sequence,
    statistic: Callable[[np.ndarray], float],
    per_stratum: int = 50,
    n_sub: int = 1000,
    alpha: float = 0.05,
    seed: int = 0,
) -> TestResult:
    """Reject ``Delta_l <= 0`` when ``sqrt(N) Delta_l_hat`` exceeds the
    ``1 - alpha`` quantile of ``sqrt(b) (Delta_l^(s) - Delta_l_hat)``.

    ``statistic(idx)`` recomputes the estimate on the trains ``idx``.  Each
    subsample draws ``per_stratum`` trains without replacement from every
    stratum.  The p-value upper bound is the share of subsample draws at or
    above the full-sample statistic.
    """
    strata = np.asarray(strata)
    N = len(strata)
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    labels, inverse = np.unique(strata, return_inverse=True)
    members = [np.nonzero(inverse == i)[0] for i in range(len(labels))]
    for lab, m in zip(labels, members):
        if len(m) <= per_stratum:
            raise ValueError(f"stratum {lab!r} has {len(m)} trains, needs more than {per_stratum}")
    b = per_stratum * len(labels)
    full = float(statistic(np.arange(N)))
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(11,))))
    draws = np.empty(n_sub)
    for s in range(n_sub):
        idx = np.concatenate([rng.choice(m, per_stratum, replace=False) for m in members])
        draws[s] = math.sqrt(b) * (float(statistic(np.sort(idx))) - full)
    stat = math.sqrt(N) * full
    crit = float(np.quantile(draws, 1 - alpha, method="higher"))
    p = float(np.mean(draws >= stat))
    return TestResult(full, stat, crit, p, bool(stat > crit), alpha, b, n_sub)


# --------------------------------------------------------------------------
# Revenue-gap statistic with bounds recomputed on each subsample
# --------------------------------------------------------------------------


class InversionTables:
    """Tabulated moment inversions for every (cell, destination, class).

    The lower bound on ``g0`` in a cell is the largest ``g`` solving
    ``E[min(D(g q_dk), C)] = E[sum_{j>=k} n_dj | W]``.  Each map is
    tabulated on ``n_grid`` log-spaced points within ``span`` log units of
    its full-sample inversion, so a subsample only needs a batched linear
    interpolation.  Targets falling outside the table use the exact solver.
    """

    def __init__(self, cells: Sequence[CellData], epsilon, lambdas, n_grid: int = 240, span: float = 4.0):
        self.cells = list(cells)
        self.eps = float(epsilon)
        self.lambdas = tuple(float(l) for l in lambdas)
        K = self.cells[0].prices.shape[1] if self.cells else 0
        self.K = K
        n_rows = len(self.cells) * 2 * K
        self.V = np.full((n_rows, n_grid), np.nan)
        self.LG = np.full((n_rows, n_grid), np.nan)
        self.scale = np.zeros(n_rows)
        self.cap = np.zeros(n_rows)
        for c, cell in enumerate(self.cells):
            _, _, _, cand = lower_bound_g(
                cell.tail_means, cell.log_index, cell.prices, epsilon, lambdas, cell.capacity
            )
            for d in range(2):
                for k in range(K):
                    r = (c * 2 + d) * K + k
                    q = capped_q(cell.log_index[d], cell.prices[d, k], epsilon)
                    self.scale[r], self.cap[r] = q, cell.capacity
                    g = cand[d, k]
                    centre = math.log(g) if 0 < g < math.inf else math.log(max(cell.capacity, 1) / q)
                    lg = np.linspace(centre - span, centre + span, n_grid)
                    self.LG[r] = lg
                    self.V[r] = capped_profile(q * np.exp(lg), cell.capacity, self.lambdas[d])[:, cell.capacity]

    def _exact(self, r, target) -> float:
        c, rest = divmod(r, 2 * self.K)
        d = rest // self.K
        cap = int(self.cap[r])
        f = lambda g: expected_capped_demand_gamma(self.scale[r] * g, cap, self.lambdas[d])
        return _solve_increasing(f, target, *BRACKET)

    def g_lower(self, means) -> np.ndarray:
        """Lower bounds per cell from tail means of shape (n_cells, 2, K);
        NaN rows (cells absent from a subsample) give NaN."""
        t = np.asarray(means, dtype=float).reshape(-1)
        g = np.zeros_like(t)
        live = np.isfinite(t) & (t > 0)
        full = live & (t >= self.cap * (1 - 1e-12))
        g[full] = np.inf
        live &= ~full
        rows = np.nonzero(live)[0]
        V, LG, tt = self.V[rows], self.LG[rows], t[rows]
        j = (V < tt[:, None]).sum(axis=1)
        inside = (j > 0) & (j < V.shape[1])
        jj = np.clip(j, 1, V.shape[1] - 1)
        ar = np.arange(len(rows))
        v0, v1 = V[ar, jj - 1], V[ar, jj]
        w = np.where(v1 > v0, (tt - v0) / np.where(v1 > v0, v1 - v0, 1.0), 0.0)
        g[rows] = np.exp(LG[ar, jj - 1] + w * (LG[ar, jj] - LG[ar, jj - 1]))
        for r in rows[~inside]:
            g[r] = self._exact(int(r), float(t[r]))
        out = g.reshape(len(self.cells), 2 * self.K).max(axis=1)
        out[~np.isfinite(np.asarray(means, dtype=float).reshape(len(self.cells), -1)).all(axis=1)] = np.nan
        return out


class LowerGapStatistic:
    """``mean_T f_T g_L(W_T)^(1/eps) - mean_T R_T`` on any subset of trains.

    ``factor`` holds per-train revenue factors of an alpha-type strategy,
    ``cell_index`` the position of each train's cell in ``tables.cells``
    and ``tails`` the per-train tail sums of shape (N, 2, K).
    """

    def __init__(self, tables: InversionTables, factor, revenue, cell_index, tails):
        self.tables = tables
        self.factor = np.asarray(factor, dtype=float)
        self.revenue = np.asarray(revenue, dtype=float)
        self.cell_index = np.asarray(cell_index, dtype=np.intp)
        self.tails = np.asarray(tails, dtype=float)
        n_cells = len(tables.cells)
        self._onehot = np.zeros((len(self.cell_index), n_cells))
        self._onehot[np.arange(len(self.cell_index)), self.cell_index] = 1.0

    def __call__(self, idx) -> float:
        idx = np.asarray(idx)
        H = self._onehot[idx]
        n = H.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            means = np.einsum("tc,tdk->cdk", H, self.tails[idx]) / n[:, None, None]
        means[n == 0] = np.nan
        g = self.tables.g_lower(means)
        fsum = H.T @ self.factor[idx]
        used = n > 0
        with np.errstate(invalid="ignore"):
            total = float(np.sum(g[used] ** (1.0 / self.tables.eps) * fsum[used]))
        return total / len(idx) - float(self.revenue[idx].mean())


def panel_statistic_inputs(panel, cells: Sequence[CellData]):
    """Per-train cell positions and tail sums (N, 2, K) for a sales panel."""
    pos = {c.cell: i for i, c in enumerate(cells)}
    keys = panel.cell_keys()
    missing = sorted({k for k in keys if k not in pos})
    if missing:
        raise KeyError(f"no cell data for {missing[:3]}")
    tails = np.flip(np.cumsum(np.flip(panel.counts, axis=1), axis=1), axis=1).transpose(0, 2, 1)
    return np.array([pos[k] for k in keys], dtype=np.intp), tails
