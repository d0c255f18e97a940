"""Three-stage estimation of the demand primitives and model checks.

Stage 1 fits a fixed-effect logit on the destination of each sale: conditional
on the total sales of a fare class, the number going to the final
destination is binomial with log-odds ``ln(xi_b/xi_a) - eps ln(p_b/p_a)``
(multinomial over cities when ``multi_city`` is set).  Stage 2 regresses the
fixed effects on the aggregated city covariates by nonlinear least squares.
Stage 3 fits the gamma shapes by maximum likelihood on the residual log
ratios, whose ratio ``eta_b/eta_a`` is beta-prime distributed.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
import statsmodels.api as sm
from scipy import optimize, special

from .bounds import CellData
from .demand import City, DemandPrimitives, TrainInstance

log = logging.getLogger(__name__)

GRAD_TOL = 1e-8
MAX_ITER = 200
COVARIATES = ("population_millions", "regional_capital_flag", "travel_time_hours", "travel_time_sq")


class IdentificationError(ValueError):
    """The data carry no information on a parameter."""


# --------------------------------------------------------------------------
# Panel
# --------------------------------------------------------------------------


class SalesPanel:
    """Per-train, per-class, per-city sales with prices and covariates.

    ``records`` follows the panel CSV schema (``slot`` optional);
    ``covariates`` has one row per city (and slot, when travel times depend
    on the departure slot); ``capacity`` maps route to seats.
    """

    def __init__(self, records: pd.DataFrame, covariates: pd.DataFrame | None = None, capacity: dict | None = None):
        rec = records.copy()
        need = {"train_id", "route", "fare_class", "dest_group", "price", "n_sold"}
        miss = need - set(rec.columns)
        if miss:
            raise ValueError(f"panel is missing columns: {sorted(miss)}")
        if "city" not in rec.columns:
            rec["city"] = rec["route"] + ":" + rec["dest_group"]
        for col, default in (("slot", 0), ("peak_flag", 0), ("date", "")):
            if col not in rec.columns:
                rec[col] = default
        n = rec["n_sold"].to_numpy()
        if len(n) and (np.any(n < 0) or np.any(n != np.round(n))):
            raise ValueError("n_sold must be non-negative integers")
        if len(rec) and np.any(rec["price"].to_numpy() <= 0):
            raise ValueError("prices must be positive")
        if not set(rec["dest_group"].unique()) <= {"a", "b"}:
            raise ValueError("dest_group must be 'a' or 'b'")
        rec["n_sold"] = rec["n_sold"].astype(np.int64)
        rec["fare_class"] = rec["fare_class"].astype(int)
        self.records = rec.sort_values(["train_id", "fare_class", "dest_group", "city"], kind="stable").reset_index(drop=True)
        self.covariates = covariates
        self.capacity = dict(capacity or {})
        self._build()

    # -- construction -----------------------------------------------------

    @classmethod
    def read(cls, directory) -> "SalesPanel":
        d = Path(directory)
        rec = pd.read_csv(d / "panel.csv", dtype={"date": str})
        cov = pd.read_csv(d / "covariates.csv") if (d / "covariates.csv").exists() else None
        cap = None
        if (d / "routes.csv").exists():
            r = pd.read_csv(d / "routes.csv")
            cap = dict(zip(r["route"], r["capacity"].astype(int)))
        return cls(rec, cov, cap)

    @classmethod
    def from_world(cls, world) -> "SalesPanel":
        return cls(world.panel, world.covariates, dict(zip(world.routes["route"], world.routes["capacity"])))

    def _build(self):
        rec = self.records
        self.train_ids = np.array(sorted(rec["train_id"].unique()), dtype=np.int64) if len(rec) else np.zeros(0, np.int64)
        self.K = int(rec["fare_class"].max()) if len(rec) else 0
        info = rec.groupby("train_id", sort=True)[["route", "date", "peak_flag", "slot"]].first()
        self.trains = info.reset_index()
        self.trains["capacity"] = self.trains["route"].map(self.capacity).fillna(0).astype(int) if self.capacity else 0
        N, K = len(self.train_ids), self.K
        pos = pd.Series(np.arange(N), index=self.train_ids)
        ti = pos.loc[rec["train_id"]].to_numpy() if N else np.zeros(0, int)
        ki = rec["fare_class"].to_numpy() - 1
        di = (rec["dest_group"] == "b").to_numpy().astype(int)
        counts = np.zeros((N, K, 2), dtype=np.int64)
        np.add.at(counts, (ti, ki, di), rec["n_sold"].to_numpy())
        prices = np.full((N, 2, K), np.nan)
        prices[ti, di, ki] = rec["price"].to_numpy()
        self.counts = counts
        self.prices = prices
        self._pos = pos

    # -- views ------------------------------------------------------------

    @property
    def n_trains(self) -> int:
        return len(self.train_ids)

    def subset(self, mask) -> "SalesPanel":
        keep = set(self.train_ids[np.asarray(mask)])
        return SalesPanel(self.records[self.records["train_id"].isin(keep)], self.covariates, self.capacity)

    def restrict_routes(self, routes: Sequence[str]) -> "SalesPanel":
        return SalesPanel(self.records[self.records["route"].isin(list(routes))], self.covariates, self.capacity)

    def city_blocks(self):
        """Group trains by their ordered city list.

        Yields ``(train_index, cities, groups, counts, prices)`` with counts
        and prices of shape (n, K, J); cities of group a come first.
        """
        rec = self.records
        per = rec.groupby("train_id", sort=True).apply(
            lambda g: tuple(dict.fromkeys(zip(g["dest_group"], g["city"]))), include_groups=False
        )
        for key, ids in per.groupby(per, sort=False).groups.items():
            cities = sorted(key, key=lambda dc: (dc[0], dc[1]))
            idx = self._pos.loc[np.asarray(ids)].to_numpy()
            sub = rec[rec["train_id"].isin(np.asarray(ids))]
            J = len(cities)
            cpos = {c: j for j, c in enumerate(cities)}
            t = pd.Series(np.arange(len(idx)), index=self.train_ids[idx]).loc[sub["train_id"]].to_numpy()
            k = sub["fare_class"].to_numpy() - 1
            j = np.array([cpos[(d, c)] for d, c in zip(sub["dest_group"], sub["city"])])
            cnt = np.zeros((len(idx), self.K, J), dtype=np.int64)
            np.add.at(cnt, (t, k, j), sub["n_sold"].to_numpy())
            pr = np.full((len(idx), self.K, J), np.nan)
            pr[t, k, j] = sub["price"].to_numpy()
            groups = np.array([1 if d == "b" else 0 for d, _ in cities])
            yield idx, [c for _, c in cities], groups, cnt, pr

    def covariate_matrix(self, city: str, slot: int) -> np.ndarray:
        if self.covariates is None:
            raise ValueError("panel has no city covariates")
        cov = self.covariates
        rows = cov[cov["city"] == city]
        if "slot" in cov.columns and len(rows) > 1:
            rows = rows[rows["slot"] == slot]
        if len(rows) == 0:
            raise KeyError(f"no covariates for city {city!r}")
        r = rows.iloc[0]
        h = float(r["travel_time_hours"])
        return np.array([float(r["population_millions"]), float(r["regional_capital_flag"]), h, h * h])

    def group_cities(self) -> dict:
        """``train_id -> (cities_a, cities_b)``."""
        if getattr(self, "_cities", None) is None:
            u = self.records[["train_id", "dest_group", "city"]].drop_duplicates()
            out = {int(t): ((), ()) for t in self.train_ids}
            for (tid, d), g in u.groupby(["train_id", "dest_group"], sort=True)["city"]:
                a, b = out[int(tid)]
                out[int(tid)] = (tuple(g), b) if d == "a" else (a, tuple(g))
            self._cities = out
        return self._cities

    def cell_keys(self) -> list:
        t = self.trains
        return [(r, int(s), int(p)) for r, s, p in zip(t["route"], t["slot"], t["peak_flag"])]

    def revenue(self) -> np.ndarray:
        return np.nansum(self.counts.transpose(0, 2, 1) * np.nan_to_num(self.prices), axis=(1, 2))

    def train_instances(self) -> list[TrainInstance]:
        """Departures rebuilt from the panel, covariates and capacities."""
        cities = self.group_cities()
        out = []
        for i, row in self.trains.iterrows():
            tid = int(row["train_id"])
            slot = int(row["slot"])
            grp = {
                d: tuple(City(c, tuple(self.covariate_matrix(c, slot)), float(self.covariate_matrix(c, slot)[2])) for c in cs)
                for d, cs in zip("ab", cities[tid])
            }
            p = self.prices[i]
            out.append(
                TrainInstance(
                    tid, row["route"], (row["route"], slot, int(row["peak_flag"])), grp, int(row["capacity"]),
                    {"a": tuple(p[0]), "b": tuple(p[1])},
                )
            )
        return out

    def cell_data(self, beta) -> list[CellData]:
        """Cell averages feeding the identified bounds on g0."""
        keys = self.cell_keys()
        trains = self.train_instances()
        rev = self.revenue()
        tails = np.flip(np.cumsum(np.flip(self.counts, axis=1), axis=1), axis=1)  # (N, K, 2)
        by: dict = {}
        for i, key in enumerate(keys):
            by.setdefault(key, []).append(i)
        out = []
        for key in sorted(by):
            idx = np.array(by[key])
            t0 = trains[idx[0]]
            prices = self.prices[idx[0]]
            if not np.allclose(self.prices[idx], prices[None], equal_nan=True):
                raise ValueError(f"prices differ within cell {key!r}")
            li = (t0.log_index("a", beta), t0.log_index("b", beta))
            out.append(
                CellData(
                    key, li, prices, int(t0.capacity), tails[idx].mean(axis=0).T, float(rev[idx].mean()), len(idx)
                )
            )
        return out

    def mean_a_sales(self) -> dict:
        a = self.counts[:, :, 0].sum(axis=1)
        return {r: float(a[(self.trains["route"] == r).to_numpy()].mean()) for r in self.trains["route"].unique()}


# --------------------------------------------------------------------------
# Stage 1: fixed-effect logit
# --------------------------------------------------------------------------


class _Block:
    """Trains sharing one set of alternatives.

    ``counts`` and ``logp`` have shape (n, K, J); alternative 0 is the
    reference whose fixed effect is pinned at zero.  ``design`` maps fare
    classes to elasticity indices (shape (K, E), zero/one entries).
    """

    def __init__(self, idx, counts, logp, design, groups):
        self.idx = idx
        self.counts = counts.astype(float)
        self.nk = self.counts.sum(axis=2)
        self.logp = np.nan_to_num(logp)
        self.design = design
        self.groups = groups
        n, K, J = counts.shape
        E = design.shape[1]
        self.J, self.E = J, E
        # features per (train, class, alternative): FE dummies then -D ln p
        z = np.zeros((n, K, J, J - 1 + E))
        for j in range(1, J):
            z[:, :, j, j - 1] = 1.0
        z[..., J - 1:] = -design[None, :, None, :] * self.logp[..., None]
        self.z = z
        self.F = z.shape[-1]
        self.zz = (z[..., :, None] * z[..., None, :]).reshape(n, K, J, -1)
        self.fe = np.zeros((n, J - 1))

    def evaluate(self, eps, fe):
        """Per-train log-likelihood, score and Hessian in (fe, eps)."""
        n, K, J = self.counts.shape
        u = -self.logp * (self.design @ np.atleast_1d(eps))[None, :, None]
        u[:, :, 1:] += fe[:, None, :]
        u -= u.max(axis=2, keepdims=True)
        ex = np.exp(u)
        tot = ex.sum(axis=2, keepdims=True)
        P = ex / tot
        ll = (self.counts * (u - np.log(tot))).sum(axis=(1, 2))
        resid = self.counts - self.nk[..., None] * P
        score = np.einsum("nkj,nkjf->nf", resid, self.z, optimize=True)
        Pz = np.einsum("nkj,nkjf->nkf", P, self.z, optimize=True)
        Pzz = np.einsum("nkj,nkjq->nkq", P, self.zz, optimize=True).reshape(n, K, self.F, self.F)
        H = -np.einsum("nk,nkfg->nfg", self.nk, Pzz - Pz[..., :, None] * Pz[..., None, :], optimize=True)
        return ll, score, H

    def solve_fe(self, eps, tol=1e-10, max_iter=100):
        """Per-train Newton on the fixed effects at given elasticities."""
        fe = self.fe
        J1 = self.J - 1
        for _ in range(max_iter):
            ll, s, H = self.evaluate(eps, fe)
            g = s[:, :J1]
            if np.max(np.abs(g), initial=0.0) < tol:
                break
            step = np.linalg.solve(-H[:, :J1, :J1], g[..., None])[..., 0]
            big = np.max(np.abs(step), axis=1, keepdims=True)
            fe = fe + step * np.minimum(1.0, 5.0 / np.maximum(big, 1e-300))
        self.fe = fe
        return self.evaluate(eps, fe)

    def profile(self, eps, weights=None):
        ll, s, H = self.solve_fe(eps)
        J1 = self.J - 1
        w = np.ones(len(ll)) if weights is None else weights[self.idx]
        Hff = H[:, :J1, :J1]
        Hfe = H[:, :J1, J1:]
        Hee = H[:, J1:, J1:]
        corr = np.einsum("nfe,nfg->neg", Hfe, np.linalg.solve(Hff, Hfe))
        Hp = Hee - corr
        return (w * ll).sum(), (w[:, None] * s[:, J1:]).sum(axis=0), (w[:, None, None] * Hp).sum(axis=0)

    def group_log_ratio(self):
        """``ln(xi_b / xi_a)`` aggregated over the cities of each group."""
        full = np.concatenate([np.zeros((self.fe.shape[0], 1)), self.fe], axis=1)
        b = special.logsumexp(np.where(self.groups[None] == 1, full, -np.inf), axis=1)
        a = special.logsumexp(np.where(self.groups[None] == 0, full, -np.inf), axis=1)
        return b - a


@dataclass
class LogitFit:
    """Stage-1 estimates.

    ``epsilon`` has one entry (two with a class split: early then late);
    ``fe`` holds ``ln(xi_b/xi_a)`` for ``train_ids`` (NaN for dropped trains).
    """

    epsilon: np.ndarray
    train_ids: np.ndarray
    fe: np.ndarray
    used: np.ndarray
    n_dropped: int
    converged: bool
    n_iter: int
    grad_norm: float
    loglik: float
    hessian: np.ndarray
    multi_city: bool = False
    split_class: int | None = None
    se: np.ndarray | None = None
    block_fe: list = field(default_factory=list, repr=False)  # alternative-level effects, for warm starts

    @property
    def eps(self) -> float:
        return float(self.epsilon[0])


def _class_design(K: int, split_class: int | None) -> np.ndarray:
    if split_class is None:
        return np.ones((K, 1))
    if not 1 <= split_class < K:
        raise ValueError(f"split class must satisfy 1 <= S < K = {K}")
    D = np.zeros((K, 2))
    D[:split_class, 0] = 1.0
    D[split_class:, 1] = 1.0
    return D


def _blocks(panel: SalesPanel, multi_city: bool, split_class: int | None):
    """Likelihood blocks (cached per panel); trains with one-sided sales are left out."""
    cache = panel.__dict__.setdefault("_block_cache", {})
    key = (bool(multi_city), split_class)
    if key not in cache:
        cache[key] = _build_blocks(panel, multi_city, split_class)
    blocks, used = cache[key]
    for b in blocks:
        b.fe = np.zeros_like(b.fe)
    return blocks, used


def _build_blocks(panel: SalesPanel, multi_city: bool, split_class: int | None):
    K = panel.K
    design = _class_design(K, split_class)
    used = np.zeros(panel.n_trains, dtype=bool)
    blocks = []
    if multi_city:
        for idx, cities, groups, cnt, pr in panel.city_blocks():
            tot = cnt.sum(axis=1)  # (n, J)
            ok = (tot > 0).all(axis=1)
            if ok.any():
                logp = np.log(pr[ok])
                blocks.append(_Block(idx[ok], cnt[ok], logp, design, groups))
                used[idx[ok]] = True
    else:
        cnt = panel.counts
        tot = cnt.sum(axis=1)
        ok = (tot > 0).all(axis=1)
        idx = np.nonzero(ok)[0]
        if len(idx):
            logp = np.log(panel.prices[idx].transpose(0, 2, 1))
            blocks.append(_Block(idx, cnt[idx], logp, design, np.array([0, 1])))
            used[idx] = True
    return blocks, used


def _check_variation(panel: SalesPanel):
    rel = np.log(panel.prices[:, 1, :] / panel.prices[:, 0, :])
    spread = np.nanmax(rel, axis=1) - np.nanmin(rel, axis=1) if panel.n_trains else np.zeros(0)
    if not np.any(spread > 1e-12):
        raise IdentificationError("relative prices p_b/p_a never vary across fare classes; elasticity not identified")


def fit_conditional_logit(
    panel: SalesPanel,
    multi_city: bool = False,
    split_class: int | None = None,
    eps0=2.0,
    weights=None,
    warm: LogitFit | None = None,
) -> LogitFit:
    """Fixed-effect logit with the fixed effects concentrated out.

    The outer Newton iteration on the elasticities uses the profile
    Hessian ``H_ee - H_ef H_ff^-1 H_fe``; each evaluation first solves the
    per-train fixed effects by Newton.  ``weights`` (per train, e.g.
    bootstrap counts) multiply each train's log-likelihood.
    """
    _check_variation(panel)
    blocks, used = _blocks(panel, multi_city, split_class)
    n_drop = int((~used).sum())
    if n_drop:
        warnings.warn(f"{n_drop} trains with sales to one side only carry no information and were dropped", stacklevel=2)
    if not blocks:
        raise IdentificationError("no train has sales on both sides")
    E = blocks[0].E
    if warm is not None:
        eps = np.array(warm.epsilon, dtype=float)
        for b, fe in zip(blocks, warm.block_fe):
            if fe.shape == b.fe.shape:
                b.fe = fe.copy()
    else:
        eps = np.full(E, float(np.atleast_1d(eps0)[0])) if np.ndim(eps0) == 0 else np.array(eps0, dtype=float)
    w = None if weights is None else np.asarray(weights, dtype=float)

    def total(e):
        ll, g, H = 0.0, np.zeros(E), np.zeros((E, E))
        for b in blocks:
            l_, g_, H_ = b.profile(e, w)
            ll += l_
            g += g_
            H += H_
        return ll, g, H

    ll, g, H = total(eps)
    it, converged = 0, False
    for it in range(1, MAX_ITER + 1):
        if np.max(np.abs(g)) < GRAD_TOL:
            converged = True
            break
        try:
            step = np.linalg.solve(-H, g)
        except np.linalg.LinAlgError:
            raise IdentificationError("profile Hessian is singular; elasticities not identified") from None
        if not np.all(np.isfinite(step)):
            raise IdentificationError("profile Hessian is singular; elasticities not identified")
        t = 1.0
        saved = [b.fe.copy() for b in blocks]
        while True:
            cand = eps + t * step
            ll_new, g_new, H_new = total(cand)
            if ll_new >= ll - 1e-9 * abs(ll) or t < 1e-6:
                break
            for b, fe in zip(blocks, saved):
                b.fe = fe.copy()
            t *= 0.5
        eps, ll, g, H = cand, ll_new, g_new, H_new
    else:
        converged = np.max(np.abs(g)) < GRAD_TOL
    if np.linalg.matrix_rank(H) < E:
        raise IdentificationError("profile Hessian is singular; elasticities not identified")

    fe = np.full(panel.n_trains, np.nan)
    for b in blocks:
        fe[b.idx] = b.group_log_ratio()
    fit = LogitFit(
        epsilon=eps, train_ids=panel.train_ids, fe=fe, used=used, n_dropped=n_drop, converged=bool(converged),
        n_iter=it, grad_norm=float(np.max(np.abs(g))), loglik=float(ll), hessian=H,
        multi_city=multi_city, split_class=split_class, block_fe=[b.fe.copy() for b in blocks],
    )
    return fit


def logit_loglik(panel: SalesPanel, epsilon, fe, multi_city: bool = False, split_class: int | None = None):
    """Joint log-likelihood and score in (fe, eps) for every used train.

    ``fe`` is a list with one (n, J-1) array per block (alternative-level
    effects).  Exposed for gradient checks.
    """
    blocks, _ = _blocks(panel, multi_city, split_class)
    eps = np.atleast_1d(np.asarray(epsilon, dtype=float))
    ll, sf, se = 0.0, [], np.zeros(len(eps))
    for b, f in zip(blocks, fe):
        l_, s_, _ = b.evaluate(eps, np.asarray(f, dtype=float))
        ll += l_.sum()
        sf.append(s_[:, : b.J - 1])
        se += s_[:, b.J - 1:].sum(axis=0)
    return float(ll), sf, se


def block_shapes(panel: SalesPanel, multi_city: bool = False) -> list[tuple]:
    blocks, _ = _blocks(panel, multi_city, None)
    return [b.fe.shape for b in blocks]


# --------------------------------------------------------------------------
# Stage 2: destination effects
# --------------------------------------------------------------------------


@dataclass
class DestinationFit:
    beta: np.ndarray
    intercept: float
    log_ratios: np.ndarray  # estimates of ln(eta_b/eta_a), intercept included
    residuals: np.ndarray  # centred at zero when an intercept is fitted
    r2: float
    train_ids: np.ndarray
    names: tuple = COVARIATES
    converged: bool = True


def _design(panel: SalesPanel, fit_ids) -> tuple[list, np.ndarray]:
    """Unique (X_a, X_b) city designs and each train's design index."""
    cache = panel.__dict__.setdefault("_design_cache", {})
    key = np.asarray(fit_ids).tobytes()
    if key not in cache:
        cache[key] = _build_design(panel, fit_ids)
    return cache[key]


def _build_design(panel: SalesPanel, fit_ids):
    cities = panel.group_cities()
    slot = dict(zip(panel.trains["train_id"], panel.trains["slot"]))
    keys, index, out = {}, [], []
    for tid in fit_ids:
        key = (cities[tid], int(slot[tid]))
        if key not in keys:
            keys[key] = len(out)
            out.append(
                tuple(np.array([panel.covariate_matrix(c, key[1]) for c in grp]) for grp in key[0])
            )
        index.append(keys[key])
    return out, np.array(index, dtype=int)


def _ratio_and_jac(designs, beta):
    """``ln[sum_b e^{X'beta} / sum_a e^{X'beta}]`` and its gradient per design."""
    Xa, ma, Xb, mb = _padded(designs)
    vals, jac = 0.0, 0.0
    for X, m, sign in ((Xb, mb, 1.0), (Xa, ma, -1.0)):
        v = np.where(m, X @ beta, -np.inf)
        top = v.max(axis=1, keepdims=True)
        e = np.exp(v - top)
        tot = e.sum(axis=1)
        vals = vals + sign * (top[:, 0] + np.log(tot))
        jac = jac + sign * np.einsum("dj,djp->dp", e / tot[:, None], X)
    return vals, jac


def _padded(designs):
    key = id(designs)
    hit = _PAD_CACHE.get(key)
    if hit is not None and hit[0] is designs:
        return hit[1]
    out = []
    for g in (0, 1):
        J = max(d[g].shape[0] for d in designs)
        p = designs[0][g].shape[1]
        X = np.zeros((len(designs), J, p))
        m = np.zeros((len(designs), J), dtype=bool)
        for i, d in enumerate(designs):
            X[i, : d[g].shape[0]] = d[g]
            m[i, : d[g].shape[0]] = True
        out += [X, m]
    _PAD_CACHE.clear()
    _PAD_CACHE[key] = (designs, tuple(out))
    return tuple(out)


_PAD_CACHE: dict = {}


def _collinear_columns(M: np.ndarray, names: Sequence[str]) -> list[str]:
    bad, kept = [], []
    for j in range(M.shape[1]):
        trial = kept + [j]
        if np.linalg.matrix_rank(M[:, trial], tol=1e-9 * max(1.0, np.abs(M).max())) < len(trial):
            bad.append(names[j])
        else:
            kept.append(j)
    return bad


def fit_destination_effects(
    fit: LogitFit,
    panel: SalesPanel,
    intercept: bool = True,
    beta0=None,
    weights=None,
) -> DestinationFit:
    """Nonlinear least squares of the train effects on aggregated covariates.

    Minimizes ``sum_T (FE_T - c - ln[sum_b exp(X'b) / sum_a exp(X'b)])^2``.
    The intercept ``c`` absorbs ``E ln(eta_b/eta_a)``; it is returned inside
    ``log_ratios`` so that stage 3 sees the full log ratio.
    """
    ok = np.isfinite(fit.fe)
    ids = fit.train_ids[ok]
    y = fit.fe[ok]
    designs, index = _design(panel, ids)
    p = designs[0][0].shape[1]
    names = COVARIATES[:p]
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=float)[ok]
    # rank check at beta = 0 (group means of covariates)
    _, J0 = _ratio_and_jac(designs, np.zeros(p))
    M = J0[index]
    if intercept:
        M = np.column_stack([np.ones(len(y)), M])
        cols = ("intercept",) + tuple(names)
    else:
        cols = tuple(names)
    bad = _collinear_columns(M[w > 0], cols)
    if bad:
        raise IdentificationError(f"destination covariates are collinear: {', '.join(bad)}")
    sw = np.sqrt(w)

    def resid(theta):
        c = theta[0] if intercept else 0.0
        b = theta[1:] if intercept else theta
        v, _ = _ratio_and_jac(designs, b)
        return sw * (y - c - v[index])

    def jac(theta):
        b = theta[1:] if intercept else theta
        _, J = _ratio_and_jac(designs, b)
        J = -J[index]
        if intercept:
            J = np.column_stack([-np.ones(len(y)), J])
        return sw[:, None] * J

    if beta0 is None:
        # a linear start from the covariate differences at beta = 0
        start, *_ = np.linalg.lstsq(sw[:, None] * M, sw * y, rcond=None)
    else:
        start = np.asarray(beta0, dtype=float)
    res = optimize.least_squares(resid, start, jac=jac, method="lm", xtol=1e-14, ftol=1e-14, gtol=1e-14, max_nfev=2000)
    theta = res.x
    c = float(theta[0]) if intercept else 0.0
    beta = theta[1:] if intercept else theta
    v, _ = _ratio_and_jac(designs, beta)
    lr = y - v[index]
    r = lr - c
    yc = y - np.average(y, weights=w)
    sst = float((w * yc**2).sum())
    r2 = 1.0 - float((w * r**2).sum()) / sst if sst > 0 else 1.0
    return DestinationFit(beta, c, lr, r, r2, ids, tuple(names), bool(res.success))


# --------------------------------------------------------------------------
# Stage 3: gamma shapes
# --------------------------------------------------------------------------


@dataclass
class GammaFit:
    lambda_a: float
    lambda_b: float
    loglik: float
    converged: bool
    n_obs: int
    message: str = ""


def beta_prime_loglik(r, lambda_a: float, lambda_b: float, weights=None) -> float:
    """Log-likelihood of ``r = ln(eta_b/eta_a)`` with ``eta_d ~ Gamma(lambda_d, 1)``."""
    r = np.asarray(r, dtype=float)
    w = np.ones_like(r) if weights is None else np.asarray(weights, dtype=float)
    ll = lambda_b * r - (lambda_a + lambda_b) * np.logaddexp(0.0, r) - special.betaln(lambda_b, lambda_a)
    return float((w * ll).sum())


def fit_gamma_ratio(log_ratios, weights=None, start=None, max_shape: float = 1e6) -> GammaFit:
    """Maximum likelihood for the two gamma shapes from log ratios.

    Newton on ``(ln lambda_a, ln lambda_b)`` with a backtracking line
    search.  A sample with no spread drives both shapes to infinity; the
    fit then stops at ``max_shape`` and reports non-convergence.
    """
    r = np.asarray(log_ratios, dtype=float)
    if not np.all(np.isfinite(r)):
        raise ValueError("log ratios must be finite")
    if r.size < 10:
        raise ValueError("need at least 10 log ratios")
    w = np.ones_like(r) if weights is None else np.asarray(weights, dtype=float)
    W = w.sum()
    sp = (w * np.logaddexp(0.0, r)).sum()
    sr = (w * r).sum()

    def f(x):
        la, lb = np.exp(x)
        ll = lb * sr - (la + lb) * sp - W * special.betaln(lb, la)
        ds = special.digamma(la + lb)
        ga = -sp - W * (special.digamma(la) - ds)
        gb = sr - sp - W * (special.digamma(lb) - ds)
        ts = special.polygamma(1, la + lb)
        haa = -W * (special.polygamma(1, la) - ts)
        hbb = -W * (special.polygamma(1, lb) - ts)
        hab = W * ts
        g = np.array([ga * la, gb * lb])
        H = np.array([[haa * la * la + ga * la, hab * la * lb], [hab * la * lb, hbb * lb * lb + gb * lb]])
        return ll, g, H

    if start is None:
        # moment start: var(r) = trigamma(la) + trigamma(lb)
        v = float(np.average((r - np.average(r, weights=w)) ** 2, weights=w))
        lam0 = 2.0 / max(v, 1e-8) if v > 0 else max_shape
        x = np.log([min(lam0, max_shape), min(lam0, max_shape)])
    else:
        x = np.log(np.asarray(start, dtype=float))
    ll, g, H = f(x)
    conv, msg = False, ""
    for _ in range(MAX_ITER):
        gn = np.max(np.abs(g)) / max(W, 1.0)
        if gn < GRAD_TOL:
            conv = True
            break
        try:
            step = np.linalg.solve(-H, g)
            if g @ step <= 0:
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            step = g / max(np.abs(g).max(), 1.0)
        t = 1.0
        while True:
            xn = np.minimum(x + t * step, math.log(max_shape) + 1.0)
            with np.errstate(over="ignore", invalid="ignore"):
                lln, gn_, Hn = f(xn)
            if np.isfinite(lln) and lln >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
            if t < 1e-10:
                break
        x, ll, g, H = xn, lln, gn_, Hn
        if np.exp(x).max() > max_shape:
            msg = "shape parameters diverge (no dispersion in the log ratios)"
            break
    la, lb = np.exp(x)
    if not conv and not msg:
        msg = "iteration limit reached"
    return GammaFit(float(la), float(lb), float(ll), bool(conv and not msg), int(r.size), msg)


# --------------------------------------------------------------------------
# Full pipeline and bootstrap
# --------------------------------------------------------------------------


@dataclass
class Estimates:
    logit: LogitFit
    destination: DestinationFit
    gamma: GammaFit
    se: dict = field(default_factory=dict)
    n_boot: int = 0

    def primitives(self, g0=None) -> DemandPrimitives:
        return DemandPrimitives(
            float(self.logit.epsilon[0]), tuple(self.destination.beta), self.gamma.lambda_a, self.gamma.lambda_b, g0 or {}
        )

    def params(self) -> dict:
        out = {}
        if len(self.logit.epsilon) == 1:
            out["epsilon"] = float(self.logit.epsilon[0])
        else:
            out["epsilon_early"], out["epsilon_late"] = (float(e) for e in self.logit.epsilon)
        for n, b in zip(self.destination.names, self.destination.beta):
            out[f"beta_{n}"] = float(b)
        out["intercept"] = self.destination.intercept
        out["lambda_a"] = self.gamma.lambda_a
        out["lambda_b"] = self.gamma.lambda_b
        return out


def _three_stage(panel, multi_city, split_class, intercept, weights=None, warm: Estimates | None = None):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        lf = fit_conditional_logit(
            panel, multi_city, split_class, weights=weights, warm=None if warm is None else warm.logit
        )
    df = fit_destination_effects(
        lf, panel, intercept, weights=weights,
        beta0=None if warm is None else (np.r_[warm.destination.intercept, warm.destination.beta] if intercept else warm.destination.beta),
    )
    ok = np.isfinite(lf.fe)
    w = None if weights is None else np.asarray(weights, dtype=float)[ok]
    gf = fit_gamma_ratio(
        df.log_ratios, weights=w, start=None if warm is None else (warm.gamma.lambda_a, warm.gamma.lambda_b)
    )
    return Estimates(lf, df, gf)


def estimate(
    panel: SalesPanel,
    multi_city: bool = False,
    split_class: int | None = None,
    intercept: bool = True,
    n_boot: int = 0,
    seed: int = 0,
) -> Estimates:
    """Run the three stages; with ``n_boot > 0`` add train-bootstrap SEs."""
    est = _three_stage(panel, multi_city, split_class, intercept)
    if n_boot:
        est.se = bootstrap(panel, est, n_boot, seed, multi_city, split_class, intercept)
        est.n_boot = n_boot
    return est


def bootstrap(panel, est: Estimates, n_boot: int, seed: int, multi_city=False, split_class=None, intercept=True) -> dict:
    """Standard errors from resampling trains with replacement.

    Each replicate reweights trains by their multinomial draw counts and
    warm-starts every stage at the full-sample estimates.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
    N = panel.n_trains
    draws = []
    for _ in range(n_boot):
        w = np.bincount(rng.integers(0, N, size=N), minlength=N).astype(float)
        try:
            draws.append(_three_stage(panel, multi_city, split_class, intercept, w, est).params())
        except (IdentificationError, np.linalg.LinAlgError, ValueError) as exc:
            log.warning("bootstrap replicate failed: %s", exc)
    if not draws:
        return {}
    df = pd.DataFrame(draws)
    return {k: float(df[k].std(ddof=1)) for k in df.columns}


# --------------------------------------------------------------------------
# Separability test
# --------------------------------------------------------------------------


@dataclass
class SeparabilityResult:
    classes: list
    coef: np.ndarray
    se: np.ndarray
    pvalues: np.ndarray
    joint_stat: float
    joint_pvalue: float
    df: tuple
    n_obs: int
    n_trains: int
    tested: list


def separability_test(panel: SalesPanel, classes: Sequence[int] | None = None) -> SeparabilityResult:
    """Within-train regression of the final-destination share on class dummies.

    The reference is the lowest class with sales.  Standard errors are
    clustered by train; the joint Wald test covers ``classes`` (1-based;
    default all non-reference classes).
    """
    rel = panel.prices[:, 1, :] / panel.prices[:, 0, :]
    if not np.allclose(rel[np.isfinite(rel)], 1.0):
        raise ValueError("separability test needs p_b = p_a in every class of every train")
    nk = panel.counts.sum(axis=2)
    tt, kk = np.nonzero(nk > 0)
    if len(np.unique(kk)) < 2:
        raise ValueError("need at least two fare classes with sales")
    share = panel.counts[tt, kk, 1] / nk[tt, kk]
    present = np.unique(kk)
    ref, others = present[0], present[1:]
    X = (kk[:, None] == others[None, :]).astype(float)
    frame = pd.DataFrame(X)
    frame["y"] = share
    frame["t"] = tt
    dm = frame.groupby("t").transform("mean")
    Xd = X - dm[list(range(len(others)))].to_numpy()
    yd = share - dm["y"].to_numpy()
    # drop trains with a single observation: they carry no within variation
    multi = frame.groupby("t")["y"].transform("size").to_numpy() > 1
    Xd, yd, groups = Xd[multi], yd[multi], tt[multi]
    keep = np.abs(Xd).sum(axis=0) > 0
    others, Xd = others[keep], Xd[:, keep]
    if Xd.shape[1] == 0:
        raise ValueError("need at least two fare classes with sales within a train")
    n_tr = len(np.unique(groups))
    model = sm.OLS(yd, Xd)
    res = model.fit(cov_type="cluster", cov_kwds={"groups": groups, "df_correction": True})
    coef = np.asarray(res.params)
    if np.allclose(yd, 0):
        coef = np.zeros_like(coef)
        se = np.zeros_like(coef)
        pv = np.ones_like(coef)
    else:
        se = np.asarray(res.bse)
        pv = np.asarray(res.pvalues)
    labels = [int(k) + 1 for k in others]
    tested = labels if classes is None else [c for c in classes if c in labels]
    if not tested:
        raise ValueError("none of the requested classes has sales")
    R = np.zeros((len(tested), len(labels)))
    for i, c in enumerate(tested):
        R[i, labels.index(c)] = 1.0
    if np.allclose(yd, 0):
        stat, p, dfs = 0.0, 1.0, (len(tested), n_tr - 1)
    else:
        wt = res.wald_test(R, use_f=True, scalar=True)
        stat, p = float(wt.statistic), float(wt.pvalue)
        dfs = (int(wt.df_num), int(wt.df_denom))
    return SeparabilityResult(labels, coef, se, pv, stat, p, dfs, int(len(yd)), n_tr, tested)


# --------------------------------------------------------------------------
# Aggregated regressions
# --------------------------------------------------------------------------

AGG_LEVELS = ("train-dest", "train", "week-route", "month-route", "week", "month")


@dataclass
class AggregateFit:
    level: str
    coef: float  # coefficient on log average price (true value: -epsilon)
    se: float
    n_obs: int


def _ols_coef(y, X, first=0, groups=None):
    model = sm.OLS(y, X)
    res = model.fit() if groups is None else model.fit(cov_type="cluster", cov_kwds={"groups": groups})
    return float(res.params[first]), float(res.bse[first])


def _dummies(values, drop_first=True):
    return pd.get_dummies(pd.Series(values).astype(str), drop_first=drop_first, dtype=float).to_numpy()


def aggregate_and_regress(panel: SalesPanel, level: str) -> AggregateFit:
    """Log-log regression of quantities on average paid prices.

    ``train-dest``: ``ln Q_dT`` on ``ln pbar_dT`` with train and route-by-
    destination effects.  ``train``: ``ln Q_T`` on ``ln pbar_T`` with
    departure-day and route effects.  Week and month levels aggregate over
    trains of a route (with route effects) or over all routes.
    """
    if level not in AGG_LEVELS:
        raise ValueError(f"unknown level {level!r}; choose from {AGG_LEVELS}")
    cnt = panel.counts  # (N, K, 2)
    pr = np.nan_to_num(panel.prices.transpose(0, 2, 1))  # (N, K, 2)
    q_d = cnt.sum(axis=1).astype(float)  # (N, 2)
    r_d = (cnt * pr).sum(axis=1)
    tr = panel.trains
    if level == "train-dest":
        rows = pd.DataFrame(
            {
                "t": np.repeat(np.arange(panel.n_trains), 2),
                "d": np.tile(["a", "b"], panel.n_trains),
                "route": np.repeat(tr["route"].to_numpy(), 2),
                "q": q_d.ravel(),
                "r": r_d.ravel(),
            }
        )
        rows = rows[rows["q"] > 0].copy()
        rows["lq"] = np.log(rows["q"])
        rows["lp"] = np.log(rows["r"] / rows["q"])
        rows = rows[rows.groupby("t")["q"].transform("size") == 2]
        if rows.empty:
            raise IdentificationError("no train with sales to both destinations")
        dest = _dummies(rows["route"] + ":" + rows["d"])
        frame = pd.DataFrame(np.column_stack([rows["lq"], rows["lp"], dest]))
        dm = frame.groupby(rows["t"].to_numpy()).transform("mean").to_numpy()
        Z = frame.to_numpy() - dm
        y, X = Z[:, 0], Z[:, 1:]
        keep = np.abs(X).sum(axis=0) > 1e-12
        keep[0] = True
        if np.ptp(X[:, 0]) < 1e-12:
            raise IdentificationError("no price variation at this level")
        c, s = _ols_coef(y, X[:, keep], 0, groups=rows["t"].to_numpy())
        return AggregateFit(level, c, s, len(rows))

    q = q_d.sum(axis=1)
    r = r_d.sum(axis=1)
    base = pd.DataFrame({"route": tr["route"].to_numpy(), "date": pd.to_datetime(tr["date"], errors="coerce"), "q": q, "r": r})
    if level == "train":
        base = base[base["q"] > 0]
        y = np.log(base["q"].to_numpy())
        lp = np.log((base["r"] / base["q"]).to_numpy())
        X = np.column_stack([lp, np.ones(len(base)), _dummies(base["route"]), _dummies(base["date"].dt.strftime("%Y-%m-%d"))])
        n = len(base)
    else:
        if base["date"].isna().any():
            raise ValueError("week and month levels need departure dates")
        per = base["date"].dt.to_period("W" if level.startswith("week") else "M").astype(str)
        keys = [per] if level in ("week", "month") else [per, base["route"]]
        agg = base.groupby(keys)[["q", "r"]].sum().reset_index()
        agg = agg[agg["q"] > 0]
        y = np.log(agg["q"].to_numpy())
        lp = np.log((agg["r"] / agg["q"]).to_numpy())
        cols = [lp, np.ones(len(agg))]
        if "route" in agg.columns:
            cols.append(_dummies(agg["route"]))
        X = np.column_stack(cols)
        n = len(agg)
    if n < 3 or np.ptp(X[:, 0]) < 1e-12:
        raise IdentificationError("no price variation at this level")
    c, s = _ols_coef(y, X, 0)
    return AggregateFit(level, c, s, n)
