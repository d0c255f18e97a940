"""Synthetic sales panels drawn from the structural demand model.

Six routes from Paris, each serving an intermediate destination group ``a``
and a final destination group ``b``, are sold through a common fare ladder.
The ladder closes class ``k`` once a fixed number of seats has been sold in
it (a stopping rule on total sales only), so the relative price of ``b``
over ``a`` moves at the same instant for both groups.

Because demand is a Poisson process whose intensity factors as
``xi_d b(t) eps p^(-1-eps)``, the ladder only interacts with the clock through
the cumulative shape mass.  The simulation therefore runs in mass units:
within class ``k`` purchases arrive at total rate
``Lambda_k = sum_d xi_d p_dk^-eps`` and each purchase goes to ``a`` with
probability ``xi_a p_ak^-eps / Lambda_k``.
"""

from __future__ import annotations

import datetime as _dt
import json
import math
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import special, stats

from .demand import City, DemandPrimitives, TrainInstance, rng_for

N_SLOTS = 4
SLOT_TIME_FACTOR = (0.95, 1.0, 1.07, 1.15)
PEAK_PRICE_FACTOR = 1.15
COVARIATE_NAMES = ("population_millions", "regional_capital_flag", "travel_time_hours", "travel_time_sq")
PANEL_COLUMNS = ["train_id", "route", "date", "peak_flag", "slot", "fare_class", "city", "dest_group", "price", "n_sold"]


@dataclass(frozen=True)
class CityDef:
    name: str
    population: float  # millions
    capital: int
    hours: float  # base travel time from Paris


@dataclass(frozen=True)
class RouteDef:
    name: str
    capacity: int
    n_trains: int
    a: tuple
    b: tuple
    min_fare: float  # lowest b fare, in units of 10 EUR
    max_fare: float  # highest b fare
    rel_spread: float  # p_b / p_a at the top class is 1 + rel_spread
    load: float  # target mean load of the ladder
    opened: str  # first departure date
    kappa: float = 1.0  # demand multiplier the firm assumes when choosing its opening fare
    decay: float = 0.5  # seats in class k+1 over seats in class k


_BORDEAUX = CityDef("Bordeaux", 0.24, 1, 3.1)
_AVIGNON = CityDef("Avignon", 0.09, 0, 2.65)

DEFAULT_ROUTES: tuple[RouteDef, ...] = (
    RouteDef(
        "Cote d'Azur", 324, 452,
        (_AVIGNON,),
        (CityDef("Cannes", 0.07, 0, 5.1), CityDef("Saint-Raphael", 0.035, 0, 4.8), CityDef("Nice", 0.34, 0, 5.6)),
        1.93, 6.84, 0.12, 0.92, "2008-01-04",
    ),
    RouteDef(
        "Marseille", 324, 453,
        (CityDef("Aix-en-Provence", 0.14, 0, 3.0), _AVIGNON),
        (CityDef("Marseille", 0.86, 1, 3.2),),
        1.90, 7.05, 0.0, 0.955, "2008-01-04",
    ),
    RouteDef(
        "Perpignan", 324, 689,
        (CityDef("Nimes", 0.15, 0, 2.9), CityDef("Montpellier", 0.26, 1, 3.3)),
        (CityDef("Perpignan", 0.12, 0, 4.9),),
        2.02, 7.26, 0.15, 0.92, "2007-05-04",
    ),
    RouteDef(
        "Cote basque", 350, 405,
        (_BORDEAUX,),
        (
            CityDef("Saint-Jean-de-Luz", 0.014, 0, 4.9),
            CityDef("Bayonne", 0.045, 0, 4.6),
            CityDef("Biarritz", 0.025, 0, 4.7),
            CityDef("Hendaye", 0.017, 0, 5.0),
        ),
        1.97, 5.33, 0.10, 0.92, "2007-05-04",
    ),
    RouteDef(
        "Toulouse", 350, 411,
        (_BORDEAUX,),
        (CityDef("Toulouse", 0.44, 1, 5.2),),
        1.94, 6.72, 0.18, 0.92, "2007-05-04",
    ),
    RouteDef(
        "Mulhouse", 238, 499,
        (CityDef("Strasbourg", 0.27, 1, 2.3),),
        (CityDef("Mulhouse", 0.11, 0, 3.0),),
        1.94, 5.00, 0.0, 0.92, "2007-05-04",
    ),
)

LAST_DATE = "2009-03-31"


@dataclass(frozen=True)
class SyntheticConfig:
    """Parameters of the data-generating process.

    The firm observes each train's demand level up to log-normal noise
    (``signal_noise``) and opens a geometric seat ladder accordingly;
    ``ladder`` weights, when given, impose one fixed ladder on every train; ``pricing='exogenous'`` instead gives each
    train one randomly drawn grid fare and unlimited seats, which removes the
    feedback from demand to prices.
    """

    epsilon: float = 4.04
    beta: tuple = (2.23, 0.20, -2.07, 0.34)
    lambda_a: float = 3.63
    lambda_b: float = 2.62
    n_classes: int = 12
    seed: int = 0
    routes: tuple = DEFAULT_ROUTES
    train_scale: float = 1.0
    pricing: str = "ladder"
    ladder: tuple | None = None
    epsilon_late: float | None = None
    split_class: int | None = None
    signal_noise: float = 0.25
    calibration_reps: int = 2000
    calibration_seed: int = 20240917

    def __post_init__(self):
        if not self.epsilon > 1:
            raise ValueError(f"epsilon must exceed 1, got {self.epsilon}")
        if self.epsilon_late is not None:
            if not self.epsilon_late > 1:
                raise ValueError("epsilon_late must exceed 1")
            if self.split_class is None or not 1 <= self.split_class < self.n_classes:
                raise ValueError("two elasticities need 1 <= split_class < n_classes")
        if not (self.lambda_a > 0 and self.lambda_b > 0):
            raise ValueError("gamma shapes must be positive")
        if len(self.beta) != len(COVARIATE_NAMES):
            raise ValueError(f"beta needs {len(COVARIATE_NAMES)} entries")
        if self.n_classes < 1:
            raise ValueError("need at least one fare class")
        if self.pricing not in ("ladder", "exogenous"):
            raise ValueError(f"unknown pricing rule {self.pricing!r}")
        if self.train_scale < 0:
            raise ValueError("train_scale must be non-negative")
        if self.ladder is not None and (len(self.ladder) != self.n_classes or min(self.ladder) < 0 or sum(self.ladder) <= 0):
            raise ValueError("ladder needs n_classes non-negative weights with a positive sum")
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))

    def class_epsilons(self) -> np.ndarray:
        e = np.full(self.n_classes, float(self.epsilon))
        if self.epsilon_late is not None:
            e[self.split_class:] = self.epsilon_late
        return e

    def primitives(self, g0: dict | None = None) -> DemandPrimitives:
        return DemandPrimitives(self.epsilon, self.beta, self.lambda_a, self.lambda_b, g0 or {})


# --------------------------------------------------------------------------
# Design: covariates, cells and fare grids
# --------------------------------------------------------------------------


def city_covariates(city: CityDef, slot: int) -> tuple:
    h = city.hours * SLOT_TIME_FACTOR[slot]
    return (city.population, float(city.capital), h, h * h)


def fare_grid(route: RouteDef, peak: bool, K: int) -> np.ndarray:
    """Shape (2, K) price grid, rows a and b, ascending in k."""
    u = np.linspace(0.0, 1.0, K) if K > 1 else np.zeros(1)
    pb = route.min_fare * (route.max_fare / route.min_fare) ** u
    pa = pb / (1.0 + route.rel_spread * u)
    grid = np.vstack([pa, pb]) * (PEAK_PRICE_FACTOR if peak else 1.0)
    return np.round(grid, 4)


def cells(routes: Sequence[RouteDef]) -> list[tuple]:
    return [(r.name, s, p) for r in routes for s in range(N_SLOTS) for p in (0, 1)]


def log_index(route: RouteDef, slot: int, beta) -> np.ndarray:
    """``ln sum_{c in d} exp(X_c' beta)`` for d = a, b."""
    beta = np.asarray(beta, dtype=float)
    out = []
    for grp in (route.a, route.b):
        v = np.array([city_covariates(c, slot) for c in grp]) @ beta
        out.append(float(special.logsumexp(v)))
    return np.array(out)


def city_shares(route: RouteDef, slot: int, beta) -> tuple[np.ndarray, np.ndarray]:
    beta = np.asarray(beta, dtype=float)
    res = []
    for grp in (route.a, route.b):
        v = np.array([city_covariates(c, slot) for c in grp]) @ beta
        res.append(special.softmax(v))
    return tuple(res)


def ladder_seats(capacity: int, weights: Sequence[float]) -> np.ndarray:
    """Largest-remainder split of ``capacity`` by ``weights``."""
    w = np.asarray(weights, dtype=float)
    raw = capacity * w / w.sum()
    seats = np.floor(raw).astype(int)
    short = capacity - seats.sum()
    order = np.argsort(-(raw - seats), kind="stable")
    seats[order[:short]] += 1
    return seats


def start_table(capacity: int, K: int, decay: float) -> np.ndarray:
    """Seats per class (rows: opening class) for a geometric ladder."""
    return np.array([ladder_seats(capacity, np.r_[np.zeros(k), decay ** np.arange(K - k)]) for k in range(K)])


def opening_class(signal, prices, eps_k, capacity: int, kappa: float) -> np.ndarray:
    """Grid fare maximizing expected single-fare revenue given the signal.

    Demand at class k is treated as Poisson with mean ``kappa`` times the
    signalled rate; ``E[min(X, C)] = L F(C-2) + C (1 - F(C-1))``.
    """
    rate = signal[:, None, :] * (prices.T[None] ** (-eps_k[None, :, None]))  # (N, K, 2)
    lam = kappa * rate.sum(axis=2)
    pbar = (rate * prices.T[None]).sum(axis=2) / rate.sum(axis=2)
    sold = lam * stats.poisson.cdf(capacity - 2, lam) + capacity * stats.poisson.sf(capacity - 1, lam)
    return np.argmax(pbar * sold, axis=1)


def firm_seats(xi, noise_draws, prices, eps_k, route: RouteDef, cfg: "SyntheticConfig") -> np.ndarray:
    """Per-train seat ladder, shape (N, K).

    The firm sees ``xi`` up to multiplicative log-normal noise, opens the
    ladder at :func:`opening_class` and shrinks class sizes geometrically.
    A fixed ``cfg.ladder`` replaces this with one ladder for every train.
    """
    K = prices.shape[1]
    if cfg.ladder is not None:
        return np.tile(ladder_seats(route.capacity, cfg.ladder), (xi.shape[0], 1))
    signal = xi * np.exp(cfg.signal_noise * noise_draws)[:, None]
    k0 = opening_class(signal, prices, eps_k, route.capacity, route.kappa)
    return start_table(route.capacity, K, route.decay)[k0]


# --------------------------------------------------------------------------
# Ladder simulation in shape-mass units
# --------------------------------------------------------------------------


def simulate_ladder(xi, prices, eps_k, seats, rng):
    """Class-by-class sales under per-train seat ladders.

    ``xi`` has shape (N, 2) and ``seats`` shape (N, K); returns counts of
    shape (N, K, 2).  Within a class the number of arrivals over the
    remaining mass is Poisson; if the class fills, the mass used is the
    m-th order statistic of the uniform arrival positions.
    """
    xi = np.asarray(xi, dtype=float)
    N, K = xi.shape[0], prices.shape[1]
    out = np.zeros((N, K, 2), dtype=np.int64)
    rem = np.ones(N)
    for k in range(K):
        m = seats[:, k]
        rate = xi * prices[:, k] ** (-eps_k[k])  # (N, 2)
        lam = rate.sum(axis=1)
        live = (rem > 0) & (m > 0)
        n = np.where(live, rng.poisson(np.where(live, lam * rem, 0.0)), 0)
        full = live & (n >= m)
        sold = np.minimum(n, m)
        used = rem * rng.beta(np.maximum(m, 1), np.maximum(n - m + 1, 1))
        rem = np.where(full, rem - used, np.where(live, 0.0, rem))
        na = rng.binomial(sold, rate[:, 0] / lam)
        out[:, k, 0] = na
        out[:, k, 1] = sold - na
    return out


def expected_ladder_load(xi, prices, eps_k, seats, gamma_draws) -> float:
    """Smooth load estimate with common random numbers.

    ``gamma_draws[:, k]`` are Gamma(seats[:, k], 1) variates; the fill time
    of class k is ``gamma_draws[:, k] / Lambda_k``.  The first class that
    does not fill contributes the conditional Poisson mean of its partial
    sales.
    """
    N, K = xi.shape[0], prices.shape[1]
    rem = np.ones(N)
    sold = np.zeros(N)
    for k in range(K):
        m = seats[:, k]
        lam = (xi * prices[:, k] ** (-eps_k[k])).sum(axis=1)
        t = gamma_draws[:, k] / lam
        live = (rem > 0) & (m > 0)
        full = live & (t <= rem)
        mu = lam * rem
        # E[N | N < m] for N ~ Poisson(mu)
        den = np.maximum(stats.poisson.cdf(m - 1, mu), 1e-300)
        part = np.where(m >= 2, mu * stats.poisson.cdf(m - 2, mu) / den, 0.0)
        sold += np.where(full, m, np.where(live, part, 0.0))
        rem = np.where(full, rem - t, np.where(live, 0.0, rem))
    return float(sold.mean() / max(int(seats[0].sum()), 1))


@lru_cache(maxsize=32)
def calibrate_g0(config: SyntheticConfig) -> dict:
    """Per-cell demand level hitting the route's target load.

    Common random numbers make the load a smooth increasing function of
    ``g`` (up to the discrete choice of opening class); bisection in ``ln g``.
    """
    cfg = config
    K = cfg.n_classes
    eps_k = cfg.class_epsilons()
    out = {}
    for ri, route in enumerate(cfg.routes):
        rng = rng_for(cfg.calibration_seed, ri)
        n = cfg.calibration_reps
        eta = np.column_stack([rng.gamma(cfg.lambda_a, size=n), rng.gamma(cfg.lambda_b, size=n)])
        z = rng.standard_normal(n)
        # gamma fill-time draws for every possible ladder, selected per train
        tabs = {tuple(r) for r in start_table(route.capacity, K, route.decay)}
        if cfg.ladder is not None:
            tabs = {tuple(ladder_seats(route.capacity, cfg.ladder))}
        draws = {t: rng.gamma(np.maximum(np.array(t), 1), size=(n, K)) for t in sorted(tabs)}
        for slot in range(N_SLOTS):
            li = log_index(route, slot, cfg.beta)
            for peak in (0, 1):
                prices = fare_grid(route, bool(peak), K)
                base = eta * np.exp(li)

                def f(lg):
                    xi = base * math.exp(lg)
                    seats = firm_seats(xi, z, prices, eps_k, route, cfg)
                    gd = np.empty(seats.shape)
                    for t, g in draws.items():
                        sel = (seats == np.array(t)).all(axis=1)
                        gd[sel] = g[sel]
                    return expected_ladder_load(xi, prices, eps_k, seats, gd) - route.load

                lo, hi = -10.0, 10.0
                while f(lo) > 0:
                    lo -= 10
                while f(hi) < 0:
                    hi += 10
                for _ in range(80):
                    mid = 0.5 * (lo + hi)
                    if f(mid) < 0:
                        lo = mid
                    else:
                        hi = mid
                    if hi - lo < 1e-6:
                        break
                out[(route.name, slot, peak)] = math.exp(0.5 * (lo + hi))
    return out


# --------------------------------------------------------------------------
# Panel generation
# --------------------------------------------------------------------------


@dataclass
class SyntheticWorld:
    panel: pd.DataFrame
    covariates: pd.DataFrame
    routes: pd.DataFrame
    truth: dict
    trains: list = field(default_factory=list)

    def write(self, out_dir) -> dict:
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "panel": out / "panel.csv",
            "covariates": out / "covariates.csv",
            "routes": out / "routes.csv",
            "truth": out / "truth.json",
        }
        self.panel.to_csv(paths["panel"], index=False, float_format="%.10g", lineterminator="\n")
        self.covariates.to_csv(paths["covariates"], index=False, float_format="%.10g", lineterminator="\n")
        self.routes.to_csv(paths["routes"], index=False, lineterminator="\n")
        paths["truth"].write_text(json.dumps(self.truth, sort_keys=True, indent=1) + "\n")
        return {k: str(v) for k, v in paths.items()}


def _dates(route: RouteDef, n: int, rng) -> list:
    start = _dt.date.fromisoformat(route.opened)
    end = _dt.date.fromisoformat(LAST_DATE)
    span = (end - start).days + 1
    offs = np.sort(rng.choice(span, size=n, replace=n > span))
    return [start + _dt.timedelta(days=int(o)) for o in offs]


def covariate_table(routes: Sequence[RouteDef]) -> pd.DataFrame:
    rows, seen = [], set()
    for r in routes:
        for c in r.a + r.b:
            for s in range(N_SLOTS):
                if (c.name, s) in seen:
                    continue
                seen.add((c.name, s))
                x = city_covariates(c, s)
                rows.append({"city": c.name, "slot": s, "population_millions": x[0], "regional_capital_flag": int(x[1]), "travel_time_hours": x[2]})
    return pd.DataFrame(rows, columns=["city", "slot", "population_millions", "regional_capital_flag", "travel_time_hours"])


def make_train(train_id, route: RouteDef, slot: int, peak: int, K: int, shape=None) -> TrainInstance:
    cities = {
        d: tuple(City(c.name, city_covariates(c, slot), c.hours * SLOT_TIME_FACTOR[slot]) for c in grp)
        for d, grp in (("a", route.a), ("b", route.b))
    }
    grid = fare_grid(route, bool(peak), K)
    kw = {} if shape is None else {"shape": shape}
    return TrainInstance(
        train_id, route.name, (route.name, slot, peak), cities, route.capacity,
        {"a": tuple(grid[0]), "b": tuple(grid[1])}, **kw,
    )


def generate(config: SyntheticConfig) -> SyntheticWorld:
    """Draw one synthetic world: panel, covariates, routes and ground truth."""
    cfg = config
    K = cfg.n_classes
    eps_k = cfg.class_epsilons()
    g0 = calibrate_g0(replace(cfg, seed=0)) if cfg.pricing == "ladder" else _exogenous_g0(cfg)
    design = rng_for(cfg.seed, 1)

    # design: dates, slots and peak flags per route
    plan = []
    tid = 0
    for ri, route in enumerate(cfg.routes):
        n = int(round(route.n_trains * cfg.train_scale))
        dates = _dates(route, n, design)
        slots = design.integers(0, N_SLOTS, size=n)
        for i in range(n):
            peak = int(dates[i].weekday() in (4, 6))
            plan.append((tid, ri, dates[i], int(slots[i]), peak))
            tid += 1

    n_tr = len(plan)
    xi = np.zeros((n_tr, 2))
    eta = np.zeros((n_tr, 2))
    counts = [None] * n_tr
    city_counts = [None] * n_tr
    by_cell: dict = {}
    for rec in plan:
        by_cell.setdefault((rec[1], rec[3], rec[4]), []).append(rec[0])
    for ci, ((ri, slot, peak), ids) in enumerate(sorted(by_cell.items())):
        route = cfg.routes[ri]
        rng = rng_for(cfg.seed, 2, ri, slot, peak)
        ids = np.asarray(ids)
        m = len(ids)
        e = np.column_stack([rng.gamma(cfg.lambda_a, size=m), rng.gamma(cfg.lambda_b, size=m)])
        li = log_index(route, slot, cfg.beta)
        g = g0[(route.name, slot, peak)]
        x = e * np.exp(li) * g
        prices = fare_grid(route, bool(peak), K)
        if cfg.pricing == "ladder":
            seats = firm_seats(x, rng.standard_normal(m), prices, eps_k, route, cfg)
            cnt = simulate_ladder(x, prices, eps_k, seats, rng)
        else:
            cnt = np.zeros((m, K, 2), dtype=np.int64)
            k_used = rng.integers(0, K, size=m)
            for j in range(m):
                k = k_used[j]
                cnt[j, k] = rng.poisson(x[j] * prices[:, k] ** (-eps_k[k]))
        sa, sb = city_shares(route, slot, cfg.beta)
        for j, t in enumerate(ids):
            xi[t], eta[t] = x[j], e[j]
            counts[t] = cnt[j]
            city_counts[t] = (
                np.array([rng.multinomial(n, sa) for n in cnt[j, :, 0]]),
                np.array([rng.multinomial(n, sb) for n in cnt[j, :, 1]]),
            )

    rows = []
    for tid, ri, date, slot, peak in plan:
        route = cfg.routes[ri]
        prices = fare_grid(route, bool(peak), K)
        ca, cb = city_counts[tid]
        for k in range(K):
            for d, grp, cc in ((0, route.a, ca), (1, route.b, cb)):
                for ci, c in enumerate(grp):
                    rows.append((tid, route.name, date.isoformat(), peak, slot, k + 1, c.name, "ab"[d], float(prices[d, k]), int(cc[k, ci])))
    panel = pd.DataFrame(rows, columns=PANEL_COLUMNS)
    routes_df = pd.DataFrame(
        [{"route": r.name, "capacity": r.capacity if cfg.pricing == "ladder" else 0} for r in cfg.routes]
    )
    truth = {
        "epsilon": cfg.epsilon,
        "epsilon_late": cfg.epsilon_late,
        "split_class": cfg.split_class,
        "beta": list(cfg.beta),
        "covariates": list(COVARIATE_NAMES),
        "lambda_a": cfg.lambda_a,
        "lambda_b": cfg.lambda_b,
        "seed": cfg.seed,
        "pricing": cfg.pricing,
        "g0": [{"route": k[0], "slot": k[1], "peak": k[2], "g0": v} for k, v in sorted(g0.items())],
        "trains": [
            {"train_id": p[0], "xi_a": float(xi[p[0], 0]), "xi_b": float(xi[p[0], 1]), "eta_a": float(eta[p[0], 0]), "eta_b": float(eta[p[0], 1])}
            for p in plan
        ],
    }
    trains = [make_train(p[0], cfg.routes[p[1]], p[3], p[4], K) for p in plan]
    return SyntheticWorld(panel, covariate_table(cfg.routes), routes_df, truth, trains)


def _exogenous_g0(cfg: SyntheticConfig) -> dict:
    # a level that gives a few hundred expected buyers at the median fare
    out = {}
    for route in cfg.routes:
        for slot in range(N_SLOTS):
            li = log_index(route, slot, cfg.beta)
            for peak in (0, 1):
                p = fare_grid(route, bool(peak), cfg.n_classes)
                mid = p[:, p.shape[1] // 2]
                scale = (np.exp(li) * mid ** (-cfg.epsilon)).sum() * (cfg.lambda_a + cfg.lambda_b) / 2
                out[(route.name, slot, peak)] = 200.0 / scale
    return out


def truth_g0(truth: dict) -> dict:
    return {(r["route"], int(r["slot"]), int(r["peak"])): float(r["g0"]) for r in truth["g0"]}


def config_dict(cfg: SyntheticConfig) -> dict:
    d = asdict(cfg)
    d.pop("routes")
    return d
