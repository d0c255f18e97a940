"""Demand model: constant-elasticity Poisson purchases with a gamma demand shock.

A departure ``T`` sells seats to two destinations ``d in {a, b}``.  Purchases
for ``d`` at posted price ``p`` arrive as a Poisson process with intensity

    I_d(t, p) = xi_d * b(t) * eps * p^(-1-eps),

so that the number of buyers willing to pay ``p`` over ``[t1, t2]`` is
Poisson with mean ``xi_d p^-eps B(t1, t2)``.  The demand level factors as
``xi_d = [sum_{c in d} exp(X_c' beta)] * g0(W) * eta_d`` with
``eta_d ~ Gamma(lambda_d, 1)``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Hashable, Mapping, NamedTuple, Sequence

import numpy as np

DESTINATIONS = ("a", "b")


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator keyed by ``seed`` and integer keys.

    Streams for different keys (train id, replication index, ...) are
    statistically independent and do not depend on evaluation order.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


# --------------------------------------------------------------------------
# Structural parameters
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DemandPrimitives:
    """Structural parameters of the demand system."""

    epsilon: float
    beta: tuple = ()
    lambda_a: float = 1.0
    lambda_b: float = 1.0
    g0: Mapping[Hashable, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.epsilon > 1:
            raise ValueError(f"epsilon must exceed 1, got {self.epsilon}")
        if not (self.lambda_a > 0 and self.lambda_b > 0):
            raise ValueError("gamma shapes must be positive")
        for w, g in self.g0.items():
            if not g > 0:
                raise ValueError(f"g0[{w!r}] must be positive, got {g}")
        object.__setattr__(self, "beta", tuple(float(x) for x in self.beta))

    def lam(self, d: str) -> float:
        return self.lambda_a if d == "a" else self.lambda_b


class ArrivalShape:
    """Piecewise-constant arrival density on a uniform grid over [0, 1].

    Parameters
    ----------
    weights : sequence of non-negative floats
        Relative density on each cell.
    normalize : bool
        Rescale so that the density integrates to one.  With
        ``normalize=False`` the raw weights are kept and the shape reports
        ``is_normalized`` accordingly (samplers refuse such shapes).
    """

    def __init__(self, weights: Sequence[float], normalize: bool = True):
        w = np.asarray(weights, dtype=float)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("weights must be a non-empty vector")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and non-negative")
        if not np.any(w > 0):
            raise ValueError("shape has no mass")
        n = w.size
        if normalize:
            w = w * n / w.sum()
        self.density_values = w
        self.density_values.setflags(write=False)
        self.edges = np.linspace(0.0, 1.0, n + 1)
        cum = np.concatenate([[0.0], np.cumsum(w) / n])
        if normalize:
            cum[-1] = 1.0
        self._cum = cum

    @property
    def n_cells(self) -> int:
        return self.density_values.size

    @property
    def total_mass(self) -> float:
        return float(self._cum[-1])

    @property
    def is_normalized(self) -> bool:
        return abs(self.total_mass - 1.0) <= 1e-12

    @classmethod
    def uniform(cls, n_cells: int = 64) -> "ArrivalShape":
        return cls(np.ones(n_cells))

    @classmethod
    def from_function(cls, b: Callable[[np.ndarray], np.ndarray], n_cells: int = 64) -> "ArrivalShape":
        """Cell averages of ``b`` (8-point Gauss-Legendre per cell), renormalized."""
        x, w = np.polynomial.legendre.leggauss(8)
        edges = np.linspace(0.0, 1.0, n_cells + 1)
        mid = (edges[:-1] + edges[1:]) / 2
        half = (edges[1] - edges[0]) / 2
        t = mid[:, None] + half * x[None, :]
        avg = (np.asarray(b(t), dtype=float) * w).sum(axis=1) / 2
        return cls(avg)

    @classmethod
    def step(cls, breakpoint: float = 0.5, ratio: float = 4.0, n_cells: int = 64) -> "ArrivalShape":
        """Front-loaded step: density ``ratio`` times higher before ``breakpoint``."""
        return cls.from_function(lambda t: np.where(t < breakpoint, ratio, 1.0), n_cells)

    def density(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.clip((t * self.n_cells).astype(int), 0, self.n_cells - 1)
        return self.density_values[idx]

    def cumulative(self, t):
        """``B(0, t)``."""
        t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
        n = self.n_cells
        idx = np.clip((t * n).astype(int), 0, n - 1)
        return self._cum[idx] + (t - self.edges[idx]) * self.density_values[idx]

    def inverse_cumulative(self, m):
        """Earliest ``t`` with ``B(0, t) = m`` for ``m`` in [0, total mass]."""
        m = np.asarray(m, dtype=float)
        idx = np.searchsorted(self._cum, m, side="right") - 1
        idx = np.clip(idx, 0, self.n_cells - 1)
        # skip zero-density cells: they add no mass
        dens = self.density_values[idx]
        safe = np.where(dens > 0, dens, 1.0)
        t = self.edges[idx] + np.where(dens > 0, (m - self._cum[idx]) / safe, 0.0)
        return np.clip(t, 0.0, 1.0)


def cumulative_shape(shape: ArrivalShape, t1: float, t2: float) -> float:
    """Arrival mass ``B(t1, t2) = int_{t1}^{t2} b(u) du``."""
    if not 0.0 <= t1 <= t2 <= 1.0:
        raise ValueError(f"need 0 <= t1 <= t2 <= 1, got ({t1}, {t2})")
    return float(shape.cumulative(t2) - shape.cumulative(t1))


def intensity(t, p, xi, shape: ArrivalShape, epsilon: float):
    """Purchase rate ``xi b(t) eps p^(-1-eps)`` at time ``t`` and price ``p``."""
    p = np.asarray(p, dtype=float)
    if np.any(p <= 0):
        raise ValueError("price must be positive")
    if np.any(np.asarray(xi) <= 0):
        raise ValueError("xi must be positive")
    if not epsilon > 1:
        raise ValueError("epsilon must exceed 1")
    out = xi * shape.density(t) * epsilon * p ** (-1.0 - epsilon)
    return float(out) if np.ndim(out) == 0 else out


# --------------------------------------------------------------------------
# Departures and demand draws
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class City:
    name: str
    covariates: tuple  # X_c, aligned with DemandPrimitives.beta
    travel_time_hours: float = float("nan")


@dataclass(frozen=True)
class TrainInstance:
    """One departure with its two destination groups and fare grid."""

    train_id: int
    route: str
    W: Hashable
    cities: Mapping[str, tuple]  # d -> tuple of City
    capacity: int
    prices: Mapping[str, tuple]  # d -> K prices ascending in k
    shape: ArrivalShape = field(default_factory=ArrivalShape.uniform, compare=False)

    def __post_init__(self):
        if self.capacity < 0:
            raise ValueError("capacity must be non-negative")
        ks = {len(self.prices[d]) for d in DESTINATIONS}
        if len(ks) != 1 or ks == {0}:
            raise ValueError("both destinations need the same non-empty fare grid")
        for d in DESTINATIONS:
            p = np.asarray(self.prices[d], dtype=float)
            if np.any(p <= 0) or np.any(np.diff(p) < 0):
                raise ValueError(f"prices for {d} must be positive and non-decreasing")

    @property
    def n_classes(self) -> int:
        return len(self.prices["a"])

    def price_array(self) -> np.ndarray:
        """Shape (2, K): rows a and b."""
        return np.array([self.prices["a"], self.prices["b"]], dtype=float)

    def log_index(self, d: str, beta) -> float:
        """``ln sum_{c in d} exp(X_c' beta)``."""
        beta = np.asarray(beta, dtype=float)
        x = np.array([c.covariates for c in self.cities[d]], dtype=float)
        v = x @ beta
        top = v.max()
        return float(top + np.log(np.exp(v - top).sum()))


class DemandDraw(NamedTuple):
    xi_a: float
    xi_b: float

    def xi(self, d: str) -> float:
        return self.xi_a if d == "a" else self.xi_b


def draw_demand(train: TrainInstance, theta: DemandPrimitives, rng: np.random.Generator) -> DemandDraw:
    g = theta.g0[train.W]
    xs = []
    for d in DESTINATIONS:
        eta = rng.gamma(theta.lam(d), 1.0)
        xs.append(math.exp(train.log_index(d, theta.beta)) * g * eta)
    return DemandDraw(*xs)


# --------------------------------------------------------------------------
# Arrival simulation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PurchaseEvent:
    t: float
    dest: str
    price: float
    fare_class: int = -1
    train_id: int = -1


def sample_arrivals(
    draw: DemandDraw,
    shape: ArrivalShape,
    epsilon: float,
    price_path: Sequence[tuple],
    capacity: tuple[int, int],
    seed: int | np.random.Generator,
    train_id: int = -1,
) -> list[PurchaseEvent]:
    """Sales to both destinations under a piecewise-constant price path.

    ``price_path`` is a sequence of ``(t_start, p_a, p_b)`` or
    ``(t_start, p_a, p_b, fare_class)`` tuples sorted by ``t_start`` with
    the first at 0.  Within a piece where both price and arrival density
    are constant the purchase process is homogeneous, so we draw the count
    and place the arrivals uniformly; this is thinning with an envelope
    equal to the intensity.  Buyers arriving after a destination's
    allocation is exhausted are lost.
    """
    if not shape.is_normalized:
        raise ValueError("arrival shape must integrate to one")
    if not epsilon > 1:
        raise ValueError("epsilon must exceed 1")
    rng = seed if isinstance(seed, np.random.Generator) else rng_for(seed, max(train_id, 0))
    path = sorted(price_path, key=lambda r: r[0])
    if not path or path[0][0] != 0.0:
        raise ValueError("price path must start at t = 0")
    starts = [r[0] for r in path] + [1.0]
    grid = np.union1d(shape.edges, np.clip(starts, 0, 1))
    events: list[PurchaseEvent] = []
    for di, d in enumerate(DESTINATIONS):
        cap = int(capacity[di])
        if cap <= 0:
            continue
        xi = draw.xi(d)
        times, prices, classes = [], [], []
        for lo, hi in zip(grid[:-1], grid[1:]):
            if hi <= lo:
                continue
            piece = path[np.searchsorted(starts, lo, side="right") - 1]
            p = piece[1 + di]
            mass = float(shape.cumulative(hi) - shape.cumulative(lo))
            n = rng.poisson(xi * p ** (-epsilon) * mass)
            if n:
                times.append(np.sort(rng.uniform(lo, hi, n)))
                prices.append(np.full(n, p))
                classes.append(np.full(n, piece[3] if len(piece) > 3 else -1))
            if sum(len(x) for x in times) >= cap:
                break
        if times:
            t = np.concatenate(times)[:cap]
            pr = np.concatenate(prices)[:cap]
            kc = np.concatenate(classes)[:cap]
            events.extend(PurchaseEvent(float(a), d, float(b), int(c), train_id) for a, b, c in zip(t, pr, kc))
    events.sort(key=lambda e: e.t)
    return events


def events_to_csv(events: Sequence[PurchaseEvent]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["train_id", "t", "dest", "price", "fare_class"])
    for e in events:
        w.writerow([e.train_id, repr(e.t), e.dest, repr(e.price), e.fare_class])
    return buf.getvalue()


# --------------------------------------------------------------------------
# Mode-choice microfoundation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ModeChoiceParams:
    """Search-and-choose model yielding the constant-elasticity intensity.

    Travellers searching at ``t`` arrive at rate ``kappa_d * search_rate(t)``
    and compare the train with competing modes ``m = 2..M``.  Non-price
    costs are Pareto with shapes ``delta_own`` (train) and ``deltas``
    (competitors); ``relative_costs`` are the ratios of minimal costs
    ``a_m``; ``competitor_prices`` are functions of ``t`` and
    ``dest_price_scale[d]`` multiplies competitor prices for destination d.
    """

    alpha: float
    deltas: tuple
    relative_costs: tuple
    competitor_prices: tuple  # callables t -> price
    kappa: Mapping[str, float]
    search_rate: Callable = lambda t: np.ones_like(np.asarray(t, dtype=float))
    delta_own: float = 1.0
    dest_price_scale: Mapping[str, float] = field(default_factory=lambda: {"a": 1.0, "b": 1.0})

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if any(not d > 0 for d in self.deltas) or not self.delta_own > 0:
            raise ValueError("Pareto shapes must be positive")
        n = len(self.deltas)
        if len(self.relative_costs) != n or len(self.competitor_prices) != n:
            raise ValueError("one relative cost and price path per competing mode")


class Microfoundation(NamedTuple):
    xi: dict
    shape: ArrivalShape
    epsilon: float
    relative_costs: tuple


def microfoundation_intensity(
    params: ModeChoiceParams, n_cells: int = 64, min_own_price: float | None = None
) -> Microfoundation:
    """Map the mode-choice primitives to ``(xi_d, b, eps)``.

    The closed form requires ``a_m >= (p_m / p)^alpha`` for every own price
    ``p`` considered.  When ``min_own_price`` is given, relative costs are
    clamped up to the smallest value satisfying this on the whole horizon;
    the (possibly clamped) values are returned.
    """
    alpha = params.alpha
    deltas = np.asarray(params.deltas, dtype=float)
    eps = alpha * deltas.sum()
    if not eps > 1:
        raise ValueError(f"implied elasticity alpha*sum(delta) = {eps:.4g} must exceed 1")
    x, w = np.polynomial.legendre.leggauss(8)
    edges = np.linspace(0.0, 1.0, n_cells + 1)
    t = ((edges[:-1] + edges[1:]) / 2)[:, None] + (edges[1] - edges[0]) / 2 * x[None, :]

    a_m = np.asarray(params.relative_costs, dtype=float)
    if min_own_price is not None:
        top = np.array([np.max(np.asarray(f(t), dtype=float)) for f in params.competitor_prices])
        a_m = np.maximum(a_m, (top / min_own_price) ** alpha)

    comp = np.ones_like(t)
    for dm, f in zip(deltas, params.competitor_prices):
        comp = comp * np.asarray(f(t), dtype=float) ** (alpha * dm)
    raw = np.asarray(params.search_rate(t), dtype=float) * comp
    cell_avg = (raw * w).sum(axis=1) / 2
    total = cell_avg.mean()  # int_0^1 lambda_u prod p_um^(alpha delta_m) du
    shape = ArrivalShape(cell_avg)
    xi = {}
    for d in DESTINATIONS:
        xi[d] = float(
            params.delta_own
            * params.kappa[d]
            * params.dest_price_scale[d] ** eps
            * np.prod(a_m**deltas)
            / deltas.sum()
            * total
        )
    return Microfoundation(xi, shape, float(eps), tuple(a_m))


class CompensatingVariation(NamedTuple):
    delta: float
    compensation_needed: bool


def compensating_variation(r_observed: float, r_counterfactual: float) -> CompensatingVariation:
    """Uniform competitor-price cut offsetting a counterfactual revenue gain.

    With demand levels scaling as ``(1 - Delta)^eps`` and revenue as
    ``xi^(1/eps)``, the revenue loss equals ``Delta`` itself, so the
    compensating cut is ``1 - r_observed / r_counterfactual``.
    """
    if not (r_observed > 0 and r_counterfactual > 0):
        raise ValueError("revenues must be positive")
    if r_counterfactual < r_observed:
        return CompensatingVariation(0.0, False)
    return CompensatingVariation(1.0 - r_observed / r_counterfactual, True)
