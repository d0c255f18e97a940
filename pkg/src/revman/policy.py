"""Executable pricing policies and their Monte Carlo evaluation.

Policies are driven by the coefficient tables of :mod:`revman.alpha`.  For
one destination with ``k`` seats left and remaining arrival mass ``R``:

* complete information, demand level ``xi`` known: the normalized state is
  ``q = xi R p^-eps``;
* incomplete information, belief ``Gamma(lam, rate mu)`` on ``xi``: the
  normalized state is ``q = R p^-eps / mu``.

The simulator runs many replications at once in real time.  The clock is
the time to departure ``u = 1 - t`` so that the last instants before
departure, where full-dynamic prices collapse, keep full floating-point
resolution.  Purchases are generated by thinning against the intensity at
the end of each piece of the horizon.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .alpha import (
    DEFAULT_TABLE,
    AlphaTable,
    FullDynamic,
    IntermediateK,
    Regime,
    StoppingTime,
    StoppingTimeM,
    Uniform,
    _Rows,
    dynamic_seats,
)
from .demand import ArrivalShape, rng_for

# Full-dynamic prices fall to zero at departure; simulation stops once the
# remaining arrival mass is below this (the revenue left is of order
# R_MIN^(1/eps) times a price).
R_MIN = 1e-13


# --------------------------------------------------------------------------
# Beliefs
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GammaBelief:
    """Gamma posterior on the demand level: shape ``lam``, rate ``mu``."""

    lam: float
    mu: float

    def __post_init__(self):
        if not (self.lam > 0 and self.mu > 0):
            raise ValueError("belief parameters must be positive")

    @property
    def mean(self) -> float:
        return self.lam / self.mu

    @property
    def var(self) -> float:
        return self.lam / self.mu**2


def posterior_update(belief: GammaBelief, exposure: float, sale: bool) -> GammaBelief:
    """Conjugate update after exposure ``u = sum p^-eps dB`` ending in a sale or not."""
    if exposure < 0:
        raise ValueError("exposure must be non-negative")
    return GammaBelief(belief.lam + (1 if sale else 0), belief.mu + exposure)


@dataclass(frozen=True)
class PolicyState:
    seats: int
    fares_left: int | None = None
    belief: GammaBelief | None = None
    elapsed_mass: float = 0.0  # B(0, t)
    price: float | None = None
    xi: float | None = None  # known demand level under complete information


def markup_price(epsilon: float, value_gap: float) -> float:
    """``eps/(eps-1) * (V_k - V_{k-1})``."""
    if not epsilon > 1:
        raise ValueError("epsilon must exceed 1")
    if not value_gap > 0:
        raise ValueError("value difference must be positive")
    return epsilon / (epsilon - 1.0) * value_gap


# --------------------------------------------------------------------------
# Vectorized policies
# --------------------------------------------------------------------------


class _Policy:
    """State arrays for a batch of replications.

    ``pe`` holds the current ``p^-eps``; ``k`` the seats left.  Incomplete
    policies also carry the belief ``(lam, mu)`` and ``R_last``, the
    remaining mass at the last belief update.
    """

    continuous = False

    def __init__(self, regime, C, eps, lam, table: AlphaTable):
        self.regime = Regime(regime)
        self.C = int(C)
        self.eps = float(eps)
        self.lam0 = lam
        self.table = table
        self.incomplete = self.regime is Regime.INCOMPLETE

    def start(self, xi, mu0):
        n = xi.size
        self.xi = xi
        self.k = np.full(n, self.C, dtype=int)
        self.mu = np.full(n, float(mu0)) if self.incomplete else None
        self.R_last = np.ones(n)
        self.pe = np.zeros(n)
        self.revenue = np.zeros(n)
        self._open(np.arange(n), np.ones(n))

    # subclass hooks ------------------------------------------------------
    def _open(self, idx, R):
        """Set prices for reps ``idx`` after a sale (or at the start)."""
        raise NotImplementedError

    def pe_at(self, idx, R):
        return self.pe[idx]

    # helpers --------------------------------------------------------------
    def _set_state(self, idx, q, R):
        """Post the price that puts reps ``idx`` at normalized state ``q``."""
        if self.incomplete:
            self.pe[idx] = q * self.mu[idx] / R
        else:
            self.pe[idx] = q / (self.xi[idx] * R)

    def state_q(self, idx, R):
        if self.incomplete:
            return R * self.pe[idx] / self.mu[idx]
        return self.xi[idx] * R * self.pe[idx]

    def sell(self, idx, R):
        pe = self.pe_at(idx, R)
        price = pe ** (-1.0 / self.eps)
        self.revenue[idx] += price
        self._book(idx, R)
        self.k[idx] -= 1
        live = idx[self.k[idx] > 0]
        if live.size:
            self._open(live, R[self.k[idx] > 0])

    def _book(self, idx, R):
        if self.incomplete:
            self.mu[idx] += self.pe[idx] * (self.R_last[idx] - R)
            self.R_last[idx] = R


class _UniformPolicy(_Policy):
    def __init__(self, regime, C, eps, lam, table):
        super().__init__(regime, C, eps, lam, table)
        self.q = table.uniform_plan(regime, C, eps, lam) if C > 0 else np.nan

    def _open(self, idx, R):
        first = self.k[idx] == self.C
        if np.any(first):
            self._set_state(idx[first], self.q, R[first])


class _StoppingTimePolicy(_Policy):
    def __init__(self, regime, C, eps, lam, table):
        super().__init__(regime, C, eps, lam, table)
        self.qk = table.stopping_time_plan(regime, C, eps, lam)

    def _open(self, idx, R):
        self._set_state(idx, self.qk[self.k[idx]], R)


class _IntermediatePolicy(_Policy):
    """Stopping-time pricing while more than ``n_u`` seats remain, then one price."""

    def __init__(self, regime, C, eps, lam, table, pct):
        super().__init__(regime, C, eps, lam, table)
        self.n_u = C - dynamic_seats(C, pct)
        qu, qs = table.intermediate_plan(regime, C, eps, lam, pct)
        self.qk = np.full(C + 1, np.nan)
        for i, q in enumerate(qs):
            self.qk[self.n_u + 1 + i] = q
        self.qu = qu

    def _open(self, idx, R):
        k = self.k[idx]
        dyn = k > self.n_u
        if np.any(dyn):
            self._set_state(idx[dyn], self.qk[k[dyn]], R[dyn])
        switch = k == self.n_u
        if np.any(switch):
            self._set_state(idx[switch], self.qu, R[switch])


class _FullDynamicPolicy(_Policy):
    """Continuously updated markup prices.

    Complete information: ``p = eps/(eps-1) (alpha_k - alpha_{k-1}) (xi R)^(1/eps)``,
    so ``p^-eps = c_k / (xi R)``.  Incomplete information:
    ``p = eps/(eps-1) delta_k (R/mu)^(1/eps)`` while the rate ``mu`` grows
    with the exposure, giving ``mu(R) = mu_s (R_s/R)^c_k`` and
    ``p^-eps = c_k mu(R) / R`` between sales.
    """

    continuous = True

    def __init__(self, regime, C, eps, lam, table):
        super().__init__(regime, C, eps, lam, table)
        al = table.full_dynamic_plan(regime, C, eps, lam)
        ck = np.full(C + 1, np.nan)
        for k in range(1, C + 1):
            if self.incomplete:
                lk = lam + C - k
                gap = (1.0 + 1.0 / (lk * eps)) * al[k] - al[k - 1]
            else:
                gap = al[k] - al[k - 1]
            ck[k] = (eps / (eps - 1.0) * gap) ** (-eps)
        self.ck = ck

    def start(self, xi, mu0):
        n = xi.size
        self.mu_s = np.full(n, float(mu0))
        self.R_s = np.ones(n)
        super().start(xi, mu0)

    def _open(self, idx, R):
        if self.incomplete:
            self.R_s[idx] = R

    def pe_at(self, idx, R):
        c = self.ck[self.k[idx]]
        if self.incomplete:
            mu = self.mu_s[idx] * (self.R_s[idx] / R) ** c
            return c * mu / R
        return c / (self.xi[idx] * R)

    def _book(self, idx, R):
        if self.incomplete:
            c = self.ck[self.k[idx]]
            self.mu_s[idx] = self.mu_s[idx] * (self.R_s[idx] / R) ** c


class _MFarePolicy(_Policy):
    """Stopping-time pricing with a budget of price changes.

    After each sale the seller compares keeping the current price (value
    ``Phi`` of the keep row at the current state) with spending one change
    to jump to the best state.  With increasing fares only moves to a
    smaller state (a higher price) are allowed.
    """

    def __init__(self, regime, C, eps, lam, table, M, plus):
        super().__init__(regime, C, eps, lam, table)
        self.M = int(M)
        self.plus = bool(plus)
        self.tab = table.mfare_tables(regime, C, eps, lam, M, plus) if C > 0 else None
        self._interp = {}

    def _phi(self, k):
        if k not in self._interp:
            self._interp[k] = _Rows(self.tab.s.x, self.tab.phi[k], kind="spline")
        return self._interp[k]

    def start(self, xi, mu0):
        n = xi.size
        self.m = np.zeros(n, dtype=int)
        super().start(xi, mu0)

    def _open(self, idx, R):
        first = self.k[idx] == self.C
        if np.any(first):
            _, q0, m0 = self.tab.root(self.C)
            self.m[idx[first]] = m0
            self._set_state(idx[first], q0, R[first])
        idx, R = idx[~first], R[~first]
        if idx.size == 0:
            return
        for k in np.unique(self.k[idx]):
            sel = self.k[idx] == k
            j, Rj = idx[sel], R[sel]
            m = self.m[j]
            can = m >= 1
            if not np.any(can):
                continue
            j, Rj, m = j[can], Rj[can], m[can]
            m = np.minimum(m, k)  # more changes than seats are never used
            q = self.state_q(j, Rj)
            keep = self._phi(k).at(np.minimum(m, k - 1), np.log(q))
            best = self.tab.phi_max[k][m - 1]
            target = self.tab.phi_arg[k][m - 1]
            move = best > keep
            if self.plus:
                move &= q > target
            if np.any(move):
                jm = j[move]
                self.m[jm] -= 1
                self._set_state(jm, target[move], Rj[move])


def make_policy(strategy, regime, C, epsilon, lam=None, table: AlphaTable | None = None) -> _Policy:
    table = table or DEFAULT_TABLE
    regime = Regime(regime)
    if regime is Regime.INCOMPLETE and lam is None:
        raise ValueError("incomplete information needs a prior shape")
    args = (regime, int(C), float(epsilon), lam, table)
    if isinstance(strategy, Uniform):
        if strategy.grid:
            raise ValueError("the grid-constrained uniform strategy is not simulated")
        return _UniformPolicy(*args)
    if isinstance(strategy, StoppingTime):
        return _StoppingTimePolicy(*args)
    if isinstance(strategy, FullDynamic):
        return _FullDynamicPolicy(*args)
    if isinstance(strategy, StoppingTimeM):
        return _MFarePolicy(*args, strategy.M, strategy.increasing)
    if isinstance(strategy, IntermediateK):
        return _IntermediatePolicy(*args, strategy.pct)
    raise TypeError(f"unknown strategy {strategy!r}")


def optimal_price(
    strategy,
    regime,
    state: PolicyState,
    epsilon: float,
    capacity: int,
    lam0: float | None = None,
    table: AlphaTable | None = None,
) -> float:
    """Price posted in ``state`` at a decision point.

    ``capacity`` and ``lam0`` are the initial seats and prior shape; under
    incomplete information the belief must satisfy
    ``lam = lam0 + capacity - seats``.  ``state.price`` is the price in
    force (None before the first posting); stopping-time policies reset it
    at sales, fare-constrained ones decide whether to spend a change.
    """
    if state.seats <= 0:
        raise ValueError("no inventory left to price")
    regime = Regime(regime)
    R = 1.0 - state.elapsed_mass
    if not R > 0:
        raise ValueError("no arrival mass left")
    pol = make_policy(strategy, regime, capacity, epsilon, lam0, table)
    if regime is Regime.INCOMPLETE:
        if state.belief is None:
            raise ValueError("incomplete information needs a belief")
        if abs(state.belief.lam - (lam0 + capacity - state.seats)) > 1e-9:
            raise ValueError("belief shape is inconsistent with the number of sales")
        mu, xi = state.belief.mu, 1.0
    else:
        if state.xi is None:
            raise ValueError("complete information needs the demand level xi")
        mu, xi = 1.0, float(state.xi)
    if state.price is None and state.seats != capacity:
        raise ValueError("a price must be in force after the first sale")
    pol.start(np.array([xi]), mu)
    idx, Ra = np.array([0]), np.array([R])
    pol.k[:] = state.seats
    if pol.incomplete:
        pol.mu[:] = mu
        pol.R_last[:] = R
    if isinstance(pol, _FullDynamicPolicy):
        pol.mu_s[:] = mu
        pol.R_s[:] = R
    elif state.price is not None:
        pol.pe[:] = float(state.price) ** (-epsilon)
        if isinstance(pol, _MFarePolicy):
            pol.m[:] = int(state.fares_left or 0)
        if not isinstance(pol, _UniformPolicy):
            pol._open(idx, Ra)
    elif R != 1.0:
        pol._open(idx, Ra)  # first posting later in the horizon
    p = float(pol.pe_at(idx, Ra)[0] ** (-1.0 / epsilon))
    if isinstance(strategy, StoppingTimeM) and strategy.increasing and state.price is not None:
        p = max(p, float(state.price))
    return p


# --------------------------------------------------------------------------
# Simulation
# --------------------------------------------------------------------------


class MCResult(NamedTuple):
    mean_revenue: float
    se_revenue: float
    mean_load: float
    se_load: float
    n_reps: int


def _pieces(shape: ArrivalShape, refine: bool):
    """Pieces ``(u_lo, u_hi, b, R_lo)`` of the time-to-go axis, earliest first.

    ``R_lo`` is the remaining mass at ``u_lo``.  With ``refine`` every piece
    is split so that the remaining mass at most halves across it, and the
    last one stops at ``R_MIN``.
    """
    n = shape.n_cells
    b = shape.density_values
    width = 1.0 / n
    out = []  # built in increasing u (from departure backwards)
    R_lo = 0.0
    for i in range(n - 1, -1, -1):
        u_lo = (n - 1 - i) * width
        R_hi = R_lo + b[i] * width
        if refine and b[i] > 0:
            cuts = [R_hi]
            while cuts[-1] / 2 > max(R_lo, R_MIN):
                cuts.append(cuts[-1] / 2)
            cuts.append(max(R_lo, R_MIN))
            for r_lo, r_hi in zip(cuts[:0:-1], cuts[-2::-1]):
                out.append((u_lo + (r_lo - R_lo) / b[i], u_lo + (r_hi - R_lo) / b[i], b[i], r_lo))
        else:
            out.append((u_lo, u_lo + width, b[i], R_lo))
        R_lo = R_hi
    return out[::-1]


def simulate_policy(
    policy: _Policy,
    n_reps: int,
    seed: int,
    shape: ArrivalShape | None = None,
    scale: float = 1.0,
    lam: float | None = None,
    keys: tuple = (),
) -> MCResult:
    """Replications for one destination with ``xi = scale * eta``, ``eta ~ Gamma(lam, 1)``.

    ``lam=None`` means ``eta = 1``.  Under incomplete information the
    policy starts from the prior ``Gamma(lam, 1/scale)``.
    """
    if n_reps < 1:
        raise ValueError("need at least one replication")
    shape = shape or ArrivalShape.uniform()
    if not shape.is_normalized:
        raise ValueError("arrival shape must integrate to one")
    rng = rng_for(seed, *keys)
    eta = np.ones(n_reps) if lam is None else rng.gamma(lam, 1.0, n_reps)
    xi = scale * eta
    policy.start(xi, 1.0 / scale)
    if policy.C == 0:
        return MCResult(0.0, 0.0, 0.0, 0.0, n_reps)
    u = np.ones(n_reps)
    for u_lo, u_hi, b, R_lo in _pieces(shape, policy.continuous):
        if b == 0:
            continue
        u = np.where(policy.k > 0, np.minimum(u, u_hi), u)
        idx = np.nonzero(policy.k > 0)[0]
        while idx.size:
            env = xi[idx] * b * policy.pe_at(idx, np.full(idx.size, R_lo))
            u_new = u[idx] - rng.exponential(1.0, idx.size) / env
            inside = u_new > u_lo
            idx, u_new = idx[inside], u_new[inside]
            env = env[inside]
            if idx.size == 0:
                break
            u[idx] = u_new
            R = R_lo + b * (u_new - u_lo)
            if policy.continuous:
                acc = rng.random(idx.size) * env < xi[idx] * b * policy.pe_at(idx, R)
                sold, R = idx[acc], R[acc]
            else:
                sold = idx
            if sold.size:
                policy.sell(sold, R)
            idx = idx[policy.k[idx] > 0]
    rev = policy.revenue
    load = (policy.C - policy.k) / policy.C
    sq = math.sqrt(n_reps)
    return MCResult(float(rev.mean()), float(rev.std(ddof=1) / sq) if n_reps > 1 else 0.0,
                    float(load.mean()), float(load.std(ddof=1) / sq) if n_reps > 1 else 0.0, n_reps)


def evaluate_policy_mc(
    strategy,
    regime,
    C: int,
    epsilon: float,
    lam: float | None,
    n_reps: int,
    seed: int,
    shape: ArrivalShape | None = None,
    scale: float = 1.0,
    table: AlphaTable | None = None,
) -> MCResult:
    """Monte Carlo revenue and load of the optimal ``strategy`` for one destination."""
    if n_reps < 100:
        raise ValueError("use at least 100 replications")
    pol = make_policy(strategy, regime, C, epsilon, lam, table)
    return simulate_policy(pol, n_reps, seed, shape, scale, lam)


def evaluate_train_mc(
    strategy,
    regime,
    split: tuple[int, int],
    epsilon: float,
    lambdas: tuple[float, float],
    scales: tuple[float, float],
    n_reps: int,
    seed: int,
    shape: ArrivalShape | None = None,
    table: AlphaTable | None = None,
) -> MCResult:
    """Both destinations of a train with a fixed seat split.

    The two destinations are simulated on independent streams and their
    revenues summed replication by replication.
    """
    if n_reps < 100:
        raise ValueError("use at least 100 replications")
    revs, loads = [], []
    for d in range(2):
        pol = make_policy(strategy, regime, split[d], epsilon, lambdas[d], table)
        simulate_policy(pol, n_reps, seed, shape, scales[d], lambdas[d], keys=(d,))
        revs.append(pol.revenue if split[d] > 0 else np.zeros(n_reps))
        loads.append(split[d] - pol.k if split[d] > 0 else np.zeros(n_reps))
    rev = revs[0] + revs[1]
    total = max(sum(split), 1)
    load = (loads[0] + loads[1]) / total
    sq = math.sqrt(n_reps)
    return MCResult(float(rev.mean()), float(rev.std(ddof=1) / sq), float(load.mean()), float(load.std(ddof=1) / sq), n_reps)
