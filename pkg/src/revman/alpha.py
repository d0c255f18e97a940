"""Revenue coefficients for single-destination pricing problems.

With capacity ``C``, elasticity ``eps`` and a Gamma(``lam``, 1) demand shock,
the optimal expected revenue of each strategy is

    R = alpha * exp(X'beta / eps) * g0^(1/eps),

and ``alpha`` solves a one-dimensional recursion in the number of seats.
The recursions are written in a normalized state ``q``: the expected
number of buyers at the current price over the remaining horizon (complete
information) or the same quantity per unit of posterior rate (incomplete
information, where the seller's gamma belief has shape ``lam + sales`` and
the normalized state is ``p^-eps B_remaining / mu``).

Strategies
----------
Uniform, FullDynamic, StoppingTime, StoppingTimeM(M, increasing) and
IntermediateK(pct).  For StoppingTimeM the initial price is free and ``M``
counts the price changes allowed afterwards.
"""

from __future__ import annotations

import functools
import math
import threading
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.interpolate import CubicSpline, PchipInterpolator
from scipy.special import gammaln

from ._quadrature import KernelRule
from .bounds import capped_profile

_GOLD = (math.sqrt(5.0) - 1.0) / 2.0


class Regime(str, Enum):
    COMPLETE = "complete"
    INCOMPLETE = "incomplete"


@dataclass(frozen=True)
class Uniform:
    grid: bool = False  # restrict to the fare grid (handled in counterfactual)

    @property
    def label(self):
        return "uniform-grid" if self.grid else "uniform"


@dataclass(frozen=True)
class FullDynamic:
    label = "full-dynamic"


@dataclass(frozen=True)
class StoppingTime:
    label = "stopping-time"


@dataclass(frozen=True)
class StoppingTimeM:
    M: int
    increasing: bool = False

    def __post_init__(self):
        if not 1 <= int(self.M) <= 16:
            raise ValueError("number of fares M must be in 1..16")

    @property
    def label(self):
        return f"stopping-time-{self.M}{'+' if self.increasing else ''}"


@dataclass(frozen=True)
class IntermediateK:
    pct: float

    def __post_init__(self):
        if not 0.0 <= float(self.pct) <= 100.0:
            raise ValueError("pct must lie in [0, 100]")

    @property
    def label(self):
        return f"intermediate-{self.pct:g}"


Strategy = Uniform | FullDynamic | StoppingTime | StoppingTimeM | IntermediateK


@dataclass(frozen=True)
class Numerics:
    """Grid and quadrature settings for the recursions."""

    n_grid: int = 200
    q_min: float = 1e-3
    q_max: float = 50.0
    n_nodes: int = 16  # Gauss nodes per quadrature panel
    golden_iters: int = 60
    fd_iters: int = 200


DEFAULT_NUMERICS = Numerics()


class GridBoundError(RuntimeError):
    pass


MAX_WIDEN = 6  # grid widenings tried before a GridBoundError escapes


def _widening(method):
    @functools.wraps(method)
    def wrapper(self, *args, **kwargs):
        return self._widened(lambda: method(self, *args, **kwargs))

    return wrapper


def eta_moment(lam: float | None, eps: float) -> float:
    """``E[eta^(1/eps)]`` for ``eta ~ Gamma(lam, 1)``; 1 when ``lam`` is None."""
    if lam is None:
        return 1.0
    return math.exp(gammaln(lam + 1.0 / eps) - gammaln(lam))


def dynamic_seats(C: int, pct: float) -> int:
    """Seats priced dynamically under IntermediateK (rounded half up)."""
    return int(math.floor(C * pct / 100.0 + 0.5 + 1e-12))


def _bucket(C: int) -> int:
    k = 16
    while k < C:
        k *= 2
    return k


# --------------------------------------------------------------------------
# Small numerical helpers
# --------------------------------------------------------------------------


class _Rows:
    """Row-wise piecewise cubic interpolation in log q with power-law tails.

    ``Y`` has shape (R, n) on the grid ``x = log q``; below the grid, row r
    continues as ``Y[r, 0] * (q/q0)^lo[r]`` and above as
    ``Y[r, -1] * (q/qn)^hi[r]``.
    """

    def __init__(self, x, Y, lo=None, hi=None, kind="pchip"):
        Y = np.atleast_2d(Y)
        self.x = x
        self.Y = Y
        R = Y.shape[0]
        self.lo = np.zeros(R) if lo is None else np.asarray(lo, dtype=float)
        self.hi = np.zeros(R) if hi is None else np.asarray(hi, dtype=float)
        f = PchipInterpolator(x, Y, axis=1) if kind == "pchip" else CubicSpline(x, Y, axis=1)
        # row-major (R*(n-1), 4) so that one gather fetches a whole segment
        self.c = np.ascontiguousarray(f.c.transpose(2, 1, 0)).reshape(-1, 4)
        self.nseg = len(x) - 1
        h = np.diff(x)
        self.h = float(h[0]) if np.allclose(h, h[0], rtol=1e-12, atol=0) else None

    def at(self, rows, xq):
        """Value of row ``rows[i]`` at ``xq[i]`` (arrays of equal shape)."""
        x = self.x
        xc = np.clip(xq, x[0], x[-1])
        if self.h is not None:
            i = np.minimum(((xc - x[0]) / self.h).astype(np.intp), self.nseg - 1)
        else:
            i = np.clip(np.searchsorted(x, xc, side="right") - 1, 0, self.nseg - 1)
        dx = xc - x[i]
        c = self.c[rows * self.nseg + i]
        v = ((c[..., 0] * dx + c[..., 1]) * dx + c[..., 2]) * dx + c[..., 3]
        below = xq < x[0]
        above = xq > x[-1]
        if below.any():
            v = np.where(below, self.Y[rows, 0] * np.exp(self.lo[rows] * (xq - x[0])), v)
        if above.any():
            v = np.where(above, self.Y[rows, -1] * np.exp(self.hi[rows] * (xq - x[-1])), v)
        return v

    def all(self, xq):
        """All rows at the common points ``xq``: shape (R, len(xq))."""
        R = self.Y.shape[0]
        x = self.x
        flat = np.ravel(xq)
        xc = np.clip(flat, x[0], x[-1])
        if self.h is not None:
            i = np.minimum(((xc - x[0]) / self.h).astype(np.intp), self.nseg - 1)
        else:
            i = np.clip(np.searchsorted(x, xc, side="right") - 1, 0, self.nseg - 1)
        dx = xc - x[i]
        c = self.c.reshape(R, self.nseg, 4)
        v = np.empty((R, flat.size))
        for r in range(R):
            cr = c[r, i]
            v[r] = ((cr[:, 0] * dx + cr[:, 1]) * dx + cr[:, 2]) * dx + cr[:, 3]
        below = flat < x[0]
        above = flat > x[-1]
        if below.any():
            v[:, below] = self.Y[:, :1] * np.exp(self.lo[:, None] * (flat[below] - x[0]))
        if above.any():
            v[:, above] = self.Y[:, -1:] * np.exp(self.hi[:, None] * (flat[above] - x[-1]))
        return v.reshape((R,) + np.shape(xq))


def _golden(f, lo, hi, iters):
    """Vectorized golden-section maximization; ties move left (smaller q)."""
    a, b = lo.astype(float).copy(), hi.astype(float).copy()
    c = b - _GOLD * (b - a)
    d = a + _GOLD * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        left = fc >= fd
        a_new = np.where(left, a, c)
        b_new = np.where(left, d, b)
        keep_x = np.where(left, c, d)
        keep_f = np.where(left, fc, fd)
        new_x = np.where(left, b_new - _GOLD * (b_new - a_new), a_new + _GOLD * (b_new - a_new))
        new_f = f(new_x)
        c = np.where(left, new_x, keep_x)
        fc = np.where(left, new_f, keep_f)
        d = np.where(left, keep_x, new_x)
        fd = np.where(left, keep_f, new_f)
        a, b = a_new, b_new
    return np.where(fc >= fd, c, d)


def _maximize(x, vals, approx, exact, iters):
    """Row-wise max of functions tabulated on the log-q grid ``x``.

    The grid argmax (first occurrence) brackets a golden-section search on
    the cheap interpolant ``approx(rows, x)``; the result is re-evaluated
    with ``exact(rows, x)`` and kept only if it beats the grid value.
    Returns ``(log q*, value)`` arrays.
    """
    vals = np.atleast_2d(vals)
    R, n = vals.shape
    i = np.argmax(vals, axis=1)
    if np.any(i == n - 1):
        raise GridBoundError("maximizer hits the upper end of the q-grid; raise Numerics.q_max")
    rows = np.arange(R)
    lo = x[np.maximum(i - 1, 0)]
    hi = x[i + 1]
    xs = _golden(lambda z: approx(rows, z), lo, hi, iters)
    fx = exact(rows, xs)
    fg = vals[rows, i]
    better = fx >= fg
    return np.where(better, xs, x[i]), np.where(better, fx, fg)


# --------------------------------------------------------------------------
# Solvers
# --------------------------------------------------------------------------


class _Base:
    def __init__(self, eps: float, num: Numerics, q_hi: float):
        if not eps > 1:
            raise ValueError(f"epsilon must exceed 1, got {eps}")
        self.eps = float(eps)
        self.a = 1.0 / self.eps
        self.num = num
        # keep the point density of the default grid when the range widens
        top = max(num.q_max, q_hi)
        n = int(math.ceil(num.n_grid * math.log(top / num.q_min) / math.log(num.q_max / num.q_min)))
        self.x = np.linspace(math.log(num.q_min), math.log(top), n)
        self.q = np.exp(self.x)
        self.lock = threading.Lock()

    def _fd_solve(self, a_prev, scale, beta):
        """Solve ``(y + a_prev)/beta = scale * y^(1-eps)`` for y > 0, vectorized.

        The left side minus the right is increasing in y; bisection in log y.
        """
        a_prev = np.asarray(a_prev, dtype=float)
        lo = np.full(a_prev.shape, -80.0)
        hi = np.full(a_prev.shape, 80.0)
        ls = np.log(scale)
        lb = np.log(beta)
        for _ in range(self.num.fd_iters):
            mid = (lo + hi) / 2
            y = np.exp(mid)
            h = np.log(y + a_prev) - lb - ls - (1.0 - self.eps) * mid
            pos = h > 0
            hi = np.where(pos, mid, hi)
            lo = np.where(pos, lo, mid)
            if np.all(hi - lo < 1e-13):
                break
        y = np.exp((lo + hi) / 2)
        if not np.all(np.isfinite(y)):
            raise ArithmeticError("full-dynamic fixed point did not converge")
        return y


class _CompleteSolver(_Base):
    """Complete information: recursions do not involve lam."""

    def __init__(self, eps, num, kcap, widen=1.0):
        super().__init__(eps, num, 4.0 * (kcap + 1) * widen)
        self.kcap = kcap
        self.rule = KernelRule(self.q, self.a, "exp", num.n_nodes)
        self.w = self.rule.exp_weights()
        self.first = self._first(self.q)
        self.J = self.rule.integrate(self.w, 1.0)
        self.J_spline = _Rows(self.x, self.J[None, :], kind="spline")
        self.args = np.log(self.rule.q * (1.0 - self.rule.s))
        self._st = None
        self._fd = None
        self._uni = {}
        self._m = {}

    def _first(self, q):
        return q ** (-self.a) * (-np.expm1(-q))

    def J_exact(self, q):
        r = KernelRule(q, self.a, "exp", self.num.n_nodes)
        return r.integrate(r.exp_weights(), 1.0)

    # -- stopping-time step: max_q first(q) + alpha_prev J(q)
    def st_step(self, alpha_prev):
        alpha_prev = np.atleast_1d(np.asarray(alpha_prev, dtype=float))
        vals = self.first[None, :] + alpha_prev[:, None] * self.J[None, :]
        approx = lambda r, z: self._first(np.exp(z)) + alpha_prev[r] * self.J_spline.at(np.zeros_like(r), z)
        exact = lambda r, z: self._first(np.exp(z)) + alpha_prev[r] * self.J_exact(np.exp(z))
        xs, v = _maximize(self.x, vals, approx, exact, self.num.golden_iters)
        return v, np.exp(xs)

    def stopping_time(self):
        if self._st is None:
            al = np.zeros(self.kcap + 1)
            qs = np.full(self.kcap + 1, np.nan)
            for k in range(1, self.kcap + 1):
                v, q = self.st_step(al[k - 1])
                al[k], qs[k] = v[0], q[0]
            self._st = (al, qs)
        return self._st

    def full_dynamic(self):
        if self._fd is None:
            c = (1.0 - self.a) ** (self.eps - 1.0)
            al = np.zeros(self.kcap + 1)
            for k in range(1, self.kcap + 1):
                y = self._fd_solve(al[k - 1], c, 1.0)
                al[k] = float(y) + al[k - 1]
            self._fd = al
        return self._fd

    def uniform(self, C: int):
        if C not in self._uni:
            if C == 0:
                self._uni[C] = (0.0, np.nan)
            else:
                f = lambda q: q ** (-self.a) * capped_profile(q, C)[..., C]
                ex = lambda r, z: f(np.exp(z))
                xs, v = _maximize(self.x, f(self.q)[None, :], ex, ex, self.num.golden_iters)
                self._uni[C] = (float(v[0]), float(np.exp(xs[0])))
        return self._uni[C]

    def intermediate(self, C: int, pcts):
        """alpha and per-level q* for each pct (lists indexed by pct)."""
        out = []
        for pct in pcts:
            n_dyn = dynamic_seats(C, pct)
            n_u = C - n_dyn
            base, qu = self.uniform(n_u)
            al, qs = base, []
            for _ in range(n_dyn):
                v, q = self.st_step(al)
                al = float(v[0])
                qs.append(float(q[0]))
            # qs[i] is q* with n_u + 1 + i seats left
            out.append((al, qu, qs))
        return out

    # -- M fares
    def mfare(self, M: int, plus: bool) -> "_MTables":
        key = (M, plus)
        if key not in self._m:
            self._m[key] = _MTables(self, M, plus, None)
        return self._m[key]


class _IncompleteSolver(_Base):
    """Incomplete information with prior shape ``lam``.

    With ``k`` seats after ``j`` sales the belief shape is ``lam + j``; the
    coefficients ``A[k, j] = alpha_k(lam + j)`` are filled by increasing k,
    vectorized over j, for all ``k + j <= kcap``.
    """

    def __init__(self, eps, lam, num, kcap, widen=1.0):
        super().__init__(eps, num, 16.0 * (kcap + 1) / min(lam, 1.0) * widen)
        if not lam > 0:
            raise ValueError("lam must be positive")
        self.lam = float(lam)
        self.kcap = kcap
        self._I = None
        self._st = None
        self._fd = None
        self._uni = {}
        self._m = {}

    def lam_j(self, j):
        return self.lam + np.asarray(j, dtype=float)

    def _first(self, q, lamj):
        return q ** (-self.a) * (-np.expm1(-lamj * np.log1p(q)))

    def rule(self, q, lamj):
        """Quadrature for shape ``lamj`` with its weights, the factor
        ``(1 + q s)^-a`` and the log continuation state ``q(1-s)/(1+qs)``."""
        r = KernelRule(q, self.a, "gamma", self.num.n_nodes, lamj)
        qs_ = r.q * r.s
        extra = np.exp(-self.a * np.log1p(qs_))
        args = np.log(r.q * (1.0 - r.s) / (1.0 + qs_))
        return r, r.gamma_weights(), extra, args

    def I_grid(self):
        """``I_j(q)`` on the grid for j = 0..kcap and its spline."""
        if self._I is None:
            I = np.empty((self.kcap + 1, self.q.size))
            for j in range(self.kcap + 1):
                r, w, extra, _ = self.rule(self.q, self.lam + j)
                I[j] = r.integrate(w, extra)
            self._I = (I, _Rows(self.x, I, kind="spline"))
        return self._I

    def I_exact(self, q, lamj):
        r, w, extra, _ = self.rule(q, lamj)
        return r.integrate(w, extra)

    def st_step(self, alpha_prev, j):
        """max_q first_j(q) + alpha_prev * I_j(q), rows given by arrays."""
        alpha_prev = np.atleast_1d(np.asarray(alpha_prev, dtype=float))
        j = np.atleast_1d(np.asarray(j, dtype=int))
        I, Isp = self.I_grid()
        lamj = self.lam_j(j)
        vals = self._first(self.q[None, :], lamj[:, None]) + alpha_prev[:, None] * I[j]
        approx = lambda r, z: self._first(np.exp(z), lamj[r]) + alpha_prev[r] * Isp.at(j[r], z)
        exact = lambda r, z: self._first(np.exp(z), lamj[r]) + alpha_prev[r] * self.I_exact(np.exp(z), lamj[r])
        xs, v = _maximize(self.x, vals, approx, exact, self.num.golden_iters)
        return v, np.exp(xs)

    def stopping_time(self):
        if self._st is None:
            K = self.kcap
            A = np.zeros((K + 1, K + 1))
            Q = np.full((K + 1, K + 1), np.nan)
            for k in range(1, K + 1):
                j = np.arange(0, K - k + 1)
                v, q = self.st_step(A[k - 1, j + 1], j)
                A[k, j], Q[k, j] = v, q
            self._st = (A, Q)
        return self._st

    def full_dynamic(self):
        if self._fd is None:
            K = self.kcap
            c = (1.0 - self.a) ** (self.eps - 1.0)
            A = np.zeros((K + 1, K + 1))
            for k in range(1, K + 1):
                j = np.arange(0, K - k + 1)
                lamj = self.lam_j(j)
                beta = 1.0 + 1.0 / (lamj * self.eps)
                y = self._fd_solve(A[k - 1, j + 1], lamj * c, beta)
                A[k, j] = (y + A[k - 1, j + 1]) / beta
            self._fd = A
        return self._fd

    def uniform(self, C: int, j: int = 0):
        key = (C, j)
        if key not in self._uni:
            if C == 0:
                self._uni[key] = (0.0, np.nan)
            else:
                lamj = self.lam + j
                f = lambda q: q ** (-self.a) * capped_profile(q, C, lamj)[..., C]
                ex = lambda r, z: f(np.exp(z))
                xs, v = _maximize(self.x, f(self.q)[None, :], ex, ex, self.num.golden_iters)
                self._uni[key] = (float(v[0]), float(np.exp(xs[0])))
        return self._uni[key]

    def intermediate(self, C: int, pcts):
        """Vectorized over pcts: levels above the uniform block use ST steps."""
        n_dyn = np.array([dynamic_seats(C, p) for p in pcts])
        n_u = C - n_dyn
        al = np.empty(len(pcts))
        qu = np.empty(len(pcts))
        for i, nu in enumerate(n_u):
            al[i], qu[i] = self.uniform(int(nu), int(C - nu))
        qs = [[] for _ in pcts]
        for k in range(1, C + 1):
            idx = np.nonzero(n_u < k)[0]
            if idx.size == 0:
                continue
            j = np.full(idx.size, C - k)
            v, q = self.st_step(al[idx], j)
            al[idx] = v
            for t, i in enumerate(idx):
                qs[i].append(float(q[t]))
        return [(float(al[i]), float(qu[i]), qs[i]) for i in range(len(pcts))]

    def mfare(self, C: int, M: int, plus: bool) -> "_MTables":
        key = (C, M, plus)
        if key not in self._m:
            self._m[key] = _MTables(self, M, plus, C)
        return self._m[key]


class _MTables:
    """Value tables ``alpha_{k,m}(q)`` for stopping-time pricing with M fares.

    Level k holds rows m = 0..min(M, k).  ``phi[k][r]`` is the value of
    holding price state q with k seats when the continuation uses table
    row r of level k-1 (the "keep" branch uses r = min(m, k-1), the
    "change" branch r = m-1).  ``phi_max[k][r]`` and ``phi_arg[k][r]`` are
    its maximum and maximizer over q.
    """

    def __init__(self, solver, M: int, plus: bool, C: int | None):
        self.s = solver
        self.M = int(M)
        self.plus = bool(plus)
        self.C = C  # None for complete information (tables shared across C)
        self.values: list[np.ndarray] = []
        self.phi: list[np.ndarray] = []
        self.phi_max: list[np.ndarray] = []
        self.phi_arg: list[np.ndarray] = []
        self.interp: list[_Rows] = []
        a = solver.a
        self._lo = lambda R: np.array([1.0 - a] + [(1.0 - a) if self.plus else 0.0] * (R - 1))
        self._hi = lambda R: np.array([-a] + [0.0] * (R - 1))
        zero = np.zeros((1, solver.q.size))
        self.values.append(zero)
        self.phi.append(np.zeros((0, solver.q.size)))
        self.phi_max.append(np.zeros(0))
        self.phi_arg.append(np.zeros(0))
        self.interp.append(_Rows(solver.x, zero, self._lo(1), self._hi(1)))
        top = solver.kcap if C is None else C
        self._top = top
        self._built = 0

    def _lamk(self, k):
        # belief shape with k seats left out of C (incomplete only)
        return self.s.lam + (self.C - k)

    def _uniform_row(self, k, q):
        if self.C is None:
            return q ** (-self.s.a) * capped_profile(q, k)[..., k]
        return q ** (-self.s.a) * capped_profile(q, k, self._lamk(k))[..., k]

    def _phi_grid(self, k, prev: _Rows):
        s = self.s
        if self.C is None:
            return s.first[None, :] + s.rule.integrate(s.w, prev.all(s.args))
        lamk = self._lamk(k)
        r, w, extra, args = s.rule(s.q, lamk)
        V = prev.all(args)
        return s._first(s.q, lamk)[None, :] + r.integrate(w, extra * V)

    def _phi_at(self, k, prev: _Rows, rows, logq):
        s = self.s
        q = np.exp(logq)
        if self.C is None:
            r = KernelRule(q, s.a, "exp", s.num.n_nodes)
            arg = np.log(r.q * (1.0 - r.s))
            V = prev.at(rows[r.seg], arg)
            return s._first(q) + r.integrate(r.exp_weights(), V)
        lamk = self._lamk(k)
        r, w, extra, args = s.rule(q, lamk)
        V = prev.at(rows[r.seg], args) * extra
        return s._first(q, lamk) + r.integrate(w, V)

    def build(self, kmax: int):
        if kmax > self._top:
            raise ValueError(f"tables cover at most {self._top} seats")
        s = self.s
        for k in range(self._built + 1, kmax + 1):
            prev = self.interp[k - 1]
            phi = self._phi_grid(k, prev)  # rows r = 0..min(M, k-1)
            R = phi.shape[0]
            sp = _Rows(s.x, phi, kind="spline")
            xs, vmax = _maximize(
                s.x,
                phi,
                lambda r, z: sp.at(r, z),
                lambda r, z: self._phi_at(k, prev, r, z),
                s.num.golden_iters,
            )
            mk = min(self.M, k)
            vals = np.empty((mk + 1, s.q.size))
            vals[0] = self._uniform_row(k, s.q)
            for m in range(1, mk + 1):
                keep = phi[min(m, k - 1)]
                if self.plus:
                    cm = np.maximum.accumulate(phi[m - 1])
                    change = np.where(s.x >= xs[m - 1], vmax[m - 1], cm)
                else:
                    change = np.full(s.q.size, vmax[m - 1])
                vals[m] = np.maximum(keep, change)
            self.values.append(vals)
            self.phi.append(phi)
            self.phi_max.append(vmax)
            self.phi_arg.append(np.exp(xs))
            self.interp.append(_Rows(s.x, vals, self._lo(mk + 1), self._hi(mk + 1)))
            assert R == min(self.M, k - 1) + 1
        self._built = max(self._built, kmax)
        return self

    def root(self, C: int):
        """``max_q alpha_{C, min(M,C)}(q)`` and the optimal opening move.

        Returns ``(alpha, q0, fares_left)``: opening at ``q0`` with
        ``fares_left`` changes remaining (one is spent when the best opening
        is itself a change).
        """
        if C == 0:
            return 0.0, np.nan, self.M
        self.build(C)
        m = min(self.M, C)
        keep_r = min(m, C - 1)
        vk, qk = self.phi_max[C][keep_r], self.phi_arg[C][keep_r]
        vc, qc = self.phi_max[C][m - 1], self.phi_arg[C][m - 1]
        if vk >= vc:
            return float(vk), float(qk), m
        return float(vc), float(qc), m - 1


# --------------------------------------------------------------------------
# Public table
# --------------------------------------------------------------------------


def _validate(regime, C, eps, lam):
    if not eps > 1:
        raise ValueError(f"epsilon must exceed 1, got {eps}")
    if C < 0 or int(C) != C:
        raise ValueError("capacity must be a non-negative integer")
    if lam is not None and not lam > 0:
        raise ValueError("lam must be positive")
    if Regime(regime) is Regime.INCOMPLETE and lam is None:
        raise ValueError("incomplete information needs a gamma shape lam")


class AlphaTable:
    """Memoized revenue coefficients.

    ``lam=None`` under complete information means a degenerate shock
    (``eta = 1``), for which the ``E[eta^(1/eps)]`` factor is one.
    Solvers are cached per (regime, eps, lam, capacity bucket); filling is
    idempotent, so concurrent readers may at worst duplicate work.
    """

    def __init__(self, numerics: Numerics = DEFAULT_NUMERICS):
        self.num = numerics
        self._solvers: dict = {}
        self._widen: dict = {}
        self._local = threading.local()
        self._lock = threading.Lock()

    def _solver(self, key, make):
        s = self._solvers.get(key)
        if s is None:
            s = make(self._widen.get(key, 1.0))
            with self._lock:
                s = self._solvers.setdefault(key, s)
        self._local.key = key
        return s

    def _complete(self, eps, C):
        key = ("c", float(eps), _bucket(C))
        return self._solver(key, lambda w: _CompleteSolver(eps, self.num, _bucket(C), w))

    def _incomplete(self, eps, lam, C):
        key = ("i", float(eps), float(lam), _bucket(C))
        return self._solver(key, lambda w: _IncompleteSolver(eps, lam, self.num, _bucket(C), w))

    def _widened(self, fn):
        """Run ``fn``; when a maximizer reaches the top of the q-grid, rebuild
        the solver it used on an 8x wider grid and try again."""
        for _ in range(MAX_WIDEN):
            try:
                return fn()
            except GridBoundError:
                key = getattr(self._local, "key", None)
                if key is None:
                    raise
                with self._lock:
                    self._widen[key] = self._widen.get(key, 1.0) * 8.0
                    self._solvers.pop(key, None)
        return fn()

    # -- raw coefficients (no eta factor)
    @_widening
    def raw(self, strategy, regime, C, eps, lam=None) -> float:
        regime = Regime(regime)
        _validate(regime, C, eps, lam)
        C = int(C)
        if C == 0:
            return 0.0
        if isinstance(strategy, Uniform) and strategy.grid:
            raise ValueError("the grid-constrained uniform strategy has no scale-free coefficient")
        if regime is Regime.COMPLETE:
            s = self._complete(eps, C)
            if isinstance(strategy, Uniform):
                return s.uniform(C)[0]
            if isinstance(strategy, StoppingTime):
                return float(s.stopping_time()[0][C])
            if isinstance(strategy, FullDynamic):
                return float(s.full_dynamic()[C])
            if isinstance(strategy, StoppingTimeM):
                return s.mfare(strategy.M, strategy.increasing).root(C)[0]
            if isinstance(strategy, IntermediateK):
                return s.intermediate(C, [strategy.pct])[0][0]
        else:
            s = self._incomplete(eps, lam, C)
            if isinstance(strategy, Uniform):
                return s.uniform(C)[0]
            if isinstance(strategy, StoppingTime):
                return float(s.stopping_time()[0][C, 0])
            if isinstance(strategy, FullDynamic):
                return float(s.full_dynamic()[C, 0])
            if isinstance(strategy, StoppingTimeM):
                return s.mfare(C, strategy.M, strategy.increasing).root(C)[0]
            if isinstance(strategy, IntermediateK):
                return s.intermediate(C, [strategy.pct])[0][0]
        raise TypeError(f"unknown strategy {strategy!r}")

    def alpha(self, strategy, regime, C, eps, lam=None) -> float:
        """Revenue coefficient, including ``E[eta^(1/eps)]`` under complete information."""
        v = self.raw(strategy, regime, C, eps, lam)
        if Regime(regime) is Regime.COMPLETE:
            v *= eta_moment(lam, eps)
        return v

    @_widening
    def curve(self, strategy, regime, C_max, eps, lam=None) -> np.ndarray:
        """Coefficients for every capacity 0..C_max (used by seat-split searches)."""
        regime = Regime(regime)
        _validate(regime, C_max, eps, lam)
        C_max = int(C_max)
        fac = eta_moment(lam, eps) if regime is Regime.COMPLETE else 1.0
        if C_max == 0:
            return np.zeros(1)
        if regime is Regime.COMPLETE:
            s = self._complete(eps, C_max)
            if isinstance(strategy, StoppingTime):
                return s.stopping_time()[0][: C_max + 1] * fac
            if isinstance(strategy, FullDynamic):
                return s.full_dynamic()[: C_max + 1] * fac
        else:
            s = self._incomplete(eps, lam, C_max)
            if isinstance(strategy, StoppingTime):
                return s.stopping_time()[0][: C_max + 1, 0].copy()
            if isinstance(strategy, FullDynamic):
                return s.full_dynamic()[: C_max + 1, 0].copy()
        return np.array([self.raw(strategy, regime, c, eps, lam) for c in range(C_max + 1)]) * fac

    @_widening
    def intermediate_curve(self, regime, C, eps, lam, pcts) -> np.ndarray:
        regime = Regime(regime)
        _validate(regime, C, eps, lam)
        if C == 0:
            return np.zeros(len(pcts))
        if regime is Regime.COMPLETE:
            out = self._complete(eps, C).intermediate(int(C), list(pcts))
            return np.array([o[0] for o in out]) * eta_moment(lam, eps)
        out = self._incomplete(eps, lam, C).intermediate(int(C), list(pcts))
        return np.array([o[0] for o in out])

    # -- loads
    @_widening
    def load(self, strategy, regime, C, eps, lam=None, formula: str = "recursion") -> float:
        """Expected share of the ``C`` seats sold.

        ``formula='recursion'`` evaluates the published stopping-time load
        recursions literally (with alpha in the sale probability);
        ``formula='argmax'`` uses the optimal state ``q*`` instead, which
        is the exact expected load of the optimal policy.
        """
        regime = Regime(regime)
        _validate(regime, C, eps, lam)
        if formula not in ("recursion", "argmax"):
            raise ValueError("formula must be 'recursion' or 'argmax'")
        C = int(C)
        if C == 0:
            return 0.0
        if isinstance(strategy, FullDynamic):
            return 1.0
        if isinstance(strategy, Uniform) and not strategy.grid:
            if regime is Regime.COMPLETE:
                q = self._complete(eps, C).uniform(C)[1]
                return float(capped_profile(q, C)[C]) / C
            q = self._incomplete(eps, lam, C).uniform(C)[1]
            return float(capped_profile(q, C, lam)[C]) / C
        if isinstance(strategy, StoppingTime):
            D = 0.0
            if regime is Regime.COMPLETE:
                al, qs = self._complete(eps, C).stopping_time()
                for r in range(1, C + 1):
                    z = al[r] if formula == "recursion" else qs[r]
                    D = -math.expm1(-z) * (1.0 + D)
                return D / C
            A, Q = self._incomplete(eps, lam, C).stopping_time()
            if formula == "argmax":
                for r in range(1, C + 1):
                    lr = lam + C - r
                    D = -math.expm1(-lr * math.log1p(Q[r, C - r])) * (1.0 + D)
                return D / C
            # literal recursion D_r(lam, mu) with mu updated as (1 + alpha) mu
            mus = [1.0]
            for r in range(C, 1, -1):
                mus.append(mus[-1] * (1.0 + A[r, C - r]))
            # mus[i] is mu with C - i seats left
            for r in range(1, C + 1):
                mu = mus[C - r]
                D = -math.expm1(-A[r, C - r] * mu) * (1.0 + D)
            return D / C
        raise ValueError(f"no load formula for {strategy!r}")

    # -- policy ingredients
    @_widening
    def stopping_time_plan(self, regime, C, eps, lam=None):
        """Optimal normalized state ``q*_k`` for k = 0..C (index = seats left)."""
        regime = Regime(regime)
        if regime is Regime.COMPLETE:
            return self._complete(eps, C).stopping_time()[1][: C + 1].copy()
        _, Q = self._incomplete(eps, lam, C).stopping_time()
        return np.array([np.nan] + [Q[k, C - k] for k in range(1, C + 1)])

    @_widening
    def full_dynamic_plan(self, regime, C, eps, lam=None):
        """Raw coefficients ``alpha_k`` for k = 0..C along the capacity-C path.

        Incomplete: ``out[k] = alpha_k(lam + C - k)`` and ``prev[k] =
        alpha_{k-1}(lam + C - k + 1)`` coincide with ``out[k-1]``.
        """
        regime = Regime(regime)
        if regime is Regime.COMPLETE:
            return self._complete(eps, C).full_dynamic()[: C + 1].copy()
        A = self._incomplete(eps, lam, C).full_dynamic()
        return np.array([0.0] + [A[k, C - k] for k in range(1, C + 1)])

    @_widening
    def uniform_plan(self, regime, C, eps, lam=None):
        regime = Regime(regime)
        if regime is Regime.COMPLETE:
            return self._complete(eps, C).uniform(C)[1]
        return self._incomplete(eps, lam, C).uniform(C)[1]

    @_widening
    def intermediate_plan(self, regime, C, eps, lam, pct):
        """``(q_uniform, q*_levels)`` with q*_levels[i] for n_u + 1 + i seats left."""
        regime = Regime(regime)
        if regime is Regime.COMPLETE:
            _, qu, qs = self._complete(eps, C).intermediate(C, [pct])[0]
        else:
            _, qu, qs = self._incomplete(eps, lam, C).intermediate(C, [pct])[0]
        return qu, qs

    @_widening
    def mfare_tables(self, regime, C, eps, lam, M, increasing) -> _MTables:
        regime = Regime(regime)
        if regime is Regime.COMPLETE:
            return self._complete(eps, C).mfare(M, increasing).build(C)
        return self._incomplete(eps, lam, C).mfare(C, M, increasing).build(C)


DEFAULT_TABLE = AlphaTable()


def alpha_coefficient(strategy, regime, C, epsilon, lam=None, table: AlphaTable | None = None) -> float:
    """Revenue coefficient of ``strategy`` for one destination."""
    return (table or DEFAULT_TABLE).alpha(strategy, regime, C, epsilon, lam)


def expected_load(strategy, regime, C, epsilon, lam=None, formula="recursion", table: AlphaTable | None = None) -> float:
    return (table or DEFAULT_TABLE).load(strategy, regime, C, epsilon, lam, formula)
