"""Composite Gauss rules for the integrals that appear in the value recursions.

Every continuation integral in the stopping-time family has the form

    int_0^1 K_q(s) (1 - s)^a h(s) ds

where ``K_q`` is either the exponential density ``q exp(-q s)`` (complete
information) or the Lomax-type density ``lam q (1 + q s)^(-lam-1)``
(gamma-mixed, incomplete information), ``a = 1/eps`` and ``h`` is smooth.
The kernel concentrates on ``s ~ 1/q`` and ``(1 - s)^a`` has an algebraic
endpoint singularity, so a single Gauss-Legendre rule converges slowly at
both ends.  We use panels whose widths double from ``1/q`` onward, plain
Gauss-Legendre on interior panels and Gauss-Jacobi on the panel touching
``s = 1`` so the singular factor is integrated exactly.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

# Beyond q*s = _EXP_CUTOFF the exponential kernel is below 1e-26 and ignored.
_EXP_CUTOFF = 60.0


@lru_cache(maxsize=None)
def _legendre01(n: int):
    x, w = roots_legendre(n)
    return (x + 1.0) / 2.0, w / 2.0


@lru_cache(maxsize=None)
def _jacobi01(n: int, a: float):
    # weight (1-x)^a on [-1, 1]  ->  (1-s)^a on [0, 1] after s = (x+1)/2
    x, w = roots_jacobi(n, a, 0.0)
    return (x + 1.0) / 2.0, w * 2.0 ** (-a - 1.0)


def _panels(q: np.ndarray, kind: str, lam: np.ndarray):
    """Panel edges for every q: ``(owner, lo, hi)`` flat arrays.

    The kernel's mass sits at s ~ 1/(q max(1, lam)); panels double in width
    from there, and beyond ``end`` the kernel is below exp(-_EXP_CUTOFF) and
    is ignored.
    """
    if kind == "exp":
        end = np.minimum(1.0, _EXP_CUTOFF / q)
        first = 1.0 / q
    else:
        end = np.minimum(1.0, np.expm1(_EXP_CUTOFF / lam) / q)
        first = 1.0 / (q * np.maximum(1.0, lam))
    ratio = 0.999 * end / first
    # number of interior edges first * 2^i strictly below 0.999 * end
    m = np.where(ratio > 1.0, np.ceil(np.log2(np.maximum(ratio, 1.0))), 0).astype(int)
    counts = m + 1
    owner = np.repeat(np.arange(q.size), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    i = np.arange(owner.size) - starts[owner]  # panel index within its q
    f = first[owner]
    lo = np.where(i == 0, 0.0, f * 2.0 ** (i - 1))
    hi = np.where(i == counts[owner] - 1, end[owner], f * 2.0**i)
    return owner, lo, hi


class KernelRule:
    """Quadrature nodes for a batch of kernel parameters ``q``.

    Nodes for all ``q`` are stored flat; ``offsets`` marks where each q's
    segment starts so that per-q sums are ``np.add.reduceat``.  The factor
    ``(1-s)^a`` is folded into ``base_w``; the kernel density is applied by
    :meth:`exp_weights` or :meth:`gamma_weights`.  Panels are laid out for
    the kernel shape (``lam``: scalar or one per q), whose negligible tail
    is dropped, so each rule must be paired with the matching weights.
    """

    def __init__(self, qs, a: float, kind: str = "gamma", n: int = 16, lam=1.0):
        if kind not in ("exp", "gamma"):
            raise ValueError(f"unknown kernel {kind!r}")
        qs = np.atleast_1d(np.asarray(qs, dtype=float))
        if np.any(qs <= 0) or not np.all(np.isfinite(qs)):
            raise ValueError("kernel parameter q must be positive and finite")
        lam = np.broadcast_to(np.asarray(lam, dtype=float), qs.shape).copy()
        if np.any(lam <= 0):
            raise ValueError("lam must be positive")
        owner, lo, hi = _panels(qs, kind, lam)
        width = (hi - lo)[:, None]
        xl, wl = _legendre01(int(n))
        xj, wj = _jacobi01(int(n), float(a))
        last = (hi == 1.0)[:, None]
        s = lo[:, None] + width * np.where(last, xj, xl)
        w = np.where(last, wj * width ** (a + 1.0), wl * width * (1.0 - s) ** a)
        self.kind = kind
        self.q_values = qs
        self.lam = lam
        self.s = s.ravel()
        self.base_w = w.ravel()
        self.seg = np.repeat(owner, int(n))
        self.q = qs[self.seg]
        sizes = np.bincount(owner, minlength=qs.size) * int(n)
        self.offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])

    def exp_weights(self) -> np.ndarray:
        return self.base_w * self.q * np.exp(-self.q * self.s)

    def gamma_weights(self) -> np.ndarray:
        """Lomax kernel with the shapes the rule was built for."""
        if self.kind != "gamma":
            raise ValueError("rule was built for the exponential kernel")
        lam = self.lam[self.seg]
        return self.base_w * lam * self.q * np.exp((-lam - 1.0) * np.log1p(self.q * self.s))

    def integrate(self, w: np.ndarray, values: np.ndarray) -> np.ndarray:
        """Per-q sums of ``w * values``; ``values`` may carry leading axes."""
        return np.add.reduceat(w * values, self.offsets, axis=-1)
