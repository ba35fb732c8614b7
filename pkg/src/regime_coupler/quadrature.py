"""Adaptive Simpson integration and the auxiliary functions of the mean-field drift check.

With ``g(r) = kappa r / (4 lam) - r^3 / (16 N (lam + theta))`` and
``Phi(v) = int_0^v g``, the functions are

    f(s) = int_s^inf exp(Phi(v) - Phi(s)) dv,      G(rho) = int_0^rho f(s) ds.

``G' = f`` and ``G'' = -1 - g G'``.  The upper limit of the inner integral is
cut where ``Phi`` has dropped ``LOG_DROP`` units below its maximum on
``[s, inf)``; past that point the integrand is below ``exp(-LOG_DROP)``
relative to the peak.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from .errors import QuadratureError, ValidationError

LOG_DROP = 40.0
MAX_CUTOFF = 1e6


def adaptive_simpson(fn: Callable[[float], float], a: float, b: float, rtol: float = 1e-10,
                     max_depth: int = 60) -> float:
    """Integral of ``fn`` over ``[a, b]`` to relative tolerance ``rtol``."""
    if b == a:
        return 0.0
    fa, fm, fb = fn(a), fn(0.5 * (a + b)), fn(b)
    whole = (b - a) / 6.0 * (fa + 4 * fm + fb)
    # tolerance is set against a coarse magnitude estimate; 16 panels avoid
    # trusting a single Simpson rule on a peaked integrand
    xs = np.linspace(a, b, 17)
    coarse = sum(abs(fn(float(x))) for x in xs) * (b - a) / 16
    eps = rtol * max(coarse, 1e-300)
    total = 0.0
    stack = [(a, b, fa, fm, fb, whole, eps, 0)]
    while stack:
        lo, hi, flo, fmid, fhi, s, e, depth = stack.pop()
        mid = 0.5 * (lo + hi)
        lm, rm = 0.5 * (lo + mid), 0.5 * (mid + hi)
        flm, frm = fn(lm), fn(rm)
        left = (mid - lo) / 6.0 * (flo + 4 * flm + fmid)
        right = (hi - mid) / 6.0 * (fmid + 4 * frm + fhi)
        delta = left + right - s
        if abs(delta) <= 15 * e or depth >= max_depth:
            if depth >= max_depth and abs(delta) > 15 * e:
                raise QuadratureError(f"no convergence on [{lo}, {hi}] at depth {depth}")
            total += left + right + delta / 15.0
        else:
            stack.append((mid, hi, fmid, frm, fhi, right, e / 2, depth + 1))
            stack.append((lo, mid, flo, flm, fmid, left, e / 2, depth + 1))
    return total


@dataclass(frozen=True)
class GParams:
    kappa: float
    lam: float
    N: float
    theta: float

    def __post_init__(self):
        for name in ("kappa", "lam", "N"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        if not self.theta >= 0:
            raise ValidationError("theta must be nonnegative")

    @property
    def quartic(self) -> float:
        return 16.0 * self.N * (self.lam + self.theta)

    @property
    def peak(self) -> float:
        """Maximiser of ``Phi`` on ``[0, inf)``."""
        return math.sqrt(self.kappa * self.quartic / (4.0 * self.lam))


def g_fn(r: float, kappa: float, lam: float, N: float, theta: float) -> float:
    return kappa / (4.0 * lam) * r - r ** 3 / (16.0 * N * (lam + theta))


def phi_fn(v: float, p: GParams) -> float:
    """``int_0^v g``."""
    return p.kappa * v * v / (8.0 * p.lam) - v ** 4 / (4.0 * p.quartic)


def cutoff(s: float, p: GParams, drop: float = LOG_DROP) -> float:
    """First ``v >= s`` past the maximum of ``Phi`` on ``[s, inf)`` where ``Phi`` fell by ``drop``."""
    start = max(s, p.peak)
    if start + 1.0 > MAX_CUTOFF:
        raise QuadratureError(f"integrand peaks beyond v={MAX_CUTOFF:g} (s={s}, params={p})")
    target = phi_fn(start, p) - drop
    lo, hi = start, start + 1.0
    while phi_fn(hi, p) > target:
        lo, hi = hi, start + 2 * (hi - start)
        if hi > MAX_CUTOFF:
            raise QuadratureError(
                f"integrand not decaying by v={hi:g} (s={s}, params={p})")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if phi_fn(mid, p) > target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-12 * hi:
            break
    return hi


def f_value(s: float, p: GParams, tol: float = 1e-10) -> float:
    """``f(s)``; the exponent is shifted by ``Phi(s)`` to stay finite."""
    ps = phi_fn(s, p)
    top = cutoff(s, p)
    return adaptive_simpson(lambda v: math.exp(phi_fn(v, p) - ps), s, top, tol)


class GFunction:
    """``G`` and ``f`` for fixed parameters, with ``f`` evaluations cached."""

    def __init__(self, p: GParams, tol: float = 1e-10):
        if not 0 < tol <= 1e-4:
            raise ValidationError("tol must lie in (0, 1e-4]")
        self.p, self.tol = p, tol
        self._f = lru_cache(maxsize=None)(lambda s: f_value(s, p, tol))

    def f(self, s: float) -> float:
        return self._f(float(s))

    def g(self, r: float) -> float:
        p = self.p
        return g_fn(r, p.kappa, p.lam, p.N, p.theta)

    def G(self, rho: float) -> float:
        return self.G_many([rho])[0]

    def G_many(self, rhos) -> list[float]:
        """``G`` at several points, integrating piecewise between sorted points."""
        rhos = [float(r) for r in rhos]
        if any(r < 0 for r in rhos):
            raise ValidationError("rho must be nonnegative")
        order = sorted(set(rhos))
        acc, prev, out = 0.0, 0.0, {}
        for r in order:
            acc += adaptive_simpson(self.f, prev, r, self.tol) if r > prev else 0.0
            out[r] = acc
            prev = r
        return [out[r] for r in rhos]

    def G2(self, r: float) -> float:
        """``G'' = -1 - g G'``."""
        return -1.0 - self.g(r) * self.f(r)

    def G_inf(self) -> float:
        """``G(inf)`` with the tail beyond the last point taken from ``f ~ quartic / s^3``."""
        far = max(4.0 * self.p.peak, 20.0)
        return self.G(far) + self.p.quartic / (2.0 * far * far)


def trapezoid_G(rho: float, p: GParams, h: float = 1e-3, top: float | None = None) -> tuple[float, float]:
    """Fixed-step trapezoid values of ``(G(rho), f(rho))`` on ``[0, top]``."""
    if top is None:
        top = cutoff(0.0, p)
    v = np.arange(0.0, top + h / 2, h)
    phi = p.kappa * v * v / (8.0 * p.lam) - v ** 4 / (4.0 * p.quartic)
    shift = phi.max()
    w = np.exp(phi - shift)
    inner = np.concatenate([np.cumsum(((w[1:] + w[:-1]) * h / 2)[::-1])[::-1], [0.0]])
    f = inner * np.exp(shift - phi)
    n = int(round(rho / h))
    G = float(np.sum((f[1:n + 1] + f[:n]) * h / 2))
    return G, float(f[n])
