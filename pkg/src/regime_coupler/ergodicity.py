"""Coupling-time tails, total-variation bounds and closed-form rate constants."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .coupling import simulate_coupled_batch
from .core import ModelSpec, SimConfig
from .errors import ValidationError
from .switching import fmt_real


@dataclass
class TailCurve:
    """Empirical survival ``t -> P(T > t)`` of a coupling time.

    Censored paths carry ``T = inf`` and count as ``T > t`` at every time.
    """

    samples: np.ndarray
    horizon: float
    times: np.ndarray | None = None
    warning: str | None = None

    def __post_init__(self):
        self.samples = np.sort(np.asarray(self.samples, dtype=float))
        if self.times is None:
            finite = self.samples[np.isfinite(self.samples)]
            self.times = np.unique(np.concatenate([[0.0], finite, [self.horizon]]))
        if self.n_censored == self.n_paths and self.warning is None:
            self.warning = "all paths censored at the horizon"

    @property
    def n_paths(self) -> int:
        return self.samples.size

    @property
    def n_censored(self) -> int:
        return int(np.sum(~np.isfinite(self.samples)))

    def survival_at(self, t) -> np.ndarray:
        """``P(T > t)``."""
        t = np.asarray(t, dtype=float)
        return 1.0 - np.searchsorted(self.samples, t, side="right") / self.n_paths

    def tail_at(self, t) -> np.ndarray:
        """``P(T >= t)``."""
        t = np.asarray(t, dtype=float)
        return 1.0 - np.searchsorted(self.samples, t, side="left") / self.n_paths

    def se_of(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return np.sqrt(p * (1 - p) / self.n_paths)

    @property
    def survival(self) -> np.ndarray:
        return self.survival_at(self.times)

    @property
    def se(self) -> np.ndarray:
        return self.se_of(self.survival)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "survival", "se"])
            for t, s, e in zip(self.times, self.survival, self.se):
                w.writerow([fmt_real(t), fmt_real(s), fmt_real(e)])


def tail_from_samples(T, horizon: float, times=None) -> TailCurve:
    return TailCurve(np.asarray(T, dtype=float), horizon,
                     None if times is None else np.asarray(times, dtype=float))


def estimate_tail(m: ModelSpec, inits: Sequence[tuple], cfg: SimConfig, *, workers: int = 1,
                  times=None) -> TailCurve:
    """Pooled coupling-time survival over all initial pairs ``(phi, k, psi, l)``."""
    if cfg.n_paths < 100:
        raise ValidationError("estimate_tail needs at least 100 paths")
    batch = simulate_coupled_batch(m, inits, cfg, workers=workers, stop_at="T")
    T = np.where(batch.diverged, np.inf, batch.T)
    return tail_from_samples(T, cfg.horizon, times)


def tv_upper_bound(tail: TailCurve, t: float) -> tuple[float, float]:
    """Coupling-inequality bound ``2 P(T > t)`` and its standard error."""
    s = float(tail.survival_at(t))
    return 2.0 * s, 2.0 * float(tail.se_of(s))


@dataclass
class BetaFit:
    beta: float | None
    gamma: float | None
    beta_se: float | None = None
    residual: float | None = None
    n_points: int = 0
    poor_fit: bool = False
    message: str = "ok"


def fit_beta(times, survival, t_min: float | None = None, *,
             residual_tol: float = 0.05) -> BetaFit:
    """Least-squares fit of ``log(2 S(t)) = log(gamma) - beta t`` for ``t >= t_min``.

    ``t_min`` defaults to the first time with ``S <= 1/2``.  The fit is
    flagged as poor when the RMS residual of the log-survival exceeds
    ``residual_tol``.
    """
    t = np.asarray(times, dtype=float)
    s = np.asarray(survival, dtype=float)
    if t_min is None:
        half = np.flatnonzero(s <= 0.5)
        t_min = t[half[0]] if half.size else np.inf
    sel = (t >= t_min) & (s > 0) & (s < 1)
    n = int(sel.sum())
    if n < 5:
        return BetaFit(None, None, n_points=n, message="fit unavailable: fewer than 5 points")
    tt, yy = t[sel], np.log(2 * s[sel])
    X = np.column_stack([np.ones(n), -tt])
    coef, *_ = np.linalg.lstsq(X, yy, rcond=None)
    res = yy - X @ coef
    rms = float(np.sqrt(np.mean(res ** 2)))
    dof = max(n - 2, 1)
    cov = np.linalg.inv(X.T @ X) * float(res @ res) / dof
    poor = rms > residual_tol
    return BetaFit(float(coef[1]), float(math.exp(coef[0])), float(math.sqrt(cov[1, 1])), rms,
                   n, poor, "poor log-linear fit" if poor else "ok")


def fit_beta_tail(tail: TailCurve, t_min: float | None = None, **kw) -> BetaFit:
    return fit_beta(tail.times, tail.survival, t_min, **kw)


@dataclass(frozen=True)
class TheoryConstants:
    """Rate constants built from ``(H, M, r, alpha)``.

    ``N = 2 / alpha`` bounds the first diagonal hitting time with probability
    at least 1/2; the rest follows in closed form.
    """

    H: float
    M: float
    r: float
    alpha: float
    N: float
    delta2: float
    rho: float
    R: float
    R_hat: float
    beta_lb: float

    def as_row(self) -> dict:
        return asdict(self)


def theory_constants(H: float, M: float, r: float, alpha: float) -> TheoryConstants:
    for name, v in (("H", H), ("M", M), ("r", r), ("alpha", alpha)):
        try:
            ok = math.isfinite(float(v)) and float(v) > 0
        except (TypeError, ValueError):
            ok = False
        if not ok:
            raise ValidationError(f"{name} must be positive and finite, got {v!r}")
    N = 2.0 / alpha
    delta2 = 0.5 * math.exp(-H * (M + r))
    R = M + r + N
    return TheoryConstants(float(H), float(M), float(r), float(alpha), N, delta2,
                           1.0 - delta2 / 2.0, R, 2.0 * R / delta2, delta2 / (2.0 * R))


@dataclass
class Check:
    name: str
    lhs: float
    rhs: float
    ok: bool


def geometric_tail_check(tail: TailCurve, c: TheoryConstants, n_max: int = 3) -> list[Check]:
    """Compare ``P(T >= nR)`` with ``rho^n`` plus three standard errors."""
    if tail.horizon < n_max * c.R:
        raise ValidationError(f"horizon {tail.horizon} is shorter than {n_max}R = {n_max * c.R}")
    out = []
    for n in range(1, n_max + 1):
        p = float(tail.tail_at(n * c.R))
        rhs = c.rho ** n + 3 * float(tail.se_of(p))
        out.append(Check(f"P(T>={n}R)", p, rhs, p <= rhs))
    return out


@dataclass
class BoundTable:
    moments: list[tuple[int, float, float | None]]
    mgf: list[tuple[float, float, float | None]]


def moment_mgf_bounds(c: TheoryConstants, n_max: int, lambda_grid, samples=None) -> BoundTable:
    """``E[T^n] <= n! R_hat^n`` and ``E[exp(lambda T)] <= 1 / (1 - lambda R_hat)``.

    With ``samples`` (finite coupling times) the empirical values are listed
    next to each bound.
    """
    lam = [float(v) for v in lambda_grid]
    for v in lam:
        if not 0 < v < 1.0 / c.R_hat:
            raise ValidationError(f"lambda={v} is outside (0, 1/R_hat) = (0, {1.0 / c.R_hat})")
    T = None if samples is None else np.asarray(samples, dtype=float)
    moments = []
    for n in range(1, n_max + 1):
        emp = None if T is None else float(np.mean(T ** n))
        moments.append((n, math.factorial(n) * c.R_hat ** n, emp))
    mgf = []
    for v in lam:
        emp = None if T is None else float(np.mean(np.exp(v * T)))
        mgf.append((v, 1.0 / (1.0 - v * c.R_hat), emp))
    return BoundTable(moments, mgf)


def polylog_neg(s: int, z: float, rtol: float = 1e-12) -> float:
    """``Li_{-s}(z) = sum_j j^s z^j`` for integer ``s >= 0`` and ``0 < z < 1``."""
    if s == 0:
        return z / (1 - z)
    if s == 1:
        return z / (1 - z) ** 2
    if s == 2:
        return z * (1 + z) / (1 - z) ** 3
    if s == 3:
        return z * (1 + 4 * z + z * z) / (1 - z) ** 4
    total, j = 0.0, 1
    peak = max(1, int(s / -math.log(z)))
    while True:
        term = j ** s * z ** j
        total += term
        if j > peak and term <= rtol * total:
            return total
        j += 1


def polylog_bound_check(rho: float, n: int) -> tuple[float, float, bool]:
    """``Li_{-(n-1)}(rho) <= rho (n-1)! / (1-rho)^n``; equality at ``n = 1``."""
    if not 0 < rho < 1:
        raise ValidationError("rho must lie in (0, 1)")
    if n < 1:
        raise ValidationError("n must be at least 1")
    lhs = polylog_neg(n - 1, rho)
    rhs = rho * math.factorial(n - 1) / (1 - rho) ** n
    return lhs, rhs, lhs <= rhs


def beta_upper_bound(pi_A: float, gamma: float, mean_hitting: float) -> float:
    """``(2 / pi_A) log(gamma / pi_A) / sup E[tau_A]``."""
    if not 0 < pi_A <= 1:
        raise ValidationError("pi_A must lie in (0, 1]")
    if not gamma > pi_A:
        raise ValidationError("gamma must exceed pi_A")
    if not mean_hitting > 0:
        raise ValidationError("mean hitting time must be positive")
    return 2.0 / pi_A * math.log(gamma / pi_A) / mean_hitting


def beta_gamma_lower_bound(c: TheoryConstants, gamma: float) -> float:
    """``(1 - 2/gamma) / R_hat`` for ``gamma >= 2``."""
    if not gamma >= 2:
        raise ValidationError("gamma must be at least 2")
    return (1.0 - 2.0 / gamma) / c.R_hat


@dataclass
class HistogramTV:
    tv: float
    raw: float
    bias: float
    se: float


def histogram_tv(a, b, bins: int = 200) -> HistogramTV:
    """Half-L1 distance of two samples on shared equal-width bins.

    The raw estimate is biased upward by sampling noise.  Each bin's
    difference is roughly normal with standard deviation ``s``; the expected
    excess of ``|p - q|`` over the true gap, ``s sqrt(2/pi) exp(-d^2 / 2s^2)``
    with ``d`` the observed gap, is subtracted and the result clipped at 0.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    lo, hi = min(a.min(), b.min()), max(a.max(), b.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    p = np.histogram(a, edges)[0] / a.size
    q = np.histogram(b, edges)[0] / b.size
    var = p * (1 - p) / a.size + q * (1 - q) / b.size
    gap = np.abs(p - q)
    raw = 0.5 * float(gap.sum())
    with np.errstate(divide="ignore", invalid="ignore"):
        damp = np.where(var > 0, np.exp(-gap * gap / (2 * var)), 0.0)
    bias = 0.5 * float((np.sqrt(2 / math.pi * var) * damp).sum())
    return HistogramTV(max(raw - bias, 0.0), raw, bias, 0.5 * float(np.sqrt(var.sum())))


def write_constants_csv(c: TheoryConstants, path) -> None:
    row = c.as_row()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(row))
        w.writerow([fmt_real(v) for v in row.values()])


def write_checks_csv(checks: Sequence[Check], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "lhs", "rhs", "ok"])
        for c in checks:
            w.writerow([c.name, fmt_real(c.lhs), fmt_real(c.rhs), int(c.ok)])
