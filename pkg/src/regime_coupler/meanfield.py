"""Built-in models: the N-body mean-field system, a logistic ecology model and an
Ornstein-Uhlenbeck benchmark with a Gaussian oracle.

The mean-field system reads, for ``i = 1..N``,

    dX_i = [alpha(k) X_i - X_i^3 - beta(k) (X_i - mean(X))] dt + sigma_i(X, k) dW_i.

Its single-regime coupling splits the noise as ``sigma^2 = lam + sigma_lam^2``:
both copies share ``sigma_lam dW``, and the ``sqrt(lam)`` channel is reflected.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import HistorySegment, LyapunovSpec, ModelSpec, SimConfig
from .coupling import CoupledBatch, _reflections, simulate_coupled_batch
from .errors import ValidationError
from .quadrature import GFunction, GParams
from .switching import fmt_real

SigmaFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _per_regime(v, k) -> np.ndarray:
    return np.asarray(v, dtype=float)[np.asarray(k)]


# -- mean-field system --------------------------------------------------------


def demo_rates(segment: HistorySegment, k: int) -> dict[int, float]:
    """Two regimes; leaving regime 1 gets likelier as the segment average grows."""
    s = 1.0 / (1.0 + math.exp(-float(np.mean(segment.points))))
    return {1: 0.25 + 0.5 * s} if k == 0 else {0: 0.25 + 0.5 * (1.0 - s)}


def unit_sigma(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    return np.ones_like(x)


@dataclass
class MeanFieldParams:
    """Mean-field model settings.

    ``sigma(x, k)`` is batched: ``x`` is ``(n, N)``, ``k`` is ``(n,)`` and the
    result holds the diagonal entries ``sigma_i`` as ``(n, N)``.  ``lam``
    defaults to ``lambda0 / 2``.
    """

    N: int
    alpha: Sequence[float]
    beta: Sequence[float]
    sigma: SigmaFn = unit_sigma
    lambda0: float = 1.0
    lam: float | None = None
    rates: Callable[[HistorySegment, int], object] = demo_rates
    rate_bound: float = 1.0

    def __post_init__(self):
        self.alpha = [float(a) for a in np.atleast_1d(self.alpha)]
        self.beta = [float(b) for b in np.atleast_1d(self.beta)]
        if int(self.N) < 1:
            raise ValidationError("N must be a positive integer")
        if len(self.alpha) != len(self.beta):
            raise ValidationError("alpha and beta need one value per regime")
        if min(self.alpha) <= 0 or min(self.beta) <= 0:
            raise ValidationError("alpha and beta must be positive")
        if not 0 < self.lambda0 <= 1:
            raise ValidationError("lambda0 must lie in (0, 1]")
        if self.lam is None:
            self.lam = self.lambda0 / 2
        if not 0 < self.lam < self.lambda0:
            raise ValidationError("lam must lie in (0, lambda0)")

    @property
    def n_regimes(self) -> int:
        return len(self.alpha)


def mf_drift(x, k, params: MeanFieldParams) -> np.ndarray:
    """``alpha x_i - x_i^3 - beta (x_i - mean(x))`` for a batch of states."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    kk = np.broadcast_to(np.asarray(k), (x2.shape[0],))
    a = _per_regime(params.alpha, kk)[:, None]
    b = _per_regime(params.beta, kk)[:, None]
    out = a * x2 - x2 ** 3 - b * (x2 - x2.mean(axis=1, keepdims=True))
    return out[0] if single else out


def _sample_states(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    radii = np.concatenate([[0.0, 1.0, 3.0, 10.0, 30.0], rng.uniform(0, 10, n)])
    u = rng.standard_normal((radii.size, dim))
    u /= np.maximum(np.linalg.norm(u, axis=1, keepdims=True), 1e-300)
    return u * radii[:, None]


@dataclass
class EllipticityWitness:
    x: np.ndarray
    k: int
    sigma_sq: float
    bounds: tuple[float, float]


def check_ellipticity(params: MeanFieldParams, xs: np.ndarray) -> EllipticityWitness | None:
    """First sampled state with some ``sigma_i^2`` outside ``[lambda0, 1/lambda0]``."""
    lo, hi = params.lambda0, 1.0 / params.lambda0
    for k in range(params.n_regimes):
        s2 = np.asarray(params.sigma(xs, np.full(len(xs), k)), dtype=float) ** 2
        bad = np.argwhere((s2 < lo * (1 - 1e-12)) | (s2 > hi * (1 + 1e-12)) | ~np.isfinite(s2))
        if bad.size:
            i, j = bad[0]
            return EllipticityWitness(xs[i].copy(), k, float(s2[i, j]), (lo, hi))
    return None


def dissipation_constant(params: MeanFieldParams, xs: np.ndarray) -> float:
    """Smallest ``K`` with ``L V <= -V + K`` at the sampled states, ``V = |x|^2 + 1``."""
    worst = -math.inf
    for k in range(params.n_regimes):
        kk = np.full(len(xs), k)
        s2 = np.sum(np.asarray(params.sigma(xs, kk), dtype=float) ** 2, axis=1)
        LV = s2 + 2 * np.sum(xs * mf_drift(xs, kk, params), axis=1)
        V = np.sum(xs ** 2, axis=1) + 1
        worst = max(worst, float(np.max(LV + V)))
    return worst


def mf_model(params: MeanFieldParams, n_check: int = 2000, seed: int = 0) -> ModelSpec:
    """Model for the mean-field system after sampled ellipticity and dissipation checks.

    Raises ``ValidationError`` carrying the witness state when ellipticity fails.
    """
    N = int(params.N)
    rng = np.random.default_rng(seed)
    xs = _sample_states(rng, n_check, N)
    w = check_ellipticity(params, xs)
    if w is not None:
        err = ValidationError(
            f"ellipticity fails at x={np.array2string(w.x, precision=6)}, "
            f"regime {w.k + 1}: sigma_i^2={w.sigma_sq:.6g} outside "
            f"[{w.bounds[0]:.6g}, {w.bounds[1]:.6g}]")
        err.witness = w
        raise err
    K = dissipation_constant(params, xs)

    def drift(x, k):
        return mf_drift(x, k, params)

    def diffusion(x, k):
        s = np.asarray(params.sigma(x, k), dtype=float)
        out = np.zeros(s.shape + (N,))
        idx = np.arange(N)
        out[:, idx, idx] = s
        return out

    lyap = LyapunovSpec(V=lambda x, k: float(x @ x) + 1.0, gamma=max(K, 1.0),
                        grad=lambda x, k: 2 * np.asarray(x, dtype=float),
                        hess=lambda x, k: 2 * np.eye(N))
    return ModelSpec(N, drift, diffusion, params.rates, params.rate_bound,
                     n_regimes=params.n_regimes, name="meanfield", lyapunov=lyap,
                     info={"dissipation_K": K, "params": params})


@dataclass
class LambdaSplit:
    """``sigma^2 = lam + sigma_lam^2`` for a diagonal diffusion."""

    sigma: SigmaFn
    lam: float
    max_identity_error: float = 0.0

    @property
    def common(self) -> float:
        return math.sqrt(self.lam)

    def sigma_lam(self, x, k) -> np.ndarray:
        s = np.asarray(self.sigma(x, k), dtype=float)
        return np.sqrt(s * s - self.lam)


def lambda_split(sigma: SigmaFn, lam: float, samples: np.ndarray, n_regimes: int = 1) -> LambdaSplit:
    """Split off ``lam`` from ``sigma^2`` and verify the identity on samples."""
    split = LambdaSplit(sigma, float(lam))
    worst = 0.0
    for k in range(n_regimes):
        kk = np.full(len(samples), k)
        s2 = np.asarray(sigma(samples, kk), dtype=float) ** 2
        if np.any(s2 <= lam):
            i = int(np.argwhere(s2 <= lam)[0][0])
            raise ValidationError(f"sigma_i^2 <= lam at x={samples[i]}, regime {k + 1}")
        sl = split.sigma_lam(samples, kk)
        worst = max(worst, float(np.max(np.abs(lam + sl * sl - s2) / np.maximum(s2, 1.0))))
    if worst > 1e-12:
        raise ValidationError(f"split identity off by {worst:.3g}")
    split.max_identity_error = worst
    return split


def lipschitz_estimate(fn: Callable[[np.ndarray], np.ndarray], xs: np.ndarray,
                       rng: np.random.Generator, scales=(1e-3, 1e-1, 1.0, 10.0)) -> float:
    """Largest sampled ``|fn(x) - fn(z)| / |x - z|`` over random nearby and distant pairs."""
    best = 0.0
    for h in scales:
        z = xs + h * rng.standard_normal(xs.shape)
        num = np.linalg.norm(fn(xs) - fn(z), axis=1)
        den = np.linalg.norm(xs - z, axis=1)
        ok = den > 0
        if ok.any():
            best = max(best, float(np.max(num[ok] / den[ok])))
    return best


@dataclass
class SplitConstants:
    K: float
    kappa: float
    theta: float
    lam: float
    N: int

    @property
    def gparams(self) -> GParams:
        return GParams(self.kappa, self.lam, self.N, self.theta)


def split_constants(params: MeanFieldParams, n_samples: int = 2000, seed: int = 0,
                    inflate: float = 1.1) -> SplitConstants:
    """Sampled Lipschitz constant ``K`` of ``sigma_lam`` and bound ``theta`` on ``|sigma_lam|^2``.

    Both are inflated by ``inflate``; ``kappa = K^2 + 2 max alpha``.
    """
    rng = np.random.default_rng(seed)
    xs = _sample_states(rng, n_samples, params.N)
    split = lambda_split(params.sigma, params.lam, xs, params.n_regimes)
    K = theta = 0.0
    for k in range(params.n_regimes):
        kk = np.full(len(xs), k)
        K = max(K, lipschitz_estimate(lambda v: split.sigma_lam(v, kk), xs, rng))
        theta = max(theta, float(np.max(np.sum(split.sigma_lam(xs, kk) ** 2, axis=1))))
    K *= inflate
    theta *= inflate
    return SplitConstants(K, K * K + 2 * max(params.alpha), theta, params.lam, params.N)


class LambdaSplitCoupler:
    """Noise coupling for one regime: shared ``sigma_lam dW``, reflected ``sqrt(lam) dB``.

    Noise layout is ``(W, B)``; both copies must be in the same regime.
    """

    def __init__(self, params: MeanFieldParams):
        self.split = LambdaSplit(params.sigma, params.lam)

    def width(self, d: int) -> int:
        return 2 * d

    def tau(self, m: ModelSpec, x, k, y, l) -> np.ndarray:
        if np.any(k != l):
            raise ValidationError("the split coupling needs equal regimes")
        n, d = x.shape
        out = np.zeros((n, 2 * d, 2 * d))
        idx = np.arange(d)
        out[:, idx, idx] = self.split.sigma_lam(x, k)
        out[:, d + idx, idx] = self.split.sigma_lam(y, k)
        c = self.split.common
        out[:, idx, d + idx] = c
        out[:, d:, d:] = c * _reflections(x - y, np.ones(n, dtype=bool))
        return out

    def maximal_parts(self, m: ModelSpec, x, k, y, l, dw, dt: float):
        """Given ``W``, both copies are Gaussian with covariance ``lam dt I``; reflect on ``B``."""
        n, d = x.shape
        sq = math.sqrt(dt)
        cx = self.split.sigma_lam(x, k) * dw[:, :d] * sq
        cy = self.split.sigma_lam(y, k) * dw[:, :d] * sq
        S = np.broadcast_to(self.split.common * np.eye(d), (n, d, d))
        return cx, cy, S, dw[:, d:2 * d], np.ones(n, dtype=bool)


def mf_step(params: MeanFieldParams, x: np.ndarray, k: int, dw: np.ndarray, dt: float) -> np.ndarray:
    """One Euler step of the mean-field system for a single state."""
    s = np.asarray(params.sigma(x[None], np.array([k])), dtype=float)[0]
    return x + mf_drift(x, k, params) * dt + s * dw * math.sqrt(dt)


def mf_coupled_step(params: MeanFieldParams, x: np.ndarray, y: np.ndarray, k: int,
                    dW: np.ndarray, dB: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """One Euler step of the split coupling for a single pair (same noise layout as the engine)."""
    split = LambdaSplit(params.sigma, params.lam)
    kk = np.array([k])
    sx = split.sigma_lam(x[None], kk)[0]
    sy = split.sigma_lam(y[None], kk)[0]
    Hm = _reflections((x - y)[None], np.ones(1, dtype=bool))[0]
    c, sq = split.common, math.sqrt(dt)
    xn = x + mf_drift(x, k, params) * dt + (sx * dW + c * dB) * sq
    yn = y + mf_drift(y, k, params) * dt + (sy * dW + c * (Hm @ dB)) * sq
    return xn, yn


# -- drift condition ----------------------------------------------------------


@dataclass
class DriftRow:
    r: float
    omega: float
    margin: float
    A_bar: float
    trA: float
    B: float


@dataclass
class DriftReport:
    rows: list[DriftRow]
    failures: list[int]
    sandwich_failures: list[int]
    B_failures: list[int]
    skipped: int
    constants: SplitConstants

    @property
    def passed(self) -> bool:
        return not (self.failures or self.sandwich_failures or self.B_failures)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["r", "omega_value", "margin"])
            for row in self.rows:
                w.writerow([fmt_real(row.r), fmt_real(row.omega), fmt_real(row.margin)])


def drift_grid(N: int, radii, n_dirs: int, seed: int = 0, spread: float = 2.0):
    """Pairs ``(x, z)`` with ``|x - z|`` on ``radii`` and random base points and directions."""
    rng = np.random.default_rng(seed)
    out = []
    for r in radii:
        for _ in range(n_dirs):
            x = spread * rng.standard_normal(N)
            e = rng.standard_normal(N)
            e /= np.linalg.norm(e)
            out.append((x, x - r * e))
    return out


def drift_condition_check(params: MeanFieldParams, pairs, k: int = 0, *,
                          consts: SplitConstants | None = None, gfun: GFunction | None = None,
                          tol: float = 1e-6, G2: Callable[[float], float] | None = None) -> DriftReport:
    """Evaluate the coupling generator of ``G(|x - z|)`` at each pair.

    A point fails when the value exceeds ``-2 lam (1 - tol)``.  The sandwich
    ``4 lam <= A_bar <= 4 (lam + theta)`` and the bound
    ``B <= alpha |x-z|^2 - |x-z|^4 / (4N)`` are checked at the same points.
    ``G2`` overrides the second derivative (used to test the detector).
    """
    consts = consts or split_constants(params)
    gfun = gfun or GFunction(consts.gparams)
    second = G2 or gfun.G2
    split = LambdaSplit(params.sigma, params.lam)
    lam, theta, N = params.lam, consts.theta, params.N
    alpha = params.alpha[k]
    rows, fails, sand, bfail, skipped = [], [], [], [], 0
    for x, z in pairs:
        x = np.asarray(x, dtype=float)
        z = np.asarray(z, dtype=float)
        u = x - z
        r = float(np.linalg.norm(u))
        if r == 0:
            skipped += 1
            continue
        e = u / r
        kk = np.array([k])
        ds = split.sigma_lam(x[None], kk)[0] - split.sigma_lam(z[None], kk)[0]
        trA = 4 * lam + float(ds @ ds)
        A_bar = 4 * lam + float((ds * e) @ (ds * e))
        B = float(u @ (mf_drift(x, k, params) - mf_drift(z, k, params)))
        f = gfun.f(r)
        omega = 0.5 * second(r) * A_bar + f / (2 * r) * (trA - A_bar + 2 * B)
        limit = -2 * lam * (1 - tol)
        i = len(rows)
        rows.append(DriftRow(r, omega, limit - omega, A_bar, trA, B))
        if omega > limit:
            fails.append(i)
        if not (4 * lam * (1 - 1e-12) <= A_bar <= 4 * (lam + theta) * (1 + 1e-12)):
            sand.append(i)
        if B > alpha * r * r - r ** 4 / (4 * N) + 1e-9 * max(1.0, r ** 4):
            bfail.append(i)
    return DriftReport(rows, fails, sand, bfail, skipped, consts)


# -- coupled simulation against the G bound ------------------------------------


@dataclass
class BoundComparison:
    distance: float
    mean_T: float
    se: float
    bound: float
    n_paths: int
    n_censored: int

    @property
    def ok(self) -> bool:
        return self.n_censored == 0 and self.mean_T <= self.bound + 3 * self.se


def mf_coupled_simulate(params: MeanFieldParams, pairs, cfg: SimConfig, k: int = 0, *,
                        model: ModelSpec | None = None, gfun: GFunction | None = None,
                        workers: int = 1) -> list[BoundComparison]:
    """Frozen-regime split coupling from each ``(x, y)``; mean meeting time vs ``G(|x-y|)/(2 lam)``.

    ``cfg.n_paths`` paths are run per pair.
    """
    m = model or mf_model(params)
    gfun = gfun or GFunction(split_constants(params).gparams)
    coupler = LambdaSplitCoupler(params)
    out = []
    for j, (x, y) in enumerate(pairs):
        x = np.asarray(x, dtype=float).reshape(params.N)
        y = np.asarray(y, dtype=float).reshape(params.N)
        phi = HistorySegment.constant(x, cfg.dt, cfg.dt)
        psi = HistorySegment.constant(y, cfg.dt, cfg.dt)
        batch: CoupledBatch = simulate_coupled_batch(
            m, [(phi, k, psi, k)], cfg, workers=workers, stop_at="meet", coupler=coupler,
            frozen=True, first_path=j * cfg.n_paths)
        T = batch.T_hat
        cens = int(np.sum(~np.isfinite(T)))
        Tc = np.where(np.isfinite(T), T, cfg.horizon)
        dist = float(np.linalg.norm(x - y))
        out.append(BoundComparison(dist, float(Tc.mean()), float(Tc.std(ddof=1) / math.sqrt(Tc.size))
                                   if Tc.size > 1 else 0.0,
                                   gfun.G(dist) / (2 * params.lam), Tc.size, cens))
    return out


def write_g_table(gfun: GFunction, rhos, path) -> None:
    Gs = gfun.G_many(rhos)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rho", "f", "G"])
        for r, G in zip(rhos, Gs):
            w.writerow([fmt_real(r), fmt_real(gfun.f(r)), fmt_real(G)])


# -- logistic and OU models ---------------------------------------------------


def constant_rates(Q) -> Callable[[HistorySegment, int], dict[int, float]]:
    """Segment-independent rates from a square matrix (diagonal ignored)."""
    Q = np.asarray(Q, dtype=float)
    rows = [{l: float(Q[k, l]) for l in range(Q.shape[1]) if l != k and Q[k, l] != 0}
            for k in range(Q.shape[0])]
    return lambda segment, k: rows[k]


def _row_bound(Q) -> float:
    Q = np.asarray(Q, dtype=float)
    off = Q - np.diag(np.diag(Q))
    return float(max(off.sum(axis=1).max(), 1e-12))


def logistic_model(a, b, sigma, Q=None, rates=None, rate_bound: float | None = None) -> ModelSpec:
    """``dX = X (a - b X) dt + sigma X dB`` per regime, clamped at 0."""
    a, b, sigma = (np.asarray(v, dtype=float) for v in (a, b, sigma))
    if np.any(a <= 0) or np.any(b <= 0) or np.any(sigma < 0):
        raise ValidationError("a, b must be positive and sigma nonnegative")
    if rates is None:
        Q = np.zeros((a.size, a.size)) if Q is None else Q
        rates, rate_bound = constant_rates(Q), _row_bound(Q)

    def drift(x, k):
        return x * (a[k][:, None] - b[k][:, None] * x)

    def diffusion(x, k):
        return (sigma[k][:, None] * x)[:, :, None]

    return ModelSpec(1, drift, diffusion, rates, rate_bound, n_regimes=a.size,
                     project=lambda x: np.maximum(x, 0.0), name="logistic")


@dataclass
class OUOracle:
    """Gaussian facts for the frozen-regime OU dynamics ``dX = -theta X dt + sigma dB``."""

    theta: np.ndarray
    sigma: np.ndarray
    Q: np.ndarray = field(repr=False)

    def stationary_variance(self, k: int) -> float:
        return float(self.sigma[k] ** 2 / (2 * self.theta[k]))

    def stationary_density(self, x, k: int) -> np.ndarray:
        v = self.stationary_variance(k)
        x = np.asarray(x, dtype=float)
        return np.exp(-x * x / (2 * v)) / math.sqrt(2 * math.pi * v)

    def frozen_moments(self, x0: float, k: int, t: float) -> tuple[float, float]:
        """Mean and variance at time ``t`` from ``x0`` with the regime held at ``k``."""
        e = math.exp(-self.theta[k] * t)
        return x0 * e, self.stationary_variance(k) * (1 - e * e)

    def regime_occupancy(self) -> np.ndarray:
        """Stationary law of the constant-rate chain."""
        Q = np.array(self.Q, dtype=float)
        np.fill_diagonal(Q, 0.0)
        np.fill_diagonal(Q, -Q.sum(axis=1))
        n = Q.shape[0]
        A = np.vstack([Q.T, np.ones(n)])
        rhs = np.zeros(n + 1)
        rhs[-1] = 1.0
        return np.linalg.lstsq(A, rhs, rcond=None)[0]


def ou_benchmark(theta, sigma, Q) -> tuple[ModelSpec, OUOracle]:
    """One-dimensional OU model with per-regime ``theta``, ``sigma`` and constant rates ``Q``."""
    theta = np.asarray(theta, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if np.any(theta <= 0) or np.any(sigma < 0):
        raise ValidationError("theta must be positive and sigma nonnegative")
    if Q.shape != (theta.size, theta.size):
        raise ValidationError("Q must be square with one row per regime")

    def drift(x, k):
        return -theta[k][:, None] * x

    def diffusion(x, k):
        return np.broadcast_to(sigma[k][:, None, None], (x.shape[0], 1, 1)).copy()

    m = ModelSpec(1, drift, diffusion, constant_rates(Q), _row_bound(Q), n_regimes=theta.size,
                  name="ou")
    return m, OUOracle(theta, sigma, Q)
