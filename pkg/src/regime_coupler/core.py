"""Model types for regime-switching diffusions with history-dependent rates.

Regimes are plain integers, 0-based inside the library. Everything written to
disk or shown to a user is shifted to 1-based (see :func:`display_regime`).

Model callbacks are batched over paths:

* ``drift(x, k)`` gets ``x`` of shape ``(n, d)`` and integer ``k`` of shape
  ``(n,)`` and returns ``(n, d)``;
* ``diffusion(x, k)`` returns ``(n, d, d)``;
* ``rates(segment, k)`` is called for a single path at a time, with a
  :class:`HistorySegment` and an ``int`` regime, and returns the sparse
  off-diagonal rate row as a mapping ``{l: q}`` or a sequence of ``(l, q)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    ModelFaultError,
    NumericOverflowError,
    ShapeError,
    ValidationError,
)

RateRow = list  # list[tuple[int, float]], ascending in target


def display_regime(k: int) -> int:
    """Convert an internal 0-based regime id to the 1-based form used in I/O."""
    return int(k) + 1


def grid_count(delay: float, dt: float) -> int:
    """Number of dt-steps in the delay window; rejects non-dividing steps."""
    if not (dt > 0 and math.isfinite(dt)):
        raise ValidationError(f"dt must be positive and finite, got {dt!r}")
    if not (delay > 0 and math.isfinite(delay)):
        raise ValidationError(f"delay must be positive and finite, got {delay!r}")
    n = round(delay / dt)
    if n < 1 or abs(n * dt - delay) > 1e-9 * max(delay, 1.0):
        raise ValidationError(f"dt={dt!r} does not divide delay r={delay!r}")
    return n


@dataclass(frozen=True)
class HistorySegment:
    """Path values on the uniform grid ``t - r, t - r + dt, ..., t``.

    ``points[0]`` is the oldest value and ``points[-1]`` the current one.
    """

    delay: float
    dt: float
    points: np.ndarray
    head_time: float = 0.0

    def __post_init__(self):
        n = grid_count(self.delay, self.dt)
        pts = np.array(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] != n + 1:
            raise ShapeError(
                f"segment needs {n + 1} points of dimension d, got shape {pts.shape}"
            )
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @classmethod
    def _trusted(cls, delay: float, dt: float, points: np.ndarray, head_time: float) -> "HistorySegment":
        # internal fast path: grid already validated by the caller
        seg = object.__new__(cls)
        object.__setattr__(seg, "delay", delay)
        object.__setattr__(seg, "dt", dt)
        object.__setattr__(seg, "points", points)
        object.__setattr__(seg, "head_time", head_time)
        return seg

    @classmethod
    def constant(cls, value, delay: float, dt: float, head_time: float = 0.0) -> "HistorySegment":
        v = np.atleast_1d(np.asarray(value, dtype=float))
        n = grid_count(delay, dt)
        return cls(delay, dt, np.tile(v, (n + 1, 1)), head_time)

    @classmethod
    def from_function(cls, fn: Callable[[float], Sequence[float]], delay: float, dt: float,
                      head_time: float = 0.0) -> "HistorySegment":
        """Sample ``fn(s)`` for ``s`` in ``[-r, 0]`` (relative to the head)."""
        n = grid_count(delay, dt)
        s = (np.arange(n + 1) - n) * dt
        pts = np.array([np.atleast_1d(fn(si)) for si in s], dtype=float)
        return cls(delay, dt, pts, head_time)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def steps(self) -> int:
        return self.points.shape[0] - 1

    @property
    def current(self) -> np.ndarray:
        return self.points[-1]

    @property
    def times(self) -> np.ndarray:
        return self.head_time + (np.arange(self.steps + 1) - self.steps) * self.dt

    def norm(self) -> float:
        """Sup norm: the largest Euclidean norm among the stored points."""
        return float(np.max(np.linalg.norm(self.points, axis=1)))

    def mean(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def at(self, time: float) -> np.ndarray:
        """Value at an absolute time inside the window, linearly interpolated."""
        u = (time - self.head_time) / self.dt + self.steps
        if u < -1e-9 or u > self.steps + 1e-9:
            raise ValidationError(
                f"time {time!r} outside window [{self.head_time - self.delay}, {self.head_time}]"
            )
        u = min(max(u, 0.0), float(self.steps))
        i = min(int(math.floor(u)), self.steps - 1)
        w = u - i
        return (1.0 - w) * self.points[i] + w * self.points[i + 1]


def segment_push(seg: HistorySegment, x) -> HistorySegment:
    """Drop the oldest point, append ``x`` and advance the head by one step."""
    v = np.atleast_1d(np.asarray(x, dtype=float))
    if v.shape != (seg.dim,):
        raise ShapeError(f"expected a point of dimension {seg.dim}, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise NumericOverflowError(f"cannot push non-finite value {v!r}")
    pts = np.vstack([seg.points[1:], v[None, :]])
    return HistorySegment(seg.delay, seg.dt, pts, seg.head_time + seg.dt)


def segment_distance(a: HistorySegment, b: HistorySegment) -> float:
    """Sup-norm distance between two segments on the same grid."""
    if a.points.shape != b.points.shape or not math.isclose(a.dt, b.dt) \
            or not math.isclose(a.delay, b.delay):
        raise ShapeError("segments live on different grids")
    return float(np.max(np.linalg.norm(a.points - b.points, axis=1)))


def as_rate_row(raw, source: int | None = None) -> RateRow:
    """Normalise a rate callback result to an ascending list of ``(l, q)``."""
    items = raw.items() if hasattr(raw, "items") else raw
    row: dict[int, float] = {}
    for l, q in items:
        l = int(l)
        if l in row:
            raise ValidationError(f"duplicate target {l} in rate row")
        row[l] = float(q)
    if source is not None and source in row:
        raise ValidationError(f"rate row of regime {source} contains its own diagonal")
    return sorted(row.items())


@dataclass
class LyapunovSpec:
    """A per-regime Lyapunov function ``V(x, k)`` with growth constants.

    ``grad`` and ``hess`` are optional; central differences with step
    ``fd_step`` are used when they are missing.
    """

    V: Callable[[np.ndarray, int], float]
    gamma: Sequence[float] | float
    grad: Callable[[np.ndarray, int], np.ndarray] | None = None
    hess: Callable[[np.ndarray, int], np.ndarray] | None = None
    fd_step: float = 1e-4

    def gamma_of(self, k: int) -> float:
        if np.ndim(self.gamma) == 0:
            return float(self.gamma)
        return float(self.gamma[k])


@dataclass
class ModelSpec:
    """Drift, diffusion and history-dependent switching rates of a hybrid SDE."""

    dim: int
    drift: Callable[[np.ndarray, np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray, np.ndarray], np.ndarray]
    rates: Callable[[HistorySegment, int], object]
    rate_bound: float
    n_regimes: int | None = None
    project: Callable[[np.ndarray], np.ndarray] | None = None
    name: str = "model"
    lyapunov: LyapunovSpec | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if int(self.dim) < 1:
            raise ValidationError(f"dim must be a positive integer, got {self.dim!r}")
        if not (self.rate_bound > 0 and math.isfinite(self.rate_bound)):
            raise ValidationError(f"rate bound H must be positive, got {self.rate_bound!r}")
        if self.n_regimes is not None and int(self.n_regimes) < 1:
            raise ValidationError("n_regimes must be positive when given")

    def drift_at(self, x, k: int) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(1, self.dim)
        return np.asarray(self.drift(x, np.array([k])), dtype=float).reshape(self.dim)

    def diffusion_at(self, x, k: int) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(1, self.dim)
        out = np.asarray(self.diffusion(x, np.array([k])), dtype=float)
        return out.reshape(self.dim, self.dim)

    def rate_row(self, segment: HistorySegment, k: int) -> RateRow:
        return as_rate_row(self.rates(segment, int(k)), source=int(k))


@dataclass
class SimConfig:
    """Discretisation and sampling settings for a simulation run."""

    dt: float
    horizon: float
    n_paths: int = 1
    seed: int = 0
    meet_eps: float | None = None
    state_cap: float | None = None

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValidationError(f"dt must be positive, got {self.dt!r}")
        if not (self.horizon >= self.dt):
            raise ValidationError("horizon must be at least dt")
        if int(self.n_paths) < 1:
            raise ValidationError("n_paths must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise ValidationError("seed must fit in an unsigned 64-bit integer")
        if self.meet_eps is None:
            self.meet_eps = 1e-2 * math.sqrt(self.dt)
        if not self.meet_eps > 0:
            raise ValidationError("meet_eps must be positive")
        if self.state_cap is not None and not self.state_cap > 0:
            raise ValidationError("state_cap must be positive when given")
        self.n_paths = int(self.n_paths)
        self.seed = int(self.seed)

    @property
    def n_steps(self) -> int:
        return int(math.floor(self.horizon / self.dt + 1e-9))

    def check_delay(self, delay: float) -> int:
        """Validate ``dt <= r`` and exact division; return r / dt."""
        if self.dt > delay * (1 + 1e-12):
            raise ValidationError(f"dt={self.dt} exceeds the delay r={delay}")
        return grid_count(delay, self.dt)


@dataclass
class Violation:
    kind: str
    regime: int
    detail: str
    norm: float = float("nan")


@dataclass
class ValidationReport:
    n_checked: int
    violations: list[Violation] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations


def random_segments(rng: np.random.Generator, n: int, dim: int, delay: float, dt: float,
                    scale: float = 3.0) -> list[HistorySegment]:
    """Random rough segments: a Gaussian start plus a Brownian excursion."""
    steps = grid_count(delay, dt)
    out = []
    for _ in range(n):
        start = rng.normal(0.0, scale, size=dim)
        incr = rng.normal(0.0, scale * math.sqrt(dt / delay), size=(steps, dim))
        pts = np.vstack([start[None, :], start + np.cumsum(incr, axis=0)])
        out.append(HistorySegment(delay, dt, pts))
    return out


def _call(fn, what: str, **inputs):
    try:
        return fn(*inputs.values())
    except Exception as exc:  # user code; re-raise with the offending input
        raise ModelFaultError(f"{what} callback raised {exc!r}", inputs=inputs) from exc


def validate_model(m: ModelSpec, n_samples: int, rng_seed: int = 0, *, delay: float = 1.0,
                   dt: float = 0.1, scale: float = 3.0, max_regime: int = 10) -> ValidationReport:
    """Spot-check rate rows and coefficients at random segments and regimes.

    An empty violation list means the model passed at the sampled points only.
    """
    if n_samples < 1:
        raise ValidationError("n_samples must be at least 1")
    rng = np.random.default_rng(rng_seed)
    n_reg = m.n_regimes if m.n_regimes is not None else max_regime
    report = ValidationReport(n_checked=n_samples)
    segments = random_segments(rng, n_samples, m.dim, delay, dt, scale)
    regimes = rng.integers(0, n_reg, size=n_samples)
    H = m.rate_bound
    for seg, k in zip(segments, regimes):
        k = int(k)
        raw = _call(m.rates, "rates", segment=seg, k=k)
        items = list(raw.items()) if isinstance(raw, Mapping) else list(raw)
        total = 0.0
        for l, q in items:
            l, q = int(l), float(q)
            if l == k:
                report.violations.append(Violation(
                    "diagonal-entry", k, f"diagonal entry present at k={k + 1}", seg.norm()))
            if not math.isfinite(q):
                report.violations.append(Violation(
                    "nonfinite-rate", k, f"non-finite rate to l={l + 1} at k={k + 1}", seg.norm()))
                continue
            if q < 0:
                report.violations.append(Violation(
                    "negative-rate", k, f"negative rate {q:g} to l={l + 1} at k={k + 1}", seg.norm()))
            if l != k:
                total += q
        if total > H:
            report.violations.append(Violation(
                "row-sum", k, f"row sum {total:g} > H={H:g} at k={k + 1}", seg.norm()))
        x = seg.current
        b = _call(m.drift_at, "drift", x=x, k=k)
        s = _call(m.diffusion_at, "diffusion", x=x, k=k)
        if not np.all(np.isfinite(b)):
            report.violations.append(Violation(
                "nonfinite-drift", k, f"non-finite drift at k={k + 1}", seg.norm()))
        if not np.all(np.isfinite(s)):
            report.violations.append(Violation(
                "nonfinite-diffusion", k, f"non-finite diffusion at k={k + 1}", seg.norm()))
    return report


def _fd_grad_hess(V, x: np.ndarray, k: int, h: float):
    d = x.size
    g = np.empty(d)
    Hm = np.empty((d, d))
    v0 = V(x, k)
    eye = np.eye(d) * h
    for i in range(d):
        vp, vm = V(x + eye[i], k), V(x - eye[i], k)
        g[i] = (vp - vm) / (2 * h)
        Hm[i, i] = (vp - 2 * v0 + vm) / h**2
        for j in range(i):
            val = (V(x + eye[i] + eye[j], k) - V(x + eye[i] - eye[j], k)
                   - V(x - eye[i] + eye[j], k) + V(x - eye[i] - eye[j], k)) / (4 * h * h)
            Hm[i, j] = Hm[j, i] = val
    return g, Hm


@dataclass
class LyapunovReport:
    n_checked: int
    flagged: list[dict] = field(default_factory=list)
    fd_failures: list[dict] = field(default_factory=list)
    growth_failures: list[dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not (self.flagged or self.fd_failures or self.growth_failures)


def generator_value(m: ModelSpec, L: LyapunovSpec, x, k: int) -> float:
    """``1/2 tr(sigma sigma^T D^2 V) + <b, DV>`` at a single point."""
    x = np.asarray(x, dtype=float).reshape(m.dim)
    if L.grad is not None and L.hess is not None:
        g = np.asarray(L.grad(x, k), dtype=float)
        Hm = np.asarray(L.hess(x, k), dtype=float)
    else:
        g, Hm = _fd_grad_hess(L.V, x, k, L.fd_step)
    s = m.diffusion_at(x, k)
    a = s @ s.T
    return float(0.5 * np.sum(a * Hm) + m.drift_at(x, k) @ g)


def lyapunov_check(m: ModelSpec, L: LyapunovSpec, samples: Iterable[tuple], *,
                   rays: int = 8, seed: int = 0) -> LyapunovReport:
    """Flag sampled ``(x, k)`` where the generator of ``V`` exceeds ``gamma_k (1 + V)``.

    Also checks that ``V`` grows along a few random rays, the sampled stand-in
    for ``V -> infinity`` as ``|x| -> infinity``.
    """
    samples = list(samples)
    report = LyapunovReport(n_checked=len(samples))
    for x, k in samples:
        x = np.asarray(x, dtype=float).reshape(m.dim)
        k = int(k)
        lv = generator_value(m, L, x, k)
        v = float(L.V(x, k))
        bound = L.gamma_of(k) * (1.0 + v)
        if not (math.isfinite(lv) and math.isfinite(v)):
            report.fd_failures.append({"x": x.tolist(), "k": k, "LV": lv, "V": v})
        elif lv > bound:
            report.flagged.append({"x": x.tolist(), "k": k, "LV": lv, "bound": bound})
    regimes = sorted({int(k) for _, k in samples}) or [0]
    rng = np.random.default_rng(seed)
    radii = np.array([1.0, 10.0, 100.0, 1000.0])
    for _ in range(rays):
        u = rng.normal(size=m.dim)
        u /= np.linalg.norm(u)
        for k in regimes:
            vals = [float(L.V(r * u, k)) for r in radii]
            if not all(b > a for a, b in zip(vals, vals[1:])):
                report.growth_failures.append({"direction": u.tolist(), "k": k, "V": vals})
    return report
