"""Switching-chain construction and hybrid path simulation.

The regime clock is a Poisson process of intensity ``H`` (the global rate
bound).  At each candidate time a uniform ``z`` on ``[0, H)`` is located in the
consecutive intervals of length ``q_{kl}(phi)``; landing in the interval of
``l`` switches to ``l``, landing past the row total leaves the regime alone.

On the simulation grid a candidate falling in ``(t_n, t_{n+1}]`` is evaluated
with the segment at ``t_n`` and takes effect at ``t_{n+1}``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import (
    HistorySegment,
    ModelSpec,
    SimConfig,
    as_rate_row,
    display_regime,
)
from .errors import RateBoundError, ShapeError, ValidationError
from .streams import JUMPS, NoiseBuffer, path_generator, run_blocks


@dataclass
class IntervalTable:
    source: int
    intervals: list[tuple[int, float, float]]

    @property
    def total(self) -> float:
        return self.intervals[-1][2] if self.intervals else 0.0


def build_intervals(rate_row, i: int) -> IntervalTable:
    """Lay the positive rates of a row end to end on ``[0, q_i)``, targets ascending."""
    row = as_rate_row(rate_row, source=i)
    intervals = []
    lo = 0.0
    for l, q in row:
        if q < 0 or not math.isfinite(q):
            raise ValidationError(f"invalid rate {q!r} to target {l}")
        if q == 0:
            continue
        hi = lo + q
        intervals.append((l, lo, hi))
        lo = hi
    return IntervalTable(i, intervals)


def h_eval(table: IntervalTable, i: int, z: float) -> int:
    """Displacement ``j - i`` if ``z`` falls in the interval of ``j``, else 0."""
    for j, lo, hi in table.intervals:
        if lo <= z < hi:
            return j - i
    return 0


def _check_bound(table: IntervalTable, H: float) -> None:
    if table.total > H * (1 + 1e-12):
        raise RateBoundError(
            f"rate row of regime {display_regime(table.source)} sums to "
            f"{table.total:.17g}, above the bound H={H:.17g}"
        )


def next_switch_thinning(rates: Callable[[HistorySegment, int], object],
                         segment_at: Callable[[float], HistorySegment], k: int, H: float,
                         t0: float, t_max: float, rng: np.random.Generator):
    """First accepted switch in ``(t0, t_max]`` by thinning a rate-``H`` clock.

    Returns ``(time, new_regime)`` or ``None``.
    """
    t = t0
    while True:
        t += rng.exponential(1.0 / H)
        if t > t_max:
            return None
        table = build_intervals(rates(segment_at(t), k), k)
        _check_bound(table, H)
        step = h_eval(table, k, rng.random() * H)
        if step:
            return t, k + step


@dataclass
class HybridPath:
    """A simulated path on the time grid plus its switch events."""

    t: np.ndarray
    x: np.ndarray
    regime: np.ndarray
    events: list[tuple[float, int, int]] = field(default_factory=list)
    diverged: bool = False
    fail_time: float | None = None

    def to_csv(self, path, events_path=None) -> None:
        write_path_csv(self, path)
        if events_path is not None:
            write_events_csv(self, events_path)



def fmt_real(v: float) -> str:
    """17 significant digits, '.' decimal point."""
    return f"{float(v):.17g}"


def write_path_csv(p: HybridPath, path) -> None:
    d = p.x.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"x_{i + 1}" for i in range(d)] + ["lambda"])
        for t, x, k in zip(p.t, p.x, p.regime):
            w.writerow([fmt_real(t)] + [fmt_real(v) for v in x] + [display_regime(k)])


def write_events_csv(p: HybridPath, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "from", "to"])
        for t, a, b in p.events:
            w.writerow([fmt_real(t), display_regime(a), display_regime(b)])


class SegmentRing:
    """Ring buffer of ``n`` history segments advancing in lockstep."""

    def __init__(self, segments: Sequence[HistorySegment]):
        first = segments[0]
        self.delay, self.dt = first.delay, first.dt
        self.L = first.steps + 1
        self.buf = np.empty((len(segments), self.L, first.dim))
        for i, s in enumerate(segments):
            if s.points.shape != first.points.shape or not math.isclose(s.dt, first.dt):
                raise ShapeError("initial segments must share one grid")
            self.buf[i] = s.points
        self.head = self.L - 1

    def current(self, rows) -> np.ndarray:
        return self.buf[rows, self.head]

    def push(self, rows, values: np.ndarray) -> None:
        nxt = (self.head + 1) % self.L
        # inactive rows keep their last value so the ring stays consistent
        self.buf[:, nxt] = self.buf[:, self.head]
        self.buf[rows, nxt] = values
        self.head = nxt

    def segment(self, i: int, head_time: float) -> HistorySegment:
        h = self.head + 1
        row = self.buf[i]
        pts = np.concatenate((row[h:], row[:h])) if h < self.L else row.copy()
        return HistorySegment._trusted(self.delay, self.dt, pts, head_time)


def apply_step(x: np.ndarray, drift: np.ndarray, sig: np.ndarray, dw: np.ndarray,
               dt: float, sqdt: float) -> np.ndarray:
    """One Euler-Maruyama step; ``dw`` holds standard normals."""
    return x + drift * dt + (sig * dw[:, None, :]).sum(axis=2) * sqdt


def _diverged_rows(x: np.ndarray, cap: float | None) -> np.ndarray:
    bad = ~np.all(np.isfinite(x), axis=1)
    if cap is not None:
        with np.errstate(invalid="ignore", over="ignore"):
            bad |= np.linalg.norm(x, axis=1) > cap
    return bad


@dataclass
class MarginalBatch:
    """Results of a marginal batch: states at the requested sampling steps."""

    sample_steps: np.ndarray
    x: np.ndarray          # (n, n_samples, d)
    regime: np.ndarray     # (n, n_samples)
    diverged: np.ndarray
    fail_step: np.ndarray
    n_switches: np.ndarray


class _MarginalEngine:
    def __init__(self, m: ModelSpec, segments, regimes, cfg: SimConfig, paths,
                 record: bool = False, sample_steps=None, frozen: bool = False):
        cfg.check_delay(segments[0].delay)
        if segments[0].dim != m.dim:
            raise ShapeError("segment dimension does not match the model")
        if not math.isclose(segments[0].dt, cfg.dt):
            raise ShapeError("initial segment grid does not match cfg.dt")
        self.m, self.cfg = m, cfg
        self.n = len(paths)
        self.ring = SegmentRing(segments)
        self.x = self.ring.current(slice(None)).copy()
        self.k = np.asarray(regimes, dtype=np.int64).copy()
        self.noise = NoiseBuffer(cfg.seed, paths, m.dim)
        self.frozen = frozen
        self.H = m.rate_bound
        if frozen:
            self.jump_gens = None
            self.next_cand = np.full(self.n, np.inf)
        else:
            self.jump_gens = [path_generator(cfg.seed, p, JUMPS) for p in paths]
            self.next_cand = np.array([g.exponential(1.0 / self.H) for g in self.jump_gens])
        self.diverged = np.zeros(self.n, dtype=bool)
        self.fail_step = np.full(self.n, -1, dtype=np.int64)
        self.n_switches = np.zeros(self.n, dtype=np.int64)
        self.record = record
        self.events: list[list] = [[] for _ in range(self.n)]
        self.sample_steps = np.asarray(sorted(set(sample_steps or [])), dtype=np.int64)

    def _switch(self, i: int, step: int, t_next: float) -> None:
        seg = None
        k = int(self.k[i])
        g = self.jump_gens[i]
        while self.next_cand[i] <= t_next:
            if seg is None:
                seg = self.ring.segment(i, step * self.cfg.dt)
            table = build_intervals(self.m.rates(seg, k), k)
            _check_bound(table, self.H)
            h = h_eval(table, k, g.random() * self.H)
            if h:
                if self.record:
                    self.events[i].append((t_next, k, k + h))
                k += h
                self.n_switches[i] += 1
            self.next_cand[i] += g.exponential(1.0 / self.H)
        self.k[i] = k

    def run(self):
        cfg, m = self.cfg, self.m
        dt, sqdt = cfg.dt, math.sqrt(cfg.dt)
        n_steps = cfg.n_steps
        if self.sample_steps.size and self.sample_steps[-1] > n_steps:
            raise ValidationError("sample time beyond the horizon")
        xs = np.empty((self.n, self.sample_steps.size, m.dim))
        ks = np.empty((self.n, self.sample_steps.size), dtype=np.int64)
        si = 0
        if self.record:
            rec_x = np.empty((n_steps + 1, m.dim))
            rec_k = np.empty(n_steps + 1, dtype=np.int64)
            rec_x[0], rec_k[0] = self.x[0], self.k[0]
        if si < self.sample_steps.size and self.sample_steps[si] == 0:
            xs[:, si], ks[:, si] = self.x, self.k
            si += 1
        rows = np.arange(self.n)
        for step in range(n_steps):
            t_next = (step + 1) * dt
            a = rows[~self.diverged]
            xa, ka = self.x[a], self.k[a]
            dw = self.noise.take(a, step)
            xn = apply_step(xa, m.drift(xa, ka), m.diffusion(xa, ka), dw, dt, sqdt)
            if m.project is not None:
                xn = m.project(xn)
            if not self.frozen:
                due = a[self.next_cand[a] <= t_next]
                for i in due:
                    self._switch(int(i), step, t_next)
            bad = _diverged_rows(xn, cfg.state_cap)
            if bad.any():
                self.diverged[a[bad]] = True
                self.fail_step[a[bad]] = step + 1
                xn = np.where(bad[:, None], xa, xn)
            self.x[a] = xn
            self.ring.push(a, xn)
            if self.record:
                rec_x[step + 1], rec_k[step + 1] = self.x[0], self.k[0]
            while si < self.sample_steps.size and self.sample_steps[si] == step + 1:
                xs[:, si], ks[:, si] = self.x, self.k
                si += 1
            if self.diverged.all():
                break
        if self.record:
            last = n_steps if not self.diverged[0] else int(self.fail_step[0]) - 1
            t = np.arange(last + 1) * dt
            return HybridPath(t, rec_x[: last + 1], rec_k[: last + 1], self.events[0],
                              bool(self.diverged[0]),
                              None if not self.diverged[0] else self.fail_step[0] * dt)
        return MarginalBatch(self.sample_steps, xs, ks, self.diverged.copy(),
                             self.fail_step.copy(), self.n_switches.copy())


def simulate_hybrid(m: ModelSpec, init_segment: HistorySegment, init_regime: int,
                    cfg: SimConfig, path_index: int = 0) -> HybridPath:
    """Euler-Maruyama path with thinning-driven regime switches.

    Randomness comes from the streams of ``(cfg.seed, path_index)``, so the
    result is bit-for-bit reproducible.  A path whose state leaves
    ``cfg.state_cap`` or becomes non-finite stops and is flagged as diverged.
    """
    eng = _MarginalEngine(m, [init_segment], [init_regime], cfg, [path_index], record=True)
    return eng.run()


def _merge_marginal(parts: list[MarginalBatch]) -> MarginalBatch:
    return MarginalBatch(
        parts[0].sample_steps,
        np.concatenate([p.x for p in parts]),
        np.concatenate([p.regime for p in parts]),
        np.concatenate([p.diverged for p in parts]),
        np.concatenate([p.fail_step for p in parts]),
        np.concatenate([p.n_switches for p in parts]),
    )


def simulate_batch(m: ModelSpec, init_segment: HistorySegment, init_regime: int,
                   cfg: SimConfig, sample_times: Sequence[float], *, workers: int = 1,
                   frozen: bool = False, first_path: int = 0) -> MarginalBatch:
    """Simulate ``cfg.n_paths`` paths from one initial condition.

    Only the states at ``sample_times`` (rounded to the grid) are kept.
    Path ``i`` uses the streams of path index ``first_path + i``.
    """
    steps = sorted({int(round(t / cfg.dt)) for t in sample_times})

    def task(a, b):
        paths = range(first_path + a, first_path + b)
        eng = _MarginalEngine(m, [init_segment] * (b - a), [init_regime] * (b - a), cfg,
                              paths, sample_steps=steps, frozen=frozen)
        return eng.run()

    return _merge_marginal(run_blocks(task, cfg.n_paths, workers))
