"""Coupled pairs of hybrid paths.

Two copies ``(X, k)`` and ``(Y, l)`` are driven jointly:

* equal regimes, distinct points: reflection coupling, the second copy's
  noise is mirrored across the hyperplane orthogonal to ``x - y``;
* equal regimes, equal points: march coupling, identical noise;
* different regimes: independent noises.

Regimes jump together through the basic coupling of the two rate rows, which
puts as much mass as possible on simultaneous jumps to a common regime while
keeping both marginal chains intact.  A shared clock of intensity ``2H``
proposes candidates for both copies.

Once the copies sit in the same regime within ``meet_eps`` of each other they
are glued (``y := x``).  When both copies see the same noise matrix, a
reflection step is run as a maximal coupling of the two Gaussian transitions:
the copies land on the same point with the largest possible probability and
are otherwise reflected, so each copy keeps its exact one-step law and
meetings do not need to fall inside the ``meet_eps`` ball.  The meeting time is the first gluing; the coupling
time is reached after a full delay window of uninterrupted gluing, because
only then do the two history segments agree.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import HistorySegment, ModelSpec, SimConfig, as_rate_row, display_regime
from .errors import (
    DegenerateDirectionError,
    RateBoundError,
    ShapeError,
    ValidationError,
)
from .streams import JUMPS, NoiseBuffer, path_generator, run_blocks
from .switching import SegmentRing, _diverged_rows, fmt_real

# |x - y|^2 below this is treated as x = y
DIRECTION_GUARD = 1e-300

ENTER = "enter"
EXIT = "exit"


def reflection_matrix(x, y) -> np.ndarray:
    """Householder reflection ``I - 2 u u^T / |u|^2`` with ``u = x - y``."""
    u = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    nu2 = float(u @ u)
    if not nu2 >= DIRECTION_GUARD:
        raise DegenerateDirectionError("x and y coincide; use march coupling instead")
    return np.eye(u.size) - 2.0 * np.outer(u, u) / nu2


def _reflections(u: np.ndarray, use: np.ndarray) -> np.ndarray:
    """Batched reflections along the rows of ``u``; identity where ``use`` is false."""
    n, d = u.shape
    nu2 = np.einsum("ij,ij->i", u, u)
    use = use & (nu2 >= DIRECTION_GUARD)
    e = np.zeros_like(u)
    e[use] = u[use] / np.sqrt(nu2[use])[:, None]
    return np.eye(d)[None] - 2.0 * e[:, :, None] * e[:, None, :]


class ReflectionCoupler:
    """Reflection for equal regimes, independent noise otherwise.

    ``tau(m, x, k, y, l)`` returns the batched ``(n, 2d, 2d)`` matrix mapping
    a ``2d`` standard normal vector to the noise increments of ``(X, Y)``.
    """

    def width(self, d: int) -> int:
        return 2 * d

    def tau(self, m: ModelSpec, x, k, y, l) -> np.ndarray:
        n, d = x.shape
        sx = np.asarray(m.diffusion(x, k), dtype=float).reshape(n, d, d)
        sy = np.asarray(m.diffusion(y, l), dtype=float).reshape(n, d, d)
        same = k == l
        out = np.zeros((n, 2 * d, 2 * d))
        out[:, :d, :d] = sx
        refl = _reflections(x - y, same)
        out[same, d:, :d] = sy[same] @ refl[same]
        out[~same, d:, d:] = sy[~same]
        return out

    def maximal_parts(self, m: ModelSpec, x, k, y, l, dw, dt: float):
        """Pieces of the maximal reflection step; usable where ``sigma(x) = sigma(y)``.

        Returns the shared-noise displacements of both copies (zero here), the
        noise matrix of the reflected channel, its standard normal input and
        the mask of rows where the step applies.
        """
        n, d = x.shape
        sx = np.asarray(m.diffusion(x, k), dtype=float).reshape(n, d, d)
        sy = np.asarray(m.diffusion(y, l), dtype=float).reshape(n, d, d)
        ok = np.all(sx == sy, axis=(1, 2)) & (np.abs(np.linalg.det(sx)) > 0)
        zero = np.zeros((n, d))
        return zero, zero, sx, dw[:, :d], ok


REFLECTION = ReflectionCoupler()


def maximal_reflection_step(mx, my, S, xi, extra, sqdt: float):
    """Maximal coupling of ``N(mx, S S^T dt)`` and ``N(my, S S^T dt)`` with reflection.

    ``X' = mx + S xi sqrt(dt)``.  With ``z = S^{-1} (mx - my) / sqrt(dt)`` the
    copies meet (``Y' = X'``) with probability ``min(1, phi(xi + z) / phi(xi))``;
    otherwise ``Y' = my + S R xi sqrt(dt)`` with ``R`` the reflection along
    ``z``.  The two normals in ``extra`` give the uniform for the acceptance
    draw.  Returns ``(X', Y', met)``.
    """
    z = np.linalg.solve(S, (mx - my)[..., None])[..., 0] / sqdt
    # (a^2 + b^2) / 2 is Exp(1), so exp(-that) is uniform
    expo = 0.5 * np.einsum("ij,ij->i", extra, extra)
    zz = np.einsum("ij,ij->i", z, z)
    met = expo >= np.einsum("ij,ij->i", xi, z) + 0.5 * zz
    xn = mx + np.einsum("nij,nj->ni", S, xi) * sqdt
    e = np.zeros_like(z)
    pos = zz > 0
    e[pos] = z[pos] / np.sqrt(zz[pos])[:, None]
    refl = xi - 2.0 * np.einsum("ij,ij->i", e, xi)[:, None] * e
    yn = my + np.einsum("nij,nj->ni", S, refl) * sqdt
    yn[met] = xn[met]
    return xn, yn, met


def coupled_diffusion(x, k: int, y, l: int, m: ModelSpec, coupler=REFLECTION):
    """The ``2d x 2d`` coupling matrix and the ``2d`` drift at one state."""
    x = np.asarray(x, dtype=float).reshape(1, m.dim)
    y = np.asarray(y, dtype=float).reshape(1, m.dim)
    kk, ll = np.array([k]), np.array([l])
    tau = coupler.tau(m, x, kk, y, ll)[0]
    drift = np.concatenate([m.drift(x, kk)[0], m.drift(y, ll)[0]])
    return tau, drift


@dataclass
class CoupledJumpLaw:
    """Rates of the joint regime jump out of ``source``, sorted by target pair."""

    source: tuple[int, int]
    rates: list[tuple[tuple[int, int], float]]

    @property
    def total_rate(self) -> float:
        return math.fsum(q for _, q in self.rates)


def _row_dict(raw, source: int) -> dict[int, float]:
    row = dict(as_rate_row(raw, source=source))
    for l, q in row.items():
        if q < 0 or not math.isfinite(q):
            raise ValidationError(f"invalid rate {q!r} from {source} to {l}")
    return row


def coupled_jump_law(row_k, row_l, k: int, l: int) -> CoupledJumpLaw:
    """Basic coupling of the rate row of ``k`` (first copy) and of ``l`` (second)."""
    a = _row_dict(row_k, k)
    b = _row_dict(row_l, l)
    out: dict[tuple[int, int], float] = {}

    def put(pair, q):
        if q > 0:
            out[pair] = q

    if k != l:
        for mm in sorted((a.keys() | b.keys()) - {k, l}):
            am, bm = a.get(mm, 0.0), b.get(mm, 0.0)
            put((mm, l), max(am - bm, 0.0))
            put((k, mm), max(bm - am, 0.0))
            put((mm, mm), min(am, bm))
        put((l, l), a.get(l, 0.0))
        put((k, k), b.get(k, 0.0))
    else:
        for mm in sorted((a.keys() | b.keys()) - {k}):
            am, bm = a.get(mm, 0.0), b.get(mm, 0.0)
            put((mm, k), max(am - bm, 0.0))
            put((k, mm), max(bm - am, 0.0))
            put((mm, mm), min(am, bm))
    return CoupledJumpLaw((k, l), sorted(out.items()))


def diagonal_rate(law: CoupledJumpLaw) -> float:
    """Total rate of the jumps that land both copies in the same regime."""
    return math.fsum(q for (mm, nn), q in law.rates if mm == nn)


def estimate_alpha(m: ModelSpec, segments: Sequence[HistorySegment]) -> float:
    """Smallest rate of jumping onto the diagonal from distinct regimes.

    The minimum runs over ordered regime pairs ``k != l`` and over all pairs of
    the given segments, so for segment-dependent rates it is a sampled value.
    """
    n = m.n_regimes
    if n is None or n < 2:
        raise ValidationError("estimate_alpha needs a model with at least two regimes")
    best = math.inf
    for phi in segments:
        for psi in segments:
            for k in range(n):
                for l in range(n):
                    if k != l:
                        law = coupled_jump_law(m.rates(phi, k), m.rates(psi, l), k, l)
                        best = min(best, diagonal_rate(law))
    return best


def marginal_consistency_check(law: CoupledJumpLaw, row_k, row_l, tol: float = 1e-12) -> bool:
    """True iff both coordinate projections of ``law`` reproduce the input rows."""
    k, l = law.source
    a = _row_dict(row_k, k)
    b = _row_dict(row_l, l)
    first: dict[int, float] = {}
    second: dict[int, float] = {}
    for (mm, nn), q in law.rates:
        if mm != k:
            first[mm] = first.get(mm, 0.0) + q
        if nn != l:
            second[nn] = second.get(nn, 0.0) + q
    scale = max([1.0] + list(a.values()) + list(b.values()))
    for want, got in ((a, first), (b, second)):
        for target in want.keys() | got.keys():
            if abs(want.get(target, 0.0) - got.get(target, 0.0)) > tol * scale:
                return False
    return True


@dataclass
class CoupledState:
    """State of a coupled pair; times are ``None`` until reached."""

    x: np.ndarray
    k: int
    y: np.ndarray
    l: int
    glued: bool = False
    meet_time: float | None = None
    couple_time: float | None = None
    glue_start: float | None = None
    zeta: list[tuple[float, str]] = field(default_factory=list)
    diverged: bool = False
    fail_time: float | None = None


@dataclass
class CoupledPath:
    """Grid record of one coupled run plus its joint jump events."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    k: np.ndarray
    l: np.ndarray
    glued: np.ndarray
    events: list[tuple[float, tuple[int, int], tuple[int, int]]] = field(default_factory=list)

    def to_csv(self, path) -> None:
        d = self.x.shape[1]
        xs = ["x"] if d == 1 else [f"x_{i + 1}" for i in range(d)]
        ys = ["y"] if d == 1 else [f"y_{i + 1}" for i in range(d)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t"] + xs + ys + ["k", "l", "glued"])
            for i in range(self.t.size):
                w.writerow([fmt_real(self.t[i])]
                           + [fmt_real(v) for v in self.x[i]]
                           + [fmt_real(v) for v in self.y[i]]
                           + [display_regime(self.k[i]), display_regime(self.l[i]),
                              int(self.glued[i])])


@dataclass
class CoupledBatch:
    """Per-path outcomes of a coupled batch.

    Step indices are ``-1`` when the event did not happen before the run ended.
    """

    dt: float
    n_steps: int
    r_steps: int
    init_index: np.ndarray
    meet_step: np.ndarray
    couple_step: np.ndarray
    zeta: list[list[tuple[float, str]]]
    diverged: np.ndarray
    fail_step: np.ndarray
    sample_steps: np.ndarray
    x: np.ndarray
    k: np.ndarray
    y: np.ndarray
    l: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.meet_step.size

    def _times(self, steps: np.ndarray) -> np.ndarray:
        return np.where(steps >= 0, steps * self.dt, np.inf)

    @property
    def T(self) -> np.ndarray:
        """Coupling times, ``inf`` when not reached."""
        return self._times(self.couple_step)

    @property
    def T_hat(self) -> np.ndarray:
        """Meeting times, ``inf`` when not reached."""
        return self._times(self.meet_step)

    @property
    def zeta1(self) -> np.ndarray:
        """First hitting time of the diagonal, ``inf`` when not reached."""
        return np.array([z[0][0] if z else np.inf for z in self.zeta])

    @property
    def n_zeta(self) -> np.ndarray:
        return np.array([len(z) for z in self.zeta], dtype=np.int64)

    def summary_csv(self, path, first_path: int = 0) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path_id", "T_hat", "T", "n_zeta", "diverged"])
            for i, (th, tc, nz, dv) in enumerate(zip(self.T_hat, self.T, self.n_zeta,
                                                     self.diverged)):
                w.writerow([first_path + i, fmt_real(th), fmt_real(tc), int(nz), int(dv)])


STOP_RULES = (None, "T", "meet", "zeta1")


class _CoupledEngine:
    def __init__(self, m: ModelSpec, inits: Sequence[tuple], cfg: SimConfig, paths,
                 coupler=REFLECTION, frozen: bool = False, stop_at: str | None = "T",
                 record: bool = False, sample_steps=None):
        if stop_at not in STOP_RULES:
            raise ValidationError(f"stop_at must be one of {STOP_RULES}")
        first = inits[0][0]
        self.r_steps = cfg.check_delay(first.delay)
        for phi, _, psi, _ in inits:
            if phi.dim != m.dim or psi.dim != m.dim:
                raise ShapeError("segment dimension does not match the model")
            if not (math.isclose(phi.dt, cfg.dt) and math.isclose(psi.dt, cfg.dt)):
                raise ShapeError("initial segment grid does not match cfg.dt")
        self.m, self.cfg, self.coupler = m, cfg, coupler
        self.frozen, self.stop_at, self.record = frozen, stop_at, record
        self.n = len(paths)
        self.ring_x = SegmentRing([s[0] for s in inits])
        self.ring_y = SegmentRing([s[2] for s in inits])
        self.x = self.ring_x.current(slice(None)).copy()
        self.y = self.ring_y.current(slice(None)).copy()
        self.k = np.array([s[1] for s in inits], dtype=np.int64)
        self.l = np.array([s[3] for s in inits], dtype=np.int64)
        if frozen and np.any(self.k != self.l):
            raise ValidationError("a frozen-regime coupling needs equal regimes")
        # two extra normals per step feed the acceptance draw of the maximal step
        self.width = coupler.width(m.dim)
        self.noise = NoiseBuffer(cfg.seed, paths, self.width + 2)
        self.H2 = 2.0 * m.rate_bound
        if frozen:
            self.jump_gens = None
            self.next_cand = np.full(self.n, np.inf)
        else:
            self.jump_gens = [path_generator(cfg.seed, p, JUMPS) for p in paths]
            self.next_cand = np.array([g.exponential(1.0 / self.H2) for g in self.jump_gens])
        self.glued = np.zeros(self.n, dtype=bool)
        self.glue_step = np.full(self.n, -1, dtype=np.int64)
        self.meet_step = np.full(self.n, -1, dtype=np.int64)
        self.couple_step = np.full(self.n, -1, dtype=np.int64)
        self.diverged = np.zeros(self.n, dtype=bool)
        self.fail_step = np.full(self.n, -1, dtype=np.int64)
        self.done = np.zeros(self.n, dtype=bool)
        self.zeta: list[list[tuple[float, str]]] = [[] for _ in range(self.n)]
        self.n_zeta = np.zeros(self.n, dtype=np.int64)
        self.events: list[list] = [[] for _ in range(self.n)]
        self.sample_steps = np.asarray(sorted(set(sample_steps or [])), dtype=np.int64)
        if self.sample_steps.size and stop_at is not None:
            raise ValidationError("sampling states requires stop_at=None")

    # -- events ---------------------------------------------------------------

    def _glue(self, rows: np.ndarray, step: int) -> None:
        self.glued[rows] = True
        self.glue_step[rows] = step
        fresh = rows[self.meet_step[rows] < 0]
        self.meet_step[fresh] = step
        self.y[rows] = self.x[rows]

    def _after_step(self, rows: np.ndarray, step: int) -> None:
        """Coupling-time bookkeeping and stopping at the end of ``step``."""
        hit = rows[self.glued[rows] & (self.couple_step[rows] < 0)
                   & (step - self.glue_step[rows] >= self.r_steps)]
        self.couple_step[hit] = step
        if self.stop_at == "T":
            self.done[hit] = True
        elif self.stop_at == "meet":
            self.done[rows[self.meet_step[rows] >= 0]] = True
        elif self.stop_at == "zeta1":
            self.done[rows[self.n_zeta[rows] > 0]] = True

    def _jump(self, i: int, step: int, t_next: float) -> None:
        m, H2 = self.m, self.H2
        g = self.jump_gens[i]
        k, l = int(self.k[i]), int(self.l[i])
        law = None
        while self.next_cand[i] <= t_next:
            if law is None:
                t_now = step * self.cfg.dt
                phi = self.ring_x.segment(i, t_now)
                psi = self.ring_y.segment(i, t_now)
                law = coupled_jump_law(m.rates(phi, k), m.rates(psi, l), k, l)
                total = law.total_rate
                if total > H2 * (1 + 1e-12):
                    raise RateBoundError(
                        f"coupled rate {total:.17g} from regimes "
                        f"({display_regime(k)}, {display_regime(l)}) exceeds 2H={H2:.17g}")
            z = g.random() * H2
            acc = 0.0
            for pair, q in law.rates:
                acc += q
                if z < acc:
                    if self.record:
                        self.events[i].append((t_next, (k, l), pair))
                    if (pair[0] == pair[1]) != (k == l):
                        self.zeta[i].append((t_next, ENTER if pair[0] == pair[1] else EXIT))
                        self.n_zeta[i] += 1
                    k, l = pair
                    law = None
                    break
            self.next_cand[i] += g.exponential(1.0 / H2)
        self.k[i], self.l[i] = k, l
        if k != l and self.glued[i]:
            if self.couple_step[i] >= 0:
                raise AssertionError(
                    f"regimes separated after the coupling time on path {i}")
            self.glued[i] = False
            self.glue_step[i] = -1

    # -- main loop ------------------------------------------------------------

    def run(self):
        cfg, m = self.cfg, self.m
        d = m.dim
        dt, sqdt = cfg.dt, math.sqrt(cfg.dt)
        eps2 = cfg.meet_eps ** 2
        n_steps = cfg.n_steps
        if self.sample_steps.size and self.sample_steps[-1] > n_steps:
            raise ValidationError("sample time beyond the horizon")
        ns = self.sample_steps.size
        xs, ys = np.empty((self.n, ns, d)), np.empty((self.n, ns, d))
        ks, ls = np.empty((self.n, ns), dtype=np.int64), np.empty((self.n, ns), dtype=np.int64)
        si = 0

        same0 = self.k == self.l
        for i in np.flatnonzero(same0):
            self.zeta[i].append((0.0, ENTER))
        self.n_zeta[same0] = 1
        close = same0 & (np.einsum("ij,ij->i", self.x - self.y, self.x - self.y) <= eps2)
        self._glue(np.flatnonzero(close), 0)
        rows = np.arange(self.n)
        self._after_step(rows, 0)

        if self.record:
            rec = {"x": np.empty((n_steps + 1, d)), "y": np.empty((n_steps + 1, d)),
                   "k": np.empty(n_steps + 1, dtype=np.int64),
                   "l": np.empty(n_steps + 1, dtype=np.int64),
                   "g": np.zeros(n_steps + 1, dtype=bool)}
            self._record(rec, 0)
        if si < ns and self.sample_steps[si] == 0:
            xs[:, si], ys[:, si], ks[:, si], ls[:, si] = self.x, self.y, self.k, self.l
            si += 1
        last = 0
        for step in range(n_steps):
            a = rows[~(self.diverged | self.done)]
            if a.size == 0:
                break
            t_next = (step + 1) * dt
            xa, ya, ka, la = self.x[a], self.y[a], self.k[a], self.l[a]
            dw = self.noise.take(a, step)
            w = self.width
            tau = self.coupler.tau(m, xa, ka, ya, la)
            inc = np.einsum("nij,nj->ni", tau, dw[:, :w]) * sqdt
            bx, by = m.drift(xa, ka), m.drift(ya, la)
            xn = xa + bx * dt + inc[:, :d]
            yn = ya + by * dt + inc[:, d:]
            gl = self.glued[a]
            refl = (ka == la) & ~gl
            met = np.zeros(a.size, dtype=bool)
            if refl.any() and hasattr(self.coupler, "maximal_parts"):
                ri = np.flatnonzero(refl)
                cx, cy, S, xi, ok = self.coupler.maximal_parts(
                    m, xa[ri], ka[ri], ya[ri], la[ri], dw[ri, :w], dt)
                ri = ri[ok]
                if ri.size:
                    mx = xa[ri] + bx[ri] * dt + cx[ok]
                    my = ya[ri] + by[ri] * dt + cy[ok]
                    xn[ri], yn[ri], met[ri] = maximal_reflection_step(
                        mx, my, S[ok], xi[ok], dw[ri, w:w + 2], sqdt)
            if m.project is not None:
                xn, yn = m.project(xn), m.project(yn)
            yn[gl | met] = xn[gl | met]
            if not self.frozen:
                for i in a[self.next_cand[a] <= t_next]:
                    self._jump(int(i), step, t_next)
            bad = _diverged_rows(xn, cfg.state_cap) | _diverged_rows(yn, cfg.state_cap)
            if bad.any():
                self.diverged[a[bad]] = True
                self.fail_step[a[bad]] = step + 1
                xn[bad], yn[bad] = xa[bad], ya[bad]
            u1 = xn - yn
            cand = (self.k[a] == self.l[a]) & ~self.glued[a] & ~bad
            meet = cand & (met | (np.einsum("ij,ij->i", u1, u1) <= eps2))
            self.x[a], self.y[a] = xn, yn
            self.ring_x.push(a, xn)
            if meet.any():
                self._glue(a[meet], step + 1)
                yn = self.y[a]
            self.ring_y.push(a, yn)
            self._after_step(a, step + 1)
            last = step + 1
            if self.record:
                self._record(rec, step + 1)
            while si < ns and self.sample_steps[si] == step + 1:
                xs[:, si], ys[:, si] = self.x, self.y
                ks[:, si], ls[:, si] = self.k, self.l
                si += 1
        if si < ns:
            raise ValidationError("run stopped before the last sample time")
        if self.record:
            return self._single(rec, last)
        return CoupledBatch(dt, n_steps, self.r_steps, np.zeros(self.n, dtype=np.int64),
                            self.meet_step.copy(), self.couple_step.copy(), self.zeta,
                            self.diverged.copy(), self.fail_step.copy(), self.sample_steps,
                            xs, ks, ys, ls)

    def _record(self, rec, step: int) -> None:
        rec["x"][step], rec["y"][step] = self.x[0], self.y[0]
        rec["k"][step], rec["l"][step], rec["g"][step] = self.k[0], self.l[0], self.glued[0]

    def _single(self, rec, last: int):
        dt = self.cfg.dt
        if self.diverged[0]:
            last = int(self.fail_step[0]) - 1
        path = CoupledPath(np.arange(last + 1) * dt, rec["x"][: last + 1],
                           rec["y"][: last + 1], rec["k"][: last + 1], rec["l"][: last + 1],
                           rec["g"][: last + 1], self.events[0])

        def when(s):
            return None if s < 0 else int(s) * dt

        state = CoupledState(
            x=self.x[0].copy(), k=int(self.k[0]), y=self.y[0].copy(), l=int(self.l[0]),
            glued=bool(self.glued[0]), meet_time=when(self.meet_step[0]),
            couple_time=when(self.couple_step[0]), glue_start=when(self.glue_step[0]),
            zeta=list(self.zeta[0]), diverged=bool(self.diverged[0]),
            fail_time=when(self.fail_step[0]))
        return path, state


def simulate_coupled(m: ModelSpec, phi: HistorySegment, k: int, psi: HistorySegment, l: int,
                     cfg: SimConfig, path_index: int = 0, *, coupler=REFLECTION,
                     frozen: bool = False, stop_at: str | None = None):
    """One coupled run on the grid; returns ``(CoupledPath, CoupledState)``.

    Randomness comes from the streams of ``(cfg.seed, path_index)``.
    """
    eng = _CoupledEngine(m, [(phi, k, psi, l)], cfg, [path_index], coupler=coupler,
                         frozen=frozen, stop_at=stop_at, record=True)
    return eng.run()


def _merge(parts: list[CoupledBatch]) -> CoupledBatch:
    cat = np.concatenate
    p0 = parts[0]
    return CoupledBatch(
        p0.dt, p0.n_steps, p0.r_steps, cat([p.init_index for p in parts]),
        cat([p.meet_step for p in parts]), cat([p.couple_step for p in parts]),
        [z for p in parts for z in p.zeta], cat([p.diverged for p in parts]),
        cat([p.fail_step for p in parts]), p0.sample_steps,
        cat([p.x for p in parts]), cat([p.k for p in parts]),
        cat([p.y for p in parts]), cat([p.l for p in parts]))


def simulate_coupled_batch(m: ModelSpec, inits: Sequence[tuple], cfg: SimConfig, *,
                           workers: int = 1, stop_at: str | None = "T",
                           sample_times: Sequence[float] | None = None, coupler=REFLECTION,
                           frozen: bool = False, first_path: int = 0) -> CoupledBatch:
    """Run ``cfg.n_paths`` coupled paths; path ``i`` starts from ``inits[i % len(inits)]``.

    Each element of ``inits`` is ``(phi, k, psi, l)``.  Results do not depend on
    ``workers``.
    """
    if not inits:
        raise ValidationError("at least one initial pair is required")
    inits = list(inits)
    steps = sorted({int(round(t / cfg.dt)) for t in (sample_times or [])})

    def task(a, b):
        idx = [i % len(inits) for i in range(a, b)]
        eng = _CoupledEngine(m, [inits[j] for j in idx], cfg,
                             range(first_path + a, first_path + b), coupler=coupler,
                             frozen=frozen, stop_at=stop_at, sample_steps=steps)
        out = eng.run()
        out.init_index = np.asarray(idx, dtype=np.int64)
        return out

    return _merge(run_blocks(task, cfg.n_paths, workers))


# -- generator ----------------------------------------------------------------


@dataclass
class CouplingTestFunction:
    """A function of ``(x, k, y, l)`` with its gradient and Hessian in ``(x, y)``."""

    value: Callable[[np.ndarray, int, np.ndarray, int], float]
    grad: Callable[[np.ndarray, int, np.ndarray, int], np.ndarray]
    hess: Callable[[np.ndarray, int, np.ndarray, int], np.ndarray]


def coupling_generator_apply(f: CouplingTestFunction, phi: HistorySegment, k: int,
                             psi: HistorySegment, l: int, m: ModelSpec,
                             coupler=REFLECTION) -> float:
    """Generator of the coupled process applied to ``f`` at ``(phi, k, psi, l)``.

    Diffusion part ``1/2 tr(tau tau^T D^2 f) + <(b(x,k), b(y,l)), Df>`` at the
    current points, plus the coupled jump part built from both segments.
    """
    x, y = phi.current, psi.current
    tau, drift = coupled_diffusion(x, k, y, l, m, coupler)
    a_hat = tau @ tau.T
    g = np.asarray(f.grad(x, k, y, l), dtype=float)
    h = np.asarray(f.hess(x, k, y, l), dtype=float)
    diff = 0.5 * float(np.sum(a_hat * h)) + float(drift @ g)
    law = coupled_jump_law(m.rates(phi, k), m.rates(psi, l), k, l)
    f0 = f.value(x, k, y, l)
    jump = math.fsum(q * (f.value(x, mm, y, nn) - f0) for (mm, nn), q in law.rates)
    return diff + jump


def radial_generator(F1: float, F2: float, x, z, ax, az, c, bx, bz) -> float:
    """Generator of ``F(|x - z|)`` for a coupled diffusion with given covariances.

    ``ax``, ``az`` are the marginal covariances, ``c`` the cross covariance
    between the two noises and ``F1``, ``F2`` the first two derivatives of
    ``F`` at ``|x - z|``.
    """
    u = np.asarray(x, dtype=float) - np.asarray(z, dtype=float)
    rho = float(np.linalg.norm(u))
    e = u / rho
    A = ax + az - c - c.T
    a_bar = float(e @ A @ e)
    trA = float(np.trace(A))
    B = float(u @ (bx - bz))
    return 0.5 * F2 * a_bar + F1 / (2 * rho) * (trA - a_bar + 2 * B)


# -- single-regime certificate ------------------------------------------------


@dataclass
class TkCertificate:
    """Outcome of the empirical single-regime coupling-time check.

    ``table`` rows are ``(pair_index, M, p_hat, se)``.  ``M_hat`` is ``None``
    when no tested ``M`` works for every pair.
    """

    regime: int
    pairs: list[tuple[np.ndarray, np.ndarray]]
    M_grid: list[float]
    table: list[tuple[int, float, float, float]]
    M_hat: float | None
    verified: bool
    message: str
    mean_T: list[float] = field(default_factory=list)
    F_check: dict | None = None


def empirical_Tk_certificate(m: ModelSpec, k: int, cfg: SimConfig, pairs, M_grid, *,
                             delay: float | None = None, workers: int = 1, coupler=REFLECTION,
                             F=None, K: float | None = None, F_sup: float | None = None,
                             F_points=None) -> TkCertificate:
    """Estimate ``P(T < M)`` for the regime-``k`` coupling from each ``(x, y)`` pair.

    ``T`` is the meeting time of the frozen-regime coupled diffusion.  The
    reported ``M_hat`` is the smallest ``M`` in ``M_grid`` where every pair
    has ``p_hat >= 1/2 + 3 SE``.  ``cfg.n_paths`` paths are run per pair and
    ``cfg.horizon`` must cover ``max(M_grid)``.

    If ``F = (F, F1, F2)`` and ``K`` are given, the generator of ``F(|x-y|)``
    is evaluated at the points ``F_points`` (pairs of vectors) and compared
    with ``-K``; when it holds everywhere, ``E[T] <= F_sup / K`` is reported.
    """
    M_grid = sorted(float(v) for v in M_grid)
    if not M_grid or M_grid[-1] > cfg.horizon + 1e-12:
        raise ValidationError("M grid must be non-empty and within the horizon")
    d = m.dim
    pairs = [(np.asarray(x, dtype=float).reshape(d), np.asarray(y, dtype=float).reshape(d))
             for x, y in pairs]
    r = delay if delay is not None else cfg.dt
    table, ok_by_M, means = [], {M: True for M in M_grid}, []
    for j, (x, y) in enumerate(pairs):
        phi = HistorySegment.constant(x, r, cfg.dt)
        psi = HistorySegment.constant(y, r, cfg.dt)
        sub = SimConfig(cfg.dt, max(M_grid[-1], cfg.dt), cfg.n_paths,
                        cfg.seed, cfg.meet_eps, cfg.state_cap)
        batch = simulate_coupled_batch(m, [(phi, k, psi, k)], sub, workers=workers,
                                       stop_at="meet", coupler=coupler, frozen=True,
                                       first_path=j * cfg.n_paths)
        T = batch.T_hat
        means.append(float(np.mean(T)))
        n = T.size
        for M in M_grid:
            p = float(np.mean(T < M))
            se = math.sqrt(max(p * (1 - p), 0.0) / n)
            table.append((j, M, p, se))
            if p < 0.5 + 3 * se:
                ok_by_M[M] = False
    good = [M for M in M_grid if ok_by_M[M]]
    M_hat = good[0] if good else None
    cert = TkCertificate(
        regime=k, pairs=pairs, M_grid=M_grid, table=table, M_hat=M_hat,
        verified=M_hat is not None,
        message="ok" if M_hat is not None else "assumption unverified on grid",
        mean_T=means)
    if F is not None:
        cert.F_check = _f_condition(m, k, F, K, F_sup, F_points, coupler)
    return cert


def _f_condition(m: ModelSpec, k: int, F, K, F_sup, points, coupler) -> dict:
    if K is None or not K > 0 or points is None:
        raise ValidationError("the F-condition check needs K > 0 and evaluation points")
    Fv, F1, F2 = F
    d = m.dim
    worst = -math.inf
    for x, z in points:
        x = np.asarray(x, dtype=float).reshape(d)
        z = np.asarray(z, dtype=float).reshape(d)
        rho = float(np.linalg.norm(x - z))
        if rho == 0:
            continue
        tau, drift = coupled_diffusion(x, k, z, k, m, coupler)
        cov = tau @ tau.T
        val = radial_generator(F1(rho), F2(rho), x, z, cov[:d, :d], cov[d:, d:],
                               cov[:d, d:], drift[:d], drift[d:])
        worst = max(worst, val)
    ok = worst <= -K
    out = {"n_points": len(points), "max_generator": worst, "K": K, "ok": ok}
    if ok and F_sup is not None:
        out["mean_T_bound"] = F_sup / K
    return out
