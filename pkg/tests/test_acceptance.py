"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the summary lines are printed
even when output capture is on.
"""

from __future__ import annotations

import io
import math
import time

import numpy as np
import pytest

from regime_coupler.cli import Reporter, main
from regime_coupler.core import HistorySegment, ModelSpec, SimConfig
from regime_coupler.coupling import (
    CouplingTestFunction,
    coupled_jump_law,
    coupling_generator_apply,
    empirical_Tk_certificate,
    estimate_alpha,
    marginal_consistency_check,
    reflection_matrix,
    simulate_coupled_batch,
)
from regime_coupler.ergodicity import (
    geometric_tail_check,
    histogram_tv,
    polylog_bound_check,
    tail_from_samples,
    theory_constants,
)
from regime_coupler.meanfield import (
    MeanFieldParams,
    drift_condition_check,
    drift_grid,
    mf_coupled_simulate,
    ou_benchmark,
    split_constants,
)
from regime_coupler.quadrature import GFunction, GParams
from regime_coupler.switching import simulate_batch

DT = 0.01
DELAY = 0.5
SETUP_SECONDS: dict[str, float] = {}
THETA, SIGMA, Q = [1.0, 2.0], [1.0, 1.5], [[0.0, 1.0], [1.0, 0.0]]


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str, started: float) -> None:
        with capsys.disabled():
            print(f"\ncriterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}  "
                  f"[{time.perf_counter() - started:.1f} s]")
        assert ok, detail

    return emit


def seg(v, dt=DT, delay=DELAY):
    return HistorySegment.constant(v, delay, dt)


@pytest.fixture(scope="module")
def bench():
    m, oracle = ou_benchmark(THETA, SIGMA, Q)
    return m, oracle


@pytest.fixture(scope="module")
def certified(bench):
    """Certified ``M`` for both regimes and the resulting constants."""
    t0 = time.perf_counter()
    m, _ = bench
    pairs = [([-2.0], [2.0]), ([-1.0], [1.0]), ([0.0], [0.5]), ([1.0], [3.0]), ([-3.0], [1.0])]
    grid = [0.25, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0]
    cfg = SimConfig(DT, 4.0, 400, seed=101)
    certs = [empirical_Tk_certificate(m, k, cfg, pairs, grid) for k in (0, 1)]
    assert all(c.verified for c in certs), [c.message for c in certs]
    M = max(c.M_hat for c in certs)
    alpha = estimate_alpha(m, [seg(0.0)])
    SETUP_SECONDS["certificate"] = time.perf_counter() - t0
    return theory_constants(m.rate_bound, M, DELAY, alpha)


@pytest.fixture(scope="module")
def pooled_tail(bench, certified):
    t0 = time.perf_counter()
    m, _ = bench
    inits = [(seg(-2.0), 0, seg(2.0), 1), (seg(1.0), 0, seg(-1.0), 0),
             (seg(0.0), 1, seg(2.0), 0), (seg(-2.0), 1, seg(2.0), 1)]
    horizon = math.ceil(3 * certified.R) + 1.0
    batch = simulate_coupled_batch(m, inits, SimConfig(DT, horizon, 10_000, seed=202))
    T = np.where(batch.diverged, np.inf, batch.T)
    SETUP_SECONDS["tail"] = time.perf_counter() - t0
    return tail_from_samples(T, horizon)


# -- 1 ------------------------------------------------------------------------


def test_criterion_01_basic_coupling_algebra(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst, failures = 0.0, 0
    for _ in range(1000):
        n = int(rng.integers(2, 51))
        k, l = (int(v) for v in rng.integers(0, n, 2))

        def row(src):
            targets = rng.choice(n, size=int(rng.integers(0, min(n, 8) + 1)), replace=False)
            return {int(t): float(rng.uniform(0, 1)) for t in targets if t != src}

        a, b = row(k), row(l)
        law = coupled_jump_law(a, b, k, l)
        if not marginal_consistency_check(law, a, b, tol=1e-12):
            failures += 1
        keys = (a.keys() | b.keys()) - {k, l}
        expected = math.fsum(max(a.get(j, 0.0), b.get(j, 0.0)) for j in keys)
        if k != l:
            expected += a.get(l, 0.0) + b.get(k, 0.0)
        worst = max(worst, abs(law.total_rate - expected))
        if law.total_rate > sum(a.values()) + sum(b.values()) + 1e-12:
            failures += 1
    ok = failures == 0 and worst <= 1e-12 and time.perf_counter() - t0 < 5
    report(1, ok, f"1000 row pairs, {failures} failures, max rate-sum error {worst:.1e}", t0)


# -- 2 ------------------------------------------------------------------------


def test_criterion_02_reflection_algebra(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        d = int(rng.integers(1, 17))
        x, y = rng.normal(size=d), rng.normal(size=d)
        u = x - y
        Hm = reflection_matrix(x, y)
        errs = [np.abs(Hm.T @ Hm - np.eye(d)).max(), np.abs(Hm - Hm.T).max(),
                np.abs(Hm @ u + u).max() / np.linalg.norm(u)]
        if d > 1:
            v = rng.normal(size=d)
            v -= (v @ u) / (u @ u) * u
            errs.append(np.abs(Hm @ v - v).max() / max(np.linalg.norm(v), 1e-300))
        worst = max(worst, *errs)
    ok = worst <= 1e-12 and time.perf_counter() - t0 < 1
    report(2, ok, f"1000 pairs in d <= 16, max error {worst:.1e}", t0)


# -- 3 ------------------------------------------------------------------------


def test_criterion_03_closed_form_constants(report):
    t0 = time.perf_counter()
    c = theory_constants(1, 2, 1, 1)
    err = abs(c.delta2 - 0.5 * math.exp(-3))
    rng = np.random.default_rng(3)
    bad = 0
    for _ in range(1000):
        H, M, r, a = rng.uniform(0.01, 3), rng.uniform(0.01, 5), rng.uniform(0.01, 5), rng.uniform(0.01, 5)
        t = theory_constants(H, M, r, a)
        checks = [
            math.isclose(t.N, 2 / a, rel_tol=1e-14),
            math.isclose(t.delta2, 0.5 * math.exp(-H * (M + r)), rel_tol=1e-14),
            0 < t.delta2 <= 0.5,
            0.5 < t.rho < 1 and math.isclose(t.rho, 1 - t.delta2 / 2, rel_tol=1e-15),
            math.isclose(t.R, M + r + 2 / a, rel_tol=1e-14),
            math.isclose(t.R_hat, 2 * t.R / t.delta2, rel_tol=1e-14),
            math.isclose(t.beta_lb, 1 / t.R_hat, rel_tol=1e-12),
        ]
        bad += not all(checks)
    ok = err <= 1e-12 and bad == 0 and time.perf_counter() - t0 < 1
    report(3, ok, f"delta2 error {err:.1e}, {bad} invariant failures in 1000 inputs", t0)


# -- 4, 5 ---------------------------------------------------------------------


def test_criterion_04_coupling_time_lower_bound(report, certified, pooled_tail):
    t0 = time.perf_counter() - sum(SETUP_SECONDS.values())
    c = certified
    p = 1.0 - float(pooled_tail.tail_at(c.M + c.r))
    se = float(pooled_tail.se_of(p))
    ok = p >= c.delta2 - 3 * se
    report(4, ok, f"M={c.M:g}: P(T < M+r) = {p:.4f} >= delta2 - 3SE = {c.delta2 - 3 * se:.4f}",
           t0)


def test_criterion_05_geometric_tail(report, certified, pooled_tail):
    t0 = time.perf_counter() - SETUP_SECONDS["tail"]
    checks = geometric_tail_check(pooled_tail, certified, 3)
    detail = ", ".join(f"n={i + 1}: {ch.lhs:.4f} <= {ch.rhs:.4f}" for i, ch in enumerate(checks))
    report(5, all(ch.ok for ch in checks), f"R={certified.R:g}, rho={certified.rho:.4f}; {detail}",
           t0)


# -- 6 ------------------------------------------------------------------------


def test_criterion_06_tv_dominance(report, bench):
    t0 = time.perf_counter()
    m, _ = bench
    times = [0.5, 1.0, 2.0, 3.0, 4.0]
    coupled = simulate_coupled_batch(m, [(seg(-2.0), 0, seg(2.0), 1)],
                                     SimConfig(DT, 4.0, 10_000, seed=606))
    tail = tail_from_samples(np.where(coupled.diverged, np.inf, coupled.T), 4.0)
    ex = simulate_batch(m, seg(-2.0), 0, SimConfig(DT, 4.0, 100_000, seed=607), times)
    ey = simulate_batch(m, seg(2.0), 1, SimConfig(DT, 4.0, 100_000, seed=608), times)
    rows, ok = [], True
    for j, t in enumerate(times):
        s = float(tail.survival_at(t))
        bound, bound_se = 2 * s, 2 * float(tail.se_of(s))
        h = histogram_tv(ex.x[:, j, 0], ey.x[:, j, 0], bins=200)
        # variation norm = 2 x total variation
        var_norm, var_se = 2 * h.tv, 2 * h.se
        se = math.hypot(bound_se, var_se)
        ok &= var_norm <= bound + 3 * se
        rows.append(f"t={t:g}: {var_norm:.4f} <= {bound:.4f}")
    report(6, ok, "; ".join(rows), t0)


# -- 7 ------------------------------------------------------------------------


@pytest.mark.parametrize("theta,sigma,Qm", [
    (THETA, SIGMA, Q),
    ([1.0, 1.5, 2.0], [1.0, 1.0, 1.0], [[0, 1, 1], [0.5, 0, 1], [1, 1, 0]]),
])
def test_criterion_07_first_diagonal_hit(report, theta, sigma, Qm):
    t0 = time.perf_counter()
    m, _ = ou_benchmark(theta, sigma, Qm)
    dt = 0.001
    phi, psi = seg(-1.0, dt, dt), seg(1.0, dt, dt)
    n_reg = len(theta)
    inits = [(phi, k, psi, l) for k in range(n_reg) for l in range(n_reg) if k != l]
    alpha = estimate_alpha(m, [phi, psi])
    b = simulate_coupled_batch(m, inits, SimConfig(dt, 20.0, 10_000, seed=707), stop_at="zeta1")
    z = b.zeta1
    mean, se = float(z.mean()), float(z.std(ddof=1) / math.sqrt(z.size))
    ok = bool(np.all(np.isfinite(z))) and mean <= 1 / alpha + 3 * se
    report(7, ok, f"{n_reg} regimes: mean zeta1 = {mean:.4f} +- {se:.4f}, 1/alpha = {1 / alpha:.4f}",
           t0)


# -- 8 ------------------------------------------------------------------------


def test_criterion_08_polylog_inequality(report):
    t0 = time.perf_counter()
    ok, worst_eq = True, 0.0
    for rho in np.arange(1, 10) / 10:
        lhs, rhs, _ = polylog_bound_check(float(rho), 1)
        worst_eq = max(worst_eq, abs(lhs - rhs))
        for n in range(1, 9):
            ok &= polylog_bound_check(float(rho), n)[2]
    ok = ok and worst_eq <= 1e-12
    report(8, ok, f"rho in 0.1..0.9, n <= 8; equality error at n=1: {worst_eq:.1e}", t0)


# -- 9 ------------------------------------------------------------------------


def trapezoid_oracle(rhos, p: GParams, h=1e-4, top=12.0):
    """Independent fixed-step evaluation of G on a uniform grid."""
    v = np.arange(0.0, top + h / 2, h)
    phi = p.kappa * v ** 2 / (8 * p.lam) - v ** 4 / (64 * p.N * (p.lam + p.theta))
    w = np.exp(phi - phi.max())
    pieces = (w[1:] + w[:-1]) * h / 2
    inner = np.append(np.cumsum(pieces[::-1])[::-1], 0.0)
    f = inner * np.exp(phi.max() - phi)
    G = np.concatenate([[0.0], np.cumsum((f[1:] + f[:-1]) * h / 2)])
    return [float(G[int(round(r / h))]) for r in rhos]


def test_criterion_09_G_function_and_drift(report):
    t0 = time.perf_counter()
    p = GParams(4.0, 1.0, 1.0, 0.5)
    rhos = [0.1, 0.25, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0]
    gf = GFunction(p)
    got = gf.G_many(rhos)
    want = trapezoid_oracle(rhos, p)
    rel = max(abs(a - b) / b for a, b in zip(got, want))
    params = MeanFieldParams(2, [1.0], [1.0], lambda0=1.0, lam=0.5)
    consts = split_constants(params)
    radii = np.geomspace(0.01, 10.0, 50)
    drift = drift_condition_check(params, drift_grid(2, radii, 20, seed=9), consts=consts,
                                  tol=1e-6)
    ok = (rel <= 1e-6 and gf.G(0.0) == 0.0 and drift.passed and len(drift.rows) == 1000
          and time.perf_counter() - t0 < 30)
    worst = max(r.omega for r in drift.rows)
    report(9, ok, f"G rel error {rel:.1e}, G(0)={gf.G(0.0)}, kappa={consts.kappa:g}, "
                  f"theta={consts.theta:g}; max drift value {worst:.4f} on 1000 points", t0)


# -- 10 -----------------------------------------------------------------------


def test_criterion_10_meanfield_coupling_bound(report):
    t0 = time.perf_counter()
    params = MeanFieldParams(2, [1.0], [1.0], lambda0=1.0, lam=0.5)
    pairs = [([0.5, 0.0], [0.0, 0.0]), ([0.5, 0.0], [-0.5, 0.0]), ([1.0, 0.5], [-1.0, -0.5])]
    res = mf_coupled_simulate(params, pairs, SimConfig(0.01, 60.0, 5000, seed=1010))
    detail = "; ".join(f"|x-y|={c.distance:.3g}: {c.mean_T:.3f} <= {c.bound:.4g}" for c in res)
    report(10, all(c.ok for c in res), detail, t0)


# -- 11 -----------------------------------------------------------------------


def _generator_model() -> ModelSpec:
    theta, sigma = np.array([1.0, 2.0]), np.array([1.0, 1.5])

    def rates(segment, k):
        s = math.tanh(float(segment.mean()[0]))
        return {1: 0.5 + 0.4 * s} if k == 0 else {0: 0.6 - 0.3 * s}

    return ModelSpec(1, lambda x, k: -theta[k][:, None] * x,
                     lambda x, k: sigma[k][:, None, None] * np.ones((x.shape[0], 1, 1)),
                     rates, 1.0, n_regimes=2)


TEST_FUNCTIONS = {
    "squared-gap": CouplingTestFunction(
        lambda x, k, y, l: float((x[0] - y[0]) ** 2 + 0.5 * (k - l) ** 2 + 0.3 * k * x[0]),
        lambda x, k, y, l: np.array([2 * (x[0] - y[0]) + 0.3 * k, -2 * (x[0] - y[0])]),
        lambda x, k, y, l: np.array([[2.0, -2.0], [-2.0, 2.0]])),
    "trig": CouplingTestFunction(
        lambda x, k, y, l: float(math.sin(x[0]) * math.cos(y[0]) + 0.4 * k - 0.2 * l * y[0]),
        lambda x, k, y, l: np.array([math.cos(x[0]) * math.cos(y[0]),
                                     -math.sin(x[0]) * math.sin(y[0]) - 0.2 * l]),
        lambda x, k, y, l: np.array([[-math.sin(x[0]) * math.cos(y[0]),
                                      -math.cos(x[0]) * math.sin(y[0])],
                                     [-math.cos(x[0]) * math.sin(y[0]),
                                      -math.sin(x[0]) * math.cos(y[0])]])),
}

# slack per unit step for the O(step) remainder of the one-step expansion
GENERATOR_C = 50.0


def test_criterion_11_generator_consistency(report):
    t0 = time.perf_counter()
    m = _generator_model()
    step, n = 1e-3, 100_000
    points = [(-1.0, 0, 1.0, 1), (0.5, 0, -0.5, 0), (2.0, 1, 0.0, 1), (-0.3, 1, 0.7, 0),
              (1.5, 0, -1.0, 1)]
    cfg = SimConfig(step, step, n, seed=1111)
    worst, ok = 0.0, True
    for j, (x, k, y, l) in enumerate(points):
        phi, psi = seg(x, step, step), seg(y, step, step)
        b = simulate_coupled_batch(m, [(phi, k, psi, l)], cfg, stop_at=None, sample_times=[step],
                                   first_path=j * n)
        for f in TEST_FUNCTIONS.values():
            f0 = f.value(np.array([x]), k, np.array([y]), l)
            vals = np.array([f.value(b.x[i, 0], int(b.k[i, 0]), b.y[i, 0], int(b.l[i, 0]))
                             for i in range(n)])
            diff = (vals - f0) / step
            est, se = float(diff.mean()), float(diff.std(ddof=1) / math.sqrt(n))
            exact = coupling_generator_apply(f, phi, k, psi, l, m)
            gap = abs(est - exact)
            ok &= gap <= 3 * se + GENERATOR_C * step
            worst = max(worst, gap / (3 * se + GENERATOR_C * step))
    report(11, ok, f"5 points x 2 functions, worst gap / tolerance = {worst:.3f}", t0)


# -- 12 -----------------------------------------------------------------------


DETERMINISM_CONFIG = """
[simulate]
horizon = 2.0
n_paths = 40
sample_times = [1.0, 2.0]
[couple]
horizon = 10.0
n_paths = 2100
[bounds]
gamma = 4.0
[validate]
n_samples = 30
n_pairs = 200
"""

MEANFIELD_CONFIG = """
[run]
model = "meanfield"
[meanfield]
n_dirs = 3
n_paths = 80
horizon = 30.0
"""


def test_criterion_12_determinism(report, tmp_path):
    t0 = time.perf_counter()
    (tmp_path / "a.ini").write_text(DETERMINISM_CONFIG)
    (tmp_path / "mf.ini").write_text(MEANFIELD_CONFIG)
    jobs = [(c, "a.ini") for c in ("simulate", "couple", "bounds", "validate")]
    jobs.append(("meanfield", "mf.ini"))
    ok, notes = True, []
    for command, config in jobs:
        outputs = []
        for i, workers in enumerate((1, 1, 3)):
            out = tmp_path / f"{command}-{i}"
            code = main([command, "--config", str(tmp_path / config), "--seed", "12",
                         "--workers", str(workers), "--out", str(out)],
                        Reporter(io.StringIO(), io.StringIO()))
            ok &= code == 0
            outputs.append({p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))})
        same = bool(outputs[0]) and outputs[0] == outputs[1] == outputs[2]
        ok &= same
        notes.append(f"{command}: {len(outputs[0])} csv {'identical' if same else 'DIFFER'}")
    report(12, ok, "; ".join(notes), t0)
