"""Command-line entry point.

Commands: simulate, couple, bounds, meanfield, validate.  Every command writes
CSV files plus a ``metadata.json`` sidecar into ``--out``.

Exit codes: 0 success, 1 configuration error, 2 numeric or assumption
failure, 3 internal fault.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import platform
import sys
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .core import HistorySegment, ModelSpec, SimConfig, segment_distance, validate_model
from .coupling import (
    coupled_jump_law,
    marginal_consistency_check,
    reflection_matrix,
    simulate_coupled,
    simulate_coupled_batch,
)
from .ergodicity import (
    Check,
    beta_gamma_lower_bound,
    moment_mgf_bounds,
    polylog_bound_check,
    tail_from_samples,
    theory_constants,
    write_checks_csv,
    write_constants_csv,
)
from .errors import RegimeCouplerError
from .meanfield import (
    MeanFieldParams,
    demo_rates,
    drift_condition_check,
    drift_grid,
    logistic_model,
    mf_coupled_simulate,
    mf_model,
    ou_benchmark,
    split_constants,
    write_g_table,
)
from .quadrature import GFunction, GParams
from .switching import fmt_real, simulate_batch, simulate_hybrid

SEED_ENV = "REGIME_COUPLER_SEED"
CENSOR_WARN = 0.05


class Reporter:
    """All console output goes through one object so lines never interleave."""

    def __init__(self, out=sys.stdout, err=sys.stderr):
        self.out, self.err = out, err

    def info(self, msg: str) -> None:
        print(msg, file=self.out, flush=True)

    def warn(self, msg: str) -> None:
        print(f"warning: {msg}", file=self.err, flush=True)

    def error(self, msg: str) -> None:
        print(f"error: {msg}", file=self.err, flush=True)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


# -- models -------------------------------------------------------------------

SIGMA_FAMILIES = {
    "unit": lambda x, k: np.ones_like(x),
    "tanh": lambda x, k: 1.0 + 0.2 * np.tanh(x),
    "sqrt1px2": lambda x, k: np.sqrt(1.0 + x * x),
}


def meanfield_params(cfg: RunConfig) -> MeanFieldParams:
    p = cfg["model"]
    if cfg.model_name != "meanfield":
        raise ConfigError("this command needs model = meanfield")
    if p["sigma"] not in SIGMA_FAMILIES:
        raise ConfigError(f"unknown sigma family {p['sigma']!r}; known: {', '.join(SIGMA_FAMILIES)}")
    return MeanFieldParams(int(p["N"]), p["alpha"], p["beta"], SIGMA_FAMILIES[p["sigma"]],
                           float(p["lambda0"]), p["lam"], demo_rates, float(p["H"]))


def build_model(cfg: RunConfig) -> ModelSpec:
    name, p = cfg.model_name, cfg["model"]
    if name == "ou":
        return ou_benchmark(p["theta"], p["sigma"], p["Q"])[0]
    if name == "logistic":
        return logistic_model(p["a"], p["b"], p["sigma"], p["Q"])
    if name == "meanfield":
        return mf_model(meanfield_params(cfg))
    if name == "zero-noise":
        d = int(p["dim"])
        return ModelSpec(d, lambda x, k: np.zeros_like(x),
                         lambda x, k: np.zeros((x.shape[0], d, d)),
                         lambda seg, k: {}, 1.0, n_regimes=1, name="zero-noise")
    raise ConfigError(f"unknown model {name!r}")


def _point(value, dim: int) -> np.ndarray:
    v = np.atleast_1d(np.asarray(value, dtype=float))
    if v.size == 1:
        v = np.full(dim, v[0])
    if v.size != dim:
        raise ConfigError(f"initial point has {v.size} entries, model dimension is {dim}")
    return v


def _regime(m: ModelSpec, value: int) -> int:
    k = int(value) - 1
    if m.n_regimes is not None and k >= m.n_regimes:
        raise ConfigError(f"regime {value} does not exist (model has {m.n_regimes})")
    return k


# -- output helpers -----------------------------------------------------------


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt_real(v) if isinstance(v, float) else v for v in row])


def _metadata(out: Path, command: str, cfg: RunConfig, seed: int, extra=None) -> None:
    meta = {
        "command": command,
        "model": cfg.model_name,
        "seed": seed,
        "config": cfg.sections,
        "versions": {"regime_coupler": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
    }
    if extra:
        meta.update(extra)
    (out / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


# -- commands -----------------------------------------------------------------


def cmd_simulate(cfg: RunConfig, seed: int, workers: int, out: Path, rep: Reporter) -> int:
    m = build_model(cfg)
    s = cfg["simulate"]
    phi = HistorySegment.constant(_point(s["x0"], m.dim), float(s["delay"]), float(s["dt"]))
    k = _regime(m, s["regime"])
    sim = SimConfig(float(s["dt"]), float(s["horizon"]), int(s["n_paths"]), seed)
    path = simulate_hybrid(m, phi, k, sim, 0)
    path.to_csv(out / "path.csv", out / "events.csv")
    rep.info(f"path: {path.t.size} grid points, {len(path.events)} switches")
    if path.diverged:
        rep.warn(f"path 0 diverged at t={path.fail_time}")
    times = list(s["sample_times"]) or [float(s["horizon"])]
    if sim.n_paths > 1:
        batch = simulate_batch(m, phi, k, sim, times, workers=workers)
        d = m.dim
        rows = []
        for i in range(sim.n_paths):
            for j, step in enumerate(batch.sample_steps):
                rows.append([i, float(step * sim.dt)] + [float(v) for v in batch.x[i, j]]
                            + [int(batch.regime[i, j]) + 1, int(batch.diverged[i])])
        _write_rows(out / "samples.csv",
                    ["path_id", "t"] + [f"x_{i + 1}" for i in range(d)] + ["lambda", "diverged"],
                    rows)
        n_reg = int(max(batch.regime.max() + 1, m.n_regimes or 1))
        srows = []
        ok = ~batch.diverged
        for j, step in enumerate(batch.sample_steps):
            xs = batch.x[ok, j]
            occ = [float(np.mean(batch.regime[ok, j] == r)) for r in range(n_reg)]
            srows.append([float(step * sim.dt)] + [float(v) for v in xs.mean(axis=0)]
                         + [float(v) for v in xs.var(axis=0)] + occ)
        _write_rows(out / "summary.csv",
                    ["t"] + [f"mean_{i + 1}" for i in range(d)] + [f"var_{i + 1}" for i in range(d)]
                    + [f"occupancy_{r + 1}" for r in range(n_reg)], srows)
        rep.info(f"batch: {sim.n_paths} paths, {int(batch.diverged.sum())} diverged")
    _metadata(out, "simulate", cfg, seed)
    return 0


def cmd_couple(cfg: RunConfig, seed: int, workers: int, out: Path, rep: Reporter) -> int:
    m = build_model(cfg)
    c = cfg["couple"]
    dt, delay = float(c["dt"]), float(c["delay"])
    phi = HistorySegment.constant(_point(c["x0"], m.dim), delay, dt)
    psi = HistorySegment.constant(_point(c["y0"], m.dim), delay, dt)
    kx, ky = _regime(m, c["regime_x"]), _regime(m, c["regime_y"])
    sim = SimConfig(dt, float(c["horizon"]), int(c["n_paths"]), seed, c["meet_eps"])
    path, state = simulate_coupled(m, phi, kx, psi, ky, sim, 0)
    path.to_csv(out / "coupled_path.csv")
    batch = simulate_coupled_batch(m, [(phi, kx, psi, ky)], sim, workers=workers, stop_at="T")
    batch.summary_csv(out / "summary.csv")
    T = np.where(batch.diverged, np.inf, batch.T)
    tail = tail_from_samples(T, sim.horizon)
    tail.to_csv(out / "tail.csv")
    finite = T[np.isfinite(T)]
    rep.info(f"coupled paths: {batch.n_paths}, censored: {tail.n_censored}, "
             f"mean T (uncensored): {finite.mean() if finite.size else float('nan'):.6g}")
    frac = tail.n_censored / tail.n_paths
    if tail.warning or frac > CENSOR_WARN:
        rep.warn(f"{tail.n_censored} of {tail.n_paths} coupling times censored at the "
                 f"horizon {sim.horizon}; the tail is only a bound there")
    _metadata(out, "couple", cfg, seed, {"n_censored": tail.n_censored})
    return 0


def cmd_bounds(cfg: RunConfig, seed: int, workers: int, out: Path, rep: Reporter) -> int:
    b = cfg["bounds"]
    tc = theory_constants(b["H"], b["M"], b["r"], b["alpha"])
    write_constants_csv(tc, out / "constants.csv")
    for key, val in tc.as_row().items():
        rep.info(f"{key} = {fmt_real(val)}")
    lambdas = list(b["lambdas"]) or [f / tc.R_hat for f in (0.25, 0.5, 0.75)]
    table = moment_mgf_bounds(tc, int(b["n_max"]), lambdas)
    _write_rows(out / "moments.csv", ["n", "bound"], [[n, float(v)] for n, v, _ in table.moments])
    _write_rows(out / "mgf.csv", ["lambda", "bound"], [[float(l), float(v)] for l, v, _ in table.mgf])
    checks = []
    for n in range(1, int(b["polylog_n"]) + 1):
        lhs, rhs, ok = polylog_bound_check(tc.rho, n)
        checks.append(Check(f"polylog_n{n}", lhs, rhs, ok))
    if b["gamma"] is not None:
        lb = beta_gamma_lower_bound(tc, float(b["gamma"]))
        checks.append(Check(f"beta_gamma_lower_{b['gamma']}", lb, 1.0 / tc.R_hat, lb <= 1.0 / tc.R_hat))
        rep.info(f"beta(gamma={b['gamma']}) >= {fmt_real(lb)}")
    write_checks_csv(checks, out / "checks.csv")
    _metadata(out, "bounds", cfg, seed)
    if not all(c.ok for c in checks):
        rep.error("a closed-form check failed")
        return 2
    return 0


def cmd_meanfield(cfg: RunConfig, seed: int, workers: int, out: Path, rep: Reporter) -> int:
    params = meanfield_params(cfg)
    s = cfg["meanfield"]
    k = int(s["regime"]) - 1
    if k >= params.n_regimes:
        raise ConfigError(f"regime {s['regime']} does not exist")
    try:
        m = mf_model(params, seed=seed % 2**32)
    except RegimeCouplerError as exc:
        rep.error(f"model rejected: {exc}")
        return 2
    consts = split_constants(params, seed=seed % 2**32)
    gfun = GFunction(consts.gparams)
    write_g_table(gfun, [float(r) for r in s["rho"]], out / "g_table.csv")
    pairs = drift_grid(params.N, s["radii"], int(s["n_dirs"]), seed=seed % 2**32)
    report = drift_condition_check(params, pairs, k, consts=consts, gfun=gfun)
    report.to_csv(out / "drift_check.csv")
    rep.info(f"kappa={fmt_real(consts.kappa)} theta={fmt_real(consts.theta)} "
             f"K={fmt_real(consts.K)}; drift check "
             f"{'passed' if report.passed else 'FAILED'} on {len(report.rows)} points")
    sim = SimConfig(float(s["dt"]), float(s["horizon"]), int(s["n_paths"]), seed)
    comps = mf_coupled_simulate(params, s["pairs"], sim, k, model=m, gfun=gfun, workers=workers)
    _write_rows(out / "bound_comparison.csv",
                ["distance", "empirical_mean_T", "se", "bound", "n_paths", "n_censored", "ok"],
                [[c.distance, c.mean_T, c.se, c.bound, c.n_paths, c.n_censored, int(c.ok)]
                 for c in comps])
    for c in comps:
        rep.info(f"|x-y|={c.distance:.6g}: empirical_mean_T={c.mean_T:.6g} +- {c.se:.3g}, "
                 f"bound={c.bound:.6g}")
    sens = []
    for frac in s["lambda_grid"]:
        lam = float(frac) * params.lambda0
        p2 = MeanFieldParams(params.N, params.alpha, params.beta, params.sigma, params.lambda0,
                             lam, params.rates, params.rate_bound)
        c2 = split_constants(p2, seed=seed % 2**32)
        g2 = GFunction(GParams(c2.kappa, lam, c2.N, c2.theta))
        sens.append([lam, c2.kappa, c2.theta, g2.G(1.0) / (2 * lam)])
    _write_rows(out / "sensitivity.csv", ["lam", "kappa", "theta", "bound_at_1"], sens)
    _metadata(out, "meanfield", cfg, seed)
    if not report.passed or not all(c.ok for c in comps):
        rep.error("mean-field checks failed")
        return 2
    return 0


def _suite_coupling(rng, n: int, inject) -> tuple[int, int]:
    bad = 0
    for i in range(n):
        S = int(rng.integers(2, 51))
        k, l = (int(v) for v in rng.integers(0, S, 2))
        rows = []
        for src in (k, l):
            targets = [t for t in rng.choice(S, size=min(S, 5), replace=False) if t != src]
            rows.append({int(t): float(rng.uniform(0, 2)) for t in targets})
        law = coupled_jump_law(rows[0], rows[1], k, l)
        if inject == "rate-corruption" and i == 0 and law.rates:
            pair, q = law.rates[0]
            law.rates[0] = (pair, q + 1e-6)
        a, b = rows
        if k != l:
            want = (sum(max(a.get(m, 0.0), b.get(m, 0.0)) for m in (set(a) | set(b)) - {k, l})
                    + a.get(l, 0.0) + b.get(k, 0.0))
        else:
            want = sum(max(a.get(m, 0.0), b.get(m, 0.0)) for m in (set(a) | set(b)) - {k})
        if not marginal_consistency_check(law, a, b) or abs(law.total_rate - want) > 1e-12 * max(1, want):
            bad += 1
    return n, bad


def _suite_reflection(rng, n: int) -> tuple[int, int]:
    bad = 0
    for _ in range(n):
        d = int(rng.integers(1, 17))
        x, y = rng.standard_normal(d), rng.standard_normal(d)
        Hm = reflection_matrix(x, y)
        u = x - y
        v = rng.standard_normal(d)
        v -= (v @ u) / (u @ u) * u
        errs = [np.abs(Hm @ Hm.T - np.eye(d)).max(), np.abs(Hm - Hm.T).max(),
                np.abs(Hm @ u + u).max() / max(1, np.abs(u).max()),
                np.abs(Hm @ v - v).max() / max(1, np.abs(v).max())]
        if max(errs) > 1e-12:
            bad += 1
    return n, bad


def _suite_constants(rng, n: int) -> tuple[int, int]:
    bad = 0
    for _ in range(n):
        # keeps H (M + r) <= 30 so that rho = 1 - delta2 / 2 is representable below 1
        H, M, r, a = rng.uniform(0.01, [3.0, 5.0, 5.0, 5.0])
        c = theory_constants(H, M, r, a)
        ok = (0 < c.delta2 <= 0.5 and 0.5 <= c.rho < 1
              and math.isclose(c.R, c.M + c.r + c.N) and math.isclose(c.R_hat, 2 * c.R / c.delta2)
              and c.beta_lb > 0)
        bad += not ok
    return n, bad


def _suite_polylog() -> tuple[int, int]:
    bad, n = 0, 0
    for rho in np.round(np.arange(1, 10) / 10, 1):
        for k in range(1, 9):
            lhs, rhs, ok = polylog_bound_check(float(rho), k)
            n += 1
            bad += not ok or (k == 1 and abs(lhs - rhs) > 1e-12 * rhs)
    return n, bad


def _suite_segments(rng, n: int) -> tuple[int, int]:
    bad = 0
    for _ in range(n):
        segs = [HistorySegment(1.0, 0.25, rng.standard_normal((5, 2))) for _ in range(3)]
        a, b, c = segs
        dab, dba = segment_distance(a, b), segment_distance(b, a)
        ok = (dab >= 0 and dab == dba and segment_distance(a, a) == 0
              and segment_distance(a, c) <= dab + segment_distance(b, c) + 1e-12)
        bad += not ok
    return n, bad


def _suite_gtable() -> tuple[int, int]:
    g = GFunction(GParams(4.0, 1.0, 1.0, 0.5))
    rhos = [0.0, 0.5, 1.0, 2.0, 4.0]
    Gs = g.G_many(rhos)
    ginf = g.G_inf()
    checks = [Gs[0] == 0.0, all(b >= a for a, b in zip(Gs, Gs[1:])),
              all(g.f(r) >= 0 for r in rhos), Gs[-1] <= ginf]
    return len(checks), sum(not c for c in checks)


def cmd_validate(cfg: RunConfig, seed: int, workers: int, out: Path, rep: Reporter) -> int:
    v = cfg["validate"]
    n = int(v["n_pairs"])
    rng = np.random.default_rng(seed % 2**64)
    suites = [
        ("coupling-algebra", lambda: _suite_coupling(rng, n, v["inject"])),
        ("reflection", lambda: _suite_reflection(rng, n)),
        ("constants", lambda: _suite_constants(rng, n)),
        ("polylog", _suite_polylog),
        ("segment-metric", lambda: _suite_segments(rng, min(n, 200))),
        ("g-table", _suite_gtable),
    ]
    rows = []
    for name, fn in suites:
        checked, failed = fn()
        rows.append([name, checked, failed, int(failed == 0)])
    m = build_model(cfg)
    report = validate_model(m, int(v["n_samples"]), seed % 2**32)
    rows.append(["model", report.n_checked, len(report.violations), int(report.passed)])
    for viol in report.violations[:5]:
        rep.info(f"  model violation: {viol.kind}: {viol.detail}")
    _write_rows(out / "validate.csv", ["suite", "n_checked", "n_failed", "ok"], rows)
    text = "\n".join(",".join(str(x) for x in r) for r in rows)
    digest = hashlib.sha256(text.encode()).hexdigest()
    for r in rows:
        rep.info(f"{r[0]:<18} checked={r[1]:<6} failed={r[2]:<4} {'PASS' if r[3] else 'FAIL'}")
    rep.info(f"report sha256: {digest}")
    _metadata(out, "validate", cfg, seed, {"report_sha256": digest})
    return 0 if all(r[3] for r in rows) else 2


COMMANDS = {
    "simulate": cmd_simulate,
    "couple": cmd_couple,
    "bounds": cmd_bounds,
    "meanfield": cmd_meanfield,
    "validate": cmd_validate,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI or .json run configuration")
    common.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    common.add_argument("--workers", type=int, help="worker processes")
    common.add_argument("--out", help="output directory")
    parser = _Parser(prog="regime-coupler",
                     description="Simulate and couple regime-switching diffusions.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def resolve_seed(flag: int | None, cfg: RunConfig, env=os.environ) -> int:
    if flag is not None:
        seed = flag
    elif ("run", "seed") in cfg.explicit:
        seed = cfg["run"]["seed"]
    elif env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    else:
        seed = cfg["run"]["seed"]
    if not 0 <= seed < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    return seed


def main(argv=None, reporter: Reporter | None = None) -> int:
    rep = reporter or Reporter()
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config)
        seed = resolve_seed(args.seed, cfg)
        workers = args.workers if args.workers is not None else cfg["run"]["workers"]
        if workers < 1:
            raise ConfigError("--workers must be positive")
        out = Path(args.out if args.out is not None else cfg["run"]["out"])
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, seed, workers, out, rep)
    except ConfigError as exc:
        rep.error(str(exc))
        return 1
    except RegimeCouplerError as exc:
        rep.error(str(exc))
        return 2
    except Exception:  # noqa: BLE001 - last-resort fault report
        rep.error("internal fault")
        traceback.print_exc(file=rep.err)
        return 3


if __name__ == "__main__":
    sys.exit(main())
