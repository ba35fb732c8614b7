from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regime_coupler.core import HistorySegment, SimConfig, lyapunov_check
from regime_coupler.coupling import maximal_reflection_step
from regime_coupler.errors import ValidationError
from regime_coupler.meanfield import (
    LambdaSplitCoupler,
    MeanFieldParams,
    demo_rates,
    drift_condition_check,
    drift_grid,
    lambda_split,
    logistic_model,
    mf_coupled_simulate,
    mf_coupled_step,
    mf_drift,
    mf_model,
    ou_benchmark,
    split_constants,
)
from regime_coupler.switching import simulate_batch


def tanh_sigma(x, k):
    return 1.0 + 0.2 * np.tanh(x)


UNIT = MeanFieldParams(2, [1.0], [1.0])


def test_defaults_and_validation():
    assert UNIT.lam == 0.5
    with pytest.raises(ValidationError):
        MeanFieldParams(2, [1.0], [1.0], lam=1.0)
    with pytest.raises(ValidationError):
        MeanFieldParams(2, [1.0, 2.0], [1.0])
    with pytest.raises(ValidationError):
        MeanFieldParams(2, [1.0], [1.0], lambda0=1.5)


def test_unit_noise_split_constants():
    c = split_constants(UNIT)
    assert c.K == 0.0
    assert c.kappa == pytest.approx(2.0)
    assert c.theta == pytest.approx(1.1)


def test_split_identity_and_rejection():
    xs = np.random.default_rng(0).normal(size=(100, 3))
    split = lambda_split(tanh_sigma, 0.5, xs)
    s = tanh_sigma(xs, None)
    np.testing.assert_allclose(0.5 + split.sigma_lam(xs, None) ** 2, s * s, rtol=1e-12)
    with pytest.raises(ValidationError):
        lambda_split(tanh_sigma, 0.7, xs)


def test_ellipticity_witness():
    p = MeanFieldParams(2, [1.0], [1.0], sigma=lambda x, k: 2.0 * np.ones_like(x))
    with pytest.raises(ValidationError) as info:
        mf_model(p)
    w = info.value.witness
    assert w.sigma_sq == pytest.approx(4.0) and w.bounds == (1.0, 1.0)


def test_model_carries_dissipation_certificate():
    m = mf_model(UNIT)
    samples = [(np.array(v), 0) for v in ([0.0, 0.0], [1.0, -2.0], [5.0, 5.0], [-30.0, 4.0])]
    assert lyapunov_check(m, m.lyapunov, samples).passed
    assert math.isfinite(m.info["dissipation_K"])


vecs = st.lists(st.floats(-5, 5), min_size=4, max_size=4)


@settings(max_examples=100, deadline=None)
@given(vecs, st.permutations(range(4)))
def test_drift_is_permutation_equivariant(x, perm):
    p = MeanFieldParams(4, [1.5], [0.7])
    x = np.array(x)
    np.testing.assert_allclose(mf_drift(x[list(perm)], 0, p), mf_drift(x, 0, p)[list(perm)],
                               atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(vecs, vecs, vecs, vecs, st.permutations(range(4)))
def test_coupled_step_is_permutation_equivariant(x, y, dW, dB, perm):
    p = MeanFieldParams(4, [1.0], [1.0], sigma=tanh_sigma)
    x, y, dW, dB = map(np.array, (x, y, dW, dB))
    if np.linalg.norm(x - y) < 1e-6:
        return
    P = list(perm)
    xn, yn = mf_coupled_step(p, x, y, 0, dW, dB, 0.01)
    xp, yp = mf_coupled_step(p, x[P], y[P], 0, dW[P], dB[P], 0.01)
    np.testing.assert_allclose(xp, xn[P], atol=1e-9)
    np.testing.assert_allclose(yp, yn[P], atol=1e-9)


def test_split_coupler_matches_single_step_and_marginals():
    p = MeanFieldParams(3, [1.0], [1.0], sigma=tanh_sigma, lambda0=0.6)
    m = mf_model(p)
    cp = LambdaSplitCoupler(p)
    rng = np.random.default_rng(4)
    x, y = rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
    dW, dB = rng.normal(size=3), rng.normal(size=3)
    k = np.array([0])
    tau = cp.tau(m, x, k, y, k)[0]
    inc = tau @ np.concatenate([dW, dB]) * 0.1
    xn, yn = mf_coupled_step(p, x[0], y[0], 0, dW, dB, 0.01)
    np.testing.assert_allclose(x[0] + mf_drift(x[0], 0, p) * 0.01 + inc[:3], xn)
    np.testing.assert_allclose(y[0] + mf_drift(y[0], 0, p) * 0.01 + inc[3:], yn)
    cov = tau @ tau.T
    for z, block in ((x, cov[:3, :3]), (y, cov[3:, 3:])):
        s = m.diffusion_at(z[0], 0)
        np.testing.assert_allclose(block, s @ s.T, atol=1e-12)
    with pytest.raises(ValidationError):
        cp.tau(m, x, k, y, np.array([1]))


def test_maximal_step_keeps_each_gaussian_law():
    rng = np.random.default_rng(2)
    n, d, sq = 200000, 2, 0.1
    S = np.broadcast_to(np.array([[1.0, 0.3], [0.0, 0.8]]), (n, d, d))
    mx, my = np.tile([0.05, 0.0], (n, 1)), np.tile([-0.05, 0.1], (n, 1))
    xn, yn, met = maximal_reflection_step(mx, my, S, rng.normal(size=(n, d)),
                                          rng.normal(size=(n, d)), sq)
    cov = S[0] @ S[0].T * sq * sq
    for out, mean in ((xn, mx[0]), (yn, my[0])):
        np.testing.assert_allclose(out.mean(axis=0), mean, atol=4 * 0.1 / math.sqrt(n))
        np.testing.assert_allclose(np.cov(out.T), cov, atol=2e-4)
    # meeting probability of a maximal coupling is 1 - TV = 2 Phi(-|z| / 2)
    zn = np.linalg.norm(np.linalg.solve(S[0], mx[0] - my[0]) / sq)
    want = 1 + math.erf(-zn / 2 / math.sqrt(2))
    assert met.mean() == pytest.approx(want, abs=4 * math.sqrt(want * (1 - want) / n))
    assert np.all(xn[met] == yn[met])


def test_drift_condition_on_unit_noise_and_detector():
    pairs = drift_grid(2, [0.05, 0.5, 1, 2, 4, 8], 20)
    rep = drift_condition_check(UNIT, pairs)
    assert rep.passed and len(rep.rows) == 120
    bad = drift_condition_check(UNIT, pairs[:20], G2=lambda r: 1.0)
    assert bad.failures


def test_coupled_meanfield_mean_below_bound():
    res = mf_coupled_simulate(UNIT, [([0.5, 0.0], [0.0, 0.0])], SimConfig(0.01, 40.0, 300, 0))
    assert res[0].ok and res[0].n_censored == 0
    assert res[0].distance == pytest.approx(0.5)


def test_demo_rates_within_bound():
    for v in (-50.0, 0.0, 50.0):
        seg = HistorySegment.constant([v, v], 0.1, 0.1)
        for k in (0, 1):
            row = demo_rates(seg, k)
            assert sum(row.values()) <= 1.0 and 1 - k in row


def test_logistic_stays_nonnegative():
    m = logistic_model([1.0, 2.0], [1.0, 1.0], [0.8, 1.2], Q=[[0, 1], [1, 0]])
    out = simulate_batch(m, HistorySegment.constant(0.05, 0.1, 0.01), 0,
                         SimConfig(0.01, 5.0, 500, 3), [1.0, 5.0])
    assert np.all(out.x >= 0)


def test_ou_oracle_facts():
    _, o = ou_benchmark([1.0, 2.0], [1.0, 1.5], [[0, 1], [3, 0]])
    np.testing.assert_allclose(o.regime_occupancy(), [0.75, 0.25])
    assert o.stationary_variance(1) == pytest.approx(1.5 ** 2 / 4)
    xs = np.linspace(-10, 10, 20001)
    assert np.sum(o.stationary_density(xs, 0)) * 1e-3 == pytest.approx(1.0, rel=1e-6)
    assert o.frozen_moments(2.0, 0, 0.0) == (2.0, 0.0)
    with pytest.raises(ValidationError):
        ou_benchmark([0.0], [1.0], [[0.0]])
