from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regime_coupler.core import (
    HistorySegment,
    LyapunovSpec,
    ModelSpec,
    SimConfig,
    display_regime,
    grid_count,
    lyapunov_check,
    segment_distance,
    segment_push,
    validate_model,
)
from regime_coupler.errors import (
    ModelFaultError,
    NumericOverflowError,
    ShapeError,
    ValidationError,
)

from conftest import const_model


def test_grid_count_rejects_non_dividing_step():
    assert grid_count(1.0, 0.25) == 4
    with pytest.raises(ValidationError):
        grid_count(1.0, 0.3)


def test_segment_shape_and_norm():
    seg = HistorySegment(2.0, 1.0, [[1.0], [2.0], [3.0]])
    assert seg.steps == 2 and seg.dim == 1
    assert segment_push(seg, 4.0).norm() == 4.0
    with pytest.raises(ShapeError):
        HistorySegment(2.0, 1.0, [[1.0], [2.0]])


def test_push_shifts_window():
    seg = HistorySegment(2.0, 1.0, [0.0, 0.0, 0.0])
    out = segment_push(seg, 1.0)
    np.testing.assert_array_equal(out.points[:, 0], [0.0, 0.0, 1.0])
    assert out.head_time == 1.0


def test_push_zero_forever_keeps_zero_norm():
    seg = HistorySegment.constant(0.0, 0.5, 0.1)
    for _ in range(20):
        seg = segment_push(seg, 0.0)
    assert seg.norm() == 0.0


def test_push_rejects_nonfinite():
    seg = HistorySegment.constant(0.0, 0.5, 0.1)
    with pytest.raises(NumericOverflowError):
        segment_push(seg, np.inf)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=40))
def test_push_preserves_length(values):
    seg = HistorySegment.constant(0.0, 0.3, 0.1)
    for v in values:
        seg = segment_push(seg, v)
        assert seg.points.shape == (4, 1)


def test_segment_distance_examples():
    a = HistorySegment(1.0, 1.0, [[0.0, 0.0], [0.0, 0.0]])
    b = HistorySegment(1.0, 1.0, [[0.0, 0.0], [3.0, 4.0]])
    assert segment_distance(a, b) == 5.0
    assert segment_distance(a, a) == 0.0
    with pytest.raises(ShapeError):
        segment_distance(a, HistorySegment(2.0, 1.0, np.zeros((3, 2))))


vec = st.lists(st.floats(-100, 100), min_size=4, max_size=4)


@settings(max_examples=100, deadline=None)
@given(vec, vec, vec)
def test_segment_distance_is_a_metric(a, b, c):
    sa, sb, sc = (HistorySegment(0.3, 0.1, v) for v in (a, b, c))
    dab = segment_distance(sa, sb)
    assert dab >= 0
    assert dab == segment_distance(sb, sa)
    assert segment_distance(sa, sc) <= dab + segment_distance(sb, sc) + 1e-9


def test_segment_interpolation():
    seg = HistorySegment(1.0, 0.5, [0.0, 1.0, 3.0], head_time=2.0)
    assert seg.at(1.75)[0] == pytest.approx(2.0)
    with pytest.raises(ValidationError):
        seg.at(0.5)


def test_simconfig_defaults_and_checks():
    cfg = SimConfig(dt=0.01, horizon=1.0)
    assert cfg.meet_eps == pytest.approx(1e-3)
    assert cfg.n_steps == 100
    with pytest.raises(ValidationError):
        SimConfig(dt=0.01, horizon=0.001)
    with pytest.raises(ValidationError):
        cfg.check_delay(0.005)


def test_display_regime_is_one_based():
    assert display_regime(0) == 1


def two_state(q12, q21, H):
    return const_model(rows=[{1: q12}, {0: q21}], H=H)


def test_validate_model_pass_and_row_sum_violation():
    assert validate_model(two_state(2.0, 1.0, 3.0), 50).passed
    rep = validate_model(two_state(2.0, 1.0, 1.5), 50)
    kinds = {v.kind for v in rep.violations}
    assert kinds == {"row-sum"}
    assert any("row sum 2 > H=1.5 at k=1" in v.detail for v in rep.violations)


def test_validate_model_negative_and_diagonal():
    rep = validate_model(const_model(rows=[{1: -0.1}, {0: 1.0}]), 30)
    assert "negative-rate" in {v.kind for v in rep.violations}
    rep = validate_model(const_model(rows=[{0: 1.0}], n_regimes=1), 5)
    assert "diagonal-entry" in {v.kind for v in rep.violations}


def test_validate_model_deterministic():
    m = ModelSpec(1, lambda x, k: x, lambda x, k: np.ones((x.shape[0], 1, 1)),
                  lambda seg, k: {1 - k: abs(float(seg.mean()[0]))}, 2.0, n_regimes=2)
    a, b = validate_model(m, 100, 3), validate_model(m, 100, 3)
    assert [v.detail for v in a.violations] == [v.detail for v in b.violations]
    assert a.violations


def test_validate_model_wraps_callback_errors():
    def bad(seg, k):
        raise RuntimeError("boom")

    m = ModelSpec(1, lambda x, k: x, lambda x, k: np.ones((x.shape[0], 1, 1)), bad, 1.0)
    with pytest.raises(ModelFaultError) as info:
        validate_model(m, 3)
    assert "segment" in info.value.inputs


def test_validated_rows_satisfy_bounds():
    rng = np.random.default_rng(1)

    def rates(seg, k):
        return {1 - k: 0.5 + 0.5 * math.tanh(float(seg.mean()[0]))}

    m = ModelSpec(1, lambda x, k: -x, lambda x, k: np.ones((x.shape[0], 1, 1)), rates, 1.0,
                  n_regimes=2)
    assert validate_model(m, 200, 5).passed
    for _ in range(50):
        seg = HistorySegment(1.0, 0.1, rng.normal(0, 5, 11))
        row = m.rate_row(seg, int(rng.integers(2)))
        assert all(q >= 0 for _, q in row) and sum(q for _, q in row) <= 1.0


def test_lyapunov_examples():
    ou = const_model(drift=-1.0, sigma=1.0)
    L = LyapunovSpec(lambda x, k: float(x @ x) + 1.0, 2.0)
    assert lyapunov_check(ou, L, [([x], 0) for x in np.linspace(-50, 50, 41)]).passed

    still = const_model()
    assert lyapunov_check(still, L, [([3.0], 0)]).passed

    cubic = ModelSpec(1, lambda x, k: x ** 3, lambda x, k: np.zeros((x.shape[0], 1, 1)),
                      lambda s, k: {}, 1.0)
    rep = lyapunov_check(cubic, LyapunovSpec(lambda x, k: float(x @ x) + 1.0, 1.0), [([10.0], 0)])
    assert len(rep.flagged) == 1
    assert rep.flagged[0]["LV"] == pytest.approx(20000.0, rel=1e-6)
    assert rep.flagged[0]["bound"] == pytest.approx(102.0)


def test_lyapunov_nonsmooth_is_flagged_not_fatal():
    m = const_model(drift=-1.0, sigma=1.0)
    L = LyapunovSpec(lambda x, k: float("nan") if abs(x[0]) < 1e-3 else float(x @ x), 1.0)
    rep = lyapunov_check(m, L, [([0.0], 0)])
    assert rep.fd_failures
