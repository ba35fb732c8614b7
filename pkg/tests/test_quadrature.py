from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regime_coupler.errors import QuadratureError, ValidationError
from regime_coupler.quadrature import (
    GFunction,
    GParams,
    adaptive_simpson,
    cutoff,
    g_fn,
    phi_fn,
    trapezoid_G,
)

REF = GParams(4.0, 1.0, 1.0, 0.5)


def test_simpson_known_integrals():
    assert adaptive_simpson(math.sin, 0, math.pi) == pytest.approx(2.0, rel=1e-10)
    assert adaptive_simpson(lambda v: math.exp(-v * v), -8, 8) == pytest.approx(
        math.sqrt(math.pi), rel=1e-10)
    assert adaptive_simpson(math.exp, 1.0, 1.0) == 0.0


def test_phi_is_integral_of_g():
    for v in (0.3, 2.0, 7.5):
        num = adaptive_simpson(lambda r: g_fn(r, 4.0, 1.0, 1.0, 0.5), 0, v)
        assert phi_fn(v, REF) == pytest.approx(num, rel=1e-10)


def test_cutoff_drop():
    top = cutoff(0.0, REF)
    assert phi_fn(REF.peak, REF) - phi_fn(top, REF) == pytest.approx(40.0, rel=1e-6)
    with pytest.raises(QuadratureError):
        cutoff(0.0, GParams(1.0, 1.0, 1e30, 0.0))


def test_params_validation():
    with pytest.raises(ValidationError):
        GParams(0.0, 1.0, 1.0, 0.0)
    with pytest.raises(ValidationError):
        GParams(1.0, 1.0, 1.0, -0.1)


def test_G_zero_and_reference_value():
    gf = GFunction(REF)
    assert gf.G(0.0) == 0.0
    # independent fixed-step value, frozen
    assert gf.G(1.0) == pytest.approx(637.5309868, rel=1e-8)


def test_G_matches_trapezoid_oracle():
    gf = GFunction(REF)
    rhos = [0.5, 1.0, 2.0, 3.0]
    for rho, got in zip(rhos, gf.G_many(rhos)):
        want, f_want = trapezoid_G(rho, REF, h=1e-4, top=12.0)
        assert got == pytest.approx(want, rel=1e-6)
        assert gf.f(rho) == pytest.approx(f_want, rel=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.01, 6.0), st.floats(0.01, 6.0))
def test_G_is_increasing_and_concave(a, b):
    gf = GFunction(REF, tol=1e-9)
    lo, hi = sorted((a, b))
    Glo, Ghi = gf.G_many([lo, hi])
    assert Ghi >= Glo
    assert gf.f(hi) <= gf.f(lo) * (1 + 1e-9)
    assert gf.G2(lo) < 0


def test_G2_relation_by_finite_differences():
    gf = GFunction(REF)
    h = 1e-3
    for r in (0.5, 2.0, 4.0):
        fd = (gf.f(r + h) - gf.f(r - h)) / (2 * h)
        assert gf.G2(r) == pytest.approx(fd, rel=1e-5)


def test_G_inf_is_finite_and_above_G():
    gf = GFunction(REF)
    assert math.isfinite(gf.G_inf()) and gf.G_inf() > gf.G(10.0)


def test_G_rejects_negative_argument():
    with pytest.raises(ValidationError):
        GFunction(REF).G(-1.0)
    with pytest.raises(ValidationError):
        GFunction(REF, tol=0.1)


def test_trapezoid_helper_shapes():
    G, f = trapezoid_G(0.0, REF)
    assert G == 0.0 and f > 0 and np.isfinite(f)
