from __future__ import annotations

import numpy as np
import pytest

from regime_coupler.core import ModelSpec
from regime_coupler.meanfield import ou_benchmark


@pytest.fixture
def ou():
    """Two-regime OU benchmark, constant unit rates in both directions."""
    return ou_benchmark([1.0, 2.0], [1.0, 1.5], [[0.0, 1.0], [1.0, 0.0]])


def const_model(dim=1, drift=0.0, sigma=0.0, rows=None, H=1.0, n_regimes=None):
    """Model with linear drift ``drift * x``, constant isotropic noise and fixed rate rows."""
    rows = rows or [{}]

    def b(x, k):
        return drift * x

    def s(x, k):
        return np.broadcast_to(sigma * np.eye(dim), (x.shape[0], dim, dim)).copy()

    return ModelSpec(dim, b, s, lambda seg, k: rows[k], H,
                     n_regimes=n_regimes or len(rows))
