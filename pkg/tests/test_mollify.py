from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from holderflow.coeffs import constant_drift, holder_drift, linear_drift, probe_cloud
from holderflow.errors import ConfigError
from holderflow.mollify import (
    MollifierKernel,
    derivative_bound_probe,
    mollification_gap,
    mollification_gap_parts,
    mollify,
)


@pytest.mark.parametrize("dim", [1, 2])
def test_kernel_integrates_to_one_and_vanishes_outside_the_ball(dim):
    k = MollifierKernel(dim)
    ax = np.linspace(-1, 1, 401 if dim == 1 else 161)
    pts = np.stack(np.meshgrid(*[ax] * dim, indexing="ij"), axis=-1).reshape(-1, dim)
    cell = (ax[1] - ax[0]) ** dim
    assert k(pts).sum() * cell == pytest.approx(1.0, abs=2e-3)
    assert np.all(k(np.full((1, dim), 1.01)) == 0)


def test_kernel_derivative_matches_fd():
    k = MollifierKernel(2)
    z = np.array([[0.2, -0.3]])
    h = 1e-6
    fd = (k(z + [h, 0]) - k(z - [h, 0])) / (2 * h)
    np.testing.assert_allclose(k.derivative(z, (0,)), fd, rtol=1e-5)


@settings(max_examples=15, deadline=None)
@given(n=st.integers(1, 50), x=st.floats(-5, 5))
def test_mollifying_affine_drifts_is_exact(n, x):
    # a symmetric kernel preserves affine functions
    assert mollify(constant_drift([2.0]), n)(np.array([x]))[0] == pytest.approx(2.0, abs=1e-10)
    assert mollify(linear_drift(-3.0), n)(np.array([x]))[0] == pytest.approx(-3.0 * x, abs=1e-9)


def test_gap_shrinks_with_n():
    b = holder_drift(0.5)
    probes = probe_cloud(1, 128, 3.0, seed=0)
    sups = [mollification_gap_parts(b, mollify(b, n), probes)[0] for n in (2, 8, 32)]
    assert sups[0] > sups[1] > sups[2]
    # sup |b - b_n| <= n^{-theta} for the unit Hölder constant
    assert all(s <= n**-0.5 for s, n in zip(sups, (2, 8, 32)))
    assert mollification_gap(b, mollify(b, 32), probes) > sups[2]


def test_first_derivative_bound_grows_like_n_to_one_minus_theta():
    b = holder_drift(0.5)
    probes = np.linspace(-0.5, 0.5, 101)[:, None]
    d4 = derivative_bound_probe(mollify(b, 4), 1, probes)
    d64 = derivative_bound_probe(mollify(b, 64), 1, probes)
    assert d64 / d4 == pytest.approx(16**0.5, rel=0.15)


def test_jacobian_matches_adaptive_quadrature():
    # near the kink, differencing the fixed-node quadrature is unreliable, the
    # kernel-derivative route is not; compare with an adaptive reference
    n, x0 = 5, 0.13
    k = MollifierKernel(1)

    def ref(x):
        f = lambda z: float(k(np.array([[z]]))[0]) * abs(x - z / n) ** 0.5
        return quad(f, -1, 1, points=[n * x], limit=500, epsabs=1e-13)[0]

    h = 1e-5
    expected = (ref(x0 + h) - ref(x0 - h)) / (2 * h)
    bn = mollify(holder_drift(0.5), n)
    assert bn.jacobian(np.array([[x0]]))[0, 0, 0] == pytest.approx(expected, rel=5e-3)
    assert bn(np.array([[x0]]))[0, 0] == pytest.approx(ref(x0), rel=1e-4)


def test_mollify_validates_inputs():
    with pytest.raises(ConfigError):
        mollify(holder_drift(0.5), 0)
    with pytest.raises(ConfigError):
        mollify(holder_drift(0.5, dim=4), 2)
    with pytest.raises(ConfigError):
        mollify(holder_drift(0.5), 2, 4)
