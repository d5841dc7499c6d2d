from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from holderflow.bel import (
    bel_gradient,
    closed_form_gradient,
    closed_form_semigroup,
    const_observable,
    coord_observable,
    decay_probe,
    fd_gradient,
    geometric_times,
    holder_observable,
    ou_moments,
    parse_observable,
    rk4_flow,
    semigroup,
    sq_observable,
)
from holderflow.brownian import TimeGrid
from holderflow.coeffs import holder_drift, identity_sigma, linear_drift, scalar_sigma, zero_drift
from holderflow.errors import ConfigError
from holderflow.resolvent import ResolventConfig
from holderflow.zvonkin import build_transform

OU = (linear_drift(-1.0), identity_sigma())


@settings(max_examples=20, deadline=None)
@given(a=st.floats(-3, -0.1), t=st.floats(0.05, 3), x=st.floats(-3, 3), c=st.floats(0.2, 2))
def test_ou_moments_match_the_scalar_formulas(a, t, x, c):
    mean, cov = ou_moments(linear_drift(a), scalar_sigma(c), t, [x])
    assert mean[0] == pytest.approx(math.exp(a * t) * x, rel=1e-10, abs=1e-12)
    assert cov[0, 0] == pytest.approx(c * c * (math.exp(2 * a * t) - 1) / (2 * a), rel=1e-8)


@settings(max_examples=20, deadline=None)
@given(t=st.floats(0.05, 2), x=st.floats(-2, 2))
def test_closed_form_gradient_is_the_derivative_of_the_semigroup(t, x):
    b, s = OU
    f = sq_observable()
    e = 1e-5
    fd = (closed_form_semigroup(f, b, s, t, [x + e]) - closed_form_semigroup(f, b, s, t, [x - e])) / (2 * e)
    assert closed_form_gradient(f, b, s, t, [x], [1.0]) == pytest.approx(fd, rel=1e-6, abs=1e-8)
    assert closed_form_gradient(coord_observable(), b, s, t, [x], [1.0]) == pytest.approx(math.exp(-t))


def test_closed_form_needs_a_linear_drift():
    with pytest.raises(ConfigError):
        closed_form_gradient(coord_observable(), holder_drift(0.5), identity_sigma(), 1.0, [0.0], [1.0])


def test_rk4_flow_of_linear_drift():
    y = rk4_flow(linear_drift(-1.0), np.array([[2.0]]), TimeGrid.from_dt(0.0, 1.0, 0.1))
    assert y[0, 0] == pytest.approx(2 * math.exp(-1), rel=1e-6)


def test_bel_matches_closed_form_and_fd():
    b, s = OU
    grid = TimeGrid.from_dt(0.0, 1.0, 1e-2)
    f = coord_observable()
    est = bel_gradient(f, b, s, 1.0, [1.0], [1.0], 20000, grid, seed=3, use_cv=True)
    exact = closed_form_gradient(f, b, s, 1.0, [1.0], [1.0])
    assert abs(est.value - exact) <= 3 * est.stderr + 0.01
    fd = fd_gradient(f, b, s, 1.0, [1.0], [1.0], 1e-3, 20000, grid, seed=3)
    assert abs(est.value - fd.value) <= 3 * math.hypot(est.stderr, fd.stderr) + 0.01
    assert est.extras["J_mean"] == pytest.approx(0, abs=4 * est.extras["J_mean_stderr"])


def test_control_variate_reduces_the_error():
    b, s = OU
    grid = TimeGrid.from_dt(0.0, 0.5, 1e-2)
    f = sq_observable()
    plain = bel_gradient(f, b, s, 0.5, [1.0], [1.0], 5000, grid, seed=1)
    cv = bel_gradient(f, b, s, 0.5, [1.0], [1.0], 5000, grid, seed=1, use_cv=True)
    assert cv.stderr < plain.stderr


def test_degenerate_inputs():
    b, s = OU
    grid = TimeGrid.from_dt(0.0, 1.0, 1e-2)
    zero = bel_gradient(coord_observable(), b, s, 1.0, [1.0], [0.0], 500, grid, seed=0)
    assert zero.value == 0.0 and zero.stderr == 0.0
    const = bel_gradient(const_observable(2.0), b, s, 1.0, [1.0], [1.0], 5000, grid, seed=0)
    assert abs(const.value) <= 3 * const.stderr
    with pytest.raises(ConfigError):
        bel_gradient(coord_observable(), b, s, 0.0, [1.0], [1.0], 100, grid, seed=0)


@settings(max_examples=5, deadline=None)
@given(alpha=st.sampled_from([0.5, 2.0, 4.0]))
def test_estimate_is_linear_in_direction(alpha):
    b, s = OU
    grid = TimeGrid.from_dt(0.0, 0.5, 1e-2)
    f = sq_observable()
    one = bel_gradient(f, b, s, 0.5, [0.5], [1.0], 200, grid, seed=4)
    many = bel_gradient(f, b, s, 0.5, [0.5], [alpha], 200, grid, seed=4)
    assert many.value == pytest.approx(alpha * one.value, rel=1e-12)


def test_workers_do_not_change_the_estimate():
    b, s = OU
    grid = TimeGrid.from_dt(0.0, 0.5, 1e-2)
    a = bel_gradient(sq_observable(), b, s, 0.5, [0.5], [1.0], 300, grid, seed=4, chunk=64)
    c = bel_gradient(sq_observable(), b, s, 0.5, [0.5], [1.0], 300, grid, seed=4, chunk=64, workers=4)
    assert a.value == c.value and a.stderr == c.stderr


def test_semigroup_of_ou():
    b, s = OU
    grid = TimeGrid.from_dt(0.0, 1.0, 1e-2)
    mean, se = semigroup(sq_observable(), b, s, 1.0, [1.0], 20000, grid, seed=2)
    exact = closed_form_semigroup(sq_observable(), b, s, 1.0, [1.0])
    assert abs(mean - exact) <= 4 * se + 0.01


def test_rough_drift_goes_through_the_transform():
    b, s = holder_drift(0.5), identity_sigma()
    cfg = ResolventConfig(lam=1.0, dt=2e-2, n_paths=400, antithetic=True)
    T = build_transform(b, s, lam=2.0, cfg=cfg, seed=0)
    grid = TimeGrid.from_dt(0.0, 0.5, 1e-2)
    est = bel_gradient(coord_observable(), b, s, 0.5, [0.5], [1.0], 4000, grid, seed=1, transform=T, use_cv=True)
    fd = fd_gradient(coord_observable(), b, s, 0.5, [0.5], [1.0], 1e-2, 4000, grid, seed=1)
    assert est.via_transform
    assert abs(est.value - fd.value) <= 4 * math.hypot(est.stderr, fd.stderr) + 0.02


def test_geometric_times():
    ts = geometric_times(0.02, 0.5, 8)
    assert ts[0] == pytest.approx(0.02) and ts[-1] == pytest.approx(0.5)
    assert np.allclose(np.diff(np.log(ts)), np.log(25) / 7)


def test_decay_probe_on_a_small_budget():
    fit = decay_probe(
        holder_observable(0.5), zero_drift(), identity_sigma(), [0.0], [1.0],
        [0.02, 0.06, 0.17, 0.5], n_paths=4000, steps_per_t=8, cloud_points=41, seed=0,
    )
    assert fit.expected_slope == -0.25
    assert abs(fit.slope + 0.25) < 0.2
    assert all(0.7 < v < 1.3 for v in fit.j2_times_t)


def test_decay_probe_validates_the_window():
    with pytest.raises(ConfigError):
        decay_probe(holder_observable(0.5), zero_drift(), identity_sigma(), [0.0], [1.0], [0.1, 0.2, 0.4])


@pytest.mark.parametrize("preset", ["const", "coord:0", "sq", "holder:0.3", "holder:theta=0.3"])
def test_parse_observable(preset):
    f = parse_observable(preset)
    assert np.isfinite(f(np.array([[0.5]]))).all()


@pytest.mark.parametrize("preset", ["cube", "holder:2", "coord:x"])
def test_parse_observable_rejects(preset):
    with pytest.raises(ConfigError):
        parse_observable(preset)
