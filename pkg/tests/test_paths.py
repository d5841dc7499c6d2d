from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from holderflow.brownian import BrownianDriver, TimeGrid
from holderflow.coeffs import holder_drift, identity_sigma, linear_drift, scalar_sigma, sin_perturbed_sigma, zero_drift
from holderflow.errors import BlowUpError, ConfigError
from holderflow.paths import composition_gap, path_summary, simulate, simulate_with_variation


def test_zero_drift_paths_are_brownian_paths():
    g = TimeGrid.from_dt(0.0, 1.0, 0.1)
    drv = BrownianDriver(4, 0.1)
    rec = simulate(zero_drift(), identity_sigma(), [0.3], 0.0, drv, g, n_paths=3)
    for p in range(3):
        np.testing.assert_allclose(rec.states[:, p, 0], 0.3 + drv.path(g, p)[:, 0], atol=1e-14)


def test_ou_moments():
    g = TimeGrid.from_dt(0.0, 1.0, 0.01)
    rec = simulate(linear_drift(-1.0), identity_sigma(), [1.0], 0.0, BrownianDriver(0, 0.01), g, n_paths=20000)
    end = rec.endpoint[:, 0]
    # Euler mean is (1 - dt)^N, variance sum of (1-dt)^{2k} dt
    mean = 0.99**100
    var = sum(0.99 ** (2 * k) * 0.01 for k in range(100))
    assert abs(end.mean() - mean) < 4 * np.sqrt(var / 20000)
    assert end.var() == pytest.approx(var, rel=0.04)


@settings(max_examples=10, deadline=None)
@given(workers=st.integers(1, 4), chunk=st.sampled_from([2, 16, 64]))
def test_results_do_not_depend_on_workers(workers, chunk):
    g = TimeGrid.from_dt(0.0, 0.5, 0.05)
    drv = BrownianDriver(9, 0.05)
    b, s = holder_drift(0.5), sin_perturbed_sigma(0.2)
    ref = simulate(b, s, [0.1], 0.0, drv, g, n_paths=100)
    got = simulate(b, s, [0.1], 0.0, drv, g, n_paths=100, workers=workers, chunk=chunk)
    np.testing.assert_array_equal(ref.states, got.states)


@settings(max_examples=10, deadline=None)
@given(alpha=st.sampled_from([0.25, 0.5, 2.0, 4.0]))
def test_variation_is_linear_in_direction(alpha):
    g = TimeGrid.from_dt(0.0, 0.5, 0.05)
    drv = BrownianDriver(1, 0.05, dim_noise=2)
    b, s = linear_drift([[-1.0, 0.3], [0.0, -0.5]]), sin_perturbed_sigma(0.3, 2)
    _, v1 = simulate_with_variation(b, s, [0.2, 0.1], [1.0, -1.0], drv, g, n_paths=20)
    _, v2 = simulate_with_variation(b, s, [0.2, 0.1], [alpha, -alpha], drv, g, n_paths=20)
    np.testing.assert_array_equal(v2.eta, alpha * v1.eta)


def test_variation_matches_fd_of_the_flow():
    g = TimeGrid.from_dt(0.0, 0.5, 0.01)
    drv = BrownianDriver(2, 0.01)
    b, s = linear_drift(-2.0), sin_perturbed_sigma(0.4)
    _, var = simulate_with_variation(b, s, [0.3], [1.0], drv, g, n_paths=10)
    e = 1e-6
    up = simulate(b, s, [0.3 + e], 0.0, drv, g, n_paths=10).endpoint
    dn = simulate(b, s, [0.3 - e], 0.0, drv, g, n_paths=10).endpoint
    np.testing.assert_allclose(var.eta[-1], (up - dn) / (2 * e), rtol=1e-5)


def test_direct_variation_needs_a_jacobian():
    g = TimeGrid.from_dt(0.0, 0.1, 0.01)
    with pytest.raises(ConfigError):
        simulate_with_variation(holder_drift(0.5), identity_sigma(), [0.0], [1.0], BrownianDriver(0, 0.01), g)


def test_euler_composition_is_exact():
    g = TimeGrid.from_dt(0.0, 1.0, 0.01)
    gaps = composition_gap(holder_drift(0.5), sin_perturbed_sigma(0.2), [0.4], 0.3, BrownianDriver(0, 0.01), g, n_paths=50)
    assert gaps.max() == 0.0


def test_blow_up_is_reported():
    g = TimeGrid.from_dt(0.0, 1.0, 0.01)
    with pytest.raises(BlowUpError):
        simulate(linear_drift(1e5), scalar_sigma(1.0), [1.0], 0.0, BrownianDriver(0, 0.01), g, n_paths=2)


def test_path_summary_fields():
    g = TimeGrid.from_dt(0.0, 0.2, 0.1)
    rec = simulate(zero_drift(), identity_sigma(), [0.0], 0.0, BrownianDriver(0, 0.1), g, n_paths=4)
    summ = path_summary(rec)
    assert summ["n_paths"] == 4
    assert summ["max_sup_abs"] >= summ["mean_sup_abs"] >= 0
