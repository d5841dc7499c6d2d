"""Closed-form and hand-derived reference values, frozen.

Each expected number here was computed independently of the package (direct
evaluation, geometric series, Gaussian moments or the Euler product formula)
before the corresponding code existed.
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from holderflow.bel import bel_gradient, coord_observable, semigroup, sq_observable
from holderflow.brownian import BrownianDriver, TimeGrid
from holderflow.coeffs import (
    check_hypotheses,
    constant_drift,
    holder_drift,
    holder_seminorm,
    identity_sigma,
    linear_drift,
    probe_cloud,
    scalar_sigma,
    sin_perturbed_sigma,
    zero_drift,
)
from holderflow.errors import LambdaSelectionError
from holderflow.mollify import derivative_bound_probe, mollification_gap_parts, mollify
from holderflow.paths import simulate, simulate_with_variation
from holderflow.resolvent import ResolventConfig, residual_check, select_lambda, solve_psi
from holderflow.zvonkin import ZvonkinTransform, flow_derivative, neumann_inverse

E_INV = 0.36787944117144233  # e^{-1}


def test_holder_ratio_of_square_root_at_origin():
    b = holder_drift(0.5)
    assert holder_seminorm(b, [(np.array([0.0]), np.array([0.25]))], 0.5) == pytest.approx(1.0, abs=1e-15)


def test_holder_ratio_of_negative_identity():
    assert holder_seminorm(linear_drift(-1.0), [(np.array([0.0]), np.array([1.0]))], 0.5) == 1.0


def test_inverse_diffusion_sup_for_sine_perturbation():
    rep = check_hypotheses(zero_drift(), sin_perturbed_sigma(0.1), probe_cloud(1, 1024, 10.0))
    assert rep.a_inv_sup_est == pytest.approx(1 / 0.81, rel=1e-3)


@pytest.mark.parametrize("n", [1, 3, 10])
def test_mollified_identity_is_identity(n):
    x = np.linspace(-3, 3, 13)[:, None]
    np.testing.assert_allclose(mollify(linear_drift(1.0), n)(x), x, atol=1e-12)


def test_square_root_gap_shrinks_from_4_to_16():
    b = holder_drift(0.5)
    probes = np.linspace(-2, 2, 81)[:, None]
    g4 = mollification_gap_parts(b, mollify(b, 4), probes)[0]
    g16 = mollification_gap_parts(b, mollify(b, 16), probes)[0]
    assert g16 < g4


def test_first_derivative_sup_doubles_like_root_two():
    b = holder_drift(0.5)
    probes = np.linspace(-0.5, 0.5, 201)[:, None]
    r = derivative_bound_probe(mollify(b, 8), 1, probes) / derivative_bound_probe(mollify(b, 4), 1, probes)
    assert r == pytest.approx(math.sqrt(2), rel=0.2)


@pytest.mark.parametrize("dt", [1e-2, 1e-3])
def test_euler_for_decay_ode(dt):
    grid = TimeGrid.from_dt(0.0, 1.0, dt)
    rec = simulate(linear_drift(-1.0), scalar_sigma(0.0), [1.0], 0.0, BrownianDriver(0, dt), grid)
    assert abs(rec.endpoint[0, 0] - E_INV) <= 2 * dt
    assert rec.endpoint[0, 0] == pytest.approx((1 - dt) ** round(1 / dt), rel=1e-12)


def test_constant_drift_euler_is_exact():
    grid = TimeGrid.from_dt(0.0, 1.0, 0.1)
    rec = simulate(constant_drift([0.7]), scalar_sigma(0.0), [1.0], 0.0, BrownianDriver(0, 0.1), grid)
    assert rec.endpoint[0, 0] == pytest.approx(1.7, abs=1e-14)


def test_variation_product_for_ou():
    grid = TimeGrid.from_dt(0.0, 1.0, 1e-3)
    _, var = simulate_with_variation(linear_drift(-1.0), identity_sigma(), [0.5], [1.0], BrownianDriver(0, 1e-3), grid, n_paths=3)
    assert var.eta[-1, :, 0] == pytest.approx(np.full(3, 0.999**1000), rel=1e-12)
    assert 0.999**1000 == pytest.approx(0.3677, abs=1e-4)


def test_resolvent_of_constant_and_linear_drifts():
    cfg = ResolventConfig(lam=5.0, dt=1e-2, n_paths=2000, antithetic=True)
    const = solve_psi(constant_drift([1.0]), identity_sigma(), cfg, [[0.3]], seed=0)
    assert const.psi[0, 0] == pytest.approx(0.2, abs=1e-14)
    lin = solve_psi(linear_drift(-1.0), identity_sigma(), cfg, [[1.0]], seed=0)
    assert lin.psi[0, 0] == pytest.approx(-1 / 6, abs=3 * lin.psi_stderr[0, 0] + 2e-3)
    assert lin.grad_psi[0, 0, 0] == pytest.approx(-1 / 6, abs=2e-3)


def test_ladder_choice_for_linear_drift():
    cfg = ResolventConfig(lam=1.0, dt=1e-2, n_paths=400, antithetic=True)
    lam, sol = select_lambda(linear_drift(-1.0), identity_sigma(), [2.0, 5.0, 10.0], 0.5, cfg, seed=0)
    assert lam == 2.0
    assert sol.grad_sup_est == pytest.approx(1 / 3, abs=5e-3)
    with pytest.raises(LambdaSelectionError):
        select_lambda(linear_drift(-1.0), identity_sigma(), [2.0, 5.0, 10.0], 0.05, cfg, seed=0)


@pytest.mark.parametrize("drift", [constant_drift([1.0]), linear_drift(-1.0)])
def test_pde_residual_is_within_noise(drift):
    cfg = ResolventConfig(lam=5.0, dt=1e-2, n_paths=2000)
    sol = solve_psi(drift, identity_sigma(), cfg, [[0.5]], seed=1, gradient=False)
    rep = residual_check(drift, identity_sigma(), sol)
    assert rep.value <= 3 * rep.stderr + 1e-12


def test_affine_inversion_iterates():
    T = ZvonkinTransform.affine([[0.5]], gamma_cert=0.5)
    assert T.invert(np.array([3.0]))[0] == pytest.approx(2.0, abs=1e-9)
    x = np.array([3.0])
    iterates = []
    for _ in range(3):
        x = np.array([3.0]) - T.psi(x)
        iterates.append(float(x[0]))
    assert iterates == [1.5, 2.25, 1.875]


@pytest.mark.parametrize("m, expected", [(0.5, 2 / 3), (-0.25, 4 / 3)])
def test_neumann_scalar(m, expected):
    inv, _, _ = neumann_inverse(np.array([[[m]]]), abs(m))
    assert inv[0, 0, 0] == pytest.approx(expected, abs=1e-10)


def test_ten_term_neumann_bound():
    inv, terms, rem = neumann_inverse(np.array([[[0.5]]]), 0.5, terms=10)
    assert terms == 10
    assert rem == pytest.approx(0.5**11 / 0.5)
    assert abs(inv[0, 0, 0] - 2 / 3) <= rem


def test_transformed_derivative_for_ou():
    T = ZvonkinTransform.affine([[-1 / 6]], lam=5.0, base_drift=linear_drift(-1.0), base_sigma=identity_sigma())
    grid = TimeGrid.from_dt(0.0, 1.0, 1e-3)
    fd = flow_derivative(T, [1.0], [1.0], BrownianDriver(0, 1e-3), grid, n_paths=5)
    np.testing.assert_allclose(fd.values[-1, :, 0], E_INV, atol=1e-3)


def test_brownian_second_moment():
    grid = TimeGrid.from_dt(0.0, 1.0, 0.1)
    s = identity_sigma(2)
    mean, se = semigroup(sq_observable(), zero_drift(2), s, 1.0, [0.0, 0.0], 20000, grid, seed=0)
    assert abs(mean - 2.0) <= 3 * se


def test_ou_mean_and_gradient():
    b, s = linear_drift(-1.0), identity_sigma()
    grid = TimeGrid.from_dt(0.0, 1.0, 1e-3)
    mean, se = semigroup(coord_observable(), b, s, 1.0, [1.0], 5000, grid, seed=0)
    assert abs(mean - E_INV) <= 3 * se + 1e-3
    est = bel_gradient(coord_observable(), b, s, 1.0, [1.0], [1.0], 20000, grid, seed=0, use_cv=True)
    assert abs(est.value - E_INV) <= 3 * est.stderr + 1e-3
