from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from holderflow.interpolate import MultiquadricInterpolant


def _grid(dim, n, r=2.0):
    ax = np.linspace(-r, r, n)
    return np.stack(np.meshgrid(*[ax] * dim, indexing="ij"), axis=-1).reshape(-1, dim)


@settings(max_examples=15, deadline=None)
@given(
    A=st.lists(st.floats(-3, 3), min_size=4, max_size=4),
    c=st.lists(st.floats(-3, 3), min_size=2, max_size=2),
)
def test_affine_data_is_reproduced(A, c):
    A, c = np.array(A).reshape(2, 2), np.array(c)
    nodes = _grid(2, 7)
    f = MultiquadricInterpolant.fit(nodes, nodes @ A.T + c)
    x = np.random.default_rng(0).uniform(-3, 3, (20, 2))
    np.testing.assert_allclose(f(x), x @ A.T + c, atol=1e-9)
    np.testing.assert_allclose(f.gradient(x), np.broadcast_to(A, (20, 2, 2)), atol=1e-8)
    np.testing.assert_allclose(f.hessian(x), 0, atol=1e-7)


def test_zero_data_gives_zero():
    nodes = _grid(1, 9)
    f = MultiquadricInterpolant.fit(nodes, np.zeros((9, 1)))
    x = np.linspace(-5, 5, 11)[:, None]
    assert np.all(f(x) == 0)
    assert np.all(f.gradient(x) == 0)


def test_interpolates_nodes_and_smooth_data():
    nodes = _grid(1, 41, 3.0)
    f = MultiquadricInterpolant.fit(nodes, np.sin(nodes))
    np.testing.assert_allclose(f(nodes), np.sin(nodes), atol=1e-8)
    x = np.linspace(-2.5, 2.5, 37)[:, None]
    assert np.max(np.abs(f(x) - np.sin(x))) < 1e-3
    assert np.max(np.abs(f.gradient(x)[..., 0, 0] - np.cos(x[:, 0]))) < 1e-2
    # leave-one-out error is dominated by the end nodes
    assert f.loo_error < 0.1


def test_derivatives_match_fd():
    nodes = _grid(2, 6)
    vals = np.stack([np.sin(nodes[:, 0]) * nodes[:, 1], np.cos(nodes.sum(1))], axis=1)
    f = MultiquadricInterpolant.fit(nodes, vals)
    x = np.array([[0.3, -0.4]])
    e = 1e-5
    for i in range(2):
        ei = np.eye(2)[i] * e
        np.testing.assert_allclose(f.gradient(x)[0, :, i], ((f(x + ei) - f(x - ei)) / (2 * e))[0], atol=1e-6)
        np.testing.assert_allclose(
            f.hessian(x)[0, :, :, i], ((f.gradient(x + ei) - f.gradient(x - ei)) / (2 * e))[0], atol=1e-5
        )
    v, g = f.value_and_gradient(x)
    np.testing.assert_array_equal(v, f(x))
    np.testing.assert_array_equal(g, f.gradient(x))


def test_fit_rejects_bad_shapes():
    with pytest.raises(Exception):
        MultiquadricInterpolant.fit(np.zeros((3, 1)), np.zeros((4, 1)))
