from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from holderflow.brownian import BrownianDriver, TimeGrid, derive_seed
from holderflow.errors import ConfigError
from holderflow.parallel import chunk_bounds, map_chunks


def test_derive_seed_is_stable_and_label_sensitive():
    assert derive_seed(7, "a") == derive_seed(7, "a")
    assert derive_seed(7, "a") != derive_seed(7, "b")
    assert derive_seed(7, "a") != derive_seed(8, "a")
    assert 0 <= derive_seed(2**70, "x") < 2**64


def test_grid_rejects_misaligned_dt():
    with pytest.raises(ConfigError):
        TimeGrid.from_dt(0.0, 1.0, 0.3)
    with pytest.raises(ConfigError):
        TimeGrid(0.5, 0.5, 1)
    g = TimeGrid.from_dt(0.0, 1.0, 0.1)
    assert g.steps == 10
    assert g.index_of(0.3) == 3


@settings(max_examples=20, deadline=None)
@given(r=st.integers(1, 6), steps=st.integers(1, 8), seed=st.integers(0, 2**32))
def test_coarse_increments_are_sums_of_fine_ones(r, steps, seed):
    fine_dt = 0.01
    drv = BrownianDriver(seed, fine_dt, dim_noise=2)
    fine = drv.increments(TimeGrid(0.0, steps * r * fine_dt, steps * r), 0, 5)
    coarse = drv.increments(TimeGrid(0.0, steps * r * fine_dt, steps), 0, 5)
    summed = fine.reshape(steps, r, 5, 2).sum(axis=1)
    np.testing.assert_allclose(coarse, summed, rtol=0, atol=1e-14)


@settings(max_examples=20, deadline=None)
@given(a=st.integers(0, 30), n=st.integers(1, 20))
def test_increments_do_not_depend_on_the_requested_path_range(a, n):
    drv = BrownianDriver(3, 0.05)
    g = TimeGrid(0.0, 0.5, 10)
    full = drv.increments(g, 0, 60)
    np.testing.assert_array_equal(drv.increments(g, a, a + n), full[:, a : a + n])


def test_late_grid_reuses_the_same_noise():
    drv = BrownianDriver(11, 0.1)
    full = drv.increments(TimeGrid(0.0, 1.0, 10), 0, 4)
    tail = drv.increments(TimeGrid(0.5, 1.0, 5), 0, 4)
    np.testing.assert_array_equal(tail, full[5:])


def test_antithetic_pairs_are_negated():
    drv = BrownianDriver(5, 0.1, antithetic=True)
    inc = drv.increments(TimeGrid(0.0, 1.0, 10), 0, 8)
    np.testing.assert_array_equal(inc[:, 1::2], -inc[:, 0::2])
    np.testing.assert_array_equal(drv.increments(TimeGrid(0.0, 1.0, 10), 3, 6), inc[:, 3:6])


def test_increment_moments():
    drv = BrownianDriver(1, 0.01)
    inc = drv.increments(TimeGrid(0.0, 0.1, 10), 0, 20000)
    assert abs(inc.mean()) < 4 * np.sqrt(0.01 / inc.size)
    assert abs(inc.var() / 0.01 - 1) < 0.02


def test_brownian_path_starts_at_zero():
    drv = BrownianDriver(2, 0.1, dim_noise=3)
    w = drv.path(TimeGrid(0.0, 1.0, 10), 4)
    assert w.shape == (11, 3)
    assert np.all(w[0] == 0)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 500), chunk=st.integers(1, 64))
def test_chunks_partition_the_paths(n, chunk):
    bounds = chunk_bounds(n, chunk)
    assert bounds[0][0] == 0 and bounds[-1][1] == n
    assert all(b[1] == c[0] for b, c in zip(bounds, bounds[1:]))
    assert all((b - a) % 2 == 0 for a, b in bounds[:-1])


def test_map_chunks_is_worker_independent():
    fn = lambda a, b: np.arange(a, b) ** 2
    one = np.concatenate(map_chunks(fn, 1000, 1, 64))
    many = np.concatenate(map_chunks(fn, 1000, 4, 64))
    np.testing.assert_array_equal(one, many)
