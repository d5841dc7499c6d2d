from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from holderflow.errors import ConfigError
from holderflow.mollify import MollifiedDrift
from holderflow.presets import parse_drift, parse_mollify_flag, parse_params, parse_sigma, split_top_level


def test_split_respects_brackets():
    assert split_top_level("a=[[1,2],[3,4]],b=2") == ["a=[[1,2],[3,4]]", "b=2"]


def test_parse_params_uses_json_values():
    assert parse_params("theta=0.3,scale=2") == {"theta": 0.3, "scale": 2}
    with pytest.raises(ConfigError):
        parse_params("theta")
    with pytest.raises(ConfigError):
        parse_params("theta=abc")


@settings(max_examples=20, deadline=None)
@given(theta=st.floats(0.05, 0.95), scale=st.floats(0.1, 5), x=st.floats(-10, 10))
def test_holder_preset(theta, scale, x):
    b = parse_drift(f"holder:theta={theta!r},scale={scale!r}")
    assert b(np.array([x]))[0] == pytest.approx(scale * abs(x) ** theta)
    assert b.theta == theta


def test_matrix_and_scalar_presets():
    b = parse_drift("linear:a=[[-1,0],[0,-2]]", dim=2)
    np.testing.assert_allclose(b(np.array([1.0, 1.0])), [-1.0, -2.0])
    np.testing.assert_allclose(parse_drift("linear:a=-3", dim=2)(np.ones(2)), [-3.0, -3.0])
    np.testing.assert_allclose(parse_drift("const:c=2", dim=3)(np.zeros(3)), [2.0, 2.0, 2.0])
    assert np.all(parse_drift("zero", dim=2)(np.ones(2)) == 0)


def test_mollified_preset_nests():
    b = parse_drift("mollified:holder:theta=0.5,scale=1:8")
    assert isinstance(b, MollifiedDrift)
    assert b.n == 8 and b.has_jacobian


@pytest.mark.parametrize("preset", ["sigma:identity", "identity", "sigma:scalar:c=2", "sigma:sin-perturbed:eps=0.2"])
def test_sigma_presets(preset):
    s = parse_sigma(preset, 2)
    assert s.sigma(np.zeros(2)).shape == (2, 2)


@pytest.mark.parametrize(
    "preset",
    ["nope", "holder:theta=1.5", "holder:alpha=1", "mollified:holder:x", "mollified:3", "zero:c=1"],
)
def test_bad_drifts(preset):
    with pytest.raises(ConfigError):
        parse_drift(preset)


@pytest.mark.parametrize("preset", ["sigma:scalar:c=0", "sigma:sin-perturbed:eps=1", "sigma:weird"])
def test_bad_sigmas(preset):
    with pytest.raises(ConfigError):
        parse_sigma(preset)


def test_mollify_flag():
    assert parse_mollify_flag("n=4") == (4, 32)
    assert parse_mollify_flag("n=4,quad=16") == (4, 16)
    with pytest.raises(ConfigError):
        parse_mollify_flag("quad=16")
