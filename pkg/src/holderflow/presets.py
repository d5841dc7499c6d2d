"""Coefficient presets addressable by name.

Drifts: ``zero``, ``const:c=<v>``, ``linear:a=<scalar or matrix>``,
``holder:theta=<t>,scale=<c>`` and ``mollified:<base>:<n>``.
Diffusions: ``sigma:identity``, ``sigma:scalar:c=<c>`` and
``sigma:sin-perturbed:eps=<e>``.  Vector and matrix values use JSON list
syntax, e.g. ``linear:a=[[-1,0],[0,-2]]``.
"""

from __future__ import annotations

import json

import numpy as np

from .coeffs import (
    DiffusionSpec,
    DriftField,
    constant_drift,
    holder_drift,
    identity_sigma,
    linear_drift,
    scalar_sigma,
    sin_perturbed_sigma,
    zero_drift,
)
from .errors import ConfigError
from .mollify import DEFAULT_QUAD, mollify


def split_top_level(text: str, sep: str = ",") -> list[str]:
    """Split on ``sep`` outside square brackets."""
    out, depth, cur = [], 0, []
    for ch in text:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == sep and depth == 0:
            out.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    out.append("".join(cur))
    return [p for p in (s.strip() for s in out) if p]


def parse_params(text: str, key: str = "drift") -> dict:
    params = {}
    for part in split_top_level(text):
        name, eq, val = part.partition("=")
        if not eq:
            raise ConfigError(f"expected name=value in {text!r}, got {part!r}", key)
        try:
            params[name.strip()] = json.loads(val)
        except json.JSONDecodeError:
            raise ConfigError(f"cannot parse value {val!r} in {text!r}", key) from None
    return params


def _only(params: dict, allowed: set[str], preset: str, key: str):
    extra = set(params) - allowed
    if extra:
        raise ConfigError(f"unknown parameter(s) {sorted(extra)} in {preset!r}", key)


def parse_drift(preset: str, dim: int = 1, quad: int = DEFAULT_QUAD) -> DriftField:
    preset = preset.strip()
    if preset.startswith("mollified:"):
        base, _, n = preset[len("mollified:") :].rpartition(":")
        if not base:
            raise ConfigError(f"expected mollified:<base>:<n>, got {preset!r}", "drift")
        try:
            n_int = int(n)
        except ValueError:
            raise ConfigError(f"mollification index must be an integer in {preset!r}", "drift") from None
        return mollify(parse_drift(base, dim, quad), n_int, quad)
    name, _, rest = preset.partition(":")
    params = parse_params(rest) if rest else {}
    if name == "zero":
        _only(params, set(), preset, "drift")
        return zero_drift(dim)
    if name == "const":
        _only(params, {"c"}, preset, "drift")
        c = np.atleast_1d(np.asarray(params.get("c", 1.0), dtype=float))
        if c.size == 1 and dim > 1:
            c = np.full(dim, c[0])
        return constant_drift(c)
    if name == "linear":
        _only(params, {"a"}, preset, "drift")
        a = np.asarray(params.get("a", -1.0), dtype=float)
        if a.ndim == 0:
            a = a * np.eye(dim)
        return linear_drift(a)
    if name == "holder":
        _only(params, {"theta", "scale"}, preset, "drift")
        return holder_drift(float(params.get("theta", 0.5)), float(params.get("scale", 1.0)), dim)
    raise ConfigError(
        f"unknown drift preset {preset!r}; expected zero, const, linear, holder or mollified:<base>:<n>", "drift"
    )


def parse_sigma(preset: str, dim: int = 1) -> DiffusionSpec:
    preset = preset.strip()
    body = preset[len("sigma:") :] if preset.startswith("sigma:") else preset
    name, _, rest = body.partition(":")
    params = parse_params(rest, "sigma") if rest else {}
    if name == "identity":
        _only(params, set(), preset, "sigma")
        return identity_sigma(dim)
    if name == "scalar":
        _only(params, {"c"}, preset, "sigma")
        c = float(params.get("c", 1.0))
        if c == 0:
            raise ConfigError("sigma:scalar needs c != 0 (a must be invertible)", "sigma")
        return scalar_sigma(c, dim)
    if name == "sin-perturbed":
        _only(params, {"eps"}, preset, "sigma")
        eps = float(params.get("eps", 0.1))
        if not abs(eps) < 1:
            raise ConfigError("sigma:sin-perturbed needs |eps| < 1", "sigma")
        return sin_perturbed_sigma(eps, dim)
    raise ConfigError(f"unknown sigma preset {preset!r}; expected sigma:identity, sigma:scalar or sigma:sin-perturbed", "sigma")


def parse_mollify_flag(text: str) -> tuple[int, int]:
    """``n=<int>,quad=<int>`` (quad optional)."""
    params = parse_params(text, "mollify")
    _only(params, {"n", "quad"}, text, "mollify")
    if "n" not in params:
        raise ConfigError("--mollify needs n=<int>", "mollify")
    try:
        return int(params["n"]), int(params.get("quad", DEFAULT_QUAD))
    except (TypeError, ValueError):
        raise ConfigError(f"bad --mollify value {text!r}", "mollify") from None
