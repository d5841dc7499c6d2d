"""Monte Carlo tools for SDEs with Hölder continuous, unbounded drift.

The package builds the Zvonkin transform from a resolvent computed by Monte
Carlo, simulates flows and their spatial derivatives through it, and
estimates semigroup gradients with a Bismut-Elworthy-Li weight.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .bel import bel_gradient, decay_probe, fd_gradient, parse_observable
from .brownian import BrownianDriver, TimeGrid, derive_seed
from .coeffs import DiffusionSpec, DriftField, check_hypotheses
from .errors import ConfigError, HolderflowError, NumericalError
from .mollify import mollify
from .paths import simulate, simulate_with_variation
from .presets import parse_drift, parse_sigma
from .resolvent import ResolventConfig, select_lambda, solve_psi
from .zvonkin import ZvonkinTransform, build_transform, flow_derivative, stability_experiment

__all__ = [
    "BrownianDriver",
    "ConfigError",
    "DiffusionSpec",
    "DriftField",
    "HolderflowError",
    "NumericalError",
    "ResolventConfig",
    "TimeGrid",
    "ZvonkinTransform",
    "__version__",
    "bel_gradient",
    "build_transform",
    "check_hypotheses",
    "decay_probe",
    "derive_seed",
    "fd_gradient",
    "flow_derivative",
    "mollify",
    "parse_drift",
    "parse_observable",
    "parse_sigma",
    "select_lambda",
    "simulate",
    "simulate_with_variation",
    "solve_psi",
    "stability_experiment",
]
