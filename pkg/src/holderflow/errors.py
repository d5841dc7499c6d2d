"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class HolderflowError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(HolderflowError, ValueError):
    """Invalid configuration or precondition violation detected before computing."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class NumericalError(HolderflowError, ArithmeticError):
    """A computation was aborted because its numerical state became unusable."""

    stage = "numerics"


class BlowUpError(NumericalError):
    def __init__(self, step: int, value: float, stage: str = "simulate"):
        super().__init__(f"non-finite or exploding state (|X|={value:.3g}) at step {step}")
        self.step = step
        self.value = value
        self.stage = stage


class SingularDiffusionError(NumericalError):
    def __init__(self, point, residual: float):
        super().__init__(f"a(x) is numerically singular at x={list(point)} (inversion residual {residual:.3g})")
        self.point = point
        self.residual = residual


class InversionError(NumericalError):
    stage = "invert"

    def __init__(self, residual: float, iterations: int, step: int | None = None):
        where = "" if step is None else f" at path step {step}"
        super().__init__(
            f"fixed-point inversion did not converge in {iterations} iterations{where} "
            f"(residual {residual:.3g}); the certified contraction bound is too optimistic"
        )
        self.residual = residual
        self.iterations = iterations
        self.step = step


class LambdaSelectionError(NumericalError):
    stage = "select_lambda"

    def __init__(self, message: str, diagnostics: list[dict] | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


class QuadratureError(NumericalError):
    stage = "mollify"


class QuadratureWarning(UserWarning):
    """Quadrature results changed noticeably under refinement."""
