"""Semigroup values and Bismut-Elworthy-Li gradient estimates.

For ``P_t f(x) = E f(X_t^x)`` the estimator is

    D_h P_t f(x) = E[ f(X_t) J ],   J = (1/t) sum_j < sigma^T a^{-1}(X_j) eta_j, dW_j >,

with ``eta_j`` the derivative of the path in direction ``h`` (left-endpoint
Itô sum).  No derivative of ``f`` is needed.  Subtracting ``f(Y_t)``, where
``Y`` is the noiseless flow ``Y' = b(Y)``, leaves the mean unchanged because
``E J = 0``, and usually shrinks the variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats
from scipy.linalg import expm

from .brownian import BrownianDriver, TimeGrid
from .coeffs import DiffusionSpec, DriftField, _as_points
from .errors import ConfigError
from .parallel import DEFAULT_CHUNK, map_chunks
from .paths import integrate
from .zvonkin import ZvonkinTransform, build_transform, transformed_integrate

Array = np.ndarray

# smallest ratio t_max / t_min accepted by the decay probe (0.02 .. 0.5)
MIN_TIME_SPAN = 25.0


@dataclass(frozen=True)
class Observable:
    eval: Callable[[Array], Array]  # (..., d) -> (...)
    theta_f: float | None = None
    label: str = "custom"

    def __call__(self, x) -> Array:
        return self.eval(np.asarray(x, dtype=float))


def const_observable(c: float = 1.0) -> Observable:
    return Observable(lambda x: np.full(x.shape[:-1], float(c)), None, "const")


def coord_observable(i: int = 0) -> Observable:
    return Observable(lambda x: x[..., i].copy(), 1.0, f"coord:{i}")


def sq_observable() -> Observable:
    return Observable(lambda x: (x * x).sum(axis=-1), None, "sq")


def holder_observable(theta: float = 0.5) -> Observable:
    if not 0 < theta <= 1:
        raise ConfigError(f"observable exponent must lie in (0, 1], got {theta}", "f")
    return Observable(lambda x: np.linalg.norm(x, axis=-1) ** theta, theta, f"holder:{theta}")


def parse_observable(preset: str) -> Observable:
    """``const``, ``coord:<i>``, ``sq`` or ``holder:<theta>``."""
    name, _, arg = preset.partition(":")
    try:
        if name == "const":
            return const_observable(float(arg) if arg else 1.0)
        if name == "coord":
            return coord_observable(int(arg) if arg else 0)
        if name == "sq":
            return sq_observable()
        if name == "holder":
            return holder_observable(float(arg.replace("theta=", "")) if arg else 0.5)
    except ValueError as exc:
        raise ConfigError(f"bad observable {preset!r}: {exc}", "f") from None
    raise ConfigError(f"unknown observable {preset!r}; expected const, coord:<i>, sq or holder:<theta>", "f")


@dataclass
class GradientEstimate:
    value: float
    stderr: float
    n_paths: int
    t: float
    x: Array
    h: Array
    control_variate_used: bool
    via_transform: bool = False
    extras: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "value": self.value,
            "stderr": self.stderr,
            "n_paths": self.n_paths,
            "t": self.t,
            "x": np.asarray(self.x).tolist(),
            "h": np.asarray(self.h).tolist(),
            "control_variate_used": self.control_variate_used,
            "via_transform": self.via_transform,
            **self.extras,
        }


def _mean_se(v: Array) -> tuple[Array, Array]:
    n = v.shape[0]
    se = v.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(v.shape[1:])
    return v.mean(axis=0), se


def _grid_to(grid: TimeGrid, t: float) -> TimeGrid:
    if not t > grid.t0:
        raise ConfigError(f"t must exceed the grid start (got t={t}); the estimator is singular at t=0", "t")
    j = grid.index_of(t)
    return TimeGrid(grid.t0, grid.t0 + j * grid.dt, j)


def rk4_flow(b: DriftField, x: Array, grid: TimeGrid) -> Array:
    """Noiseless flow ``y' = b(y)`` by the classical fourth-order method on ``grid``."""
    y = np.asarray(x, dtype=float).copy()
    dt = grid.dt
    for _ in range(grid.steps):
        k1 = b.eval(y)
        k2 = b.eval(y + 0.5 * dt * k1)
        k3 = b.eval(y + 0.5 * dt * k2)
        k4 = b.eval(y + dt * k3)
        y = y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return y


def semigroup(
    f: Observable,
    b: DriftField,
    s: DiffusionSpec,
    t: float,
    x,
    n_paths: int,
    grid: TimeGrid,
    seed: int,
    *,
    workers: int = 1,
    chunk: int = DEFAULT_CHUNK,
) -> tuple[float, float]:
    """Monte Carlo ``P_t f(x)`` with its standard error."""
    g = _grid_to(grid, t)
    x = _as_points(x, b.dim).reshape(1, b.dim)
    driver = BrownianDriver(seed, g.dt, s.dim_noise)

    def run(a, c):
        XT, _, _, _, _ = integrate(b, s, x, driver, g, a, c, stage="semigroup")
        return f(XT[:, 0, :])

    vals = np.concatenate(map_chunks(run, n_paths, workers, chunk))
    m, se = _mean_se(vals)
    return float(m), float(se)


@dataclass
class _BelBatch:
    fT: Array  # (n, m) f at the endpoints
    J: Array  # (n, m) weight J including the 1/t factor
    cv: Array  # (m,) f along the noiseless flow


def _bel_batch(
    f: Observable,
    b: DriftField,
    s: DiffusionSpec,
    starts: Array,
    h: Array,
    g: TimeGrid,
    driver: BrownianDriver,
    n_paths: int,
    transform: ZvonkinTransform | None,
    workers: int,
    chunk: int,
) -> _BelBatch:
    t = g.T - g.t0

    if transform is None:

        def run(a, c):
            J = np.zeros((c - a, starts.shape[0]))

            def observe(j, X, drift, eta, dW):
                w = s.bel_weight(X)  # (n, m, k, d)
                v = (w * eta[..., None, :]).sum(axis=-1)  # (n, m, k)
                J[...] += (v * dW[:, None, :]).sum(axis=-1)

            XT, _, _, _, _ = integrate(b, s, starts, driver, g, a, c, eta0=h[None, :], observer=observe, stage="bel")
            return f(XT), J / t

    else:

        def run(a, c):
            r = transformed_integrate(transform, starts, driver, g, a, c, h=h[None, :], stage="bel")
            w = s.bel_weight(r.X[:-1])  # (steps, n, m, k, d)
            v = (w * r.deriv[:-1, ..., None, :]).sum(axis=-1)
            J = (v * r.increments[:, :, None, :]).sum(axis=-1).sum(axis=0)
            return f(r.X[-1]), J / t

    parts = map_chunks(run, n_paths, workers, chunk)
    fT = np.concatenate([p[0] for p in parts])
    J = np.concatenate([p[1] for p in parts])
    cv = f(rk4_flow(b, starts, g))
    return _BelBatch(fT, J, cv)


def _needs_transform(b: DriftField, via_transform: bool) -> bool:
    return via_transform or not b.has_jacobian


def bel_gradient(
    f: Observable,
    b: DriftField,
    s: DiffusionSpec,
    t: float,
    x,
    h,
    n_paths: int,
    grid: TimeGrid,
    seed: int,
    *,
    use_cv: bool = False,
    via_transform: bool = False,
    transform: ZvonkinTransform | None = None,
    transform_kw: dict | None = None,
    workers: int = 1,
    chunk: int = DEFAULT_CHUNK,
) -> GradientEstimate:
    """Bismut-Elworthy-Li estimate of ``D_h P_t f(x)``.

    Rough drifts are always routed through the transform (built on demand
    unless supplied).  ``extras`` carries the sample mean and second moment
    of ``J`` for the martingale and variance-shape checks.
    """
    g = _grid_to(grid, t)
    t = g.T - g.t0
    xp = _as_points(x, b.dim).reshape(1, b.dim)
    hv = np.atleast_1d(np.asarray(h, dtype=float))
    if hv.shape != (b.dim,):
        raise ConfigError(f"direction must have shape ({b.dim},)", "h")
    routed = _needs_transform(b, via_transform)
    if routed and transform is None:
        transform = build_transform(b, s, seed=seed, **(transform_kw or {}))
    driver = BrownianDriver(seed, g.dt, s.dim_noise)
    batch = _bel_batch(f, b, s, xp, hv, g, driver, n_paths, transform if routed else None, workers, chunk)
    fx = batch.fT[:, 0] - (batch.cv[0] if use_cv else 0.0)
    vals = fx * batch.J[:, 0]
    m, se = _mean_se(vals)
    jm, jse = _mean_se(batch.J[:, 0])
    return GradientEstimate(
        value=float(m),
        stderr=float(se),
        n_paths=n_paths,
        t=t,
        x=xp[0],
        h=hv,
        control_variate_used=use_cv,
        via_transform=routed,
        extras={
            "J_mean": float(jm),
            "J_mean_stderr": float(jse),
            "J_second_moment": float((batch.J[:, 0] ** 2).mean()),
        },
    )


def fd_gradient(
    f: Observable,
    b: DriftField,
    s: DiffusionSpec,
    t: float,
    x,
    h,
    fd_step: float,
    n_paths: int,
    grid: TimeGrid,
    seed: int,
    *,
    workers: int = 1,
    chunk: int = DEFAULT_CHUNK,
) -> GradientEstimate:
    """Central difference of ``P_t f`` at ``x +- fd_step h`` on coupled paths."""
    if not fd_step > 0:
        raise ConfigError("fd_step must be positive", "fd_step")
    g = _grid_to(grid, t)
    xp = _as_points(x, b.dim).reshape(b.dim)
    hv = np.atleast_1d(np.asarray(h, dtype=float))
    starts = np.stack([xp + fd_step * hv, xp - fd_step * hv])
    driver = BrownianDriver(seed, g.dt, s.dim_noise)

    def run(a, c):
        XT, _, _, _, _ = integrate(b, s, starts, driver, g, a, c, stage="fd")
        fv = f(XT)
        return (fv[:, 0] - fv[:, 1]) / (2 * fd_step)

    vals = np.concatenate(map_chunks(run, n_paths, workers, chunk))
    m, se = _mean_se(vals)
    return GradientEstimate(float(m), float(se), n_paths, g.T - g.t0, xp, hv, False, extras={"fd_step": fd_step})


# ---------------------------------------------------------------------------
# closed forms for linear drift and constant diffusion


def _linear_parts(b: DriftField, s: DiffusionSpec) -> tuple[Array, Array]:
    if s.constant is None or b.analytic_jacobian is None:
        raise ConfigError("closed forms need a linear drift and a constant diffusion", "drift")
    d = b.dim
    A = np.asarray(b.analytic_jacobian(np.zeros((1, d))))[0]
    if not np.allclose(b.eval(np.eye(d)), np.eye(d) @ A.T, rtol=0, atol=1e-14) or np.any(b.eval(np.zeros((1, d)))):
        raise ConfigError("closed forms need a linear drift b(x) = A x", "drift")
    return A, np.asarray(s.constant)


def ou_moments(b: DriftField, s: DiffusionSpec, t: float, x) -> tuple[Array, Array]:
    """Mean ``e^{At} x`` and covariance ``int_0^t e^{Au} a e^{A^T u} du`` of the linear SDE."""
    A, sig = _linear_parts(b, s)
    d = A.shape[0]
    x = np.atleast_1d(np.asarray(x, dtype=float))
    # Van Loan block exponential
    C = np.zeros((2 * d, 2 * d))
    C[:d, :d] = -A
    C[:d, d:] = sig @ sig.T
    C[d:, d:] = A.T
    E = expm(C * t)
    F = E[d:, d:].T
    cov = F @ E[:d, d:]
    return F @ x, 0.5 * (cov + cov.T)


def closed_form_semigroup(f: Observable, b: DriftField, s: DiffusionSpec, t: float, x) -> float:
    mean, cov = ou_moments(b, s, t, x)
    if f.label == "const":
        return float(f(mean[None])[0])
    if f.label.startswith("coord"):
        return float(mean[int(f.label.split(":")[1])])
    if f.label == "sq":
        return float(mean @ mean + np.trace(cov))
    raise ConfigError(f"no closed form for observable {f.label!r}", "f")


def closed_form_gradient(f: Observable, b: DriftField, s: DiffusionSpec, t: float, x, h) -> float:
    """``D_h P_t f(x)`` for const, coordinate and squared-norm observables."""
    A, _ = _linear_parts(b, s)
    F = expm(A * t)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    h = np.atleast_1d(np.asarray(h, dtype=float))
    if f.label == "const":
        return 0.0
    if f.label.startswith("coord"):
        return float((F @ h)[int(f.label.split(":")[1])])
    if f.label == "sq":
        return float(2 * (F @ x) @ (F @ h))
    raise ConfigError(f"no closed form for observable {f.label!r}", "f")


# ---------------------------------------------------------------------------
# small-time decay of the gradient


@dataclass
class DecayFit:
    slope: float
    slope_stderr: float
    band: tuple[float, float]
    intercept: float
    expected_slope: float | None
    ts: list[float]
    grad_sup: list[float]
    grad_stderr: list[float]
    j2_times_t: list[float]
    used: list[bool]
    excluded: list[float]

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def geometric_times(t_min: float = 0.02, t_max: float = 0.5, count: int = 8) -> list[float]:
    return [float(v) for v in np.geomspace(t_min, t_max, count)]


def decay_probe(
    f: Observable,
    b: DriftField,
    s: DiffusionSpec,
    x,
    h,
    t_list: Sequence[float],
    *,
    n_paths: int = 20_000,
    steps_per_t: int = 64,
    cloud_radius: float = 1.5,
    cloud_points: int = 121,
    use_cv: bool = True,
    max_rel_stderr: float = 0.3,
    seed: int = 0,
    transform: ZvonkinTransform | None = None,
    workers: int = 1,
    chunk: int = DEFAULT_CHUNK,
) -> DecayFit:
    """Fit the power of ``t`` in ``sup |D_h P_t f|`` over small times.

    For each ``t`` the gradient is estimated (Bismut-Elworthy-Li, coupled
    paths) on the line ``x + r h`` with ``|r| <= cloud_radius`` and the
    largest absolute value is kept; ``log`` of that sup is regressed on
    ``log t``.  Times whose sup has a relative standard error above
    ``max_rel_stderr`` are excluded and listed.  The second moment of the
    weight times ``t`` is recorded at ``x`` for every ``t``.
    """
    ts = sorted(float(t) for t in t_list)
    if len(ts) < 3 or ts[0] <= 0:
        raise ConfigError("need at least three positive times", "ts")
    if ts[-1] / ts[0] < MIN_TIME_SPAN - 1e-9:
        raise ConfigError(f"the time window must span a factor of at least {MIN_TIME_SPAN:g}", "ts")
    d = b.dim
    x = _as_points(x, d).reshape(d)
    hv = np.atleast_1d(np.asarray(h, dtype=float))
    norm_h = float(np.linalg.norm(hv))
    if norm_h == 0:
        raise ConfigError("direction h must be nonzero", "h")
    r = np.linspace(-cloud_radius, cloud_radius, cloud_points)
    if not np.any(r == 0):
        r = np.sort(np.append(r, 0.0))
    starts = x + r[:, None] * (hv / norm_h)
    centre = int(np.argmin(np.abs(r)))
    routed = not b.has_jacobian
    if routed and transform is None:
        transform = build_transform(b, s, seed=seed)
    sups, ses, j2t, used, excluded = [], [], [], [], []
    for i, t in enumerate(ts):
        g = TimeGrid(0.0, t, steps_per_t)
        driver = BrownianDriver(seed, g.dt, s.dim_noise, stream=i)
        batch = _bel_batch(f, b, s, starts, hv, g, driver, n_paths, transform if routed else None, workers, chunk)
        fx = batch.fT - (batch.cv[None, :] if use_cv else 0.0)
        mean, se = _mean_se(fx * batch.J)
        k = int(np.argmax(np.abs(mean)))
        sups.append(float(abs(mean[k])))
        ses.append(float(se[k]))
        j2t.append(float((batch.J[:, centre] ** 2).mean() * t))
        ok = se[k] <= max_rel_stderr * abs(mean[k])
        used.append(bool(ok))
        if not ok:
            excluded.append(t)
    lt = np.log([t for t, u in zip(ts, used) if u])
    lg = np.log([v for v, u in zip(sups, used) if u])
    if lt.size < 3:
        raise ConfigError(f"fewer than three usable times after excluding noisy estimates {excluded}", "ts")
    fit = stats.linregress(lt, lg)
    expected = None if f.theta_f is None else -(1 - f.theta_f) / 2
    band = (float(fit.slope - 2 * fit.stderr), float(fit.slope + 2 * fit.stderr))
    return DecayFit(
        slope=float(fit.slope),
        slope_stderr=float(fit.stderr),
        band=band,
        intercept=float(fit.intercept),
        expected_slope=expected,
        ts=ts,
        grad_sup=sups,
        grad_stderr=ses,
        j2_times_t=j2t,
        used=used,
        excluded=excluded,
    )
