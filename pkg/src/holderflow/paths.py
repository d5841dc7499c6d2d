"""Euler-Maruyama integration of the SDE and of its first variation equation.

Internally every simulation works on arrays of shape ``(n_paths, n_starts, d)``:
all starting points in a batch are driven by the same Brownian increments
(common random numbers), which is what the finite-difference and flow
experiments rely on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .brownian import BrownianDriver, TimeGrid
from .coeffs import DiffusionSpec, DriftField
from .errors import BlowUpError, ConfigError
from .parallel import DEFAULT_CHUNK, map_chunks

BLOWUP_BOUND = 1e8

# observer(j, X_j, b(X_j), eta_j, dW_j) is called before step j is taken
Observer = Callable[[int, np.ndarray, np.ndarray, "np.ndarray | None", np.ndarray], None]


@dataclass
class PathRecord:
    grid: TimeGrid
    states: np.ndarray  # (steps+1, n_paths, d)
    increments: np.ndarray  # (steps, n_paths, k)

    @property
    def endpoint(self) -> np.ndarray:
        return self.states[-1]


@dataclass
class VariationRecord:
    grid: TimeGrid
    eta: np.ndarray  # (steps+1, n_paths, d)
    direction: np.ndarray


def noise_term(s: DiffusionSpec, X: np.ndarray, dW: np.ndarray) -> np.ndarray:
    """``sigma(X) dW`` for X of shape (n, m, d) and dW of shape (n, k)."""
    if s.constant is not None:
        return (s.constant * dW[:, None, None, :]).sum(axis=-1)
    return (s.sigma_fn(X) * dW[:, None, None, :]).sum(axis=-1)


def euler_step(
    b: DriftField, s: DiffusionSpec, X: np.ndarray, dW: np.ndarray, dt: float, drift: np.ndarray | None = None
) -> np.ndarray:
    if drift is None:
        drift = b.eval(X)
    return X + drift * dt + noise_term(s, X, dW)


def variation_step(
    b: DriftField, s: DiffusionSpec, X: np.ndarray, eta: np.ndarray, dW: np.ndarray, dt: float
) -> np.ndarray:
    """One Euler step of ``d eta = Db(X) eta dt + Dsigma(X)[eta] dW``."""
    J = b.jacobian(X)
    out = eta + (J * eta[..., None, :]).sum(axis=-1) * dt
    if s.constant is None:
        dsig = s.dsigma(X)  # (n, m, d, k, d)
        dsig_eta = (dsig * eta[..., None, None, :]).sum(axis=-1)  # (n, m, d, k)
        out = out + (dsig_eta * dW[:, None, None, :]).sum(axis=-1)
    return out


def check_finite(X: np.ndarray, step: int, stage: str = "simulate") -> None:
    m = float(np.abs(X).max()) if X.size else 0.0
    if not m <= BLOWUP_BOUND:
        raise BlowUpError(step, m, stage)


def integrate(
    b: DriftField,
    s: DiffusionSpec,
    X0: np.ndarray,
    driver: BrownianDriver,
    grid: TimeGrid,
    start: int,
    stop: int,
    *,
    eta0: np.ndarray | None = None,
    observer: Observer | None = None,
    record: bool = False,
    stage: str = "simulate",
):
    """Integrate paths ``start..stop-1`` from the starting points ``X0``.

    ``X0`` has shape (m, d) (shared by all paths) or (n, m, d) (one set per
    path); ``eta0`` likewise and switches on the joint variation equation.
    Returns ``(X_T, eta_T, states, etas, increments)``; the last three are
    ``None`` unless ``record`` is set.
    """
    n = stop - start
    X0 = np.asarray(X0, dtype=float)
    X = X0.copy() if X0.ndim == 3 else np.broadcast_to(X0, (n,) + X0.shape).copy()
    if eta0 is None:
        eta = None
    else:
        eta0 = np.asarray(eta0, dtype=float)
        eta = eta0.copy() if eta0.ndim == 3 else np.broadcast_to(eta0, X.shape).copy()
        if not b.has_jacobian:
            b.jacobian(X[:1])  # raises with the mollification hint
    states = [X.copy()] if record else None
    etas = [eta.copy()] if (record and eta is not None) else None
    incs = [] if record else None
    dt = grid.dt
    for j, dW in enumerate(driver.iter_increments(grid, start, stop)):
        drift = b.eval(X)
        if observer is not None:
            observer(j, X, drift, eta, dW)
        if eta is not None:
            eta = variation_step(b, s, X, eta, dW, dt)
        X = euler_step(b, s, X, dW, dt, drift)
        check_finite(X, j + 1, stage)
        if record:
            states.append(X.copy())
            incs.append(dW)
            if etas is not None:
                etas.append(eta.copy())
    if record:
        return (
            X,
            eta,
            np.stack(states),
            None if etas is None else np.stack(etas),
            np.stack(incs),
        )
    return X, eta, None, None, None


def _validate(b: DriftField, s: DiffusionSpec, driver: BrownianDriver, grid: TimeGrid, s0: float):
    if b.dim != s.dim:
        raise ConfigError(f"drift dimension {b.dim} differs from diffusion dimension {s.dim}", "sigma")
    if driver.dim_noise != s.dim_noise:
        raise ConfigError("driver noise dimension does not match sigma", "driver")
    if abs(grid.t0 - s0) > 1e-12:
        raise ConfigError(f"grid starts at {grid.t0} but the initial time is {s0}", "s0")


def _point(x, dim: int) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (dim,):
        raise ConfigError(f"initial point must have shape ({dim},), got {x.shape}", "x")
    return x


def simulate(
    b: DriftField,
    s: DiffusionSpec,
    x,
    s0: float,
    driver: BrownianDriver,
    grid: TimeGrid,
    *,
    n_paths: int = 1,
    path_start: int = 0,
    workers: int = 1,
    chunk: int = DEFAULT_CHUNK,
) -> PathRecord:
    """Euler-Maruyama paths ``X_{j+1} = X_j + b(X_j) dt + sigma(X_j) dW_j`` from ``x`` at time ``s0``."""
    _validate(b, s, driver, grid, s0)
    x = _point(x, b.dim)

    def run(a, c):
        _, _, st, _, inc = integrate(b, s, x[None, :], driver, grid, path_start + a, path_start + c, record=True)
        return st[:, :, 0, :], inc

    parts = map_chunks(run, n_paths, workers, chunk)
    states = np.concatenate([p[0] for p in parts], axis=1)
    incs = np.concatenate([p[1] for p in parts], axis=1)
    return PathRecord(grid=grid, states=states, increments=incs)


def simulate_with_variation(
    b: DriftField,
    s: DiffusionSpec,
    x,
    h,
    driver: BrownianDriver,
    grid: TimeGrid,
    *,
    n_paths: int = 1,
    path_start: int = 0,
    workers: int = 1,
    chunk: int = DEFAULT_CHUNK,
) -> tuple[PathRecord, VariationRecord]:
    """Joint Euler stepping of the path and of ``eta_t = D_x X_t [h]`` on the same increments."""
    _validate(b, s, driver, grid, grid.t0)
    x = _point(x, b.dim)
    h = _point(h, b.dim)
    if not b.has_jacobian:
        b.jacobian(x)

    def run(a, c):
        _, _, st, et, inc = integrate(
            b, s, x[None, :], driver, grid, path_start + a, path_start + c, eta0=h[None, :], record=True
        )
        return st[:, :, 0, :], et[:, :, 0, :], inc

    parts = map_chunks(run, n_paths, workers, chunk)
    states = np.concatenate([p[0] for p in parts], axis=1)
    etas = np.concatenate([p[1] for p in parts], axis=1)
    incs = np.concatenate([p[2] for p in parts], axis=1)
    return PathRecord(grid, states, incs), VariationRecord(grid, etas, h.copy())


def flow_eval(
    b: DriftField,
    s: DiffusionSpec,
    x,
    s0: float,
    u: float,
    t: float,
    driver: BrownianDriver,
    grid: TimeGrid,
    **kw,
) -> tuple[np.ndarray, np.ndarray]:
    """``(phi_{s0,u}(x), phi_{s0,t}(x))`` per path from a single integration on ``grid``."""
    if not s0 <= u <= t:
        raise ConfigError(f"need s0 <= u <= t, got {s0}, {u}, {t}", "u")
    ju = grid.index_of(u)
    jt = grid.index_of(t)
    rec = simulate(b, s, x, s0, driver, grid, **kw)
    return rec.states[ju], rec.states[jt]


def restart_grid(grid: TimeGrid, u: float) -> TimeGrid:
    """The tail of ``grid`` starting at the grid time ``u``."""
    ju = grid.index_of(u)
    if ju == grid.steps:
        raise ConfigError("restart time coincides with the end of the grid", "u")
    return TimeGrid(grid.t0 + ju * grid.dt, grid.T, grid.steps - ju)


def composition_gap(
    b: DriftField,
    s: DiffusionSpec,
    x,
    u: float,
    driver: BrownianDriver,
    grid: TimeGrid,
    *,
    n_paths: int = 1,
    **kw,
) -> np.ndarray:
    """Per-path ``|phi_{t0,T}(x) - phi_{u,T}(phi_{t0,u}(x))|`` with the same driver tail."""
    xu, xt = flow_eval(b, s, x, grid.t0, u, grid.T, driver, grid, n_paths=n_paths, **kw)
    tail = restart_grid(grid, u)

    def run(a, c):
        XT, _, _, _, _ = integrate(b, s, xu[a:c, None, :], driver, tail, a, c)
        return XT[:, 0, :]

    restarted = np.concatenate(map_chunks(run, n_paths, kw.get("workers", 1), kw.get("chunk", DEFAULT_CHUNK)))
    return np.linalg.norm(restarted - xt, axis=-1)


def path_summary(rec: PathRecord) -> dict:
    """Moments and sup norms of a batch of paths."""
    end = rec.states[-1]
    sup = np.abs(rec.states).max(axis=(0, 2))
    sup_sq = (np.linalg.norm(rec.states, axis=-1) ** 2).max(axis=0)
    return {
        "n_paths": int(end.shape[0]),
        "T": rec.grid.T,
        "dt": rec.grid.dt,
        "mean_end": end.mean(axis=0).tolist(),
        "var_end": end.var(axis=0).tolist(),
        "mean_sup_abs": float(sup.mean()),
        "max_sup_abs": float(sup.max()),
        "mean_sup_sq": float(sup_sq.mean()),
    }
