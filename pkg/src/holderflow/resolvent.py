"""Monte Carlo solution of ``lam psi - L psi = b`` through the resolvent integral.

``psi(x) = int_0^inf e^{-lam t} E b(X_t^x) dt`` is estimated path by path with
Euler paths on ``[0, T_max]``.  The time integral uses the exact exponential
weight of each step, ``(e^{-lam t_j} - e^{-lam t_{j+1}}) / lam``, and the tail
beyond ``T_max`` is closed with ``e^{-lam T_max} b(X_T) / lam``, so a constant
drift ``c`` gives ``c / lam`` to rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .brownian import BrownianDriver, TimeGrid
from .coeffs import DiffusionSpec, DriftField, _as_points
from .errors import ConfigError, LambdaSelectionError
from .parallel import DEFAULT_CHUNK, map_chunks
from .paths import integrate

DEFAULT_LADDER = (2.0, 5.0, 10.0, 20.0, 40.0)


@dataclass(frozen=True)
class ResolventConfig:
    lam: float
    T_max: float | None = None  # None: chosen by the truncation rule
    dt: float = 1e-3
    n_paths: int = 10_000
    fd_step: float = 1e-3
    trunc_tol: float = 1e-4
    growth_const: float = 1.0
    antithetic: bool = False
    workers: int = 1
    chunk: int = DEFAULT_CHUNK

    def __post_init__(self):
        if not self.lam > 0:
            raise ConfigError(f"lambda must be positive, got {self.lam}", "lambda")
        if not self.dt > 0:
            raise ConfigError("dt must be positive", "dt")
        if self.n_paths < 100:
            raise ConfigError(f"n_paths must be >= 100, got {self.n_paths}", "n_paths")
        if self.antithetic and self.n_paths % 2:
            raise ConfigError("antithetic sampling needs an even n_paths", "n_paths")
        if not self.fd_step > 0:
            raise ConfigError("fd_step must be positive", "fd_step")
        if not 0 < self.trunc_tol < 1:
            raise ConfigError("trunc_tol must lie in (0, 1)", "trunc_tol")

    def truncation_error(self, T: float, x_max: float) -> float:
        return math.exp(-self.lam * T) * max(1.0, self.growth_const) * (1 + x_max)

    def horizon(self, x_max: float) -> float:
        """Integration horizon, rounded up to a multiple of ``dt``."""
        if self.T_max is not None:
            T = self.T_max
            if self.truncation_error(T, x_max) > self.trunc_tol:
                raise ConfigError(
                    f"T_max={T} leaves truncation error {self.truncation_error(T, x_max):.2e} "
                    f"> {self.trunc_tol:g} for lambda={self.lam}",
                    "T_max",
                )
        else:
            need = math.log(max(1.0, self.growth_const) * (1 + x_max) / self.trunc_tol) / self.lam
            T = max(1.0, 10.0 / self.lam, need)
        steps = math.ceil(T / self.dt - 1e-9)
        return steps * self.dt


@dataclass
class ResolventSolution:
    query_points: np.ndarray  # (m, d)
    psi: np.ndarray  # (m, d)
    psi_stderr: np.ndarray  # (m, d)
    grad_psi: np.ndarray | None  # (m, d, d), [c, l] = d psi_c / d x_l
    grad_stderr: np.ndarray | None
    grad_sup_est: float
    grad_sup_stderr: float
    lam: float
    T_max: float
    config: ResolventConfig
    seed: int
    ladder_diagnostics: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        out = {
            "lambda": self.lam,
            "T_max": self.T_max,
            "n_paths": self.config.n_paths,
            "dt": self.config.dt,
            "query_points": self.query_points.tolist(),
            "psi": self.psi.tolist(),
            "psi_stderr": self.psi_stderr.tolist(),
            "grad_sup_est": self.grad_sup_est,
            "grad_sup_stderr": self.grad_sup_stderr,
        }
        if self.grad_psi is not None:
            out["grad_psi"] = self.grad_psi.tolist()
            out["grad_stderr"] = self.grad_stderr.tolist()
        if self.ladder_diagnostics:
            out["ladder"] = self.ladder_diagnostics
        return out


def _check_dims(b: DriftField, s: DiffusionSpec):
    if b.dim != s.dim:
        raise ConfigError(f"drift dimension {b.dim} differs from diffusion dimension {s.dim}", "sigma")


def resolvent_paths(
    b: DriftField, s: DiffusionSpec, starts: np.ndarray, cfg: ResolventConfig, seed: int, x_max: float | None = None
) -> tuple[np.ndarray, float]:
    """Per-path resolvent integrals for every start, shape (n_paths, m, d), and the horizon used.

    All starts share the same Brownian paths.
    """
    _check_dims(b, s)
    starts = _as_points(starts, b.dim).reshape(-1, b.dim)
    if x_max is None:
        x_max = float(np.max(np.linalg.norm(starts, axis=-1)))
    T = cfg.horizon(x_max)
    grid = TimeGrid(0.0, T, int(round(T / cfg.dt)))
    driver = BrownianDriver(seed, grid.dt, s.dim_noise, antithetic=cfg.antithetic)
    lam = cfg.lam
    t = grid.times
    w = (np.exp(-lam * t[:-1]) - np.exp(-lam * t[1:])) / lam
    tail = math.exp(-lam * T) / lam

    def run(a, c):
        acc = np.zeros((c - a,) + starts.shape)
        XT, _, _, _, _ = integrate(b, s, starts, driver, grid, a, c, observer=_Accumulate(acc, w), stage="resolve")
        acc += tail * b.eval(XT)
        return acc

    parts = map_chunks(run, cfg.n_paths, cfg.workers, cfg.chunk)
    return np.concatenate(parts, axis=0), T


class _Accumulate:
    def __init__(self, acc: np.ndarray, w: np.ndarray):
        self.acc = acc
        self.w = w

    def __call__(self, j, X, drift, eta, dW):
        self.acc += self.w[j] * drift


def _mean_stderr(samples: np.ndarray, antithetic: bool) -> tuple[np.ndarray, np.ndarray]:
    """Mean and standard error over axis 0; antithetic pairs are averaged first."""
    if antithetic:
        samples = 0.5 * (samples[0::2] + samples[1::2])
    n = samples.shape[0]
    mean = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(mean)
    return mean, se


def solve_psi(
    b: DriftField,
    s: DiffusionSpec,
    cfg: ResolventConfig,
    queries,
    seed: int,
    *,
    gradient: bool = True,
) -> ResolventSolution:
    """``psi`` (and its Jacobian by coupled central differences) at each query point."""
    q = _as_points(queries, b.dim).reshape(-1, b.dim)
    if q.shape[0] == 0:
        raise ConfigError("no query points", "queries")
    d = b.dim
    h = cfg.fd_step
    if gradient:
        offsets = np.concatenate([np.zeros((1, d)), h * np.eye(d), -h * np.eye(d)])
    else:
        offsets = np.zeros((1, d))
    starts = (q[:, None, :] + offsets[None, :, :]).reshape(-1, d)
    x_max = float(np.max(np.linalg.norm(starts, axis=-1)))
    vals, T = resolvent_paths(b, s, starts, cfg, seed, x_max)
    vals = vals.reshape(cfg.n_paths, q.shape[0], offsets.shape[0], d)
    psi, psi_se = _mean_stderr(vals[:, :, 0, :], cfg.antithetic)
    grad = grad_se = None
    sup = sup_se = 0.0
    if gradient:
        # per path: G[c, l] = (psi_c(x + h e_l) - psi_c(x - h e_l)) / 2h
        g = (vals[:, :, 1 : 1 + d, :] - vals[:, :, 1 + d :, :]) / (2 * h)
        g = np.swapaxes(g, -1, -2)
        grad, grad_se = _mean_stderr(g, cfg.antithetic)
        norms = np.linalg.norm(grad, ord=2, axis=(-2, -1))
        i = int(np.argmax(norms))
        sup = float(norms[i])
        sup_se = float(np.linalg.norm(grad_se[i]))
    return ResolventSolution(
        query_points=q,
        psi=psi,
        psi_stderr=psi_se,
        grad_psi=grad,
        grad_stderr=grad_se,
        grad_sup_est=sup,
        grad_sup_stderr=sup_se,
        lam=cfg.lam,
        T_max=T,
        config=cfg,
        seed=int(seed),
    )


def select_lambda(
    b: DriftField,
    s: DiffusionSpec,
    ladder: Sequence[float] = DEFAULT_LADDER,
    gamma: float = 0.5,
    cfg: ResolventConfig | None = None,
    queries=None,
    seed: int = 0,
    *,
    exhaustive: bool = False,
) -> tuple[float, ResolventSolution]:
    """Smallest ladder entry whose ``grad_sup_est + 2 stderr <= gamma``.

    With ``exhaustive`` every rung is solved (for trend diagnostics) and the
    first admissible one is still returned.  The same seed is used on every
    rung so the estimates are coupled.
    """
    ladder = [float(v) for v in ladder]
    if not ladder:
        raise ConfigError("empty lambda ladder", "ladder")
    if any(b2 <= b1 for b1, b2 in zip(ladder, ladder[1:])):
        raise ConfigError(f"lambda ladder must be strictly ascending, got {ladder}", "ladder")
    if not 0 < gamma < 1:
        raise ConfigError(f"gamma must lie in (0, 1), got {gamma}", "gamma")
    if cfg is None:
        cfg = ResolventConfig(lam=ladder[0])
    if queries is None:
        queries = np.linspace(-2, 2, 9)[:, None] if b.dim == 1 else np.zeros((1, b.dim))
    diags: list[dict] = []
    chosen: tuple[float, ResolventSolution] | None = None
    for lam in ladder:
        sol = solve_psi(b, s, replace(cfg, lam=lam), queries, seed)
        bound = sol.grad_sup_est + 2 * sol.grad_sup_stderr
        ok = bound <= gamma
        diags.append(
            {
                "lambda": lam,
                "grad_sup_est": sol.grad_sup_est,
                "grad_sup_stderr": sol.grad_sup_stderr,
                "bound": bound,
                "accepted": bool(ok and chosen is None),
            }
        )
        if ok and chosen is None:
            chosen = (lam, sol)
            if not exhaustive:
                break
    if chosen is None:
        listing = ", ".join(f"lambda={r['lambda']:g}: {r['grad_sup_est']:.4g} (+2se {r['bound']:.4g})" for r in diags)
        raise LambdaSelectionError(f"no ladder entry reached gamma={gamma:g}; grad_sup_est per rung: {listing}", diags)
    lam, sol = chosen
    sol.ladder_diagnostics = diags
    return lam, sol


@dataclass
class ResidualReport:
    value: float  # max over queries of |mean residual|
    stderr: float  # propagated standard error at that query
    noise_amplification: float  # max stderr over queries
    per_query: np.ndarray
    per_query_stderr: np.ndarray
    inconclusive: bool

    @property
    def within_noise(self) -> bool:
        return self.value <= 3 * self.stderr + 1e-12


def residual_check(
    b: DriftField, s: DiffusionSpec, sol: ResolventSolution, stencil_step: float = 0.05
) -> ResidualReport:
    """Residual of ``lam psi - 1/2 Tr(a D^2 psi) - b . D psi - b`` from a coupled stencil.

    Every stencil value is an MC estimate on the same Brownian paths as the
    others, and the residual is formed path by path before averaging, so its
    standard error accounts for the noise amplification of the stencil.
    """
    if not b.has_jacobian:
        raise ConfigError("residual_check needs a smooth drift", "drift")
    cfg = sol.config
    q = sol.query_points
    d = q.shape[1]
    hs = stencil_step
    E = hs * np.eye(d)
    offs = [np.zeros(d)]
    for i in range(d):
        offs += [E[i], -E[i]]
    for i in range(d):
        for j in range(i + 1, d):
            offs += [E[i] + E[j], E[i] - E[j], -E[i] + E[j], -E[i] - E[j]]
    offs = np.array(offs)
    starts = (q[:, None, :] + offs[None]).reshape(-1, d)
    vals, _ = resolvent_paths(b, s, starts, cfg, sol.seed)
    v = vals.reshape(cfg.n_paths, q.shape[0], len(offs), d)
    c = v[:, :, 0, :]
    grad = np.zeros(v.shape[:2] + (d, d))  # [..., comp, l]
    hess = np.zeros(v.shape[:2] + (d, d, d))  # [..., comp, l, m]
    for i in range(d):
        p, m = v[:, :, 1 + 2 * i, :], v[:, :, 2 + 2 * i, :]
        grad[..., i] = (p - m) / (2 * hs)
        hess[..., i, i] = (p - 2 * c + m) / hs**2
    k = 1 + 2 * d
    for i in range(d):
        for j in range(i + 1, d):
            pp, pm, mp, mm = (v[:, :, k + r, :] for r in range(4))
            k += 4
            hess[..., i, j] = hess[..., j, i] = (pp - pm - mp + mm) / (4 * hs**2)
    a = s.a(q)  # (m, d, d)
    bq = b.eval(q)  # (m, d)
    res = (
        cfg.lam * c
        - 0.5 * np.einsum("mlk,pmclk->pmc", a, hess)
        - np.einsum("ml,pmcl->pmc", bq, grad)
        - bq[None]
    )
    mean, se = _mean_stderr(res, cfg.antithetic)
    absmean = np.abs(mean)
    per_q = absmean.max(axis=-1)
    per_q_se = se.max(axis=-1)
    i = int(np.argmax(per_q))
    value = float(per_q[i])
    return ResidualReport(
        value=value,
        stderr=float(per_q_se[i]),
        noise_amplification=float(per_q_se.max()),
        per_query=per_q,
        per_query_stderr=per_q_se,
        inconclusive=bool(per_q_se.max() > value),
    )
