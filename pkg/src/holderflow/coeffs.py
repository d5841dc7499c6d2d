"""Coefficient model: drift fields, diffusion matrices and empirical hypothesis checks.

All callables are vectorised: points are arrays of shape ``(..., d)``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtri
from scipy.stats import qmc

from .errors import ConfigError, SingularDiffusionError

Array = np.ndarray

PAIR_SCALES = (1e-3, 1e-2, 0.1, 1.0)
SIGMA_FD_STEPS = (1e-5, 1e-4, 1e-3)
JAC_FD_STEP = 1e-6


def _as_points(x, dim: int) -> Array:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    if x.shape[-1] != dim:
        raise ConfigError(f"expected points of dimension {dim}, got shape {x.shape}", "x")
    return x


def fd_jacobian(fn: Callable[[Array], Array], x: Array, step: float) -> Array:
    """Central-difference Jacobian, ``J[..., i, l] = d fn_i / d x_l``."""
    d = x.shape[-1]
    cols = []
    for l in range(d):
        e = np.zeros(d)
        e[l] = step
        cols.append((fn(x + e) - fn(x - e)) / (2 * step))
    return np.stack(cols, axis=-1)


@dataclass(frozen=True)
class DriftField:
    """A drift ``b: R^d -> R^d``.

    ``smooth`` marks fields whose Jacobian may be taken by finite differences
    when no analytic one is supplied.  Rough (Hölder) fields must be
    mollified before their Jacobian is requested.
    """

    eval: Callable[[Array], Array]
    dim: int
    theta: float = 1.0
    analytic_jacobian: Callable[[Array], Array] | None = None
    smooth: bool = True
    name: str = "custom"

    def __post_init__(self):
        if not 0 < self.theta <= 1:
            raise ConfigError(f"Hölder exponent must lie in (0, 1], got {self.theta}", "theta")

    def __call__(self, x) -> Array:
        return self.eval(_as_points(x, self.dim))

    @property
    def has_jacobian(self) -> bool:
        return self.analytic_jacobian is not None or self.smooth

    def jacobian(self, x) -> Array:
        x = _as_points(x, self.dim)
        if self.analytic_jacobian is not None:
            return self.analytic_jacobian(x)
        if not self.smooth:
            raise ConfigError(
                f"drift {self.name!r} is only Hölder continuous and has no Jacobian; "
                "mollify it first (mollified:<base>:<n>) or use the transform route",
                "drift",
            )
        return fd_jacobian(self.eval, x, JAC_FD_STEP)


@dataclass(frozen=True)
class DiffusionSpec:
    """Diffusion matrix ``sigma: R^d -> R^{d x k}`` and derived quantities."""

    sigma_fn: Callable[[Array], Array]
    dim: int
    dim_noise: int
    dsigma_fn: Callable[[Array], Array] | None = None
    constant: Array | None = field(default=None, repr=False)
    name: str = "custom"

    @classmethod
    def from_constant(cls, matrix, name: str = "constant") -> "DiffusionSpec":
        m = np.atleast_2d(np.asarray(matrix, dtype=float))
        d, k = m.shape
        m = m.copy()
        m.setflags(write=False)
        return cls(
            sigma_fn=lambda x: np.broadcast_to(m, x.shape[:-1] + (d, k)),
            dim=d,
            dim_noise=k,
            dsigma_fn=lambda x: np.zeros(x.shape[:-1] + (d, k, d)),
            constant=m,
            name=name,
        )

    def sigma(self, x) -> Array:
        return self.sigma_fn(_as_points(x, self.dim))

    def dsigma(self, x) -> Array:
        """``D[..., i, j, l] = d sigma_ij / d x_l``; central differences (step 1e-5) if not analytic."""
        x = _as_points(x, self.dim)
        if self.dsigma_fn is not None:
            return self.dsigma_fn(x)
        return fd_jacobian(self.sigma_fn, x, SIGMA_FD_STEPS[0])

    def a(self, x) -> Array:
        s = self.sigma(x)
        a = s @ np.swapaxes(s, -1, -2)
        return 0.5 * (a + np.swapaxes(a, -1, -2))

    def a_inv(self, x, tol: float = 1e-6) -> Array:
        x = _as_points(x, self.dim)
        a = self.a(x)
        eye = np.eye(self.dim)
        try:
            inv = np.linalg.solve(a, np.broadcast_to(eye, a.shape))
        except np.linalg.LinAlgError:
            flat = x.reshape(-1, self.dim)
            raise SingularDiffusionError(flat[0], np.inf) from None
        res = np.abs(a @ inv - eye).max(axis=(-1, -2))
        bad = ~(res <= tol)
        if np.any(bad):
            i = np.argmax(np.where(np.isnan(res), np.inf, res).reshape(-1))
            raise SingularDiffusionError(x.reshape(-1, self.dim)[i], float(res.reshape(-1)[i]))
        return inv

    def bel_weight(self, x) -> Array:
        """``sigma^T a^{-1}`` with shape (..., k, d)."""
        if self.constant is not None:
            x = _as_points(x, self.dim)
            w = self.constant.T @ self.a_inv(np.zeros((1, self.dim)))[0]
            return np.broadcast_to(w, x.shape[:-1] + w.shape)
        return np.swapaxes(self.sigma(x), -1, -2) @ self.a_inv(x)


@dataclass
class HypothesisReport:
    holder_seminorm_est: float
    growth_const_est: float
    a_inv_sup_est: float
    sigma_deriv_sups: list[float]
    probe_count: int
    theta: float
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


# ---------------------------------------------------------------------------
# probe sets


def probe_cloud(dim: int, n: int = 256, radius: float = 10.0, seed: int = 0) -> Array:
    """Low-discrepancy cloud in the closed ball of the given radius."""
    m = int(2 ** np.ceil(np.log2(max(n, 2))))
    u = qmc.Sobol(d=dim + 1, scramble=True, seed=seed).random(m)[:n]
    if dim == 1:
        return radius * (2 * u[:, :1] - 1)
    g = ndtri(np.clip(u[:, :dim], 1e-12, 1 - 1e-12))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    r = radius * u[:, dim:] ** (1.0 / dim)
    return g * r


def probe_pairs(points: Array, scales: Sequence[float] = PAIR_SCALES, seed: int = 0) -> tuple[Array, Array]:
    """Pairs ``(x, x + s u)`` for every point, every scale and a random unit ``u``."""
    points = np.asarray(points, dtype=float)
    n, d = points.shape
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for s in scales:
        u = rng.standard_normal((n, d))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        xs.append(points)
        ys.append(points + s * u)
    return np.concatenate(xs), np.concatenate(ys)


def holder_seminorm(f: Callable[[Array], Array], pairs, theta: float | None = None) -> float:
    """Empirical local Hölder seminorm ``max |f(x)-f(y)| / |x-y|^theta`` over ``pairs``.

    ``pairs`` is either ``(X, Y)`` with two arrays of shape (m, d), or a list of
    ``(x, y)`` tuples.  Each pair must satisfy ``0 < |x-y| <= 1``.
    """
    if isinstance(pairs, tuple) and len(pairs) == 2 and np.ndim(pairs[0]) == 2:
        X, Y = (np.asarray(p, dtype=float) for p in pairs)
    else:
        pairs = list(pairs)
        if not pairs:
            raise ConfigError("probe pair set is empty", "probes")
        X = np.array([np.atleast_1d(np.asarray(p[0], dtype=float)) for p in pairs])
        Y = np.array([np.atleast_1d(np.asarray(p[1], dtype=float)) for p in pairs])
    if X.shape[0] == 0:
        raise ConfigError("probe pair set is empty", "probes")
    if theta is None:
        theta = getattr(f, "theta", 1.0)
    dist = np.linalg.norm(X - Y, axis=-1)
    zero = np.flatnonzero(dist == 0)
    if zero.size:
        raise ConfigError(f"probe pair {int(zero[0])} has x == y; the Hölder ratio is undefined", "probes")
    far = np.flatnonzero(dist > 1 + 1e-12)
    if far.size:
        raise ConfigError(f"probe pair {int(far[0])} has |x-y| = {dist[far[0]]:.3g} > 1", "probes")
    fx = np.asarray(f(X), dtype=float).reshape(len(X), -1)
    fy = np.asarray(f(Y), dtype=float).reshape(len(Y), -1)
    return float(np.max(np.linalg.norm(fx - fy, axis=-1) / dist**theta))


def growth_constant(f: Callable[[Array], Array], points: Array) -> float:
    """Smallest ``C`` with ``|f(x)| <= C (1 + |x|)`` on ``points``."""
    points = np.asarray(points, dtype=float)
    v = np.asarray(f(points), dtype=float).reshape(len(points), -1)
    return float(np.max(np.linalg.norm(v, axis=-1) / (1 + np.linalg.norm(points, axis=-1))))


def _fd_tensor_norms(fn: Callable[[Array], Array], x: Array, order: int, h: float) -> Array:
    """Frobenius norm of the ``order``-th derivative tensor by tensor central differences."""
    d = x.shape[-1]
    total = np.zeros(x.shape[0])
    signs = list(itertools.product((-1.0, 1.0), repeat=order))
    for idx in itertools.product(range(d), repeat=order):
        acc = 0.0
        for sg in signs:
            shift = np.zeros(d)
            for s, i in zip(sg, idx):
                shift[i] += s * h
            acc = acc + np.prod(sg) * fn(x + shift)
        comp = acc / (2 * h) ** order
        total += (comp.reshape(x.shape[0], -1) ** 2).sum(axis=-1)
    return np.sqrt(total)


def check_hypotheses(
    b: DriftField,
    s: DiffusionSpec,
    probes: Array,
    *,
    a_inv_ceiling: float = 1e6,
    refine_rtol: float = 0.1,
    pair_scales: Sequence[float] = PAIR_SCALES,
    seed: int = 0,
) -> HypothesisReport:
    """Empirical check of the Hölder, growth and non-degeneracy hypotheses on a probe set."""
    probes = _as_points(probes, b.dim).reshape(-1, b.dim)
    if probes.shape[0] == 0:
        raise ConfigError("probe set is empty", "probes")
    pairs = probe_pairs(probes, pair_scales, seed=seed)
    hs = holder_seminorm(b, pairs, b.theta)
    gc = growth_constant(b, probes)

    a_inv = s.a_inv(probes)
    a_inv_sup = float(np.max(np.linalg.norm(a_inv, axis=(-1, -2))))

    violations = []
    derivs = []
    for order, h in enumerate(SIGMA_FD_STEPS, start=1):
        if order == 1 and s.dsigma_fn is not None:
            coarse = np.linalg.norm(s.dsigma(probes).reshape(len(probes), -1), axis=-1)
            fine = coarse
        else:
            coarse = _fd_tensor_norms(s.sigma_fn, probes, order, h)
            fine = _fd_tensor_norms(s.sigma_fn, probes, order, h / 2)
        sup_c, sup_f = float(np.max(coarse)), float(np.max(fine))
        derivs.append(sup_f)
        if not np.isfinite(sup_f) or abs(sup_f - sup_c) > refine_rtol * max(1.0, sup_c):
            violations.append(f"D^{order} sigma estimate changes under refinement ({sup_c:.4g} -> {sup_f:.4g})")
    if a_inv_sup > a_inv_ceiling:
        violations.append(f"sup |a^-1| = {a_inv_sup:.4g} exceeds ceiling {a_inv_ceiling:.4g}")
    if not np.isfinite(hs):
        violations.append("Hölder seminorm estimate is not finite")

    return HypothesisReport(
        holder_seminorm_est=hs,
        growth_const_est=gc,
        a_inv_sup_est=a_inv_sup,
        sigma_deriv_sups=derivs,
        probe_count=int(probes.shape[0]),
        theta=b.theta,
        violations=violations,
    )


# ---------------------------------------------------------------------------
# built-in fields


def zero_drift(dim: int = 1) -> DriftField:
    return DriftField(
        eval=lambda x: np.zeros_like(x),
        dim=dim,
        analytic_jacobian=lambda x: np.zeros(x.shape + (dim,)),
        name="zero",
    )


def constant_drift(c) -> DriftField:
    c = np.atleast_1d(np.asarray(c, dtype=float)).copy()
    dim = c.size
    return DriftField(
        eval=lambda x: np.broadcast_to(c, x.shape).copy(),
        dim=dim,
        analytic_jacobian=lambda x: np.zeros(x.shape + (dim,)),
        name=f"const:c={c.tolist()}",
    )


def linear_drift(A) -> DriftField:
    """``b(x) = A x``; a scalar ``A`` in dimension 1 or a d x d matrix."""
    A = np.atleast_2d(np.asarray(A, dtype=float)).copy()
    if A.shape[0] != A.shape[1]:
        raise ConfigError(f"linear drift needs a square matrix, got {A.shape}", "drift")
    dim = A.shape[0]
    if dim == 1:
        a = float(A[0, 0])
        ev = lambda x: a * x
    else:
        ev = lambda x: x @ A.T
    return DriftField(
        eval=ev,
        dim=dim,
        analytic_jacobian=lambda x: np.broadcast_to(A, x.shape[:-1] + (dim, dim)).copy(),
        name=f"linear:a={A.tolist() if dim > 1 else A[0, 0]}",
    )


def holder_drift(theta: float = 0.5, scale: float = 1.0, dim: int = 1) -> DriftField:
    """``b(x) = scale |x|^theta e_1``: unbounded, theta-Hölder, not Lipschitz at 0."""
    if not 0 < theta < 1:
        raise ConfigError(f"holder drift needs theta in (0, 1), got {theta}", "theta")

    def ev(x):
        out = np.zeros_like(x)
        r = np.abs(x[..., 0]) if dim == 1 else np.linalg.norm(x, axis=-1)
        out[..., 0] = scale * r**theta
        return out

    return DriftField(eval=ev, dim=dim, theta=theta, smooth=False, name=f"holder:theta={theta},scale={scale}")


def identity_sigma(dim: int = 1) -> DiffusionSpec:
    return DiffusionSpec.from_constant(np.eye(dim), name="sigma:identity")


def scalar_sigma(c: float, dim: int = 1) -> DiffusionSpec:
    return DiffusionSpec.from_constant(c * np.eye(dim), name=f"sigma:scalar:c={c}")


def sin_perturbed_sigma(eps: float = 0.1, dim: int = 1) -> DiffusionSpec:
    """``sigma(x) = diag(1 + eps sin x_i)``."""

    def sig(x):
        out = np.zeros(x.shape[:-1] + (dim, dim))
        i = np.arange(dim)
        out[..., i, i] = 1 + eps * np.sin(x)
        return out

    def dsig(x):
        out = np.zeros(x.shape[:-1] + (dim, dim, dim))
        i = np.arange(dim)
        out[..., i, i, i] = eps * np.cos(x)
        return out

    return DiffusionSpec(sigma_fn=sig, dim=dim, dim_noise=dim, dsigma_fn=dsig, name=f"sigma:sin-perturbed:eps={eps}")
