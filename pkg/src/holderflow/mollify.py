"""Smooth approximations of Hölder drifts by convolution with a scaled bump kernel.

The kernel is ``exp(-1/(1-|z|^2)) / Z`` on the unit ball, rescaled as
``k_n(y) = n^d k(n y)``.  Convolutions are evaluated with tensor
Gauss-Legendre quadrature in the unscaled variable ``z = n y``:

    b_n(x) = sum_q W_q b(x - z_q / n)

and derivatives use the same nodes against the analytic kernel derivatives.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.integrate import quad

from .coeffs import PAIR_SCALES, DriftField, _as_points, holder_seminorm, probe_pairs
from .errors import ConfigError, QuadratureError, QuadratureWarning

NORMALIZATION_TOL = 1e-4
DEFAULT_QUAD = 32


def _profile_derivs(s: np.ndarray, order: int) -> list[np.ndarray]:
    """``g, g', ..., g^(order)`` of ``g(s) = exp(-1/(1-s))`` for ``s = |z|^2``; zero for ``s >= 1``."""
    inside = s < 1
    u = np.where(inside, 1.0 / np.where(inside, 1 - s, 1.0), 0.0)
    g = np.where(inside, np.exp(-u), 0.0)
    out = [g, -(u**2) * g, (u**4 - 2 * u**3) * g, (-(u**6) + 6 * u**5 - 6 * u**4) * g]
    return out[: order + 1]


@lru_cache(maxsize=None)
def _normalizer(dim: int) -> float:
    if dim == 1:
        val, _ = quad(lambda r: math.exp(-1 / (1 - r * r)), 0, 1, epsabs=1e-15, epsrel=1e-13, limit=200)
        return 2 * val
    surface = 2 * math.pi ** (dim / 2) / math.gamma(dim / 2)
    val, _ = quad(lambda r: r ** (dim - 1) * math.exp(-1 / (1 - r * r)), 0, 1, epsabs=1e-15, epsrel=1e-13, limit=200)
    return surface * val


@dataclass(frozen=True)
class MollifierKernel:
    """Normalised bump on the unit ball of R^d (support radius 1, scaled by 1/n)."""

    dim: int = 1

    @property
    def Z(self) -> float:
        return _normalizer(self.dim)

    radius = 1.0

    def __call__(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return _profile_derivs((z * z).sum(axis=-1), 0)[0] / self.Z

    def derivative(self, z, index: Sequence[int]) -> np.ndarray:
        """Partial derivative ``d^k / dz_{i1} ... dz_{ik}`` of the kernel, ``k = len(index) <= 3``."""
        z = np.asarray(z, dtype=float)
        k = len(index)
        if k == 0:
            return self(z)
        if k > 3:
            raise ConfigError("kernel derivatives are available up to order 3", "k")
        g = _profile_derivs((z * z).sum(axis=-1), k)
        zz = [z[..., i] for i in index]
        if k == 1:
            val = 2 * g[1] * zz[0]
        elif k == 2:
            l, m = index
            val = 4 * g[2] * zz[0] * zz[1] + (2 * g[1] if l == m else 0.0)
        else:
            l, m, p = index
            cross = (
                (zz[2] if l == m else 0.0) + (zz[1] if l == p else 0.0) + (zz[0] if m == p else 0.0)
            )
            val = 8 * g[3] * zz[0] * zz[1] * zz[2] + 4 * g[2] * cross
        return val / self.Z


def _tensor_rule(dim: int, q: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(q)
    x = 0.5 * (x - x[::-1])
    w = 0.5 * (w + w[::-1])
    nodes = np.array(list(itertools.product(x, repeat=dim)))
    weights = np.array([np.prod(c) for c in itertools.product(w, repeat=dim)])
    return nodes, weights


@dataclass(frozen=True)
class _Rule:
    nodes: np.ndarray
    base_weights: np.ndarray
    weights: np.ndarray
    residual: float


def _build_rule(dim: int, q: int) -> _Rule:
    nodes, w = _tensor_rule(dim, q)
    kern = MollifierKernel(dim)(nodes)
    mass = float((w * kern).sum())
    residual = abs(mass - 1.0)
    if residual > NORMALIZATION_TOL:
        raise QuadratureError(
            f"kernel quadrature with {q} points per axis integrates to {mass:.8f} "
            f"(residual {residual:.2e} > {NORMALIZATION_TOL:g}); increase quad_points_per_axis"
        )
    return _Rule(nodes=nodes, base_weights=w, weights=w * kern / mass, residual=residual)


@dataclass(frozen=True, kw_only=True)
class MollifiedDrift(DriftField):
    """``b * k_n``; a smooth drift with quadrature-based value and derivatives."""

    base: DriftField
    n: int
    quad_points_per_axis: int
    rule: _Rule = field(repr=False)
    _deriv_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def _deriv_weights(self, index: tuple[int, ...]) -> np.ndarray:
        # Smallest kernel-weighted correction making the discrete derivative
        # kernel differentiate every polynomial of degree <= k exactly.
        if index not in self._deriv_cache:
            kern = MollifierKernel(self.dim)
            z = self.rule.nodes
            k = len(index)
            w = self.rule.base_weights * kern.derivative(z, index)
            alpha = tuple(np.bincount(np.asarray(index), minlength=self.dim))
            betas = [bt for bt in itertools.product(range(k + 1), repeat=self.dim) if sum(bt) <= k]
            M = np.array([np.prod(z ** np.array(bt), axis=-1) for bt in betas])
            target = np.array(
                [(-1) ** k * float(np.prod([math.factorial(a) for a in alpha])) if bt == alpha else 0.0 for bt in betas]
            )
            D = self.rule.weights
            G = (M * D) @ M.T
            w = w + D * (M.T @ np.linalg.solve(G, target - M @ w))
            self._deriv_cache[index] = w
        return self._deriv_cache[index]

    def _shifted(self, x: np.ndarray) -> np.ndarray:
        pts = x[..., None, :] - self.rule.nodes / self.n
        return self.base.eval(pts)

    def derivative(self, x, k: int) -> np.ndarray:
        """k-th derivative tensor, shape (..., d, d, ..., d) with k trailing derivative axes."""
        x = _as_points(x, self.dim)
        vals = self._shifted(x)
        d = self.dim
        out = np.zeros(x.shape + (d,) * k)
        for index in itertools.product(range(d), repeat=k):
            w = self._deriv_weights(tuple(index))
            out[(Ellipsis, slice(None)) + tuple(index)] = self.n**k * (vals * w[:, None]).sum(axis=-2)
        return out


def mollify(b: DriftField, n: int, quad_points_per_axis: int = DEFAULT_QUAD) -> MollifiedDrift:
    """Convolve ``b`` with the kernel scaled by ``n``."""
    if int(n) != n or n < 1:
        raise ConfigError(f"mollification index n must be an integer >= 1, got {n}", "n")
    if b.dim > 3:
        raise ConfigError(
            f"tensor quadrature supports d <= 3 (got d={b.dim}); supply a Monte Carlo quadrature instead", "dim"
        )
    if quad_points_per_axis < 8:
        raise ConfigError("quad_points_per_axis must be >= 8", "quad")
    rule = _build_rule(b.dim, quad_points_per_axis)
    W = rule.weights

    def ev(x):
        pts = x[..., None, :] - rule.nodes / n
        return (b.eval(pts) * W[:, None]).sum(axis=-2)

    holder = {}

    def jac(x):
        return holder["self"].derivative(x, 1)

    m = MollifiedDrift(
        eval=ev,
        dim=b.dim,
        theta=b.theta,
        analytic_jacobian=jac,
        smooth=True,
        name=f"mollified:{b.name}:{n}",
        base=b,
        n=int(n),
        quad_points_per_axis=quad_points_per_axis,
        rule=rule,
    )
    holder["self"] = m
    return m


def mollification_gap_parts(
    b: DriftField, bn: DriftField, probes, pair_scales: Sequence[float] = PAIR_SCALES, seed: int = 0
) -> tuple[float, float]:
    """``(sup |b - b_n|, [b - b_n]_theta)`` on the probe set."""
    probes = _as_points(probes, b.dim).reshape(-1, b.dim)
    if probes.shape[0] == 0:
        raise ConfigError("probe set is empty", "probes")
    diff = lambda x: b.eval(x) - bn.eval(x)
    sup = float(np.max(np.linalg.norm(diff(probes), axis=-1)))
    semi = holder_seminorm(diff, probe_pairs(probes, pair_scales, seed=seed), b.theta)
    return sup, semi


def mollification_gap(b: DriftField, bn: DriftField, probes, **kw) -> float:
    """Empirical ``C^theta_b`` norm of ``b - b_n``: sup norm plus Hölder seminorm."""
    sup, semi = mollification_gap_parts(b, bn, probes, **kw)
    return sup + semi


def derivative_bound_probe(
    bn: MollifiedDrift, k: int, probes, *, check_refinement: bool = True, rtol: float = 0.05
) -> float:
    """Sup over probes of the Frobenius norm of ``D^k b_n``.

    With ``check_refinement`` the value is recomputed with twice the
    quadrature nodes and a :class:`QuadratureWarning` is issued when the two
    differ by more than ``rtol``.
    """
    if k not in (1, 2, 3):
        raise ConfigError("k must be 1, 2 or 3", "k")
    probes = _as_points(probes, bn.dim).reshape(-1, bn.dim)

    def sup_for(m: MollifiedDrift) -> float:
        t = m.derivative(probes, k).reshape(len(probes), -1)
        return float(np.max(np.linalg.norm(t, axis=-1)))

    value = sup_for(bn)
    if check_refinement:
        fine = sup_for(mollify(bn.base, bn.n, 2 * bn.quad_points_per_axis))
        if abs(fine - value) > rtol * max(abs(fine), 1e-12):
            warnings.warn(
                f"D^{k} b_n sup changed from {value:.6g} to {fine:.6g} when doubling the quadrature",
                QuadratureWarning,
                stacklevel=2,
            )
    return value
