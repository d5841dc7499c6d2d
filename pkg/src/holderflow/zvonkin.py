"""The drift-removing change of variables ``Psi = I + psi`` and the flows built from it.

``psi`` solves ``lam psi - L psi = b`` (see :mod:`holderflow.resolvent`).  It
is computed by Monte Carlo on a fixed set of cache nodes and interpolated
with multiquadrics, which gives a smooth field with closed-form first and
second derivatives.  ``Y = Psi(X)`` solves

    dY = lam psi(Psi^{-1} Y) dt + DPsi(Psi^{-1} Y) sigma(Psi^{-1} Y) dW,

whose coefficients are Lipschitz even when ``b`` is only Hölder, and the
flow of the original equation is recovered as ``Psi^{-1}(Y)``.
"""

from __future__ import annotations

import itertools
import math
import threading
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .brownian import BrownianDriver, TimeGrid
from .coeffs import DiffusionSpec, DriftField, _as_points, fd_jacobian
from .errors import ConfigError, InversionError, LambdaSelectionError
from .interpolate import MultiquadricInterpolant
from .mollify import mollify
from .parallel import DEFAULT_CHUNK, map_chunks
from .paths import PathRecord, check_finite, integrate
from .resolvent import DEFAULT_LADDER, ResolventConfig, ResolventSolution, select_lambda, solve_psi

Array = np.ndarray

NEUMANN_TERMS = 32
NEUMANN_TOL = 1e-10
MAX_INVERT_ITER = 200


def _matvec(M: Array, v: Array) -> Array:
    return (M * v[..., None, :]).sum(axis=-1)


def neumann_inverse(dpsi: Array, gamma: float, terms: int | None = None, tol: float = NEUMANN_TOL):
    """``(I + dpsi)^{-1}`` as ``sum_k (-dpsi)^k``.

    Stops after ``terms`` terms if given, otherwise at the first ``K <=
    NEUMANN_TERMS`` whose remainder bound ``gamma^(K+1) / (1 - gamma)`` is
    below ``tol``.  Returns ``(matrix, terms_used, remainder_bound)``.
    """
    if not 0 <= gamma < 1:
        raise ConfigError(f"Neumann series needs a contraction bound < 1, got {gamma}", "gamma")
    d = dpsi.shape[-1]
    if terms is None:
        terms = NEUMANN_TERMS
        for K in range(1, NEUMANN_TERMS + 1):
            if gamma ** (K + 1) / (1 - gamma) < tol:
                terms = K
                break
    eye = np.broadcast_to(np.eye(d), dpsi.shape)
    total = eye.copy()
    power = eye.copy()
    for _ in range(terms):
        power = -(power @ dpsi)
        total = total + power
    return total, terms, gamma ** (terms + 1) / (1 - gamma)


class _Counter:
    """Thread-safe tally of cache evaluations outside the node box."""

    def __init__(self):
        self._lock = threading.Lock()
        self.evaluations = 0
        self.outside = 0

    def add(self, evaluations: int, outside: int):
        with self._lock:
            self.evaluations += evaluations
            self.outside += outside


@dataclass(frozen=True)
class ZvonkinTransform:
    """``Psi = I + psi`` with derivatives, inverse and conjugated coefficients.

    ``psi_fn``, ``dpsi_fn`` and ``d2psi_fn`` take points of shape (..., d) and
    return (..., d), (..., d, d) with ``[c, l] = d psi_c / d x_l`` and
    (..., d, d, d) with ``[c, l, m] = d^2 psi_c / d x_l d x_m``.
    """

    psi_fn: Callable[[Array], Array]
    dpsi_fn: Callable[[Array], Array]
    d2psi_fn: Callable[[Array], Array]
    dim: int
    lam: float
    gamma_cert: float
    inverse_tol: float = 1e-10
    max_iter: int = MAX_INVERT_ITER
    box: tuple[Array, Array] | None = field(default=None, repr=False)
    interpolation_error: float = 0.0
    gradient_mismatch: float = 0.0
    solution: ResolventSolution | None = field(default=None, repr=False)
    base_drift: DriftField | None = field(default=None, repr=False)
    base_sigma: DiffusionSpec | None = field(default=None, repr=False)
    stats: _Counter = field(default_factory=_Counter, repr=False, compare=False)

    def __post_init__(self):
        if not 0 <= self.gamma_cert < 1:
            raise ConfigError(f"the transform needs gamma_cert < 1, got {self.gamma_cert}", "gamma")

    # -- constructors ---------------------------------------------------------

    @classmethod
    def from_interpolant(cls, interp: MultiquadricInterpolant, lam: float, gamma_cert: float, **kw):
        return cls(
            psi_fn=interp,
            dpsi_fn=interp.gradient,
            d2psi_fn=interp.hessian,
            dim=interp.nodes.shape[1],
            lam=lam,
            gamma_cert=gamma_cert,
            **kw,
        )

    @classmethod
    def affine(cls, M, c=None, lam: float = 1.0, **kw) -> "ZvonkinTransform":
        """``psi(x) = M x + c``; useful as an exact oracle."""
        M = np.atleast_2d(np.asarray(M, dtype=float)).copy()
        d = M.shape[0]
        c = np.zeros(d) if c is None else np.atleast_1d(np.asarray(c, dtype=float)).copy()
        gamma = float(np.linalg.norm(M, 2))
        return cls(
            psi_fn=lambda x: x @ M.T + c,
            dpsi_fn=lambda x: np.broadcast_to(M, x.shape[:-1] + (d, d)).copy(),
            d2psi_fn=lambda x: np.zeros(x.shape[:-1] + (d, d, d)),
            dim=d,
            lam=lam,
            gamma_cert=kw.pop("gamma_cert", gamma),
            **kw,
        )

    # -- the map and its derivatives -----------------------------------------

    def _track(self, x: Array):
        if self.box is not None:
            lo, hi = self.box
            pts = x.reshape(-1, self.dim)
            out = int(np.count_nonzero(np.any((pts < lo) | (pts > hi), axis=-1)))
            self.stats.add(pts.shape[0], out)

    def psi(self, x) -> Array:
        x = _as_points(x, self.dim)
        self._track(x)
        return self.psi_fn(x)

    def dpsi(self, x) -> Array:
        return self.dpsi_fn(_as_points(x, self.dim))

    def d2psi(self, x) -> Array:
        return self.d2psi_fn(_as_points(x, self.dim))

    def Psi(self, x) -> Array:
        x = _as_points(x, self.dim)
        return x + self.psi(x)

    def DPsi(self, x) -> Array:
        return np.eye(self.dim) + self.dpsi(x)

    def invert(self, y, x0=None, step: int | None = None) -> Array:
        """``Psi^{-1}(y)`` by the fixed-point iteration ``x <- y - psi(x)``.

        Starts from ``x0`` (default ``y``) and stops once every increment is
        below ``inverse_tol (1 + |y|) (1 - gamma_cert)``.
        """
        x, _ = self.invert_with_count(y, x0, step)
        return x

    def invert_with_count(self, y, x0=None, step: int | None = None) -> tuple[Array, int]:
        y = _as_points(y, self.dim)
        x = y if x0 is None else np.asarray(x0, dtype=float)
        thresh = self.inverse_tol * (1 + np.linalg.norm(y, axis=-1)) * (1 - self.gamma_cert)
        delta = np.inf
        # a gamma-contraction shrinks the error by gamma per sweep; allow enough
        # sweeps to cover sixteen decades whatever max_iter says
        cap = self.max_iter
        if self.gamma_cert > 0:
            cap = max(cap, math.ceil(math.log(1e-16) / math.log(self.gamma_cert)))
        for it in range(1, cap + 1):
            new = y - self.psi(x)
            delta = np.linalg.norm(new - x, axis=-1)
            x = new
            if np.all(delta <= thresh):
                return x, it
        raise InversionError(float(np.max(delta)), cap, step)

    def dpsi_inverse(self, y, series_terms: int | None = None, tol: float = NEUMANN_TOL):
        """``D(Psi^{-1})(y)`` by the Neumann series at ``Psi^{-1}(y)``.

        Returns ``(matrix, remainder_bound)``.
        """
        x = self.invert(y)
        M, _, rem = neumann_inverse(self.dpsi(x), self.gamma_cert, series_terms, tol)
        return M, rem

    # -- conjugated coefficients ---------------------------------------------

    def _require_base(self):
        if self.base_drift is None or self.base_sigma is None:
            raise ConfigError("this transform was built without base coefficients", "transform")

    def b_tilde(self, y) -> Array:
        return self.lam * self.psi(self.invert(y))

    def sigma_tilde(self, y) -> Array:
        self._require_base()
        x = self.invert(y)
        return self.DPsi(x) @ self.base_sigma.sigma(x)

    def conjugated(self, jacobian: str = "analytic") -> "ConjugatedCoeffs":
        """Conjugated coefficients as a drift/diffusion pair for the path module.

        ``jacobian="analytic"`` differentiates through the closed-form
        derivatives of ``psi``; ``"fd"`` uses central differences in ``y``.
        """
        self._require_base()
        s = self.base_sigma
        T = self
        d = self.dim

        def bt(y):
            return T.b_tilde(y)

        def st(y):
            return T.sigma_tilde(y)

        if jacobian == "analytic":

            def jb(y):
                x = T.invert(y)
                inv, _, _ = neumann_inverse(T.dpsi(x), T.gamma_cert)
                return T.lam * T.dpsi(x) @ inv

            def js(y):
                x = T.invert(y)
                inv, _, _ = neumann_inverse(T.dpsi(x), T.gamma_cert)
                sig = s.sigma(x)  # (..., d, k)
                H = T.d2psi(x)  # (..., c, l, m)
                dsig = s.dsigma(x)  # (..., l, j, m)
                # d sigma_tilde_{cj} / d x_m, then chain with dx/dy = inv
                dx = np.einsum("...clm,...lj->...cjm", H, sig) + np.einsum("...cl,...ljm->...cjm", T.DPsi(x), dsig)
                return np.einsum("...cjm,...mn->...cjn", dx, inv)

        elif jacobian == "fd":
            step = 1e-4
            jb = lambda y: fd_jacobian(bt, y, step)
            js = lambda y: fd_jacobian(st, y, step)
        else:
            raise ConfigError(f"unknown jacobian mode {jacobian!r}", "jacobian")
        drift = DriftField(eval=bt, dim=d, analytic_jacobian=jb, name="conjugated-drift")
        diff = DiffusionSpec(sigma_fn=st, dim=d, dim_noise=s.dim_noise, dsigma_fn=js, name="conjugated-sigma")
        return ConjugatedCoeffs(drift, diff)

    # -- diagnostics -----------------------------------------------------------

    def round_trip_error(self, probes) -> dict:
        """Relative round-trip errors ``|Psi^{-1}(Psi x) - x| / (1 + |x|)`` and the reverse."""
        x = _as_points(probes, self.dim).reshape(-1, self.dim)
        fwd = np.linalg.norm(self.invert(self.Psi(x)) - x, axis=-1) / (1 + np.linalg.norm(x, axis=-1))
        bwd = np.linalg.norm(self.Psi(self.invert(x)) - x, axis=-1) / (1 + np.linalg.norm(x, axis=-1))
        return {"inverse_of_forward": float(fwd.max()), "forward_of_inverse": float(bwd.max())}

    def neumann_identity_error(self, probes, series_terms: int | None = None) -> dict:
        """``max |DPsi^{-1}(y) DPsi(Psi^{-1} y) - I|`` against the truncation plus interpolation bound."""
        y = _as_points(probes, self.dim).reshape(-1, self.dim)
        x = self.invert(y)
        M, terms, rem = neumann_inverse(self.dpsi(x), self.gamma_cert, series_terms)
        err = np.abs(M @ self.DPsi(x) - np.eye(self.dim)).max()
        bound = rem + self.interpolation_error + 1e-12
        return {"error": float(err), "truncation_bound": rem, "bound": bound, "terms": terms, "ok": bool(err <= bound)}

    def det_check(self, probes) -> dict:
        x = _as_points(probes, self.dim).reshape(-1, self.dim)
        det = np.linalg.det(self.DPsi(x))
        floor = (1 - self.gamma_cert) ** self.dim
        return {"min_det": float(det.min()), "floor": floor, "ok": bool(det.min() >= floor - 1e-12)}

    def summary(self) -> dict:
        return {
            "lambda": self.lam,
            "gamma_cert": self.gamma_cert,
            "inverse_tol": self.inverse_tol,
            "interpolation_error": self.interpolation_error,
            "gradient_mismatch": self.gradient_mismatch,
            "cache_evaluations": self.stats.evaluations,
            "cache_extrapolations": self.stats.outside,
        }


@dataclass(frozen=True)
class ConjugatedCoeffs:
    b_tilde: DriftField
    sigma_tilde: DiffusionSpec

    def lipschitz_estimates(self, probes, step: float = 1e-3) -> dict:
        """Largest Jacobian norms on the probe set (empirical Lipschitz constants)."""
        y = _as_points(probes, self.b_tilde.dim).reshape(-1, self.b_tilde.dim)
        jb = self.b_tilde.jacobian(y)
        js = self.sigma_tilde.dsigma(y)
        return {
            "b_tilde": float(np.linalg.norm(jb, ord=2, axis=(-2, -1)).max()),
            "sigma_tilde": float(np.sqrt((js**2).sum(axis=(-3, -2, -1))).max()),
        }


# ---------------------------------------------------------------------------
# construction from a drift


def cache_nodes(dim: int, radius: float = 6.0, per_axis: int | None = None) -> Array:
    """Tensor grid of cache nodes on ``[-radius, radius]^d``."""
    if per_axis is None:
        per_axis = {1: 41, 2: 17, 3: 9}.get(dim, 5)
    ax = np.linspace(-radius, radius, per_axis)
    return np.array(list(itertools.product(ax, repeat=dim)))


def build_transform(
    b: DriftField,
    s: DiffusionSpec,
    *,
    lam: float | None = None,
    ladder: Sequence[float] = DEFAULT_LADDER,
    gamma: float = 0.5,
    cfg: ResolventConfig | None = None,
    nodes: Array | None = None,
    radius: float = 6.0,
    seed: int = 0,
    inverse_tol: float = 1e-10,
    select_queries=None,
) -> ZvonkinTransform:
    """Select ``lambda`` (unless given), solve ``psi`` on the cache nodes and interpolate.

    ``gamma_cert`` is the largest of the selection bound, the node estimates
    ``|D psi| + 2 stderr`` and the sup of the interpolant's gradient on a
    grid four times denser than the nodes.
    """
    if b.dim != s.dim:
        raise ConfigError(f"drift dimension {b.dim} differs from diffusion dimension {s.dim}", "sigma")
    if cfg is None:
        cfg = ResolventConfig(lam=1.0, antithetic=True, n_paths=2000, dt=1e-2)
    bounds = []
    selection = None
    if lam is None:
        lam, selection = select_lambda(b, s, ladder, gamma, cfg, select_queries, seed)
        bounds.append(selection.grad_sup_est + 2 * selection.grad_sup_stderr)
    if nodes is None:
        nodes = cache_nodes(b.dim, radius)
    nodes = _as_points(nodes, b.dim).reshape(-1, b.dim)
    sol = solve_psi(b, s, replace(cfg, lam=lam), nodes, seed)
    if selection is not None:
        sol.ladder_diagnostics = selection.ladder_diagnostics
    interp = MultiquadricInterpolant.fit(nodes, sol.psi)
    node_norms = np.linalg.norm(sol.grad_psi, ord=2, axis=(-2, -1))
    node_se = np.linalg.norm(sol.grad_stderr, axis=(-2, -1))
    bounds.append(float(np.max(node_norms + 2 * node_se)))
    lo, hi = nodes.min(axis=0), nodes.max(axis=0)
    per_axis = max(4 * round(len(nodes) ** (1 / b.dim)), 8)
    dense = np.array(list(itertools.product(*[np.linspace(l, h, per_axis) for l, h in zip(lo, hi)])))
    bounds.append(float(np.linalg.norm(interp.gradient(dense), ord=2, axis=(-2, -1)).max()))
    gamma_cert = max(bounds)
    mismatch = float(np.abs(interp.gradient(nodes) - sol.grad_psi).max())
    if not gamma_cert < 1:
        raise LambdaSelectionError(
            f"lambda={lam:g} gives sup |D psi| bound {gamma_cert:.4g} >= 1 on the cache; "
            "Psi is not certified to be invertible",
            [{"lambda": lam, "bounds": bounds}],
        )
    return ZvonkinTransform.from_interpolant(
        interp,
        lam,
        gamma_cert,
        inverse_tol=inverse_tol,
        box=(lo, hi),
        interpolation_error=float(interp.loo_error),
        gradient_mismatch=mismatch,
        solution=sol,
        base_drift=b,
        base_sigma=s,
    )


# ---------------------------------------------------------------------------
# flows


@dataclass
class TransformedRun:
    """Output of :func:`transformed_integrate` for one chunk of paths."""

    X: Array  # (steps+1, n, m, d) or endpoint (n, m, d)
    Y: Array
    deriv: Array | None = None  # D_h phi in X coordinates, chain route
    deriv_dove: Array | None = None  # D_h phi from the derivative equation
    increments: Array | None = None
    inversion_iterations: int = 0


def transformed_integrate(
    T: ZvonkinTransform,
    X0: Array,
    driver: BrownianDriver,
    grid: TimeGrid,
    start: int,
    stop: int,
    *,
    h: Array | None = None,
    record: bool = True,
    dove: bool = False,
    stage: str = "flow",
) -> TransformedRun:
    """Euler scheme for the conjugated SDE mapped back by ``Psi^{-1}``.

    ``X0`` has shape (m, d) or (n, m, d).  With a direction ``h`` the
    conjugated variation equation is stepped alongside (chain route) and,
    with ``dove``, the equation for ``DPsi(phi) D phi h`` as well.
    """
    T._require_base()
    s = T.base_sigma
    n = stop - start
    X0 = np.asarray(X0, dtype=float)
    X = X0.copy() if X0.ndim == 3 else np.broadcast_to(X0, (n,) + X0.shape).copy()
    Y = T.Psi(X)
    dt = grid.dt
    lam = T.lam
    eta = M = None
    if h is not None:
        h = np.broadcast_to(np.asarray(h, dtype=float), X.shape)
        eta = _matvec(T.DPsi(X), h)
        if dove:
            M = eta.copy()
    xs, ys, ds, dvs, incs = [X.copy()], [Y.copy()], [], [], []

    def to_x(eta_, dpsi_):
        inv, _, _ = neumann_inverse(dpsi_, T.gamma_cert)
        return _matvec(inv, eta_), inv

    if eta is not None:
        ds.append(h.copy())
        if dove:
            dvs.append(h.copy())
    iters = 0
    for j, dW in enumerate(driver.iter_increments(grid, start, stop)):
        psi = T.psi(X)
        sig = s.sigma(X)
        need_deriv = eta is not None
        if need_deriv:
            dpsi = T.dpsi(X)
            DPsi = np.eye(T.dim) + dpsi
        else:
            DPsi = T.DPsi(X)
        sig_t = DPsi @ sig
        if need_deriv:
            H = T.d2psi(X)
            dsig = s.dsigma(X)
            zeta, inv = to_x(eta, dpsi)
            # d eta = lam Dpsi DPsi^{-1} eta dt + [D^2 psi[zeta] sigma + DPsi Dsigma[zeta]] dW
            dsig_t = np.einsum("...clm,...lj,...m->...cj", H, sig, zeta) + DPsi @ np.einsum(
                "...ljm,...m->...lj", dsig, zeta
            )
            eta = eta + lam * _matvec(dpsi, zeta) * dt + (dsig_t * dW[:, None, None, :]).sum(axis=-1)
            if dove:
                zd, _ = to_x(M, dpsi)
                dsig_d = np.einsum("...clm,...m,...lj->...cj", H, zd, sig) + np.einsum(
                    "...cl,...ljm,...m->...cj", DPsi, dsig, zd
                )
                M = M + (dsig_d * dW[:, None, None, :]).sum(axis=-1) + lam * _matvec(dpsi, zd) * dt
        Yn = Y + (lam * psi) * dt + (sig_t * dW[:, None, None, :]).sum(axis=-1)
        check_finite(Yn, j + 1, stage)
        guess = X + (Yn - Y)
        X, it = T.invert_with_count(Yn, guess, step=j + 1)
        iters += it
        Y = Yn
        if record:
            xs.append(X.copy())
            ys.append(Y.copy())
            incs.append(dW)
        if eta is not None and record:
            ds.append(to_x(eta, T.dpsi(X))[0])
            if dove:
                dvs.append(to_x(M, T.dpsi(X))[0])
    if record:
        return TransformedRun(
            X=np.stack(xs),
            Y=np.stack(ys),
            deriv=np.stack(ds) if ds else None,
            deriv_dove=np.stack(dvs) if dvs else None,
            increments=np.stack(incs),
            inversion_iterations=iters,
        )
    deriv = deriv_dove = None
    if eta is not None:
        dp = T.dpsi(X)
        deriv = to_x(eta, dp)[0]
        if dove:
            deriv_dove = to_x(M, dp)[0]
    return TransformedRun(X=X, Y=Y, deriv=deriv, deriv_dove=deriv_dove, inversion_iterations=iters)


def _point(x, dim) -> Array:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (dim,):
        raise ConfigError(f"point must have shape ({dim},), got {x.shape}", "x")
    return x


def simulate_transformed_flow(
    T: ZvonkinTransform,
    x,
    driver: BrownianDriver,
    grid: TimeGrid,
    *,
    n_paths: int = 1,
    path_start: int = 0,
    workers: int = 1,
    chunk: int = DEFAULT_CHUNK,
) -> tuple[PathRecord, PathRecord]:
    """Paths of the original equation obtained through the conjugated SDE.

    Returns the X-coordinate record and the companion Y-path record.
    """
    x = _point(x, T.dim)

    def run(a, c):
        r = transformed_integrate(T, x[None, :], driver, grid, path_start + a, path_start + c)
        return r.X[:, :, 0, :], r.Y[:, :, 0, :], r.increments

    parts = map_chunks(run, n_paths, workers, chunk)
    X = np.concatenate([p[0] for p in parts], axis=1)
    Y = np.concatenate([p[1] for p in parts], axis=1)
    inc = np.concatenate([p[2] for p in parts], axis=1)
    X[0] = x  # the initial condition is exact, not a round trip
    return PathRecord(grid, X, inc), PathRecord(grid, Y, inc)


@dataclass
class FlowDerivative:
    grid: TimeGrid
    direction: Array
    values: Array  # (steps+1, n_paths, d), chain route
    dove_values: Array | None
    states: Array  # (steps+1, n_paths, d) X_t

    @property
    def endpoint(self) -> Array:
        return self.states[-1]

    @property
    def discrepancy(self) -> float:
        if self.dove_values is None:
            return float("nan")
        return float(np.abs(self.values - self.dove_values).max())


def flow_derivative(
    T: ZvonkinTransform,
    x,
    h,
    driver: BrownianDriver,
    grid: TimeGrid,
    *,
    n_paths: int = 1,
    path_start: int = 0,
    dove: bool = True,
    workers: int = 1,
    chunk: int = DEFAULT_CHUNK,
) -> FlowDerivative:
    """``D_h phi_{0,t}(x)`` per grid time via the conjugated variation equation.

    ``D_h phi_t = DPsi(X_t)^{-1} eta_t`` where ``eta`` solves the variation
    equation of the conjugated SDE started at ``DPsi(x) h``.  With ``dove``
    the equation for ``DPsi(phi_t) D phi_t h`` written in X coordinates is
    stepped too and the largest difference between the two is reported.
    """
    x = _point(x, T.dim)
    h = _point(h, T.dim)

    def run(a, c):
        r = transformed_integrate(
            T, x[None, :], driver, grid, path_start + a, path_start + c, h=h[None, :], dove=dove
        )
        return r.deriv[:, :, 0, :], None if r.deriv_dove is None else r.deriv_dove[:, :, 0, :], r.X[:, :, 0, :]

    parts = map_chunks(run, n_paths, workers, chunk)
    vals = np.concatenate([p[0] for p in parts], axis=1)
    dv = np.concatenate([p[1] for p in parts], axis=1) if dove else None
    states = np.concatenate([p[2] for p in parts], axis=1)
    states[0] = x
    return FlowDerivative(grid, h.copy(), vals, dv, states)


def transformed_composition_gap(
    T: ZvonkinTransform,
    x,
    u: float,
    driver: BrownianDriver,
    grid: TimeGrid,
    *,
    n_paths: int = 1,
    workers: int = 1,
    chunk: int = DEFAULT_CHUNK,
) -> Array:
    """Per-path ``|phi_{0,T}(x) - phi_{u,T}(phi_{0,u}(x))|`` for the transformed flow.

    The restart at ``u`` maps ``phi_{0,u}(x)`` forward by ``Psi`` again and
    reuses the driver tail.
    """
    x = _point(x, T.dim)
    ju = grid.index_of(u)
    if ju == grid.steps:
        raise ConfigError("restart time coincides with the end of the grid", "u")
    tail = TimeGrid(grid.t0 + ju * grid.dt, grid.T, grid.steps - ju)

    def run(a, c):
        full = transformed_integrate(T, x[None, :], driver, grid, a, c)
        xu = full.X[ju]
        rest = transformed_integrate(T, xu, driver, tail, a, c, record=False)
        return np.linalg.norm(rest.X[:, 0, :] - full.X[-1, :, 0, :], axis=-1)

    return np.concatenate(map_chunks(run, n_paths, workers, chunk))


def conjugation_residual(T: ZvonkinTransform, rec: PathRecord) -> dict:
    """Per-step mismatch between ``Psi(X_{j+1}) - Psi(X_j)`` and the conjugated Euler increment.

    For an Euler path of the original equation this is O(dt) per step; the
    statistic reported is the mean absolute residual divided by ``dt``.
    """
    T._require_base()
    X = rec.states
    dt = rec.grid.dt
    s = T.base_sigma
    lhs = T.Psi(X[1:]) - T.Psi(X[:-1])
    x = X[:-1]
    rhs = T.lam * T.psi(x) * dt + _matvec(T.DPsi(x) @ s.sigma(x), rec.increments)
    r = np.linalg.norm(lhs - rhs, axis=-1)
    return {"mean_abs": float(r.mean()), "max_abs": float(r.max()), "mean_over_dt": float(r.mean() / dt), "dt": dt}


# ---------------------------------------------------------------------------
# stability against mollified drifts


def default_x_set(dim: int, count: int = 8, radius: float = 2.0) -> Array:
    """``count`` points spread over the ball of the given radius (deterministic)."""
    if dim == 1:
        return np.linspace(-radius, radius, count)[:, None]
    from scipy.stats import qmc

    u = qmc.Sobol(dim, scramble=True, seed=12345).random(count)
    g = u * 2 - 1
    g = g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)
    r = radius * np.sqrt(np.linspace(0.1, 1.0, count))
    return g * r[:, None]


@dataclass
class StabilityRow:
    n: int
    sup_gap: float
    mean_gap: float
    deriv_sup_gap: float
    deriv_mean_gap: float
    drift_sup_diff: float
    psi_sup_diff: float
    max_principle_ratio: float
    contraction_bound: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class StabilityTable:
    rows: list[StabilityRow]
    lam: float
    p: float
    x_set: Array
    schauder_const: float
    max_principle_ok: list[bool]
    transform: dict

    def as_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "p": self.p,
            "x_set": self.x_set.tolist(),
            "schauder_const_est": self.schauder_const,
            "max_principle_ok": self.max_principle_ok,
            "transform": self.transform,
            "rows": {str(r.n): r.as_dict() for r in self.rows},
        }


def stability_experiment(
    b: DriftField,
    s: DiffusionSpec,
    n_list: Sequence[int],
    *,
    T_end: float = 1.0,
    dt: float = 1e-3,
    n_paths: int = 200,
    p: float = 2.0,
    x_set: Array | None = None,
    h: Array | None = None,
    seed: int = 0,
    transform: ZvonkinTransform | None = None,
    transform_kw: dict | None = None,
    quad_points_per_axis: int = 32,
    check_cfg: ResolventConfig | None = None,
    workers: int = 1,
    chunk: int = DEFAULT_CHUNK,
) -> StabilityTable:
    """Gap between the rough flow (through the transform) and Euler flows of mollified drifts.

    All flows share one Brownian driver.  For each ``n`` the table holds the
    sup over the x-set and the paths of ``sup_u |phi^n_u(x) - phi_u(x)|^p /
    (1 + |x|)^p``, its path mean, the analogous derivative gaps, and the
    maximum-principle comparison ``|psi - psi_n| <= (C + 1) / lam |b - b_n|``.
    """
    if not n_list:
        raise ConfigError("empty mollification ladder", "ns")
    d = b.dim
    x_set = default_x_set(d) if x_set is None else _as_points(x_set, d).reshape(-1, d)
    h = np.eye(d)[0] if h is None else _point(h, d)
    if transform is None:
        transform = build_transform(b, s, seed=seed, **(transform_kw or {}))
    lam = transform.lam
    grid = TimeGrid.from_dt(0.0, T_end, dt)
    driver = BrownianDriver(seed, dt, s.dim_noise)
    weight = (1 + np.linalg.norm(x_set, axis=-1)) ** p  # (m,)

    def rough(a, c):
        r = transformed_integrate(transform, x_set, driver, grid, a, c, h=h, stage="stability")
        return r.X, r.deriv

    parts = map_chunks(rough, n_paths, workers, chunk)
    Xr = np.concatenate([q[0] for q in parts], axis=1)
    Dr = np.concatenate([q[1] for q in parts], axis=1)
    Xr[0] = x_set

    if check_cfg is None:
        check_cfg = ResolventConfig(lam=lam, n_paths=500, dt=1e-2, antithetic=True)
    check_cfg = replace(check_cfg, lam=lam)
    probes = np.linspace(-2, 2, 9)[:, None] if d == 1 else default_x_set(d, 9)
    psi_rough = solve_psi(b, s, check_cfg, probes, seed, gradient=False).psi
    rows: list[StabilityRow] = []
    for n in n_list:
        bn = mollify(b, n, quad_points_per_axis)
        chk = solve_psi(bn, s, check_cfg, probes, seed)
        bound = chk.grad_sup_est + 2 * chk.grad_sup_stderr
        if not bound < 1:
            raise LambdaSelectionError(
                f"mollified drift n={n}: sup |D psi_n| bound {bound:.4g} >= 1 at lambda={lam:g}",
                [{"n": n, "lambda": lam, "bound": bound}],
            )

        def smooth(a, c):
            _, _, st, et, _ = integrate(bn, s, x_set, driver, grid, a, c, eta0=h[None, :], record=True, stage="stability")
            return st, et

        sp = map_chunks(smooth, n_paths, workers, chunk)
        Xn = np.concatenate([q[0] for q in sp], axis=1)
        Dn = np.concatenate([q[1] for q in sp], axis=1)
        gap = (np.linalg.norm(Xn - Xr, axis=-1) ** p).max(axis=0) / weight  # (n_paths, m)
        dgap = (np.linalg.norm(Dn - Dr, axis=-1) ** p).max(axis=0)
        bdiff = float(np.linalg.norm(b.eval(probes) - bn.eval(probes), axis=-1).max())
        pdiff = float(np.linalg.norm(psi_rough - chk.psi, axis=-1).max())
        ratio = lam * pdiff / bdiff if bdiff > 0 else 0.0
        rows.append(
            StabilityRow(
                n=int(n),
                sup_gap=float(gap.max()),
                mean_gap=float(gap.mean(axis=0).max()),
                deriv_sup_gap=float(dgap.max()),
                deriv_mean_gap=float(dgap.mean(axis=0).max()),
                drift_sup_diff=bdiff,
                psi_sup_diff=pdiff,
                max_principle_ratio=ratio,
                contraction_bound=float(bound),
            )
        )
    # psi - psi_n solves the resolvent equation with right-hand side
    # (b - b_n)(I + D psi_n), so the maximum principle gives C = sup |D psi_n|,
    # estimated at the largest n.
    C = rows[-1].contraction_bound
    ok = [bool(r.max_principle_ratio <= C + 1) for r in rows]
    return StabilityTable(rows, lam, p, x_set, C, ok, transform.summary())
