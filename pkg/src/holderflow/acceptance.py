"""The acceptance battery: twelve numbered checks run by ``holderflow suite`` and the test suite.

Each check returns a :class:`CriterionResult` carrying the measured numbers
next to the thresholds.  ``fast=True`` divides path counts by
``FAST_FACTOR`` and widens the thresholds that depend on Monte Carlo noise
by ``sqrt(FAST_FACTOR)`` (see ``FAST_TABLE``); thresholds stated in
standard errors scale automatically and deterministic checks are unchanged.
"""

from __future__ import annotations

import contextlib
import io
import math
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .bel import (
    bel_gradient,
    closed_form_gradient,
    const_observable,
    coord_observable,
    decay_probe,
    fd_gradient,
    geometric_times,
    holder_observable,
)
from .brownian import BrownianDriver, TimeGrid, derive_seed
from .coeffs import holder_drift, identity_sigma, linear_drift, probe_cloud, constant_drift, zero_drift
from .paths import simulate
from .resolvent import ResolventConfig, select_lambda, solve_psi
from .zvonkin import (
    build_transform,
    simulate_transformed_flow,
    stability_experiment,
    transformed_composition_gap,
)

FAST_FACTOR = 10
_WIDEN = math.sqrt(FAST_FACTOR)

# threshold: (full budget, fast budget)
FAST_TABLE = {
    "acc1_stderr_ceiling": (0.01, 0.01 * _WIDEN),
    "acc10_slope_tolerance": (0.15, 0.15 * _WIDEN),
    "acc11_stability_factor": (3.0, 3.0 * _WIDEN),
}


@dataclass
class CriterionResult:
    number: int
    title: str
    passed: bool
    details: dict = field(default_factory=dict)
    runtime_s: float = 0.0
    error: str | None = None

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        parts = []
        for k, v in self.details.items():
            if isinstance(v, dict):
                parts += [f"{k}.{kk}={_fmt(vv)}" for kk, vv in v.items() if not isinstance(vv, (list, dict))]
            elif not isinstance(v, list):
                parts.append(f"{k}={_fmt(v)}")
        summary = ", ".join(parts)
        extra = f" error={self.error}" if self.error else ""
        return f"{status} acceptance {self.number:2d} {self.title}: {summary}{extra} [{self.runtime_s:.1f}s]"

    def as_dict(self) -> dict:
        return {
            "number": self.number,
            "title": self.title,
            "passed": self.passed,
            "details": self.details,
            "runtime_s": self.runtime_s,
            "error": self.error,
        }


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def _paths(n: int, fast: bool, floor: int = 100) -> int:
    return max(floor, n // FAST_FACTOR) if fast else n


def _tol(name: str, fast: bool) -> float:
    return FAST_TABLE[name][1 if fast else 0]


# ---------------------------------------------------------------------------


def acc1_resolvent_linear(seed: int, fast: bool) -> tuple[bool, dict]:
    b, s = linear_drift(-1.0), identity_sigma(1)
    n = _paths(100_000, fast)
    cfg = ResolventConfig(lam=5.0, dt=1e-3, n_paths=n)
    xs = np.array([[-1.0], [0.0], [1.0]])
    t0 = time.perf_counter()
    sol = solve_psi(b, s, cfg, xs, derive_seed(seed, "acc1"), gradient=False)
    elapsed = time.perf_counter() - t0
    exact = -xs[:, 0] / 6
    z = np.abs(sol.psi[:, 0] - exact) / sol.psi_stderr[:, 0]
    ceiling = _tol("acc1_stderr_ceiling", fast)
    ok = bool(np.all(z <= 3) and np.all(sol.psi_stderr < ceiling) and elapsed < 60)
    return ok, {
        "n_paths": n,
        "T_max": sol.T_max,
        "psi": sol.psi[:, 0].tolist(),
        "max_z": float(z.max()),
        "max_stderr": float(sol.psi_stderr.max()),
        "stderr_ceiling": ceiling,
        "solve_s": elapsed,
    }


# rounding floor for estimators whose per-path value is constant (stderr ~ 0)
_ROUND = 1e-12


def acc2_resolvent_constant(seed: int, fast: bool) -> tuple[bool, dict]:
    b, s = constant_drift(1.0), identity_sigma(1)
    n = _paths(10_000, fast)
    sol = solve_psi(b, s, ResolventConfig(lam=5.0, dt=1e-3, n_paths=n), [[0.0], [1.0]], derive_seed(seed, "acc2"))
    dev = np.abs(sol.psi[:, 0] - 0.2)
    gdev = np.abs(sol.grad_psi[:, 0, 0])
    ok = bool(
        np.all(dev <= 3 * sol.psi_stderr[:, 0] + _ROUND) and np.all(gdev <= 3 * sol.grad_stderr[:, 0, 0] + _ROUND)
    )
    return ok, {
        "psi": sol.psi[:, 0].tolist(),
        "max_psi_dev": float(dev.max()),
        "psi_stderr": float(sol.psi_stderr.max()),
        "max_grad_dev": float(gdev.max()),
        "grad_stderr": float(sol.grad_stderr.max()),
    }


def acc3_lambda_trend(seed: int, fast: bool) -> tuple[bool, dict]:
    b, s = holder_drift(0.5), identity_sigma(1)
    n = _paths(2000, fast)
    cfg = ResolventConfig(lam=2.0, dt=1e-3, n_paths=n)
    ladder = [2.0, 5.0, 10.0, 20.0]
    t0 = time.perf_counter()
    lam, sol = select_lambda(b, s, ladder, 0.5, cfg, None, derive_seed(seed, "acc3"), exhaustive=True)
    elapsed = time.perf_counter() - t0
    diag = sol.ladder_diagnostics
    g = [r["grad_sup_est"] for r in diag]
    se = [r["grad_sup_stderr"] for r in diag]
    mono = all(g[i + 1] <= g[i] + 2 * math.hypot(se[i], se[i + 1]) for i in range(len(g) - 1))
    ok = bool(mono and elapsed < 300)
    return ok, {
        "grad_sup_est": g,
        "grad_sup_stderr": se,
        "nonincreasing": mono,
        "selected_lambda": lam,
        "n_paths": n,
        "elapsed_s": elapsed,
    }


def acc4_round_trip(seed: int, fast: bool) -> tuple[bool, dict]:
    b, s = holder_drift(0.5), identity_sigma(1)
    T = build_transform(b, s, seed=derive_seed(seed, "acc4"))
    probes = probe_cloud(1, 64, radius=5.0, seed=derive_seed(seed, "acc4:probes") % (2**32))
    back = T.invert(T.Psi(probes))
    rel = np.linalg.norm(back - probes, axis=-1) / (1 + np.linalg.norm(probes, axis=-1))
    neu = T.neumann_identity_error(probes)
    ok = bool(rel.max() <= 1e-6 and neu["ok"])
    return ok, {
        "lambda": T.lam,
        "gamma_cert": T.gamma_cert,
        "max_rel_round_trip": float(rel.max()),
        "neumann_error": neu["error"],
        "neumann_bound": neu["bound"],
    }


def acc5_degeneracy(seed: int, fast: bool) -> tuple[bool, dict]:
    b, s = zero_drift(1), identity_sigma(1)
    T = build_transform(b, s, seed=derive_seed(seed, "acc5"))
    grid = TimeGrid.from_dt(0.0, 1.0, 1e-3)
    driver = BrownianDriver(derive_seed(seed, "acc5:driver"), 1e-3)
    xr, _ = simulate_transformed_flow(T, [0.7], driver, grid, n_paths=16)
    direct = simulate(b, s, [0.7], 0.0, driver, grid, n_paths=16)
    same = bool(np.array_equal(xr.states, direct.states))
    return same, {"bit_identical": same, "max_abs_diff": float(np.abs(xr.states - direct.states).max())}


def acc6_transform_vs_direct(seed: int, fast: bool) -> tuple[bool, dict]:
    b, s = linear_drift(-1.0), identity_sigma(1)
    dts = [1e-2, 1e-3, 1e-4]
    driver = BrownianDriver(derive_seed(seed, "acc6:driver"), dts[-1])
    med = []
    for dt in dts:
        cfg = ResolventConfig(lam=5.0, dt=dt, n_paths=100, antithetic=True)
        T = build_transform(b, s, lam=5.0, cfg=cfg, seed=derive_seed(seed, "acc6"))
        grid = TimeGrid.from_dt(0.0, 1.0, dt)
        xr, _ = simulate_transformed_flow(T, [1.0], driver, grid, n_paths=100)
        d = simulate(b, s, [1.0], 0.0, driver, grid, n_paths=100)
        med.append(float(np.median(np.abs(xr.endpoint - d.endpoint))))
    dec = all(med[i + 1] < med[i] for i in range(len(med) - 1))
    ok = bool(dec and med[-1] < 0.02)
    return ok, {"dts": dts, "median_gap": med, "decreasing": dec, "final_gap": med[-1]}


def acc7_composition(seed: int, fast: bool) -> tuple[bool, dict]:
    b, s = holder_drift(0.5), identity_sigma(1)
    T = build_transform(b, s, seed=derive_seed(seed, "acc7"))
    dts = [1e-2, 1e-3, 1e-4]
    driver = BrownianDriver(derive_seed(seed, "acc7:driver"), dts[-1])
    med = []
    for dt in dts:
        grid = TimeGrid.from_dt(0.0, 1.0, dt)
        gap = transformed_composition_gap(T, [0.5], 0.5, driver, grid, n_paths=100)
        med.append(float(np.median(gap)))
    dec = all(med[i + 1] < med[i] for i in range(len(med) - 1))
    ok = bool(dec and med[-1] < 0.05)
    return ok, {"dts": dts, "median_gap": med, "decreasing": dec, "final_gap": med[-1], "inverse_tol": T.inverse_tol}


def acc8_stability(seed: int, fast: bool) -> tuple[bool, dict]:
    b, s = holder_drift(0.5), identity_sigma(1)
    n = _paths(200, fast, floor=20)
    t0 = time.perf_counter()
    tab = stability_experiment(b, s, [2, 4, 8, 16], n_paths=n, seed=derive_seed(seed, "acc8"))
    elapsed = time.perf_counter() - t0
    gaps = [r.sup_gap for r in tab.rows]
    ratio = gaps[-1] / gaps[0]
    ok = bool(ratio < 0.5 and elapsed < 600)
    return ok, {
        "sup_gap": gaps,
        "ratio_16_over_2": ratio,
        "deriv_sup_gap": [r.deriv_sup_gap for r in tab.rows],
        "max_principle_ok": tab.max_principle_ok,
        "n_paths": n,
        "elapsed_s": elapsed,
    }


def acc9_bel_oracle(seed: int, fast: bool) -> tuple[bool, dict]:
    b, s = linear_drift(-1.0), identity_sigma(1)
    n = _paths(100_000, fast)
    grid = TimeGrid.from_dt(0.0, 1.0, 1e-3)
    f = coord_observable(0)
    sd = derive_seed(seed, "acc9")
    est = bel_gradient(f, b, s, 1.0, [1.0], [1.0], n, grid, sd)
    fd = fd_gradient(f, b, s, 1.0, [1.0], [1.0], 1e-3, n, grid, sd)
    oracle = closed_form_gradient(f, b, s, 1.0, [1.0], [1.0])
    one = bel_gradient(const_observable(), b, s, 1.0, [1.0], [1.0], n, grid, sd)
    zero = bel_gradient(f, b, s, 1.0, [1.0], [0.0], min(n, 1000), grid, sd)
    z_oracle = abs(est.value - oracle) / est.stderr
    z_fd = abs(est.value - fd.value) / math.hypot(est.stderr, fd.stderr)
    z_one = abs(one.value) / one.stderr
    ok = bool(z_oracle <= 3 and z_fd <= 3 and z_one <= 3 and zero.value == 0.0)
    return ok, {
        "estimate": est.value,
        "stderr": est.stderr,
        "oracle": oracle,
        "z_oracle": z_oracle,
        "fd": fd.value,
        "z_fd": z_fd,
        "const_estimate": one.value,
        "z_const": z_one,
        "h0_estimate": zero.value,
        "n_paths": n,
    }


_decay_cache: dict = {}


def _decay(seed: int, fast: bool):
    key = (seed, fast)
    if key not in _decay_cache:
        s = identity_sigma(1)
        t0 = time.perf_counter()
        fit = decay_probe(
            holder_observable(0.5),
            zero_drift(1),
            s,
            [0.0],
            [1.0],
            geometric_times(0.02, 0.5, 8),
            n_paths=_paths(20_000, fast),
            seed=derive_seed(seed, "acc10"),
        )
        _decay_cache[key] = (fit, time.perf_counter() - t0)
    return _decay_cache[key]


def acc10_decay(seed: int, fast: bool) -> tuple[bool, dict]:
    fit, elapsed = _decay(seed, fast)
    tol = _tol("acc10_slope_tolerance", fast)
    ok = bool(abs(fit.slope - (-0.25)) <= tol and elapsed < 300)
    return ok, {
        "slope": fit.slope,
        "expected": -0.25,
        "tolerance": tol,
        "band": list(fit.band),
        "excluded_ts": fit.excluded,
        "elapsed_s": elapsed,
    }


def acc11_variance_shape(seed: int, fast: bool) -> tuple[bool, dict]:
    fit, _ = _decay(seed, fast)
    v = np.array(fit.j2_times_t)
    factor = float(v.max() / v.min())
    limit = _tol("acc11_stability_factor", fast)
    return bool(factor <= limit), {"E_J2_times_t": v.tolist(), "max_over_min": factor, "limit": limit}


DETERMINISM_RUNS = [
    ["simulate", "--drift", "holder:theta=0.5,scale=1", "--x", "0.5", "--T", "0.5", "--dt", "0.01", "--paths", "300"],
    ["resolve", "--drift", "linear:a=-1", "--lambda", "5", "--queries", "-1:1:3", "--paths", "300", "--psi-dt", "0.01"],
    ["bel", "--drift", "linear:a=-1", "--f", "coord:0", "--t", "0.5", "--dt", "0.01", "--paths", "300", "--cv"],
    ["fd-check", "--drift", "linear:a=-1", "--f", "sq", "--t", "0.5", "--dt", "0.01", "--paths", "300"],
    [
        "flow", "--drift", "holder:theta=0.5,scale=1", "--lambda", "2", "--x", "0.5", "--T", "0.2", "--dt", "0.01",
        "--paths", "300", "--psi-paths", "200", "--psi-dt", "0.02",
    ],
]


def acc12_determinism(seed: int, fast: bool) -> tuple[bool, dict]:
    from .cli import main

    results = {}
    ok = True
    with tempfile.TemporaryDirectory() as tmp:
        for k, argv in enumerate(DETERMINISM_RUNS):
            payloads = []
            for rep, workers in enumerate([1, 1, 4]):
                out = Path(tmp) / f"{argv[0]}_{k}_{rep}"
                with contextlib.redirect_stdout(io.StringIO()):
                    code = main([*argv, "--seed", str(seed), "--workers", str(workers), "--chunk", "64", "--out", str(out)])
                if code != 0:
                    raise RuntimeError(f"{argv[0]} exited with code {code}")
                payloads.append({p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))})
            same = bool(payloads[0] and payloads[0] == payloads[1] == payloads[2])
            results[argv[0]] = same
            ok &= same
    return ok, {"identical": results}


CRITERIA: list[tuple[int, str, Callable[[int, bool], tuple[bool, dict]]]] = [
    (1, "resolvent oracle, linear drift", acc1_resolvent_linear),
    (2, "resolvent oracle, constant drift", acc2_resolvent_constant),
    (3, "lambda contraction trend", acc3_lambda_trend),
    (4, "transform round trip and Neumann identity", acc4_round_trip),
    (5, "zero-drift conjugation is bit-exact", acc5_degeneracy),
    (6, "transform vs direct Euler, linear drift", acc6_transform_vs_direct),
    (7, "flow composition through the transform", acc7_composition),
    (8, "stability under mollification", acc8_stability),
    (9, "gradient estimator vs closed form and finite differences", acc9_bel_oracle),
    (10, "small-time gradient decay exponent", acc10_decay),
    (11, "weight second moment times t", acc11_variance_shape),
    (12, "determinism across repeats and worker counts", acc12_determinism),
]


def run_criterion(number: int, seed: int = 0, fast: bool = False) -> CriterionResult:
    for num, title, fn in CRITERIA:
        if num == number:
            t0 = time.perf_counter()
            try:
                passed, details = fn(seed, fast)
                err = None
            except Exception as exc:  # a failing criterion must not stop the battery
                passed, details, err = False, {}, f"{type(exc).__name__}: {exc}"
            return CriterionResult(num, title, passed, details, time.perf_counter() - t0, err)
    raise KeyError(f"no acceptance criterion {number}")


def run_battery(seed: int = 0, fast: bool = False, only: list[int] | None = None, echo: Callable[[str], None] | None = None):
    results = []
    for num, _, _ in CRITERIA:
        if only and num not in only:
            continue
        r = run_criterion(num, seed, fast)
        if echo is not None:
            echo(r.line())
        results.append(r)
    return results
