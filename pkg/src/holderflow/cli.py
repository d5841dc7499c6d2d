"""Command-line harness: ``holderflow <subcommand> [options]``.

Every run writes its data as CSV files and a ``manifest.json`` into ``--out``.
The manifest echoes the full configuration, the master seed, the package
version, wall-clock time, summary metrics and check outcomes; it is written
even when the run fails, naming the failing stage.

Exit codes: 0 success, 2 configuration error, 3 numerical abort,
4 acceptance failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .bel import (
    bel_gradient,
    closed_form_gradient,
    closed_form_semigroup,
    decay_probe,
    fd_gradient,
    geometric_times,
    parse_observable,
    semigroup,
)
from .brownian import BrownianDriver, TimeGrid, derive_seed
from .coeffs import check_hypotheses, probe_cloud
from .errors import ConfigError, HolderflowError
from .mollify import mollify
from .parallel import DEFAULT_CHUNK
from .paths import path_summary, simulate, simulate_with_variation
from .presets import parse_drift, parse_mollify_flag, parse_sigma
from .resolvent import DEFAULT_LADDER, ResolventConfig, select_lambda, solve_psi
from .zvonkin import build_transform, flow_derivative, stability_experiment, transformed_composition_gap

SUBCOMMANDS = (
    "check-hypotheses",
    "simulate",
    "resolve",
    "select-lambda",
    "flow",
    "stability",
    "bel",
    "fd-check",
    "decay-probe",
    "suite",
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ACCEPTANCE = 0, 2, 3, 4


@dataclass
class ExperimentConfig:
    subcommand: str = "simulate"
    drift: str = "zero"
    sigma: str = "sigma:identity"
    dim: int = 1
    mollify: str | None = None
    x: list = field(default_factory=lambda: [0.0])
    h: list | None = None
    T: float = 1.0
    dt: float = 1e-3
    paths: int = 1000
    seed: int = 0
    workers: int = 1
    chunk: int = DEFAULT_CHUNK
    out: str = "holderflow-out"
    fast: bool = False
    format: str = "csv"
    lam: float | None = None
    ladder: list = field(default_factory=lambda: list(DEFAULT_LADDER))
    gamma: float = 0.5
    queries: str = "-2:2:9"
    psi_paths: int = 2000
    psi_dt: float | None = None
    fd_step: float = 1e-3
    t: float = 1.0
    f: str = "coord:0"
    cv: bool = False
    via_transform: bool | None = None
    u: float | None = None
    ns: list = field(default_factory=lambda: [2, 4, 8, 16])
    ts: list = field(default_factory=lambda: geometric_times(0.02, 0.5, 8))
    p: float = 2.0
    probes: int = 256
    cloud_points: int = 121
    radius: float = 10.0
    only: list | None = None

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown configuration key(s): {', '.join(unknown)}", unknown[0])
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# parsing helpers


def _floats(text, key: str) -> list[float]:
    if isinstance(text, (list, tuple)):
        vals = list(text)
    else:
        vals = [v for v in str(text).replace(";", ",").split(",") if v.strip()]
    try:
        return [float(v) for v in vals]
    except (TypeError, ValueError):
        raise ConfigError(f"expected a comma-separated list of numbers for {key}, got {text!r}", key) from None


def _ints(text, key: str) -> list[int]:
    vals = _floats(text, key)
    if any(v != int(v) for v in vals):
        raise ConfigError(f"expected integers for {key}, got {text!r}", key)
    return [int(v) for v in vals]


def parse_queries(text: str, dim: int) -> np.ndarray:
    """``lo:hi:n`` (tensor grid), a file of points, or ``a,b,c`` / ``a b;c d`` literal points."""
    if os.path.isfile(text):
        pts = np.loadtxt(text, delimiter="," if text.endswith(".csv") else None, ndmin=2)
    elif text.count(":") == 2:
        lo, hi, n = text.split(":")
        try:
            ax = np.linspace(float(lo), float(hi), int(n))
        except ValueError:
            raise ConfigError(f"bad query grid {text!r}; expected lo:hi:n", "queries") from None
        pts = np.stack(np.meshgrid(*[ax] * dim, indexing="ij"), axis=-1).reshape(-1, dim)
    else:
        rows = [r for r in text.split(";") if r.strip()]
        try:
            if dim == 1 and len(rows) == 1:
                pts = np.array([[float(v)] for v in rows[0].split(",") if v.strip()])
            else:
                pts = np.array([[float(v) for v in r.replace(",", " ").split()] for r in rows])
        except ValueError:
            raise ConfigError(f"cannot parse query points {text!r}", "queries") from None
    if pts.ndim != 2 or pts.shape[1] != dim or pts.shape[0] == 0:
        raise ConfigError(f"query points must have shape (m, {dim})", "queries")
    return pts


def _vector(vals, dim: int, key: str) -> np.ndarray:
    v = np.asarray(_floats(vals, key), dtype=float)
    if v.size == 1 and dim > 1:
        v = np.full(dim, v[0])
    if v.shape != (dim,):
        raise ConfigError(f"{key} must have {dim} entries", key)
    return v


def validate(cfg: ExperimentConfig) -> dict:
    """Check every knob before any computation; returns parsed objects."""
    if cfg.subcommand not in SUBCOMMANDS:
        raise ConfigError(f"unknown subcommand {cfg.subcommand!r}", "subcommand")
    if not 1 <= cfg.dim <= 3 and cfg.mollify:
        raise ConfigError("mollification supports dim <= 3", "dim")
    if cfg.dim < 1:
        raise ConfigError("dim must be >= 1", "dim")
    for key in ("T", "dt", "t", "fd_step", "p", "radius"):
        v = getattr(cfg, key)
        if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
            raise ConfigError(f"{key} must be a positive number, got {v!r}", key)
    for key in ("paths", "psi_paths", "workers", "chunk", "probes", "cloud_points"):
        v = getattr(cfg, key)
        if not (isinstance(v, int) and v >= 1):
            raise ConfigError(f"{key} must be a positive integer, got {v!r}", key)
    if cfg.chunk < 2:
        raise ConfigError("chunk must be >= 2", "chunk")
    if not 0 < cfg.gamma < 1:
        raise ConfigError("gamma must lie in (0, 1)", "gamma")
    if cfg.format not in ("csv", "json"):
        raise ConfigError("format must be csv or json", "format")
    if cfg.lam is not None and not cfg.lam > 0:
        raise ConfigError("lambda must be positive", "lam")
    if cfg.psi_dt is not None and not cfg.psi_dt > 0:
        raise ConfigError("psi_dt must be positive", "psi_dt")
    ladder = _floats(cfg.ladder, "ladder")
    if not ladder or any(v <= 0 for v in ladder) or any(b <= a for a, b in zip(ladder, ladder[1:])):
        raise ConfigError(f"ladder must be positive and strictly ascending, got {cfg.ladder}", "ladder")
    ns = _ints(cfg.ns, "ns")
    if not ns or any(n < 1 for n in ns):
        raise ConfigError("ns must be integers >= 1", "ns")
    ts = _floats(cfg.ts, "ts")
    if any(t <= 0 for t in ts):
        raise ConfigError("ts must be positive", "ts")
    b = parse_drift(cfg.drift, cfg.dim)
    if cfg.mollify:
        n, q = parse_mollify_flag(cfg.mollify)
        b = mollify(b, n, q)
    s = parse_sigma(cfg.sigma, cfg.dim)
    if b.dim != s.dim:
        raise ConfigError("drift and sigma dimensions differ", "sigma")
    x = _vector(cfg.x, cfg.dim, "x")
    h = np.eye(cfg.dim)[0] if cfg.h is None else _vector(cfg.h, cfg.dim, "h")
    parsed = {"b": b, "s": s, "x": x, "h": h, "ladder": ladder, "ns": ns, "ts": ts}
    if cfg.subcommand in ("resolve", "select-lambda"):
        parsed["queries"] = parse_queries(cfg.queries, cfg.dim)
    if cfg.subcommand in ("bel", "fd-check", "decay-probe"):
        parsed["f"] = parse_observable(cfg.f)
    if cfg.u is not None and not 0 < cfg.u < cfg.T:
        raise ConfigError("u must lie strictly between 0 and T", "u")
    if cfg.only is not None:
        parsed["only"] = _ints(cfg.only, "only")
    return parsed


# ---------------------------------------------------------------------------
# output


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def _jsonable(obj: Any):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


# ---------------------------------------------------------------------------
# subcommands; each returns (metrics, checks, tables)


def _seed(cfg: ExperimentConfig, stage: str) -> int:
    return derive_seed(cfg.seed, f"{cfg.subcommand}:{stage}")


def _psi_cfg(cfg: ExperimentConfig, lam: float, for_transform: bool) -> ResolventConfig:
    if cfg.psi_dt is not None:
        dt = cfg.psi_dt
    else:
        dt = max(cfg.dt, 1e-2) if for_transform else cfg.dt
    n = cfg.psi_paths if for_transform else cfg.paths
    return ResolventConfig(
        lam=lam,
        dt=dt,
        n_paths=n + (n % 2 if for_transform else 0),
        fd_step=cfg.fd_step,
        antithetic=for_transform,
        workers=cfg.workers,
        chunk=cfg.chunk,
    )


def _transform(cfg, P, stage="transform"):
    lam = cfg.lam
    return build_transform(
        P["b"],
        P["s"],
        lam=lam,
        ladder=P["ladder"],
        gamma=cfg.gamma,
        cfg=_psi_cfg(cfg, lam or P["ladder"][0], True),
        seed=_seed(cfg, stage),
    )


def _grid(cfg, end: float | None = None) -> TimeGrid:
    return TimeGrid.from_dt(0.0, cfg.T if end is None else end, cfg.dt)


def cmd_check_hypotheses(cfg, P):
    probes = probe_cloud(cfg.dim, cfg.probes, cfg.radius, seed=_seed(cfg, "probes") % (2**32))
    rep = check_hypotheses(P["b"], P["s"], probes, seed=_seed(cfg, "pairs") % (2**32))
    metrics = asdict(rep)
    row = [rep.holder_seminorm_est, rep.growth_const_est, rep.a_inv_sup_est, *rep.sigma_deriv_sups, rep.probe_count]
    header = ["holder_seminorm", "growth_const", "a_inv_sup", "dsigma_sup_1", "dsigma_sup_2", "dsigma_sup_3", "probes"]
    return metrics, {"hypotheses_ok": rep.ok}, {"hypotheses.csv": (header, [row])}


def cmd_simulate(cfg, P):
    grid = _grid(cfg)
    driver = BrownianDriver(_seed(cfg, "driver"), grid.dt, P["s"].dim_noise)
    rec = simulate(P["b"], P["s"], P["x"], 0.0, driver, grid, n_paths=cfg.paths, workers=cfg.workers, chunk=cfg.chunk)
    metrics = path_summary(rec)
    tables = {}
    if cfg.format == "csv":
        times = grid.times
        header = ["path", "t"] + [f"x{i}" for i in range(cfg.dim)]
        rows = (
            [p, times[j], *rec.states[j, p]] for p in range(rec.states.shape[1]) for j in range(grid.steps + 1)
        )
        tables["paths.csv"] = (header, rows)
    return metrics, {}, tables


def _psi_table(sol, d):
    header = (
        ["query"]
        + [f"x{i}" for i in range(d)]
        + [f"psi{i}" for i in range(d)]
        + [f"psi_stderr{i}" for i in range(d)]
        + [f"dpsi{c}{l}" for c in range(d) for l in range(d)]
        + [f"dpsi_stderr{c}{l}" for c in range(d) for l in range(d)]
    )
    rows = [
        [i, *sol.query_points[i], *sol.psi[i], *sol.psi_stderr[i], *sol.grad_psi[i].ravel(), *sol.grad_stderr[i].ravel()]
        for i in range(sol.query_points.shape[0])
    ]
    return header, rows


def _ladder_table(diags):
    header = ["lambda", "grad_sup_est", "grad_sup_stderr", "bound", "accepted"]
    return header, [[r["lambda"], r["grad_sup_est"], r["grad_sup_stderr"], r["bound"], r["accepted"]] for r in diags]


def cmd_resolve(cfg, P):
    q = P["queries"]
    if cfg.lam is not None:
        sol = solve_psi(P["b"], P["s"], _psi_cfg(cfg, cfg.lam, False), q, _seed(cfg, "psi"))
        lam = cfg.lam
    else:
        lam, sol = select_lambda(P["b"], P["s"], P["ladder"], cfg.gamma, _psi_cfg(cfg, P["ladder"][0], False), q, _seed(cfg, "psi"))
    metrics = sol.summary()
    metrics["chosen_lambda"] = lam
    tables = {"psi.csv": _psi_table(sol, cfg.dim)}
    if sol.ladder_diagnostics:
        tables["ladder.csv"] = _ladder_table(sol.ladder_diagnostics)
    return metrics, {"contraction": bool(sol.grad_sup_est + 2 * sol.grad_sup_stderr <= cfg.gamma)}, tables


def cmd_select_lambda(cfg, P):
    lam, sol = select_lambda(
        P["b"],
        P["s"],
        P["ladder"],
        cfg.gamma,
        _psi_cfg(cfg, P["ladder"][0], False),
        P["queries"],
        _seed(cfg, "psi"),
        exhaustive=True,
    )
    metrics = sol.summary()
    metrics["chosen_lambda"] = lam
    g = [r["grad_sup_est"] for r in sol.ladder_diagnostics]
    se = [r["grad_sup_stderr"] for r in sol.ladder_diagnostics]
    mono = all(g[i + 1] <= g[i] + 2 * math.hypot(se[i], se[i + 1]) for i in range(len(g) - 1))
    tables = {"ladder.csv": _ladder_table(sol.ladder_diagnostics), "psi.csv": _psi_table(sol, cfg.dim)}
    return metrics, {"selected": True, "nonincreasing_within_2se": mono}, tables


def cmd_flow(cfg, P):
    grid = _grid(cfg)
    b, s, x, h = P["b"], P["s"], P["x"], P["h"]
    via = True if cfg.via_transform is None else cfg.via_transform
    driver = BrownianDriver(_seed(cfg, "driver"), grid.dt, s.dim_noise)
    kw = dict(n_paths=cfg.paths, workers=cfg.workers, chunk=cfg.chunk)
    metrics: dict = {"via_transform": via}
    if via:
        T = _transform(cfg, P)
        fd = flow_derivative(T, x, h, driver, grid, **kw)
        states, deriv = fd.states, fd.values
        metrics["transform"] = T.summary()
        metrics["dove_discrepancy"] = fd.discrepancy
        if cfg.u is not None:
            gap = transformed_composition_gap(T, x, cfg.u, driver, grid, **kw)
            metrics["composition_gap_median"] = float(np.median(gap))
    else:
        if b.has_jacobian:
            rec, var = simulate_with_variation(b, s, x, h, driver, grid, **kw)
            states, deriv = rec.states, var.eta
        else:
            states, deriv = simulate(b, s, x, 0.0, driver, grid, **kw).states, None
    end = states[-1]
    metrics["mean_end"] = end.mean(axis=0).tolist()
    metrics["var_end"] = end.var(axis=0).tolist()
    if deriv is not None:
        metrics["mean_derivative_end"] = deriv[-1].mean(axis=0).tolist()
    times = grid.times
    d = cfg.dim
    header = ["path", "t"] + [f"x{i}" for i in range(d)]
    if deriv is not None:
        header += [f"dphi{i}" for i in range(d)]
    rows = (
        [p, times[j], *states[j, p], *(deriv[j, p] if deriv is not None else ())]
        for p in range(states.shape[1])
        for j in range(grid.steps + 1)
    )
    return metrics, {}, {"flow.csv": (header, rows)}


def cmd_stability(cfg, P):
    tab = stability_experiment(
        P["b"],
        P["s"],
        P["ns"],
        T_end=cfg.T,
        dt=cfg.dt,
        n_paths=cfg.paths,
        p=cfg.p,
        h=P["h"],
        seed=_seed(cfg, "stability"),
        transform=_transform(cfg, P),
        workers=cfg.workers,
        chunk=cfg.chunk,
    )
    header = [
        "n",
        "sup_gap",
        "mean_gap",
        "deriv_sup_gap",
        "deriv_mean_gap",
        "drift_sup_diff",
        "psi_sup_diff",
        "max_principle_ratio",
        "contraction_bound",
    ]
    rows = [[getattr(r, k) for k in header] for r in tab.rows]
    gaps = [r.sup_gap for r in tab.rows]
    return tab.as_dict(), {"gap_decreases_overall": bool(gaps[-1] < gaps[0])}, {"stability.csv": (header, rows)}


def _oracle(f, b, s, t, x, h):
    try:
        return closed_form_gradient(f, b, s, t, x, h), closed_form_semigroup(f, b, s, t, x)
    except ConfigError:
        return None, None


def cmd_bel(cfg, P):
    grid = _grid(cfg, cfg.t)
    f, b, s = P["f"], P["b"], P["s"]
    kw = dict(workers=cfg.workers, chunk=cfg.chunk)
    routed = bool(cfg.via_transform) or not b.has_jacobian
    T = _transform(cfg, P) if routed else None
    est = bel_gradient(
        f, b, s, cfg.t, P["x"], P["h"], cfg.paths, grid, _seed(cfg, "bel"),
        use_cv=cfg.cv, via_transform=routed, transform=T, **kw,
    )
    metrics = est.as_dict()
    checks = {}
    grad, value = _oracle(f, b, s, cfg.t, P["x"], P["h"])
    row = [est.value, est.stderr, est.n_paths, est.control_variate_used, est.via_transform]
    header = ["estimate", "stderr", "n_paths", "control_variate", "via_transform"]
    if grad is not None:
        z = abs(est.value - grad) / est.stderr if est.stderr > 0 else (0.0 if est.value == grad else math.inf)
        metrics.update({"oracle": grad, "oracle_semigroup": value, "z_oracle": z})
        checks["within_3_stderr_of_oracle"] = bool(z <= 3)
        row += [grad, z]
        header += ["oracle", "z_oracle"]
    return metrics, checks, {"bel.csv": (header, [row])}


def cmd_fd_check(cfg, P):
    grid = _grid(cfg, cfg.t)
    f, b, s = P["f"], P["b"], P["s"]
    kw = dict(workers=cfg.workers, chunk=cfg.chunk)
    routed = bool(cfg.via_transform) or not b.has_jacobian
    T = _transform(cfg, P) if routed else None
    sd = _seed(cfg, "paths")
    est = bel_gradient(f, b, s, cfg.t, P["x"], P["h"], cfg.paths, grid, sd, use_cv=cfg.cv, via_transform=routed, transform=T, **kw)
    fd = fd_gradient(f, b, s, cfg.t, P["x"], P["h"], cfg.fd_step, cfg.paths, grid, sd, **kw)
    mean, se = semigroup(f, b, s, cfg.t, P["x"], cfg.paths, grid, sd, **kw)
    comb = math.hypot(est.stderr, fd.stderr)
    z = abs(est.value - fd.value) / comb if comb > 0 else (0.0 if est.value == fd.value else math.inf)
    metrics = {"bel": est.as_dict(), "fd": fd.as_dict(), "semigroup": mean, "semigroup_stderr": se, "z_bel_fd": z}
    header = ["bel", "bel_stderr", "fd", "fd_stderr", "z", "semigroup", "semigroup_stderr"]
    row = [est.value, est.stderr, fd.value, fd.stderr, z, mean, se]
    grad, _ = _oracle(f, b, s, cfg.t, P["x"], P["h"])
    if grad is not None:
        metrics["oracle"] = grad
        header.append("oracle")
        row.append(grad)
    return metrics, {"bel_agrees_with_fd": bool(z <= 3)}, {"fd_check.csv": (header, [row])}


def cmd_decay_probe(cfg, P):
    f, b, s = P["f"], P["b"], P["s"]
    T = _transform(cfg, P) if not b.has_jacobian else None
    fit = decay_probe(
        f, b, s, P["x"], P["h"], P["ts"],
        n_paths=cfg.paths, cloud_points=cfg.cloud_points, use_cv=True, seed=_seed(cfg, "decay"), transform=T,
        workers=cfg.workers, chunk=cfg.chunk,
    )
    checks = {}
    if fit.expected_slope is not None:
        checks["slope_within_0.15"] = bool(abs(fit.slope - fit.expected_slope) <= 0.15)
    header = ["t", "grad_sup", "stderr", "second_moment_times_t", "used"]
    rows = [[t, g, e, j, u] for t, g, e, j, u in zip(fit.ts, fit.grad_sup, fit.grad_stderr, fit.j2_times_t, fit.used)]
    return fit.as_dict(), checks, {"decay.csv": (header, rows)}


def cmd_suite(cfg, P):
    from .acceptance import FAST_TABLE, run_battery

    results = run_battery(cfg.seed, cfg.fast, P.get("only"), echo=lambda line: print(line, flush=True))
    metrics = {"criteria": [r.as_dict() for r in results], "fast": cfg.fast, "fast_table": FAST_TABLE}
    checks = {f"acceptance_{r.number}": r.passed for r in results}
    rows = [[r.number, r.title, r.passed] for r in results]
    return metrics, checks, {"acceptance.csv": (["criterion", "title", "passed"], rows)}


HANDLERS = {
    "check-hypotheses": cmd_check_hypotheses,
    "simulate": cmd_simulate,
    "resolve": cmd_resolve,
    "select-lambda": cmd_select_lambda,
    "flow": cmd_flow,
    "stability": cmd_stability,
    "bel": cmd_bel,
    "fd-check": cmd_fd_check,
    "decay-probe": cmd_decay_probe,
    "suite": cmd_suite,
}


# ---------------------------------------------------------------------------
# argument parsing


def _global_options(p: argparse.ArgumentParser):
    S = argparse.SUPPRESS
    p.add_argument("--seed", type=int, default=S, help="master seed (all stage seeds derive from it)")
    p.add_argument("--out", default=S, help="output directory")
    p.add_argument("--workers", type=int, default=S, help="worker threads; never changes results")
    p.add_argument("--chunk", type=int, default=S, help="paths per reduction chunk")
    p.add_argument("--fast", action="store_true", default=S, help="reduced budgets for the suite")
    p.add_argument("--config", default=S, help="JSON configuration file; flags override it")


def _coeff_options(p):
    S = argparse.SUPPRESS
    p.add_argument("--drift", default=S, help="drift preset, e.g. holder:theta=0.5,scale=1")
    p.add_argument("--sigma", default=S, help="diffusion preset, e.g. sigma:identity")
    p.add_argument("--dim", type=int, default=S)
    p.add_argument("--mollify", default=S, help="n=<int>,quad=<int>: mollify the drift first")


def _path_options(p, t_flag=True):
    S = argparse.SUPPRESS
    p.add_argument("--x", default=S, help="initial point, comma separated")
    p.add_argument("--h", default=S, help="direction, comma separated (default e_1)")
    if t_flag:
        p.add_argument("--T", type=float, default=S, help="horizon")
    p.add_argument("--dt", type=float, default=S)
    p.add_argument("--paths", type=int, default=S)


def _lambda_options(p):
    S = argparse.SUPPRESS
    p.add_argument("--lambda", dest="lam", type=float, default=S)
    p.add_argument("--ladder", default=S, help="ascending lambda values, comma separated")
    p.add_argument("--gamma", type=float, default=S, help="target contraction bound")
    p.add_argument("--psi-paths", type=int, default=S, help="paths for the psi cache")
    p.add_argument("--psi-dt", type=float, default=S, help="time step for psi")
    p.add_argument("--fd-step", type=float, default=S)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="holderflow", description=__doc__.split("\n")[0])
    _global_options(parser)
    sub = parser.add_subparsers(dest="subcommand", required=True)
    S = argparse.SUPPRESS

    p = sub.add_parser("check-hypotheses", help="empirical checks of the coefficient hypotheses")
    _global_options(p)
    _coeff_options(p)
    p.add_argument("--probes", type=int, default=S)
    p.add_argument("--radius", type=float, default=S)

    p = sub.add_parser("simulate", help="Euler-Maruyama paths")
    _global_options(p)
    _coeff_options(p)
    _path_options(p)
    p.add_argument("--format", choices=["csv", "json"], default=S)

    for name, helptext in (("resolve", "Monte Carlo psi at query points"), ("select-lambda", "lambda ladder search")):
        p = sub.add_parser(name, help=helptext)
        _global_options(p)
        _coeff_options(p)
        _lambda_options(p)
        p.add_argument("--queries", default=S, help="lo:hi:n grid, a file of points, or literal points")
        p.add_argument("--paths", type=int, default=S)
        p.add_argument("--dt", type=float, default=S)

    p = sub.add_parser("flow", help="flow and its derivative, through the transform or directly")
    _global_options(p)
    _coeff_options(p)
    _path_options(p)
    _lambda_options(p)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--via-transform", dest="via_transform", action="store_true", default=S)
    g.add_argument("--direct", dest="via_transform", action="store_false", default=S)
    p.add_argument("--u", type=float, default=S, help="restart time for the composition check")

    p = sub.add_parser("stability", help="gaps to Euler flows of mollified drifts")
    _global_options(p)
    _coeff_options(p)
    _path_options(p)
    _lambda_options(p)
    p.add_argument("--ns", default=S, help="mollification indices, comma separated")
    p.add_argument("--p", type=float, default=S, help="moment exponent")

    for name, helptext in (("bel", "gradient estimate of the semigroup"), ("fd-check", "gradient estimate vs finite differences")):
        p = sub.add_parser(name, help=helptext)
        _global_options(p)
        _coeff_options(p)
        _path_options(p, t_flag=False)
        _lambda_options(p)
        p.add_argument("--f", default=S, help="observable: const, coord:<i>, sq, holder:<theta>")
        p.add_argument("--t", type=float, default=S)
        p.add_argument("--cv", action="store_true", default=S, help="use the noiseless-flow control variate")
        p.add_argument("--via-transform", dest="via_transform", action="store_true", default=S)

    p = sub.add_parser("decay-probe", help="small-time power law of the gradient")
    _global_options(p)
    _coeff_options(p)
    _path_options(p, t_flag=False)
    _lambda_options(p)
    p.add_argument("--f", default=S)
    p.add_argument("--ts", default=S, help="times, comma separated")
    p.add_argument("--cloud-points", type=int, default=S, help="points in the sup cloud around x")

    p = sub.add_parser("suite", help="run the acceptance battery")
    _global_options(p)
    p.add_argument("--only", default=S, help="criterion numbers, comma separated")
    return parser


_LIST_KEYS = {"x": _floats, "h": _floats, "ladder": _floats, "ts": _floats, "ns": _ints, "only": _ints}


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    given = vars(args).copy()
    data: dict = {}
    path = given.pop("config", None)
    if path is not None:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}", "config") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object", "config")
        if data.get("subcommand", given["subcommand"]) != given["subcommand"]:
            raise ConfigError("config file subcommand differs from the command line", "subcommand")
    data.update(given)
    for key, conv in _LIST_KEYS.items():
        if data.get(key) is not None:
            data[key] = conv(data[key], key)
    return ExperimentConfig.from_dict(data)


def run(cfg: ExperimentConfig) -> tuple[dict, int]:
    """Execute one configuration; returns the manifest and the exit code."""
    out = Path(cfg.out)
    started = time.time()
    t0 = time.perf_counter()
    manifest: dict = {
        "config": cfg.to_dict(),
        "master_seed": cfg.seed,
        "version": __version__,
        "started_at": started,
        "status": "ok",
        "failure_stage": None,
        "metrics": {},
        "checks": {},
    }
    code = EXIT_OK
    stage = "validate"
    try:
        P = validate(cfg)
        stage = cfg.subcommand
        metrics, checks, tables = HANDLERS[cfg.subcommand](cfg, P)
        stage = "write"
        out.mkdir(parents=True, exist_ok=True)
        for name, (header, rows) in tables.items():
            write_csv(out / name, header, rows)
        manifest["metrics"] = metrics
        manifest["checks"] = checks
        manifest["data_files"] = sorted(tables)
        if cfg.subcommand == "suite" and not all(checks.values()):
            code = EXIT_ACCEPTANCE
            manifest["status"] = "acceptance_failed"
    except ConfigError as exc:
        code = EXIT_CONFIG
        manifest.update(status="config_error", failure_stage=stage, error=str(exc), offending_key=exc.key)
    except HolderflowError as exc:
        code = EXIT_NUMERIC
        manifest.update(
            status="numerical_abort",
            failure_stage=f"{stage}:{getattr(exc, 'stage', '')}",
            error=str(exc),
            diagnostics=getattr(exc, "diagnostics", None),
        )
    manifest["wall_clock_s"] = time.perf_counter() - t0
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.json", "w") as fh:
        json.dump(_jsonable(manifest), fh, indent=2, sort_keys=True)
    return manifest, code


_VALUE_FLAGS = {"--x", "--h", "--queries", "--ladder", "--ts", "--ns", "--drift", "--u", "--lambda"}


def _glue_dash_values(argv: list[str]) -> list[str]:
    """Turn ``--queries -1:1:3`` into ``--queries=-1:1:3`` so argparse keeps the value."""
    out, i = [], 0
    while i < len(argv):
        tok = argv[i]
        if tok in _VALUE_FLAGS and i + 1 < len(argv) and argv[i + 1].startswith("-") and not argv[i + 1].startswith("--"):
            out.append(f"{tok}={argv[i + 1]}")
            i += 2
        else:
            out.append(tok)
            i += 1
    return out


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(_glue_dash_values(list(sys.argv[1:] if argv is None else argv)))
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"holderflow: configuration error ({exc.key}): {exc}", file=sys.stderr)
        return EXIT_CONFIG
    manifest, code = run(cfg)
    if code == EXIT_CONFIG:
        print(f"holderflow: configuration error ({manifest.get('offending_key')}): {manifest['error']}", file=sys.stderr)
    elif code == EXIT_NUMERIC:
        print(f"holderflow: numerical abort in {manifest['failure_stage']}: {manifest['error']}", file=sys.stderr)
    else:
        print(json.dumps({"status": manifest["status"], "out": cfg.out, "checks": _jsonable(manifest["checks"])}))
    return code


if __name__ == "__main__":
    sys.exit(main())
