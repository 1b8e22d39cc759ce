"""Command-line entry point: one experiment per invocation, driven by a TOML
config, writing deterministic CSV/JSON artifacts (and optional SVG plots)
into the output directory.

Exit codes: 0 success, 2 configuration error (message names the offending
key), 3 numerical failure (non-convergence, underflow, no exits).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, eikonal, flow, montecarlo, smile
from .config import (build_domain, build_exit_params, build_grid, build_model,
                     build_optimizer, build_payoff, build_x0, config_hash,
                     experiment_kind, load_config, mc_params, resolve_is_control)
from .errors import ConfigError, NumericalFailure
from .models import LogPriceModel
from .montecarlo import McConfig
from .paths import (ControlPath, DiscretePath, PathPoint, TimeGrid,
                    control_from_csv, control_to_csv, path_to_csv)
from .rate import exit_rate, minimize_laplace

_F = ".17g"  # float formatting for reproducible CSV/JSON artifacts


def _fmt_cell(v) -> str:
    if isinstance(v, float):
        if math.isnan(v):
            return ""
        return format(v, _F)
    return str(v)


def write_csv(path: Path, header: list, rows: list) -> None:
    with open(path, "w", newline="") as fp:
        fp.write(",".join(header) + "\n")
        for row in rows:
            fp.write(",".join(_fmt_cell(row[h]) for h in header) + "\n")


def read_csv(path: Path):
    with open(path, "r", newline="") as fp:
        lines = [ln.strip() for ln in fp if ln.strip()]
    if not lines:
        return [], []
    header = lines[0].split(",")
    rows = []
    for ln in lines[1:]:
        cells = ln.split(",")
        row = {}
        for h, c in zip(header, cells):
            try:
                row[h] = float(c) if c != "" else math.nan
            except ValueError:
                row[h] = c
        rows.append(row)
    return header, rows


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, float) and math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def write_manifest(outdir: Path, kind: str, cfg: dict, results: dict,
                   warnings: list, seed=None) -> None:
    manifest = {
        "artifact": "ldplab",
        "version": __version__,
        "experiment": kind,
        "config_hash": config_hash(cfg),
        "seed": seed,
        "results": _jsonable(results),
        "warnings": list(warnings),
    }
    with open(outdir / "manifest.json", "w") as fp:
        json.dump(manifest, fp, sort_keys=True, indent=2)
        fp.write("\n")


def _estimate_dict(est) -> dict:
    out = {
        "value": est.value,
        "std_error": est.std_error,
        "ci95": list(est.ci95),
        "n_effective": est.n_effective,
    }
    if est.log_weights_summary is not None:
        out["log_weights_summary"] = list(est.log_weights_summary)
    return out


def run_rate_laplace(cfg, outdir, seed, threads) -> int:
    grid = build_grid(cfg)
    model = build_model(cfg)
    xi = build_payoff(cfg)
    x0 = build_x0(cfg, model.n)
    opts = build_optimizer(cfg, seed)
    res = minimize_laplace(model, xi, x0, grid, opts)
    control_to_csv(res.control, str(outdir / "control.csv"))
    write_manifest(outdir, "rate-laplace", cfg, {
        "value": res.value,
        "grad_norm": res.grad_norm,
        "iterations": res.iterations,
        "restarts_used": res.restarts_used,
        "converged": res.converged,
    }, [], seed=opts.seed)
    return 0


def run_rate_exit(cfg, outdir, seed, threads) -> int:
    grid = build_grid(cfg)
    model = build_model(cfg)
    domain = build_domain(cfg)
    x0 = build_x0(cfg, model.n)
    opts = build_optimizer(cfg, seed)
    ep = build_exit_params(cfg)
    res = exit_rate(model, domain, x0, grid, schedule=ep["schedule"], opts=opts,
                    horizon_stride=ep["horizon_stride"], eta=ep["eta"])
    control_to_csv(res.control, str(outdir / "control.csv"))
    write_csv(outdir / "per_level.csv", ["m", "y_m", "horizon"],
              [{"m": r["m"], "y_m": r["y"], "horizon": r["horizon"]} for r in res.per_level])
    write_manifest(outdir, "rate-exit", cfg, {
        "value": res.value,
        "horizon": res.horizon,
        "grad_norm": res.grad_norm,
        "iterations": res.iterations,
        "converged": res.converged,
        "per_horizon": res.per_horizon,
    }, res.warnings, seed=opts.seed)
    return 0


_MC_HEADER = ["eps", "estimate", "stderr", "ci_lo", "ci_hi", "limit", "abs_gap"]


def run_mc_laplace(cfg, outdir, seed, threads) -> int:
    grid = build_grid(cfg)
    model = build_model(cfg)
    xi = build_payoff(cfg)
    x0 = build_x0(cfg, model.n)
    opts = build_optimizer(cfg, seed)
    mc = mc_params(cfg, seed, threads)
    is_ctrl = resolve_is_control(mc["is_control"], grid=grid, model=model, xi=xi,
                                 x0=x0, opts=opts)
    rows, results, warnings = [], {}, []
    for eps in mc["epsilon"]:
        mcfg = McConfig(epsilon=eps, n_paths=mc["n_paths"], grid=grid, seed=mc["seed"],
                        antithetic=mc["antithetic"], is_control=is_ctrl,
                        chunk=mc["chunk"], threads=mc["threads"])
        if is_ctrl is not None:
            pair = montecarlo.laplace_is(model, xi, x0, mcfg)
            est = pair.estimate
            results[f"eps={eps:g}"] = {
                "estimate": _estimate_dict(est),
                "upper_bound": _estimate_dict(pair.upper_bound),
            }
        else:
            est = montecarlo.laplace_naive(model, xi, x0, mcfg)
            results[f"eps={eps:g}"] = {"estimate": _estimate_dict(est)}
        warnings.extend(est.warnings)
        rows.append({"eps": eps, "estimate": est.value, "stderr": est.std_error,
                     "ci_lo": est.ci95[0], "ci_hi": est.ci95[1],
                     "limit": math.nan, "abs_gap": math.nan})
    write_csv(outdir / "estimates.csv", _MC_HEADER, rows)
    write_manifest(outdir, "mc-laplace", cfg, results, warnings, seed=mc["seed"])
    return 0


def run_mc_exit(cfg, outdir, seed, threads) -> int:
    grid = build_grid(cfg)
    model = build_model(cfg)
    domain = build_domain(cfg)
    x0 = build_x0(cfg, model.n)
    mc = mc_params(cfg, seed, threads)
    rows, results, warnings = [], {}, []
    for eps in mc["epsilon"]:
        mcfg = McConfig(epsilon=eps, n_paths=mc["n_paths"], grid=grid, seed=mc["seed"],
                        antithetic=mc["antithetic"], chunk=mc["chunk"],
                        threads=mc["threads"], bridge_correction=mc["bridge_correction"])
        res = montecarlo.exit_prob(model, domain, x0, mcfg)
        warnings.extend(res.warnings)
        results[f"eps={eps:g}"] = {
            "prob": _estimate_dict(res.prob),
            "rate": _estimate_dict(res.rate),
            "bridge_corrected": res.bridge_corrected,
        }
        rows.append({"eps": eps, "estimate": res.rate.value, "stderr": res.rate.std_error,
                     "ci_lo": res.rate.ci95[0], "ci_hi": res.rate.ci95[1],
                     "limit": math.nan, "abs_gap": math.nan})
    write_csv(outdir / "estimates.csv", _MC_HEADER, rows)
    write_manifest(outdir, "mc-exit", cfg, results, warnings, seed=mc["seed"])
    return 0


def run_convergence(cfg, outdir, seed, threads) -> int:
    grid = build_grid(cfg)
    model = build_model(cfg)
    x0 = build_x0(cfg, model.n)
    opts = build_optimizer(cfg, seed)
    mc = mc_params(cfg, seed, threads)
    problem = cfg.get("convergence", {}).get("problem")
    if problem not in ("laplace", "exit"):
        raise ConfigError("convergence.problem: must be 'laplace' or 'exit'")
    cfg_base = McConfig(epsilon=mc["epsilon"][0], n_paths=mc["n_paths"], grid=grid,
                        seed=mc["seed"], antithetic=mc["antithetic"], chunk=mc["chunk"],
                        threads=mc["threads"], bridge_correction=mc["bridge_correction"])
    if problem == "laplace":
        xi = build_payoff(cfg)
        limit_res = minimize_laplace(model, xi, x0, grid, opts)
        is_ctrl = resolve_is_control(mc["is_control"], grid=grid, model=model,
                                     xi=xi, x0=x0, opts=opts)
        rows = montecarlo.convergence_study("laplace", mc["epsilon"], model=model,
                                            x0=x0, cfg_base=cfg_base, xi=xi,
                                            limit=limit_res.value, is_control=is_ctrl)
    else:
        domain = build_domain(cfg)
        ep = build_exit_params(cfg)
        limit_res = exit_rate(model, domain, x0, grid, schedule=ep["schedule"],
                              opts=opts, horizon_stride=ep["horizon_stride"], eta=ep["eta"])
        rows = montecarlo.convergence_study("exit", mc["epsilon"], model=model,
                                            x0=x0, cfg_base=cfg_base, domain=domain,
                                            limit=limit_res.value)
    write_csv(outdir / "convergence.csv", _MC_HEADER, rows)
    if cfg.get("output", {}).get("plots", False):
        from .plotting import render_convergence_svg
        svg = render_convergence_svg(rows, title=f"{problem} convergence")
        (outdir / "convergence.svg").write_text(svg)
    write_manifest(outdir, "convergence", cfg, {
        "problem": problem, "limit": limit_res.value, "rows": rows,
    }, [], seed=mc["seed"])
    return 0


def _theta_from_config(cfg, grid, model, x0) -> callable:
    """Returns t -> PathPoint on the configured frozen path."""
    ek = cfg.get("eikonal", {})
    path_kind = ek.get("path", "zero")
    if path_kind == "zero":
        vals = np.zeros((grid.steps + 1, model.d + model.n))
        vals[:, model.d:] = x0
    elif path_kind == "flow":
        ctrl = _control_from_config(cfg, grid, model.d)
        res = flow.integrate(model, x0, ctrl)
        vals = np.concatenate([res.omega.values, res.x.values], axis=1)
    elif path_kind == "random":
        rng_ = np.random.default_rng(int(ek.get("path_seed", 0)))
        inc = rng_.standard_normal((grid.steps, model.d + model.n)) * math.sqrt(grid.dt) * 0.3
        vals = np.vstack([np.zeros((1, model.d + model.n)), np.cumsum(inc, axis=0)])
        vals[:, model.d:] += x0
    else:
        raise ConfigError(f"eikonal.path: unknown kind {path_kind!r} (zero | flow | random)")
    base = DiscretePath(grid, vals)
    return lambda t: PathPoint(t, base)


def run_eikonal_check(cfg, outdir, seed, threads) -> int:
    grid = build_grid(cfg)
    model = build_model(cfg)
    xi = build_payoff(cfg)
    x0 = build_x0(cfg, model.n)
    opts = build_optimizer(cfg, seed)
    ek = cfg.get("eikonal", {})
    points = ek.get("points")
    if not points:
        raise ConfigError("eikonal.points: need a non-empty list of probe times")
    h_steps = int(ek.get("h_steps", 1))
    k_grid = [float(k) for k in ek.get("k_grid", [0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0])]
    theta_at = _theta_from_config(cfg, grid, model, x0)
    k0_cfg = ek.get("k0")
    k0 = float(k0_cfg) if k0_cfg is not None else None
    rows = []
    header = (["t", "u", "du_dt"]
              + [f"du_domega{i}" for i in range(model.d)]
              + [f"du_dx{i}" for i in range(model.n)]
              + ["residual", "misfit", "K0", "K"])
    for t in points:
        probe = eikonal.viscosity_residual(model, xi, theta_at(float(t)),
                                           h_steps=h_steps, k0=k0, opts=opts,
                                           k_grid=k_grid)
        k0 = probe.k0  # reuse the searched clamp level across points
        row = {"t": float(t), "u": probe.value, "du_dt": probe.du_dt,
               "residual": probe.residual, "misfit": probe.misfit,
               "K0": probe.k0, "K": probe.lipschitz_class}
        for i in range(model.d):
            row[f"du_domega{i}"] = float(probe.du_domega[i])
        for i in range(model.n):
            row[f"du_dx{i}"] = float(probe.du_dx[i])
        rows.append(row)
    write_csv(outdir / "eikonal.csv", header, rows)
    write_manifest(outdir, "eikonal-check", cfg, {"rows": rows}, [], seed=opts.seed)
    return 0


def run_smile(cfg, outdir, seed, threads, overrides=None) -> int:
    overrides = overrides or {}
    sm = cfg.get("smile", {})
    k = float(overrides.get("k", sm.get("k", 0.0)))
    if k <= 0.0:
        raise ConfigError("smile.k: need log-moneyness k > 0")
    a_schedule = overrides.get("a_schedule", sm.get("a_schedule", [-0.5, -1.0, -2.0, -4.0]))
    eps_schedule = overrides.get("eps_schedule", sm.get("eps_schedule"))
    model = build_model(cfg)
    if not isinstance(model, LogPriceModel):
        model = LogPriceModel(model)
    opts = build_optimizer(cfg, seed)
    steps = int(sm.get("steps", 64))
    stride = int(sm.get("horizon_stride", 2))
    asym = smile.q0_of_strike(model, k, a_schedule=[float(a) for a in a_schedule],
                              steps=steps, horizon_stride=stride, opts=opts)
    write_csv(outdir / "smile.csv", ["k", "Q0", "Sigma0_sq", "a_used"],
              [{"k": asym.k, "Q0": asym.q0, "Sigma0_sq": asym.sigma0_sq,
                "a_used": asym.a_used}])
    results = {"k": asym.k, "Q0": asym.q0, "Sigma0_sq": asym.sigma0_sq,
               "a_used": asym.a_used, "trace": asym.trace}
    used_seed = seed
    if eps_schedule:
        # the smile MC table takes its schedule from [smile]/--eps-schedule
        mc_section = dict(cfg.get("mc", {}))
        mc_section.setdefault("epsilon", [float(e) for e in eps_schedule])
        mc = mc_params({**cfg, "mc": mc_section}, seed, threads)
        used_seed = mc["seed"]
        rows = smile.mc_call_rate(model, k, [float(e) for e in eps_schedule],
                                  n_paths=mc["n_paths"], steps=int(sm.get("mc_steps", 128)),
                                  seed=mc["seed"], q0=asym.q0, chunk=mc["chunk"],
                                  threads=mc["threads"], opts=opts)
        write_csv(outdir / "call_rate.csv", _MC_HEADER, rows)
        results["mc_call_rate"] = rows
        if cfg.get("output", {}).get("plots", False):
            from .plotting import render_convergence_svg
            (outdir / "call_rate.svg").write_text(
                render_convergence_svg(rows, title="call rate vs eps"))
    write_manifest(outdir, "smile", cfg, results, [], seed=used_seed)
    return 0


def _control_from_config(cfg, grid: TimeGrid, d: int) -> ControlPath:
    c = cfg.get("control", {})
    kind = c.get("kind", "zero")
    if kind == "zero":
        return ControlPath(grid, np.zeros((grid.steps, d)))
    if kind == "constant":
        val = c.get("value")
        if val is None:
            raise ConfigError("control.value: missing for constant control")
        vec = np.atleast_1d(np.asarray(val, dtype=float))
        if vec.shape != (d,):
            raise ConfigError(f"control.value: expected {d} components")
        return ControlPath(grid, np.tile(vec, (grid.steps, 1)))
    if kind == "csv":
        path = c.get("path")
        if not path:
            raise ConfigError("control.path: missing for csv control")
        ctrl = control_from_csv(path)
        if ctrl.grid.steps != grid.steps:
            raise ConfigError("control.path: control CSV grid does not match [grid]")
        return ControlPath(grid, ctrl.slopes)
    raise ConfigError(f"control.kind: unknown kind {kind!r} (zero | constant | csv)")


def run_flow_dump(cfg, outdir, seed, threads) -> int:
    grid = build_grid(cfg)
    model = build_model(cfg)
    x0 = build_x0(cfg, model.n)
    ctrl = _control_from_config(cfg, grid, model.d)
    res = flow.integrate(model, x0, ctrl)
    combined = DiscretePath(grid, np.concatenate([res.omega.values, res.x.values], axis=1))
    path_to_csv(combined, str(outdir / "trajectory.csv"))
    write_manifest(outdir, "flow-dump", cfg, {"action": res.action}, [], seed=seed)
    return 0


EXPERIMENTS = {
    "rate-laplace": run_rate_laplace,
    "rate-exit": run_rate_exit,
    "mc-laplace": run_mc_laplace,
    "mc-exit": run_mc_exit,
    "convergence": run_convergence,
    "eikonal-check": run_eikonal_check,
    "smile": run_smile,
    "flow-dump": run_flow_dump,
}


def run_plot(args) -> int:
    header, rows = read_csv(Path(args.csv))
    expected = set(_MC_HEADER)
    if not rows or not expected.issubset(header):
        raise ConfigError(
            f"plot: CSV {args.csv} does not match the convergence schema {_MC_HEADER}")
    from .plotting import render_convergence_svg
    svg = render_convergence_svg(rows, title=args.title)
    Path(args.out).write_text(svg)
    return 0


def _add_common(p):
    p.add_argument("--config", required=True, help="TOML run configuration")
    p.add_argument("--out", default=None, help="output directory (overrides [output].dir)")
    p.add_argument("--seed", type=int, default=None, help="seed override")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: LDPLAB_THREADS or 1)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ldplab",
                                 description="Large-deviation rate experiments for "
                                             "path-dependent SDEs")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("run", "rate-laplace", "rate-exit", "mc-laplace", "mc-exit",
                 "convergence", "eikonal-check"):
        _add_common(sub.add_parser(name))
    ps = sub.add_parser("smile")
    _add_common(ps)
    ps.add_argument("--k", type=float, default=None, help="log-moneyness override")
    ps.add_argument("--model", default=None,
                    help="vol model override: constant:SIGMA | running_max:BASE,AMP")
    ps.add_argument("--eps-schedule", default=None, help="comma-separated decreasing eps")
    ps.add_argument("--a-schedule", default=None, help="comma-separated decreasing floors")
    pf = sub.add_parser("flow")
    fsub = pf.add_subparsers(dest="flow_command", required=True)
    _add_common(fsub.add_parser("dump"))
    pp = sub.add_parser("plot")
    pp.add_argument("csv", help="convergence-schema CSV")
    pp.add_argument("--out", required=True, help="output SVG path")
    pp.add_argument("--title", default="estimate vs eps")
    return ap


def _smile_overrides(args, cfg) -> dict:
    o = {}
    if args.k is not None:
        o["k"] = args.k
    if args.eps_schedule:
        o["eps_schedule"] = [float(x) for x in args.eps_schedule.split(",")]
    if args.a_schedule:
        o["a_schedule"] = [float(x) for x in args.a_schedule.split(",")]
    if args.model:
        spec = args.model
        if spec.startswith("constant:"):
            cfg["model"] = {"kind": "log_price",
                            "params": {"vol": {"kind": "constant",
                                               "params": {"sigma": float(spec.split(":")[1])}}}}
        elif spec.startswith("running_max:"):
            base, amp = (float(x) for x in spec.split(":")[1].split(","))
            cfg["model"] = {"kind": "log_price",
                            "params": {"vol": {"kind": "running_max_vol",
                                               "params": {"base": base, "amp": amp}}}}
        else:
            raise ConfigError(f"smile --model: unknown spec {spec!r}")
    return o


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    t0 = time.monotonic()
    try:
        if args.command == "plot":
            return run_plot(args)
        cfg = load_config(args.config)
        kind = args.command
        if kind == "flow":
            kind = "flow-dump"
        elif kind == "run":
            kind = experiment_kind(cfg)
        threads = args.threads
        if threads is None:
            threads = int(os.environ.get("LDPLAB_THREADS", "1"))
        outdir = Path(args.out or cfg.get("output", {}).get("dir", "out"))
        outdir.mkdir(parents=True, exist_ok=True)
        if kind == "smile":
            overrides = _smile_overrides(args, cfg) if args.command == "smile" else {}
            code = run_smile(cfg, outdir, args.seed, threads, overrides)
        else:
            code = EXPERIMENTS[kind](cfg, outdir, args.seed, threads)
        # wall time goes to a sidecar: manifests stay byte-identical across runs
        with open(outdir / "timing.json", "w") as fp:
            json.dump({"elapsed_seconds": time.monotonic() - t0}, fp)
            fp.write("\n")
        return code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
