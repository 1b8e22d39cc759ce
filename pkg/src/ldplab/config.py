"""TOML run configurations: parsing, validation (errors name the offending
key), registry lookups for models/payoffs/domains, and the config hash used
by result manifests."""

from __future__ import annotations

import hashlib
import json

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

import numpy as np

from .errors import ConfigError
from .models import (Ball, Box, ClippedCall, ClippedLinear, ConstantModel,
                     ConstantPayoff, DelayVol, Domain, Interval, LocalVol,
                     LogPriceModel, RunningMaxPayoff, RunningMaxVol)
from .paths import ControlPath, TimeGrid, control_from_csv
from .rate import PenaltySchedule, RateOptions

EXPERIMENT_KINDS = (
    "rate-laplace", "rate-exit", "mc-laplace", "mc-exit",
    "convergence", "eikonal-check", "smile", "flow-dump",
)


def load_config(path: str) -> dict:
    try:
        with open(path, "rb") as fp:
            return tomllib.load(fp)
    except FileNotFoundError:
        raise ConfigError(f"config: file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config: invalid TOML in {path}: {exc}")


def config_hash(cfg: dict) -> str:
    """Stable short hash of the effective configuration."""
    canon = json.dumps(cfg, sort_keys=True, default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name)
    if not isinstance(sec, dict):
        raise ConfigError(f"{name}: missing or not a table")
    return sec


_SENTINEL = object()


def _get(sec: dict, path: str, typ=None, default=_SENTINEL):
    parts = path.split(".")
    cur = sec
    for p in parts[:-1]:
        cur = cur.get(p, {})
        if not isinstance(cur, dict):
            raise ConfigError(f"{path}: parent key is not a table")
    if parts[-1] not in cur:
        if default is not _SENTINEL:
            return default
        raise ConfigError(f"{path}: missing required key")
    val = cur[parts[-1]]
    if typ is not None and not isinstance(val, typ):
        raise ConfigError(f"{path}: expected {getattr(typ, '__name__', typ)}, got {type(val).__name__}")
    return val


def experiment_kind(cfg: dict) -> str:
    kind = _get(cfg, "experiment.kind", str)
    if kind not in EXPERIMENT_KINDS:
        raise ConfigError(
            f"experiment.kind: unknown kind {kind!r}; known: {', '.join(EXPERIMENT_KINDS)}")
    return kind


def build_grid(cfg: dict) -> TimeGrid:
    g = _section(cfg, "grid")
    horizon = float(_get(g, "horizon", (int, float)))
    steps = _get(g, "steps", int)
    try:
        return TimeGrid(horizon, steps)
    except ValueError as exc:
        raise ConfigError(f"grid: {exc}")


def build_x0(cfg: dict, n: int) -> np.ndarray:
    g = _section(cfg, "grid")
    raw = g.get("x0", [0.0] * n)
    x0 = np.atleast_1d(np.asarray(raw, dtype=float))
    if x0.shape != (n,):
        raise ConfigError(f"grid.x0: expected {n} components, got {x0.shape[0]}")
    return x0


def _build_vol(params: dict, key: str):
    kind = _get(params, "kind", str)
    p = params.get("params", {})
    if kind == "constant":
        return ConstantModel(b=[0.0], sigma=float(_get(p, "sigma", (int, float))))
    if kind == "local_vol":
        return LocalVol(float(_get(p, "base", (int, float))), float(_get(p, "amp", (int, float))))
    if kind == "running_max_vol":
        return RunningMaxVol(float(_get(p, "base", (int, float))), float(_get(p, "amp", (int, float))))
    if kind == "delay_vol":
        return DelayVol(float(_get(p, "base", (int, float))), float(_get(p, "amp", (int, float))),
                        float(_get(p, "delay", (int, float))))
    raise ConfigError(f"{key}.kind: unknown vol kind {kind!r}")


def build_model(cfg: dict):
    m = _section(cfg, "model")
    kind = _get(m, "kind", str)
    p = m.get("params", {})
    try:
        if kind == "constant":
            return ConstantModel(b=_get(p, "drift", list, [0.0]), sigma=p.get("sigma", 1.0))
        if kind == "local_vol":
            return LocalVol(float(_get(p, "base", (int, float))), float(_get(p, "amp", (int, float))))
        if kind == "running_max_vol":
            return RunningMaxVol(float(_get(p, "base", (int, float))), float(_get(p, "amp", (int, float))))
        if kind == "delay_vol":
            return DelayVol(float(_get(p, "base", (int, float))), float(_get(p, "amp", (int, float))),
                            float(_get(p, "delay", (int, float))))
        if kind == "log_price":
            return LogPriceModel(_build_vol(_get(p, "vol", dict), "model.params.vol"))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"model.params: {exc}")
    raise ConfigError(f"model.kind: unknown model kind {kind!r}")


def build_payoff(cfg: dict):
    sec = _section(cfg, "payoff")
    kind = _get(sec, "kind", str)
    p = sec.get("params", {})
    try:
        if kind == "constant":
            return ConstantPayoff(float(_get(p, "value", (int, float))))
        if kind == "clipped_linear":
            return ClippedLinear(p.get("slope", 1.0), float(p.get("cap", 10.0)))
        if kind == "running_max":
            return RunningMaxPayoff(float(p.get("slope", 1.0)), float(p.get("cap", 10.0)))
        if kind == "clipped_call":
            cap = p.get("cap")
            return ClippedCall(float(_get(p, "k", (int, float))),
                               float(cap) if cap is not None else None)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"payoff.params: {exc}")
    raise ConfigError(f"payoff.kind: unknown payoff kind {kind!r}")


def build_domain(cfg: dict) -> Domain:
    sec = _section(cfg, "domain")
    kind = _get(sec, "kind", str)
    p = sec.get("params", {})
    try:
        if kind == "interval":
            return Interval(float(_get(p, "lower", (int, float))),
                            float(_get(p, "upper", (int, float))))
        if kind == "ball":
            return Ball(_get(p, "center", list), float(_get(p, "radius", (int, float))))
        if kind == "box":
            return Box(_get(p, "lower", list), _get(p, "upper", list))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"domain.params: {exc}")
    raise ConfigError(f"domain.kind: unknown domain kind {kind!r}")


def build_optimizer(cfg: dict, seed_override: int | None = None) -> RateOptions:
    o = cfg.get("optimizer", {})
    clamp = o.get("clamp")
    try:
        return RateOptions(
            restarts=int(o.get("restarts", 3)),
            max_iter=int(o.get("max_iter", 500)),
            tol=float(o.get("tol", 1e-6)),
            clamp=float(clamp) if clamp is not None else None,
            seed=int(seed_override if seed_override is not None else o.get("seed", 0)),
            scheme=str(o.get("scheme", "auto")),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"optimizer: {exc}")


def build_exit_params(cfg: dict):
    e = cfg.get("exit", {})
    try:
        schedule = PenaltySchedule.default(
            m0=float(e.get("penalty_m0", 1.0)),
            count=int(e.get("penalty_levels", 12)),
            factor=float(e.get("penalty_factor", 2.0)),
        )
    except ValueError as exc:
        raise ConfigError(f"exit: {exc}")
    return {
        "schedule": schedule,
        "horizon_stride": int(e.get("horizon_stride", 1)),
        "eta": float(e.get("eta", 0.1)),
    }


def mc_params(cfg: dict, seed_override=None, threads=1):
    m = _section(cfg, "mc")
    eps = m.get("epsilon")
    if eps is None:
        raise ConfigError("mc.epsilon: missing required key")
    eps_list = [float(e) for e in (eps if isinstance(eps, list) else [eps])]
    if not eps_list or any(e < 0 for e in eps_list):
        raise ConfigError("mc.epsilon: must be positive (a value or decreasing list)")
    seed = m.get("seed")
    if seed_override is not None:
        seed = seed_override
    if seed is None:
        raise ConfigError("mc.seed: missing required key (stochastic experiments need a seed)")
    return {
        "epsilon": eps_list,
        "n_paths": int(m.get("n_paths", 100_000)),
        "seed": int(seed),
        "antithetic": bool(m.get("antithetic", False)),
        "is_control": m.get("is_control", "none"),
        "chunk": int(m.get("chunk", 16384)),
        "threads": int(threads),
        "bridge_correction": bool(m.get("bridge_correction", True)),
    }


def resolve_is_control(spec, *, grid, model, xi, x0, opts) -> ControlPath | None:
    """mc.is_control: "none" | "rate" (optimal control from the rate module)
    | "csv:<path>" (control CSV on the simulation grid)."""
    from .rate import minimize_laplace

    if spec is None or spec == "none":
        return None
    if spec == "rate":
        return minimize_laplace(model, xi, x0, grid, opts).control
    if isinstance(spec, str) and spec.startswith("csv:"):
        ctrl = control_from_csv(spec[4:])
        if ctrl.grid.steps != grid.steps or not ctrl.grid.compatible(grid):
            raise ConfigError("mc.is_control: control CSV grid does not match [grid]")
        return ControlPath(grid, ctrl.slopes)
    raise ConfigError(f"mc.is_control: unknown spec {spec!r} (none | rate | csv:<path>)")
