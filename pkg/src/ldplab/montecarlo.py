"""Small-noise Monte Carlo: Euler-Maruyama simulation under the scaled
Wiener measure, naive and importance-sampled Laplace-transform estimators,
and exit probabilities with an optional Brownian-bridge crossing correction.

All weight arithmetic runs in log space (log-sum-exp over fixed-size chunks
accumulated in path-index order), which keeps estimates both stable at small
noise and bit-identical under any thread count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import flow, rng
from .errors import NumericalFailure
from .models import CoefficientModel, Domain, Interval, TerminalFunctional
from .paths import ControlPath, TimeGrid

__all__ = [
    "McConfig",
    "McEstimate",
    "IsEstimates",
    "ExitProbability",
    "simulate_paths",
    "laplace_naive",
    "laplace_is",
    "exit_prob",
    "convergence_study",
]

_LOG_TINY = math.log(np.finfo(float).tiny)  # linear-space underflow threshold


@dataclass(frozen=True)
class McConfig:
    epsilon: float
    n_paths: int
    grid: TimeGrid
    seed: int
    antithetic: bool = False
    is_control: ControlPath | None = None
    chunk: int = 16384
    threads: int = 1
    bridge_correction: bool = True

    def __post_init__(self):
        if self.epsilon < 0.0:
            raise ValueError("epsilon must be >= 0")
        if self.n_paths < 2:
            raise ValueError("n_paths must be >= 2")
        if self.antithetic and self.n_paths % 2:
            raise ValueError("antithetic sampling needs an even n_paths")
        if self.is_control is not None and self.is_control.grid.steps != self.grid.steps:
            raise ValueError("is_control must live on the simulation grid")


@dataclass
class McEstimate:
    value: float
    std_error: float
    ci95: tuple
    n_effective: float
    relative_variance: float = math.nan  # integrand variance over squared mean
    log_weights_summary: tuple | None = None
    warnings: list = field(default_factory=list)


@dataclass
class IsEstimates:
    """Importance-sampled estimate plus the control-value upper bound
    (mean of payoff + half the control action under the drifted measure)."""

    estimate: McEstimate
    upper_bound: McEstimate


@dataclass
class ExitProbability:
    prob: McEstimate   # P[exit before the horizon]
    rate: McEstimate   # -eps ln P
    bridge_corrected: bool
    warnings: list = field(default_factory=list)


def _chunk_ranges(n: int, size: int):
    for lo in range(0, n, size):
        yield lo, min(lo + size, n)


def _chunk_normals(cfg: McConfig, lo: int, hi: int, d: int) -> np.ndarray:
    """Normals for logical paths lo..hi-1; antithetic pairs share a counter
    stream and flip the sign, so pairing is chunk-independent."""
    idx = np.arange(lo, hi, dtype=np.uint64)
    if not cfg.antithetic:
        return rng.normals(cfg.seed, idx, cfg.grid.steps, d)
    z = rng.normals(cfg.seed, idx >> np.uint64(1), cfg.grid.steps, d)
    sign = np.where((np.arange(lo, hi) % 2) == 0, 1.0, -1.0)
    return z * sign[:, None, None]


def _simulate_chunk(model, x0, cfg, lo, hi, eps=None):
    """Euler-Maruyama on paths [lo, hi): increments sqrt(eps*dt) Z (+ alpha dt
    under the drifted measure). Returns (omega, x, z)."""
    z = _chunk_normals(cfg, lo, hi, model.d)
    grid = cfg.grid
    e = cfg.epsilon if eps is None else eps
    db = math.sqrt(e * grid.dt) * z
    if cfg.is_control is not None:
        db = db + cfg.is_control.slopes[None] * grid.dt
    nb = hi - lo
    omega = np.zeros((nb, grid.steps + 1, model.d))
    x = np.zeros((nb, grid.steps + 1, model.n))
    x[:, 0] = np.atleast_1d(np.asarray(x0, dtype=float))
    flow.advance(model, grid.times(), omega, x, db, start=0, eps=e)
    return omega, x, z


def _run_chunks(cfg: McConfig, worker):
    """Apply `worker(lo, hi)` over fixed chunks; results combined in chunk
    order regardless of thread count."""
    ranges = list(_chunk_ranges(cfg.n_paths, cfg.chunk))
    if cfg.threads > 1 and len(ranges) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            return list(pool.map(lambda r: worker(*r), ranges))
    return [worker(lo, hi) for lo, hi in ranges]


def simulate_paths(model: CoefficientModel, x0, cfg: McConfig):
    """Full batch of (noise path, state path) arrays; shapes
    (n_paths, steps+1, d) and (n_paths, steps+1, n). Deterministic given cfg."""
    outs = _run_chunks(cfg, lambda lo, hi: _simulate_chunk(model, x0, cfg, lo, hi)[:2])
    omega = np.concatenate([o for o, _ in outs], axis=0)
    x = np.concatenate([xx for _, xx in outs], axis=0)
    return omega, x


class _LogMeanAccumulator:
    """Streaming log-sum-exp of weights and squared weights, merged in a
    fixed order so the result is independent of scheduling."""

    def __init__(self):
        self.m = -math.inf  # running max
        self.s1 = 0.0       # sum exp(w - m)
        self.s2 = 0.0       # sum exp(2(w - m))
        self.n = 0

    def add(self, logw: np.ndarray):
        if logw.size == 0:
            return
        m = float(np.max(logw))
        new_m = max(self.m, m)
        if new_m == -math.inf:
            self.n += logw.size
            return
        scale = math.exp(self.m - new_m) if self.m > -math.inf else 0.0
        self.s1 = self.s1 * scale + float(np.sum(np.exp(logw - new_m)))
        self.s2 = self.s2 * scale**2 + float(np.sum(np.exp(2.0 * (logw - new_m))))
        self.m = new_m
        self.n += logw.size

    @property
    def log_mean(self) -> float:
        if self.s1 <= 0.0:
            return -math.inf
        return self.m + math.log(self.s1) - math.log(self.n)

    @property
    def rel_std_error(self) -> float:
        """Standard error of the sample mean divided by the sample mean."""
        if self.s1 <= 0.0 or self.n < 2:
            return math.inf
        ratio = self.s2 / (self.s1 * self.s1)  # = sum w^2 / (sum w)^2
        var_over_mean2 = max(self.n * ratio - 1.0, 0.0) * self.n / (self.n - 1)
        return math.sqrt(var_over_mean2 / self.n)

    @property
    def relative_variance(self) -> float:
        """Sample variance of the weights divided by the squared sample mean."""
        if self.s1 <= 0.0 or self.n < 2:
            return math.inf
        return max(self.n * self.s2 / (self.s1 * self.s1) - 1.0, 0.0) * self.n / (self.n - 1)

    @property
    def n_effective(self) -> float:
        if self.s2 <= 0.0:
            return 0.0
        return self.s1 * self.s1 / self.s2


def _neg_eps_log_estimate(acc: _LogMeanAccumulator, eps: float) -> McEstimate:
    """Map a log-mean accumulator to -eps ln(mean) with a delta-method CI."""
    log_mean = acc.log_mean
    rel = acc.rel_std_error
    value = -eps * log_mean
    se = eps * rel
    lo = -eps * (log_mean + math.log1p(1.96 * rel)) if math.isfinite(rel) else -math.inf
    hi = (-eps * (log_mean + math.log1p(-1.96 * rel))
          if 1.96 * rel < 1.0 else math.inf)
    return McEstimate(value=value, std_error=se, ci95=(lo, hi),
                      n_effective=acc.n_effective,
                      relative_variance=acc.relative_variance)


def laplace_naive(model: CoefficientModel, xi: TerminalFunctional, x0,
                  cfg: McConfig) -> McEstimate:
    """-eps ln (sample mean of e^{-xi/eps}), computed by log-sum-exp."""
    if cfg.is_control is not None:
        raise ValueError("laplace_naive does not take an importance-sampling control")
    eps = cfg.epsilon
    if eps == 0.0:
        raise ValueError("naive Laplace estimator needs eps > 0")

    def worker(lo, hi):
        omega, x, _ = _simulate_chunk(model, x0, cfg, lo, hi)
        return np.asarray(xi(omega, x), dtype=float)

    acc = _LogMeanAccumulator()
    for vals in _run_chunks(cfg, worker):
        acc.add(-vals / eps)
    if acc.log_mean < _LOG_TINY:
        raise NumericalFailure(
            "naive Laplace sample mean underflows to 0 at this epsilon; "
            "use the importance-sampled estimator (set mc.is_control)")
    est = _neg_eps_log_estimate(acc, eps)
    est.warnings = []
    return est


def laplace_is(model: CoefficientModel, xi: TerminalFunctional, x0,
               cfg: McConfig) -> IsEstimates:
    """Importance sampling under the control-drifted measure: simulate with
    increments sqrt(eps) dW + alpha dt and reweight by the inverse Girsanov
    density, in log space. Also returns the upper-bound estimator
    mean[xi + action] (the stochastic-control value of the drifted measure)."""

    if cfg.is_control is None:
        raise ValueError("laplace_is needs cfg.is_control")
    eps = cfg.epsilon
    if eps == 0.0:
        raise ValueError("importance-sampled estimator needs eps > 0")
    grid = cfg.grid
    alpha = cfg.is_control.slopes
    action = cfg.is_control.action
    a_sq = float(np.sum(alpha * alpha)) * grid.dt  # = 2 * action

    def worker(lo, hi):
        omega, x, z = _simulate_chunk(model, x0, cfg, lo, hi)
        vals = np.asarray(xi(omega, x), dtype=float)
        # log 1/M = -(1/sqrt(eps)) sqrt(dt) sum alpha.Z - (1/2eps) int |alpha|^2
        cross = np.einsum("bkq,kq->b", z, alpha) * math.sqrt(grid.dt)
        logw = -cross / math.sqrt(eps) - a_sq / (2.0 * eps)
        return vals, logw

    acc = _LogMeanAccumulator()
    lw_n = 0
    lw_sum = 0.0
    lw_sumsq = 0.0
    ub_sum = 0.0
    ub_sumsq = 0.0
    for vals, logw in _run_chunks(cfg, worker):
        acc.add(-vals / eps + logw)
        lw_n += logw.size
        lw_sum += float(np.sum(logw))
        lw_sumsq += float(np.sum(logw * logw))
        ub = vals + action
        ub_sum += float(np.sum(ub))
        ub_sumsq += float(np.sum(ub * ub))

    est = _neg_eps_log_estimate(acc, eps)
    lw_mean = lw_sum / lw_n
    lw_var = max(lw_sumsq / lw_n - lw_mean**2, 0.0) * lw_n / (lw_n - 1)
    est.log_weights_summary = (lw_mean, lw_var)
    if lw_var > 1e6:
        est.warnings.append(f"log-weight variance {lw_var:.3g} > 1e6: poor control")

    ub_mean = ub_sum / lw_n
    ub_var = max(ub_sumsq / lw_n - ub_mean**2, 0.0) * lw_n / (lw_n - 1)
    ub_se = math.sqrt(ub_var / lw_n)
    upper = McEstimate(value=ub_mean, std_error=ub_se,
                       ci95=(ub_mean - 1.96 * ub_se, ub_mean + 1.96 * ub_se),
                       n_effective=float(lw_n))
    return IsEstimates(estimate=est, upper_bound=upper)


def _bridge_survival(x_path: np.ndarray, lower: float, upper: float,
                     var_step: float) -> np.ndarray:
    """Per-path probability of crossing an interval boundary inside a step,
    given the step endpoints (scalar constant-sigma Brownian bridge law)."""
    a = x_path[:, :-1, 0]
    b = x_path[:, 1:, 0]
    up = np.exp(-2.0 * np.maximum(upper - a, 0.0) * np.maximum(upper - b, 0.0) / var_step)
    dn = np.exp(-2.0 * np.maximum(a - lower, 0.0) * np.maximum(b - lower, 0.0) / var_step)
    surv = np.prod((1.0 - up) * (1.0 - dn), axis=1)
    return 1.0 - surv  # crossing probability given node values


def exit_prob(model: CoefficientModel, domain: Domain, x0,
              cfg: McConfig) -> ExitProbability:
    """P[exit from O before the horizon] with node detection, plus the
    Brownian-bridge crossing correction for scalar constant-sigma models on
    an interval; the rate estimate is -eps ln p."""

    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if float(domain.signed_distance(x0)) >= 0.0:
        raise ValueError("x0 must lie inside the domain")
    eps = cfg.epsilon
    bridge = (cfg.bridge_correction and model.constant_scalar_sigma is not None
              and isinstance(domain, Interval) and model.n == 1)
    warnings = []
    if cfg.bridge_correction and not bridge:
        warnings.append("bridge correction unavailable for this model/domain: "
                        "node detection only; refine dt for accuracy")

    def worker(lo, hi):
        _, x, _ = _simulate_chunk(model, x0, cfg, lo, hi)
        sd = domain.signed_distance(x)
        hit = np.any(sd >= 0.0, axis=1).astype(float)
        if bridge:
            var_step = eps * model.constant_scalar_sigma**2 * cfg.grid.dt
            q = _bridge_survival(x, domain.lower, domain.upper, var_step)
            hit = np.maximum(hit, q)
        return float(np.sum(hit)), float(np.sum(hit * hit)), hit.size

    s = ss = 0.0
    n = 0
    for cs, css, cn in _run_chunks(cfg, worker):
        s += cs
        ss += css
        n += cn
    p = s / n
    if p <= 0.0:
        raise NumericalFailure(
            "no exits observed: enlarge epsilon or shrink the domain "
            "(importance sampling for exits is out of scope)")
    var = max(ss / n - p * p, 0.0) * n / (n - 1)
    se = math.sqrt(var / n)
    prob = McEstimate(value=p, std_error=se,
                      ci95=(max(p - 1.96 * se, 0.0), min(p + 1.96 * se, 1.0)),
                      n_effective=float(n))
    rel = se / p
    rate = McEstimate(
        value=-eps * math.log(p),
        std_error=eps * rel,
        ci95=(-eps * math.log(min(p + 1.96 * se, 1.0)),
              (-eps * math.log(p - 1.96 * se) if p - 1.96 * se > 0 else math.inf)),
        n_effective=float(n),
    )
    return ExitProbability(prob=prob, rate=rate, bridge_corrected=bridge,
                           warnings=warnings)


def convergence_study(problem: str, eps_schedule, *, model, x0, cfg_base: McConfig,
                      limit: float, xi: TerminalFunctional | None = None,
                      domain: Domain | None = None,
                      is_control: ControlPath | None = None) -> list:
    """Rows (eps, estimate, std_error, ci, |estimate - limit|) against the
    rate-module limit, one per epsilon of a decreasing schedule."""

    eps_schedule = list(eps_schedule)
    if any(b >= a for a, b in zip(eps_schedule, eps_schedule[1:])):
        raise ValueError("eps schedule must be decreasing")
    rows = []
    for eps in eps_schedule:
        cfg = McConfig(epsilon=eps, n_paths=cfg_base.n_paths, grid=cfg_base.grid,
                       seed=cfg_base.seed, antithetic=cfg_base.antithetic,
                       is_control=is_control, chunk=cfg_base.chunk,
                       threads=cfg_base.threads,
                       bridge_correction=cfg_base.bridge_correction)
        if problem == "laplace":
            if xi is None:
                raise ValueError("laplace study needs a payoff")
            est = (laplace_is(model, xi, x0, cfg).estimate
                   if is_control is not None else laplace_naive(model, xi, x0, cfg))
        elif problem == "exit":
            if domain is None:
                raise ValueError("exit study needs a domain")
            est = exit_prob(model, domain, x0, cfg).rate
        else:
            raise ValueError(f"unknown convergence problem {problem!r}")
        rows.append({
            "eps": eps,
            "estimate": est.value,
            "stderr": est.std_error,
            "ci_lo": est.ci95[0],
            "ci_hi": est.ci95[1],
            "limit": limit,
            "abs_gap": abs(est.value - limit),
        })
    return rows
