"""Short-maturity implied volatility asymptotics: normalized Black-Scholes
prices (stable deep out-of-the-money via erfcx in log space), implied total
variance, the small-variance identity v ln c -> -k^2/2, the strike rate
Q0(k) as a lower-domain-floor limit of exit rates on the unit horizon, and
its Monte Carlo cross-check on vanilla call prices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erfcx, ndtr

from . import montecarlo
from .errors import NumericalFailure
from .models import CoefficientModel, Interval, LogPriceModel
from .montecarlo import McConfig, _LogMeanAccumulator, _neg_eps_log_estimate
from .paths import TimeGrid
from .rate import RateOptions, exit_rate

__all__ = [
    "BsQuote",
    "bs_price",
    "log_bs_price",
    "implied_total_variance",
    "implied_total_variance_from_log",
    "small_v_identity_check",
    "SmileAsymptote",
    "q0_of_strike",
    "time_indifference_check",
    "mc_call_rate",
]

_SQRT2 = math.sqrt(2.0)
_TAIL_DPLUS = -8.0  # below this, switch to the erfcx tail representation


def _d_pm(k: float, v: float):
    sv = math.sqrt(v)
    return -k / sv + 0.5 * sv, -k / sv - 0.5 * sv


def _intrinsic(k: float) -> float:
    return max(0.0, 1.0 - math.exp(k))


def log_bs_price(k: float, v: float) -> float:
    """ln of the normalized call price, accurate deep out-of-the-money
    (no intermediate underflow for |d| up to several hundred)."""

    if v < 0.0:
        raise ValueError("total variance must be >= 0")
    if v == 0.0:
        p = _intrinsic(k)
        return math.log(p) if p > 0.0 else -math.inf
    dp, dm = _d_pm(k, v)
    if dp > _TAIL_DPLUS:
        price = float(ndtr(dp) - math.exp(k) * ndtr(dm))
        if price > 0.0:
            return math.log(price)
    # tail: c = 0.5 exp(-dp^2/2) (erfcx(-dp/sqrt2) - erfcx(-dm/sqrt2)),
    # using exp(k - dm^2/2) = exp(-dp^2/2)
    x1 = -dp / _SQRT2
    x2 = -dm / _SQRT2
    bracket = 0.5 * (float(erfcx(x1)) - float(erfcx(x2)))
    if bracket <= 0.0:
        return -math.inf
    return -0.5 * dp * dp + math.log(bracket)


def bs_price(k: float, v: float) -> float:
    """Normalized Black-Scholes call N(d+) - e^k N(d-); (1-e^k)^+ at v=0."""
    if v < 0.0:
        raise ValueError("total variance must be >= 0")
    if v == 0.0:
        return _intrinsic(k)
    dp, dm = _d_pm(k, v)
    if dp > _TAIL_DPLUS:
        return float(ndtr(dp) - math.exp(k) * ndtr(dm))
    return math.exp(log_bs_price(k, v))


_V_LO = 1e-14
_V_HI = 200.0


@dataclass(frozen=True)
class BsQuote:
    """Consistent (log-moneyness, total variance, normalized price) triple."""

    k: float
    v: float
    c_hat: float

    def __post_init__(self):
        if self.v < 0.0:
            raise ValueError("total variance must be >= 0")
        if not (_intrinsic(self.k) <= self.c_hat < 1.0):
            raise ValueError(
                f"price {self.c_hat} outside [{_intrinsic(self.k)}, 1) for k={self.k}")

    @classmethod
    def from_variance(cls, k: float, v: float) -> "BsQuote":
        return cls(k=k, v=v, c_hat=bs_price(k, v))

    @classmethod
    def from_price(cls, k: float, c_hat: float) -> "BsQuote":
        return cls(k=k, v=implied_total_variance(c_hat, k), c_hat=c_hat)


def implied_total_variance_from_log(log_c: float, k: float) -> float:
    """Unique v >= 0 with log_bs_price(k, v) = log_c, by bisection on the
    (monotone) log price over [1e-14, 200]."""

    if not log_c < 0.0:
        raise ValueError("log price must be < 0 (price below 1)")
    lo, hi = _V_LO, _V_HI
    f_lo = log_bs_price(k, lo)
    f_hi = log_bs_price(k, hi)
    if not (f_lo <= log_c <= f_hi):
        raise ValueError(
            f"price outside the attainable range for k={k}: "
            f"ln c={log_c:.6g} not in [{f_lo:.6g}, {f_hi:.6g}]")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        if log_bs_price(k, mid) < log_c:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def implied_total_variance(c_hat: float, k: float) -> float:
    """Inverse of bs_price in v for c in the open arbitrage band.

    In-the-money inputs are inverted through put-call parity on the
    out-of-the-money side (the time value c - (1 - e^k) equals e^k times the
    call price at -k), which preserves whatever resolution the input price
    carries near intrinsic.
    """
    if not (_intrinsic(k) < c_hat < 1.0):
        raise ValueError(
            f"price {c_hat} outside the arbitrage bounds ({_intrinsic(k)}, 1) for k={k}")
    if k < 0.0:
        tv = c_hat - _intrinsic(k)
        return implied_total_variance_from_log(math.log(tv) - k, -k)
    return implied_total_variance_from_log(math.log(c_hat), k)


def small_v_identity_check(k: float, v_schedule) -> list:
    """Rows (v, v ln c, gap to -k^2/2) along a decreasing variance schedule."""
    if not k > 0.0:
        raise ValueError("the identity holds for k > 0")
    v_schedule = [float(v) for v in v_schedule]
    if any(b >= a for a, b in zip(v_schedule, v_schedule[1:])):
        raise ValueError("v schedule must be decreasing")
    target = -0.5 * k * k
    rows = []
    for v in v_schedule:
        vl = v * log_bs_price(k, v)
        rows.append({"v": v, "v_ln_price": vl, "gap": abs(vl - target)})
    return rows


@dataclass
class SmileAsymptote:
    k: float
    q0: float
    sigma0_sq: float
    a_used: float
    trace: list = field(default_factory=list)  # (a, Q0(a, k)) pairs


def _as_log_price_model(vol_model: CoefficientModel) -> LogPriceModel:
    model = vol_model if isinstance(vol_model, LogPriceModel) else LogPriceModel(vol_model)
    low = getattr(model, "sigma_low", None)
    if model.constant_scalar_sigma is None and (low is None or not low > 0.0):
        raise ValueError("vol model must declare positive volatility bounds")
    return model


def q0_of_strike(vol_model: CoefficientModel, k: float, a_schedule=(-0.5, -1.0, -2.0, -4.0),
                 steps: int = 64, horizon_stride: int = 2,
                 opts: RateOptions | None = None, stab_tol: float = 1e-4) -> SmileAsymptote:
    """Q0(k) = limit over decreasing domain floors a of the exit rate from
    (a, k) on the unit horizon, with the zero limit drift; stops once two
    successive values agree within stab_tol."""

    if not k > 0.0:
        raise ValueError("log-moneyness k must be > 0")
    a_schedule = [float(a) for a in a_schedule]
    if any(b >= a for a, b in zip(a_schedule, a_schedule[1:])) or a_schedule[0] >= 0.0:
        raise ValueError("a schedule must be negative and decreasing")
    model = _as_log_price_model(vol_model)
    grid = TimeGrid(1.0, steps)
    trace = []
    prev = None
    for a in a_schedule:
        res = exit_rate(model, Interval(a, k), [0.0], grid,
                        opts=opts, horizon_stride=horizon_stride)
        trace.append((a, res.value))
        if prev is not None and abs(res.value - prev) < stab_tol:
            q0 = res.value
            return SmileAsymptote(k=k, q0=q0, sigma0_sq=k * k / (2.0 * q0),
                                  a_used=a, trace=trace)
        prev = res.value
    raise NumericalFailure(
        f"Q0(a, k) did not stabilize within the a-schedule; trace={trace}")


@dataclass
class TimeIndifferenceReport:
    trials: int
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def time_indifference_check(vol_model: CoefficientModel, trials: int = 100,
                            rng_seed: int = 0, steps: int = 32,
                            tol: float = 1e-12) -> TimeIndifferenceReport:
    """sigma_{ct}(x) == sigma_t(x^c) with x^c_s := x_{cs}, on random
    (c, t, path) triples; the stretched path is resampled at the stretched
    node times (node-aligned, so the resampling is exact)."""

    rng = np.random.default_rng(rng_seed)
    report = TimeIndifferenceReport(trials=trials)
    unit = TimeGrid(1.0, steps)
    unit_times = unit.times()
    for trial in range(trials):
        c = float(rng.uniform(0.25, 4.0))
        stretched = TimeGrid(c, steps)
        k = int(rng.integers(1, steps + 1))
        x = np.vstack([np.zeros((1, 1)),
                       np.cumsum(rng.standard_normal((steps, 1)) * 0.3, axis=0)])
        omega = np.zeros_like(x)
        lhs = vol_model.diffusion(k, stretched.times(), omega, x)  # sigma_{ct}(x)
        rhs = vol_model.diffusion(k, unit_times, omega, x)         # sigma_t(x^c)
        gap = float(np.max(np.abs(lhs - rhs)))
        if gap > tol:
            report.violations.append(
                {"trial": trial, "c": c, "t": unit_times[k], "gap": gap})
    return report


def mc_call_rate(vol_model: CoefficientModel, k: float, eps_schedule, *,
                 n_paths: int = 100_000, steps: int = 128, seed: int = 0,
                 q0: float | None = None, chunk: int = 16384,
                 threads: int = 1, opts: RateOptions | None = None) -> list:
    """-eps ln E[(e^{X_1} - e^k)^+] per epsilon (log-space mean), with the
    gap to the strike rate Q0(k)."""

    if not k > 0.0:
        raise ValueError("log-moneyness k must be > 0")
    eps_schedule = [float(e) for e in eps_schedule]
    if any(b >= a for a, b in zip(eps_schedule, eps_schedule[1:])):
        raise ValueError("eps schedule must be decreasing")
    model = _as_log_price_model(vol_model)
    if q0 is None:
        q0 = q0_of_strike(vol_model, k, opts=opts).q0
    grid = TimeGrid(1.0, steps)
    ek = math.exp(k)
    rows = []
    for eps in eps_schedule:
        cfg = McConfig(epsilon=eps, n_paths=n_paths, grid=grid, seed=seed,
                       chunk=chunk, threads=threads)
        acc = _LogMeanAccumulator()

        def worker(lo, hi):
            _, x, _ = montecarlo._simulate_chunk(model, [0.0], cfg, lo, hi)
            payoff = np.maximum(np.exp(x[:, -1, 0]) - ek, 0.0)
            with np.errstate(divide="ignore"):
                return np.log(payoff)

        for logp in montecarlo._run_chunks(cfg, worker):
            acc.add(logp)
        if acc.log_mean == -math.inf:
            raise NumericalFailure(
                f"all call payoffs are zero at eps={eps}; use a larger epsilon")
        est = _neg_eps_log_estimate(acc, eps)
        rows.append({
            "eps": eps,
            "estimate": est.value,
            "stderr": est.std_error,
            "ci_lo": est.ci95[0],
            "ci_hi": est.ci95[1],
            "limit": q0,
            "abs_gap": abs(est.value - q0),
        })
    return rows
