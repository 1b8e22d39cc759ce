"""Rate functions as deterministic optimal control: projected gradient
descent with Armijo backtracking for the Laplace functional, and the
penalty scheme with horizon scan and boundary correction for the exit rate.

The control (one slope per grid interval and noise coordinate) is the
finite-dimensional unknown: discretize-then-optimize. Descent directions are
preconditioned by 1/dt so a unit step is the exact minimizer in the
constant-coefficient quadratic cases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import flow
from .errors import NumericalFailure
from .models import CoefficientModel, Domain, TerminalFunctional
from .paths import ControlPath, PathPoint, TimeGrid

__all__ = [
    "RateOptions",
    "RateResult",
    "PenaltySchedule",
    "ExitResult",
    "minimize_laplace",
    "exit_rate",
    "boundary_refine",
]


@dataclass(frozen=True)
class RateOptions:
    restarts: int = 3
    max_iter: int = 500
    tol: float = 1e-6
    clamp: float | None = None  # componentwise |alpha| <= clamp when set
    seed: int = 0
    scheme: str = "auto"
    armijo_init: float = 1.0
    armijo_shrink: float = 0.5
    armijo_slope: float = 1e-4
    max_backtracks: int = 40
    restart_scale: float = 1.0


@dataclass
class RateResult:
    value: float
    control: ControlPath
    grad_norm: float
    iterations: int
    restarts_used: int
    converged: bool


@dataclass(frozen=True)
class PenaltySchedule:
    """Increasing penalty levels; default 2^k * m0 for 12 levels."""

    levels: tuple

    def __post_init__(self):
        lv = tuple(float(m) for m in self.levels)
        if not lv or any(b <= a for a, b in zip(lv, lv[1:])) or lv[0] <= 0:
            raise ValueError("penalty levels must be positive and strictly increasing")
        object.__setattr__(self, "levels", lv)

    @staticmethod
    def default(m0: float = 1.0, count: int = 12, factor: float = 2.0) -> "PenaltySchedule":
        return PenaltySchedule(tuple(m0 * factor**k for k in range(count)))


@dataclass
class ExitResult:
    value: float
    control: ControlPath
    horizon: float
    grad_norm: float
    iterations: int
    converged: bool
    per_level: list = field(default_factory=list)    # rows {horizon, m, y}
    per_horizon: list = field(default_factory=list)  # rows {horizon, value, refined, distance}
    warnings: list = field(default_factory=list)


def _project(a: np.ndarray, clamp: float | None) -> np.ndarray:
    return a if clamp is None else np.clip(a, -clamp, clamp)


def _descend(objective, grad_fn, alpha0: np.ndarray, dt: float, opts: RateOptions):
    """Projected gradient descent with Armijo backtracking.

    Returns (alpha, value, pg_norm, iterations, converged); pg_norm is the
    L2 norm of the unit-step projected gradient field (= |grad|/dt unclamped).
    """

    a = _project(np.array(alpha0, dtype=float, copy=True), opts.clamp)
    f = objective(a)
    pg_norm = math.inf
    iters = 0
    converged = False
    for _ in range(opts.max_iter):
        iters += 1
        g = grad_fn(a)
        direction = g / dt  # L2 functional gradient field
        pg = a - _project(a - direction, opts.clamp)
        pg_norm = math.sqrt(float(np.sum(pg * pg)) * dt)
        if pg_norm <= opts.tol * (1.0 + abs(f)):
            converged = True
            break
        s = opts.armijo_init
        accepted = False
        for _ in range(opts.max_backtracks):
            cand = _project(a - s * direction, opts.clamp)
            fc = objective(cand)
            decrease = float(np.sum(g * (a - cand)))
            if math.isfinite(fc) and fc <= f - opts.armijo_slope * decrease:
                a, f = cand, fc
                accepted = True
                break
            s *= opts.armijo_shrink
        if not accepted:
            break  # no decrease along the projected direction: local stall
    return a, f, pg_norm, iters, converged


def _starts(shape, opts: RateOptions, order=None):
    starts = [np.zeros(shape)]
    for r in range(1, opts.restarts):
        rng = np.random.default_rng((opts.seed, r))
        starts.append(rng.standard_normal(shape) * opts.restart_scale)
    if order is not None:
        starts = [starts[i] for i in order]
    return starts


def _best(candidates):
    """Deterministic reduction: min by value, ties by lexicographic control."""
    return min(candidates, key=lambda c: (c[1], c[0].tobytes()))


def minimize_laplace(model: CoefficientModel, xi: TerminalFunctional, x0,
                     grid: TimeGrid, opts: RateOptions | None = None,
                     shifted_start: PathPoint | None = None,
                     restart_order=None) -> RateResult:
    """Minimize xi(flow) + action over piecewise-constant controls,
    multi-started from the zero control plus random Gaussian controls."""

    opts = opts or RateOptions()
    if shifted_start is None:
        cgrid = grid
    else:
        rest = grid.steps - shifted_start.index
        if rest < 1:
            raise ValueError("shifted start must leave at least one step")
        cgrid = TimeGrid(rest * grid.dt, rest)
    if cgrid.steps < 1 or opts.tol <= 0:
        raise ValueError("need at least one control interval and tol > 0")
    dt = cgrid.dt
    shape = (cgrid.steps, model.d)

    def objective(a):
        return flow.laplace_objective(model, xi, x0, ControlPath(cgrid, a), shifted_start)

    def grad_fn(a):
        return flow.gradient(model, xi, x0, ControlPath(cgrid, a),
                             scheme=opts.scheme, shifted_start=shifted_start)

    candidates = []
    total_iters = 0
    for a0 in _starts(shape, opts, restart_order):
        a, f, pg, iters, conv = _descend(objective, grad_fn, a0, dt, opts)
        total_iters += iters
        candidates.append((a, f, pg, conv))
    a, f, pg, conv = _best(candidates)
    return RateResult(
        value=f,
        control=ControlPath(cgrid, a),
        grad_norm=pg,
        iterations=total_iters,
        restarts_used=len(candidates),
        converged=conv,
    )


class _PenaltyDistance(TerminalFunctional):
    """m times the distance of the terminal state to the domain complement
    (zero outside or on the boundary: the boundary counts as exited)."""

    has_gradient = True

    def __init__(self, domain: Domain, m: float):
        self.domain = domain
        self.m = float(m)
        self.bound = math.inf
        self.lipschitz = self.m

    def __call__(self, omega, x):
        sd = self.domain.signed_distance(x[..., -1, :])
        return self.m * np.maximum(-sd, 0.0)

    def path_gradient(self, omega, x):
        g_x = np.zeros_like(x)
        xt = x[-1, :]
        if float(self.domain.signed_distance(xt)) < 0.0:
            g_x[-1, :] = -self.m * self.domain.sd_gradient(xt)
        return np.zeros_like(omega), g_x


def boundary_refine(model: CoefficientModel, domain: Domain, x0,
                    control: ControlPath, max_corrections: int = 10,
                    tol: float = 1e-6) -> ControlPath:
    """Correct a near-exiting control so the terminal state lands on the
    boundary: alpha_t += sigma_t^{-1} (x* - x_T) / horizon, re-integrating
    after each correction (exact in one step for constant coefficients)."""

    if model.n != model.d:
        raise NumericalFailure("boundary refinement needs square sigma (n == d)")
    cgrid = control.grid
    horizon = cgrid.horizon
    times = cgrid.times()
    alpha = np.array(control.slopes, copy=True)
    for _ in range(max_corrections):
        res = flow.integrate(model, x0, ControlPath(cgrid, alpha))
        x_end = res.x.values[-1]
        dist = float(domain.signed_distance(x_end))
        if abs(dist) <= tol:
            return ControlPath(cgrid, alpha)
        target = domain.boundary_project(x_end)
        shift = (np.asarray(target, dtype=float) - x_end) / horizon
        omega_v, x_v = res.omega.values, res.x.values
        for k in range(cgrid.steps):
            sig = model.diffusion(k, times, omega_v, x_v)
            try:
                alpha[k] += np.linalg.solve(sig, shift)
            except np.linalg.LinAlgError as exc:
                raise NumericalFailure(f"singular sigma in boundary refinement: {exc}")
    raise NumericalFailure(
        f"boundary refinement did not reach the boundary in {max_corrections} corrections"
    )


def exit_rate(model: CoefficientModel, domain: Domain, x0, grid: TimeGrid,
              schedule: PenaltySchedule | None = None,
              opts: RateOptions | None = None,
              horizon_stride: int = 1, eta: float = 0.1) -> ExitResult:
    """Exit rate by the penalty scheme: for each horizon t_j in the scan,
    minimize action + m * d(x_{t_j}, complement) over increasing m with warm
    starts, then correct the best control onto the boundary. The estimate is
    the minimum over horizons of the corrected actions."""

    schedule = schedule or PenaltySchedule.default()
    opts = opts or RateOptions()
    # penalty objectives have a kink on the boundary: cap the stall cost there
    opts = replace(opts, max_backtracks=min(opts.max_backtracks, 20))
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    zero = ControlPath(grid, np.zeros((grid.steps, model.d)))
    if float(domain.signed_distance(x0)) >= 0.0:
        # already outside (or on the boundary): exit has happened at cost 0
        return ExitResult(value=0.0, control=zero, horizon=0.0, grad_norm=0.0,
                          iterations=0, converged=True)

    indices = list(range(max(1, horizon_stride), grid.steps + 1, max(1, horizon_stride)))
    if not indices or indices[-1] != grid.steps:
        indices.append(grid.steps)

    result = ExitResult(value=math.inf, control=zero, horizon=grid.horizon,
                        grad_norm=math.inf, iterations=0, converged=True)
    prev_alpha = None
    refinable = model.n == model.d
    if not refinable:
        result.warnings.append("sigma not square: refinement skipped, "
                               "values are top penalty-level objectives")

    for j in indices:
        sub = grid.prefix(j)
        dt = sub.dt
        shape = (j, model.d)
        if prev_alpha is None:
            warm = np.zeros(shape)
        else:
            warm = np.zeros(shape)
            warm[: prev_alpha.shape[0]] = prev_alpha

        alpha = warm
        best_here = None
        for level, m in enumerate(schedule.levels):
            xi_pen = _PenaltyDistance(domain, m)

            def objective(a, _xi=xi_pen):
                return flow.laplace_objective(model, _xi, x0, ControlPath(sub, a))

            def grad_fn(a, _xi=xi_pen):
                return flow.gradient(model, _xi, x0, ControlPath(sub, a), scheme=opts.scheme)

            runs = [alpha]
            if prev_alpha is None and level == 0:
                runs = _starts(shape, opts) + [alpha]
            elif level == 0:
                runs = [alpha, np.zeros(shape)]
            cell = []
            for a0 in runs:
                a, f, pg, iters, conv = _descend(objective, grad_fn, a0, dt, opts)
                result.iterations += iters
                cell.append((a, f, pg, conv))
            alpha, y, pg, conv = _best(cell)
            if not conv:
                result.converged = False
                result.warnings.append(f"optimizer stalled at horizon {sub.horizon:g}, m={m:g}")
            result.per_level.append({"horizon": sub.horizon, "m": m, "y": y})
            best_here = (alpha, y, pg)

        alpha, y_top, pg = best_here
        end = flow.integrate(model, x0, ControlPath(sub, alpha))
        dist = float(domain.signed_distance(end.x.values[-1]))
        refined = False
        value_j = y_top
        if refinable and abs(dist) <= eta:
            try:
                corrected = boundary_refine(model, domain, x0, ControlPath(sub, alpha))
                value_j = corrected.action
                alpha = np.array(corrected.slopes, copy=True)
                refined = True
            except NumericalFailure as exc:
                result.warnings.append(f"refinement failed at horizon {sub.horizon:g}: {exc}")
        elif refinable:
            result.warnings.append(
                f"horizon {sub.horizon:g}: terminal state {dist:g} from boundary (> eta={eta:g})"
            )
        result.per_horizon.append(
            {"horizon": sub.horizon, "value": value_j, "refined": refined, "distance": dist}
        )
        if value_j < result.value:
            full = np.zeros((grid.steps, model.d))
            full[:j] = alpha
            result.value = value_j
            result.control = ControlPath(grid, full)
            result.horizon = sub.horizon
            result.grad_norm = pg
        prev_alpha = alpha

    if not math.isfinite(result.value):
        raise NumericalFailure("exit rate scan produced no finite value")
    return result
