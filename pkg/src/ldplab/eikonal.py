"""Path-dependent Eikonal machinery: the truncated Hamiltonian in closed
form, the dynamic value function of the shifted control problem, dynamic
programming and clamping-level diagnostics, and numerical residuals of
-du/dt - F(., du/domega, du/dx) = 0 along Lipschitz path extensions.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import flow
from .errors import NumericalFailure
from .models import CoefficientModel, TerminalFunctional
from .paths import ControlPath, DiscretePath, PathPoint
from .rate import RateOptions, RateResult, minimize_laplace

__all__ = [
    "Hamiltonian",
    "ValueFunctionProbe",
    "hamiltonian_eval",
    "hamiltonian_limit_check",
    "value_function",
    "dp_residual",
    "clamp_level_search",
    "viscosity_residual",
    "default_probe_slopes",
]


@dataclass(frozen=True)
class Hamiltonian:
    model: CoefficientModel
    k0: float

    def __post_init__(self):
        if not self.k0 > 0:
            raise ValueError("truncation level must be > 0")


@dataclass
class ValueFunctionProbe:
    point: PathPoint
    value: float
    du_dt: float
    du_domega: np.ndarray
    du_dx: np.ndarray
    residual: float
    misfit: float
    probe_slope_set: list
    k0: float
    lipschitz_class: float


def _coeffs_at(model: CoefficientModel, theta: PathPoint):
    vals = theta.omega_hat.values
    omega = vals[:, : model.d]
    x = vals[:, model.d :]
    times = theta.omega_hat.grid.times()
    k = theta.index
    b = model.drift(k, times, omega, x)
    sig = model.diffusion(k, times, omega, x)
    return np.asarray(b, dtype=float), np.asarray(sig, dtype=float)


def hamiltonian_eval(h: Hamiltonian, theta: PathPoint, p_omega, p_x):
    """Closed form of b.p_x + inf_{|a|<=K0} {|a|^2/2 + a.(p_omega + sigma^T p_x)}.

    Returns (value, a_star) with a_star = -q clipped to norm K0,
    q = p_omega + sigma^T p_x.
    """

    p_omega = np.atleast_1d(np.asarray(p_omega, dtype=float))
    p_x = np.atleast_1d(np.asarray(p_x, dtype=float))
    b, sig = _coeffs_at(h.model, theta)
    q = p_omega + sig.T @ p_x
    qn = float(np.linalg.norm(q))
    lin = float(b @ p_x)
    if qn <= h.k0:
        value = lin - 0.5 * qn * qn
        a_star = -q
    else:
        value = lin + 0.5 * h.k0**2 - h.k0 * qn
        a_star = -q * (h.k0 / qn)
    return value, a_star


def hamiltonian_limit_check(model: CoefficientModel, theta: PathPoint,
                            p_omega, p_x, k0_grid) -> dict:
    """F_{K0} against the unclamped limit b.p_x - |q|^2/2: nonincreasing in
    K0 below the threshold |q| and exactly equal from K0 >= |q| on."""

    p_omega = np.atleast_1d(np.asarray(p_omega, dtype=float))
    p_x = np.atleast_1d(np.asarray(p_x, dtype=float))
    b, sig = _coeffs_at(model, theta)
    q = p_omega + sig.T @ p_x
    qn = float(np.linalg.norm(q))
    unclamped = float(b @ p_x) - 0.5 * qn * qn
    rows = []
    prev = math.inf
    monotone = True
    equal_from_threshold = True
    for k0 in k0_grid:
        val, _ = hamiltonian_eval(Hamiltonian(model, k0), theta, p_omega, p_x)
        if val > prev + 1e-15:
            monotone = False
        if k0 >= qn and val != unclamped:
            equal_from_threshold = False
        rows.append({"k0": float(k0), "value": val, "unclamped": unclamped})
        prev = val
    return {"threshold": qn, "rows": rows, "monotone_nonincreasing": monotone,
            "equal_from_threshold": equal_from_threshold}


def value_function(model: CoefficientModel, xi: TerminalFunctional,
                   theta: PathPoint, opts: RateOptions | None = None) -> RateResult:
    """u(t, w) = inf over controls on [t, T] of xi(concat flow) + action;
    at t = T this is xi evaluated on the frozen path, exactly."""

    grid = theta.omega_hat.grid
    if theta.index == grid.steps:
        vals = theta.omega_hat.values
        u = float(xi(vals[:, : model.d], vals[:, model.d :]))
        zero = ControlPath(grid.prefix(1), np.zeros((1, model.d)))
        return RateResult(value=u, control=zero, grad_norm=0.0, iterations=0,
                          restarts_used=0, converged=True)
    x_here = theta.omega_hat.values[theta.index, model.d :]
    return minimize_laplace(model, xi, x_here, grid, opts, shifted_start=theta)


def _extend_linear(theta: PathPoint, slope: np.ndarray, steps: int) -> PathPoint:
    """Constant-slope extension of the frozen path over `steps` grid steps."""
    grid = theta.omega_hat.grid
    i0 = theta.index
    if i0 + steps > grid.steps:
        raise ValueError("extension leaves the grid")
    vals = np.array(theta.omega_hat.values, copy=True)
    vals[i0 + 1 :] = vals[i0]
    ramp = np.arange(1, steps + 1)[:, None] * grid.dt
    vals[i0 + 1 : i0 + steps + 1] = vals[i0] + ramp * np.asarray(slope, dtype=float)
    vals[i0 + steps + 1 :] = vals[i0 + steps]
    t_new = grid.times()[i0 + steps]
    return PathPoint(t_new, DiscretePath(grid, vals))


def dp_residual(model: CoefficientModel, xi: TerminalFunctional,
                theta: PathPoint, s: float, control_grid=(-2.0, -1.0, 0.0, 1.0, 2.0),
                opts: RateOptions | None = None, max_combos: int = 1_000_000) -> float:
    """|u(t,w) - min over first-leg controls of (leg action + u at the
    reached point)|: brute force on the enumerated first leg, optimizer for
    the continuation."""

    grid = theta.omega_hat.grid
    i0 = theta.index
    js = grid.index_of(s)
    if js < i0:
        raise ValueError("need s >= t")
    if js == i0:
        return 0.0
    legs = js - i0
    levels = [float(v) for v in control_grid]
    combos = len(levels) ** (legs * model.d)
    if combos > max_combos:
        raise ValueError(f"first-leg enumeration too large ({combos} > {max_combos})")

    u_here = value_function(model, xi, theta, opts).value
    times = grid.times()
    dt = grid.dt
    best = math.inf
    for combo in itertools.product(levels, repeat=legs * model.d):
        leg = np.asarray(combo, dtype=float).reshape(legs, model.d)
        # advance the concatenated flow over [t, s] under the first leg
        omega = np.array(theta.omega_hat.values[:, : model.d], copy=True)
        x = np.array(theta.omega_hat.values[:, model.d :], copy=True)
        omega[i0 + 1 :] = 0.0
        x[i0 + 1 :] = 0.0
        try:
            flow.advance(model, times, omega[None], x[None],
                         (leg * dt)[None], start=i0, stop=js)
        except NumericalFailure:
            continue
        omega[js + 1 :] = omega[js]
        x[js + 1 :] = x[js]
        reached = PathPoint(s, DiscretePath(grid, np.concatenate([omega, x], axis=1)))
        cost = 0.5 * float(np.sum(leg * leg)) * dt
        cont = value_function(model, xi, reached, opts).value
        best = min(best, cost + cont)
    return abs(u_here - best)


def clamp_level_search(model: CoefficientModel, xi: TerminalFunctional,
                       theta: PathPoint, k_grid,
                       opts: RateOptions | None = None,
                       plateau_tol: float = 1e-9):
    """Smallest K in the grid whose clamped value matches the value at 2K
    within plateau_tol; errors (reporting the largest observed control) when
    no plateau exists inside the grid."""

    opts = opts or RateOptions()
    k_grid = [float(k) for k in k_grid]
    if any(b <= a for a, b in zip(k_grid, k_grid[1:])):
        raise ValueError("k_grid must be increasing")
    values = {}
    sup_alpha = 0.0

    def value_at(k):
        if k not in values:
            o = RateOptions(restarts=opts.restarts, max_iter=opts.max_iter,
                            tol=opts.tol, clamp=k, seed=opts.seed, scheme=opts.scheme)
            res = value_function(model, xi, theta, o)
            values[k] = res.value
            nonlocal sup_alpha
            if res.control.slopes.size:
                sup_alpha = max(sup_alpha, float(np.max(np.abs(res.control.slopes))))
        return values[k]

    table = []
    for k in k_grid:
        v = value_at(k)
        v2 = value_at(2.0 * k)
        table.append({"k": k, "value": v, "value_2k": v2})
        if abs(v - v2) < plateau_tol:
            return k, table
    raise NumericalFailure(
        f"no clamp plateau within the grid (max |alpha*| observed {sup_alpha:g})")


def default_probe_slopes(d: int, n: int) -> list:
    """Flat extension plus +/- unit slopes along each coordinate of the
    combined path space (spans the expansion and exposes the least-squares
    misfit)."""
    dim = d + n
    slopes = [np.zeros(dim)]
    for i in range(dim):
        e = np.zeros(dim)
        e[i] = 1.0
        slopes.append(e.copy())
        slopes.append(-e)
    return slopes


def viscosity_residual(model: CoefficientModel, xi: TerminalFunctional,
                       theta: PathPoint, h_steps: int = 1,
                       probe_slopes=None, k0: float | None = None,
                       opts: RateOptions | None = None,
                       k_grid=(0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0)) -> ValueFunctionProbe:
    """Probe u along constant-slope extensions over [t, t+h], solve the
    first-order expansion for (du/dt, du/domega, du/dx) by least squares and
    report the Eikonal residual -du/dt - F_{K0} plus the expansion misfit."""

    grid = theta.omega_hat.grid
    if theta.index + 2 * h_steps > grid.steps:
        raise ValueError("probe point too close to the horizon (need t <= T - 2h)")
    if probe_slopes is None:
        probe_slopes = default_probe_slopes(model.d, model.n)
    dim = model.d + model.n
    if len(probe_slopes) < dim + 1:
        raise ValueError(f"need at least {dim + 1} probe slopes")

    if k0 is None:
        k0, _ = clamp_level_search(model, xi, theta, k_grid, opts)

    h = h_steps * grid.dt
    u0 = value_function(model, xi, theta, opts).value
    rows = []
    rhs = []
    for slope in probe_slopes:
        slope = np.asarray(slope, dtype=float)
        shifted = _extend_linear(theta, slope, h_steps)
        u1 = value_function(model, xi, shifted, opts).value
        rows.append(np.concatenate([[h], slope * h]))
        rhs.append(u1 - u0)
    a = np.asarray(rows)
    b = np.asarray(rhs)
    if np.linalg.matrix_rank(a) < dim + 1:
        raise NumericalFailure("rank-deficient probe matrix: slopes do not span")
    sol, *_ = np.linalg.lstsq(a, b, rcond=None)
    fit = a @ sol
    misfit = float(np.sqrt(np.mean((fit - b) ** 2)))
    du_dt = float(sol[0])
    du_domega = sol[1 : 1 + model.d]
    du_dx = sol[1 + model.d :]
    f_val, _ = hamiltonian_eval(Hamiltonian(model, k0), theta, du_domega, du_dx)
    residual = -du_dt - f_val
    lipschitz_class = max(1.0, k0) * (1.0 + model.coefficient_bound)
    return ValueFunctionProbe(
        point=theta, value=u0, du_dt=du_dt, du_domega=du_domega, du_dx=du_dx,
        residual=residual, misfit=misfit,
        probe_slope_set=[np.asarray(s, dtype=float) for s in probe_slopes],
        k0=k0, lipschitz_class=lipschitz_class,
    )
