"""Deterministic controlled flow: the noise path is replaced by the integral
of a piecewise-constant control and the state follows the explicit Euler
recursion with left-endpoint coefficients,

    omega_{k+1} = omega_k + alpha_k dt
    x_{k+1}     = x_k + b_k dt + sigma_k alpha_k dt.

Also provides the Laplace objective xi(omega, x) + action and its gradient,
either by exact forward sensitivities of the discretized recursion or by
central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalFailure
from .models import CoefficientModel, TerminalFunctional
from .paths import ControlPath, DiscretePath, PathPoint, TimeGrid

__all__ = ["ControlledFlowResult", "integrate", "laplace_objective", "gradient"]


@dataclass(frozen=True)
class ControlledFlowResult:
    omega: DiscretePath
    x: DiscretePath
    action: float
    objective: float | None = None


def _split_prefix(shifted_start: PathPoint, d: int, n: int):
    vals = shifted_start.omega_hat.values
    if vals.shape[1] != d + n:
        raise ValueError(f"shifted start path has dim {vals.shape[1]}, expected {d + n}")
    return vals[:, :d], vals[:, d:]


def advance(model: CoefficientModel, times: np.ndarray, omega: np.ndarray,
            x: np.ndarray, increments: np.ndarray, start: int = 0,
            eps: float | None = None, stop: int | None = None) -> None:
    """Run the Euler recursion in place from node `start` to node `stop`
    (grid end by default).

    omega, x: (..., steps+1, dim) with nodes <= start already filled;
    increments: (..., stop-start, d) noise/control increments per step.
    eps selects the small-noise drift variant; None uses the limit drift.
    """

    steps = omega.shape[-2] - 1 if stop is None else stop
    dt = times[1] - times[0]
    if getattr(model, "constant_coefficients", False):
        # coefficients do not read the path: the whole recursion is one cumsum
        if eps is None:
            b = model.drift(start, times, omega, x)
        else:
            b = model.drift_small_noise(eps, start, times, omega, x)
        sig = model.diffusion(start, times, omega, x)
        inc = increments[..., : steps - start, :]
        cum = np.cumsum(inc, axis=-2)
        omega[..., start + 1 : steps + 1, :] = omega[..., start : start + 1, :] + cum
        span = (np.arange(1, steps - start + 1) * dt)[:, None]
        x[..., start + 1 : steps + 1, :] = (
            x[..., start : start + 1, :]
            + b[..., None, :] * span
            + np.einsum("...pq,...kq->...kp", sig, cum)
        )
        if not np.all(np.isfinite(x[..., start + 1 : steps + 1, :])):
            raise NumericalFailure("non-finite state in Euler recursion")
        return
    for k in range(start, steps):
        if eps is None:
            b = model.drift(k, times, omega, x)
        else:
            b = model.drift_small_noise(eps, k, times, omega, x)
        sig = model.diffusion(k, times, omega, x)
        db = increments[..., k - start, :]
        omega[..., k + 1, :] = omega[..., k, :] + db
        step_x = x[..., k, :] + b * dt + np.einsum("...pq,...q->...p", sig, db)
        if not np.all(np.isfinite(step_x)):
            raise NumericalFailure("non-finite state in Euler recursion", step=k)
        x[..., k + 1, :] = step_x


def _allocate(model, x0, control, shifted_start):
    """Full-horizon arrays seeded with the frozen prefix (or the origin)."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if shifted_start is None:
        grid = control.grid
        start = 0
        omega = np.zeros((grid.steps + 1, model.d))
        x = np.zeros((grid.steps + 1, model.n))
        x[0] = x0
    else:
        grid = shifted_start.omega_hat.grid
        start = shifted_start.index
        if control.grid.steps != grid.steps - start or not control.grid.compatible(grid):
            raise ValueError(
                f"control must cover [{shifted_start.t}, {grid.horizon}] on the same dt"
            )
        wp, xp = _split_prefix(shifted_start, model.d, model.n)
        omega = np.array(wp, copy=True)
        x = np.array(xp, copy=True)
        omega[start + 1 :] = 0.0
        x[start + 1 :] = 0.0
    return grid, start, omega, x


def integrate(model: CoefficientModel, x0, control: ControlPath,
              shifted_start: PathPoint | None = None,
              xi: TerminalFunctional | None = None) -> ControlledFlowResult:
    """Integrate the controlled flow; with `shifted_start` = (t, w) the
    coefficients see the concatenated path (prefix frozen from w) and the
    control runs on [t, T]. Deterministic."""

    grid, start, omega, x = _allocate(model, x0, control, shifted_start)
    times = grid.times()
    advance(model, times, omega, x, control.slopes * grid.dt, start=start)
    action = control.action
    objective = None
    if xi is not None:
        objective = float(xi(omega, x)) + action
    return ControlledFlowResult(
        omega=DiscretePath(grid, omega, origin_anchored=(start == 0)),
        x=DiscretePath(grid, x),
        action=action,
        objective=objective,
    )


def integrate_batch(model: CoefficientModel, x0, slopes: np.ndarray,
                    grid: TimeGrid, shifted_start: PathPoint | None = None):
    """Vectorized integrate for a batch of controls; slopes (B, steps, d).
    Returns raw arrays (omega (B, N+1, d), x (B, N+1, n)) on the full grid."""

    nb = slopes.shape[0]
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if shifted_start is None:
        full = grid
        start = 0
        omega = np.zeros((nb, grid.steps + 1, model.d))
        x = np.zeros((nb, grid.steps + 1, model.n))
        x[:, 0] = x0
    else:
        full = shifted_start.omega_hat.grid
        start = shifted_start.index
        wp, xp = _split_prefix(shifted_start, model.d, model.n)
        omega = np.repeat(wp[None], nb, axis=0)
        x = np.repeat(xp[None], nb, axis=0)
        omega[:, start + 1 :] = 0.0
        x[:, start + 1 :] = 0.0
    advance(model, full.times(), omega, x, slopes * full.dt, start=start)
    return omega, x


def laplace_objective(model: CoefficientModel, xi: TerminalFunctional, x0,
                      control: ControlPath,
                      shifted_start: PathPoint | None = None) -> float:
    """xi evaluated on the integrated pair plus the quadratic action."""
    return integrate(model, x0, control, shifted_start, xi=xi).objective


def _fd_gradient(model, xi, x0, control, shifted_start):
    slopes = control.slopes
    nc, d = slopes.shape
    m = nc * d
    flat = slopes.reshape(m)
    h = 1e-5 * (1.0 + np.abs(flat))
    batch = np.repeat(flat[None], 2 * m, axis=0)
    idx = np.arange(m)
    batch[2 * idx, idx] += h
    batch[2 * idx + 1, idx] -= h
    batch = batch.reshape(2 * m, nc, d)
    omega, x = integrate_batch(model, x0, batch, control.grid, shifted_start)
    dt = control.grid.dt
    action = 0.5 * np.sum(batch * batch, axis=(1, 2)) * dt
    obj = np.asarray(xi(omega, x), dtype=float) + action
    if not np.all(np.isfinite(obj)):
        raise NumericalFailure("non-finite objective in finite-difference gradient")
    g = (obj[0::2] - obj[1::2]) / (2.0 * h)
    return g.reshape(nc, d)


def _sensitivity_gradient(model, xi, x0, control, shifted_start):
    """Exact gradient of the discretized objective: propagate J = dx/dalpha
    through the Euler recursion using the model's sparse path partials."""

    grid, start, omega, x = _allocate(model, x0, control, shifted_start)
    times = grid.times()
    dt = grid.dt
    slopes = control.slopes
    nc, d = slopes.shape
    n = model.n
    m = nc * d
    steps = grid.steps
    if model.constant_coefficients:
        # dx_node/dalpha_j = sigma dt and domega_node/dalpha_j = dt, j < node-start
        advance(model, times, omega, x, slopes * dt, start=start)
        sig = np.asarray(model.diffusion(start, times, omega, x), dtype=float)
        g_omega, g_x = xi.path_gradient(omega, x)
        tail_x = np.cumsum(np.asarray(g_x, dtype=float)[::-1], axis=0)[::-1]
        tail_w = np.cumsum(np.asarray(g_omega, dtype=float)[::-1], axis=0)[::-1]
        grad = dt * slopes.copy()
        if start + 1 <= steps:
            grad += dt * (tail_x[start + 1 : start + nc + 1] @ sig)
            grad += dt * tail_w[start + 1 : start + nc + 1]
        return grad
    jx = np.zeros((steps + 1, n, m))  # jx[node] = d x_node / d alpha
    for k in range(start, steps):
        b = model.drift(k, times, omega, x)
        sig = model.diffusion(k, times, omega, x)
        db = slopes[k - start] * dt
        omega[k + 1] = omega[k] + db
        nxt = x[k] + b * dt + sig @ db
        if not np.all(np.isfinite(nxt)):
            raise NumericalFailure("non-finite state in Euler recursion", step=k)
        x[k + 1] = nxt

        jnew = np.array(jx[k], copy=True)
        bx, bw = model.drift_path_partials(k, times, omega, x)
        for node, dbx in bx:
            jnew += dt * np.asarray(dbx) @ jx[node]
        for node, dbw in bw:
            jnew += dt * np.asarray(dbw) @ _jomega(node, start, nc, d, dt, m)
        sx, sw = model.diffusion_path_partials(k, times, omega, x)
        a_k = slopes[k - start]
        for node, dsx in sx:
            jnew += dt * np.einsum("pqr,rm,q->pm", np.asarray(dsx), jx[node], a_k)
        for node, dsw in sw:
            jnew += dt * np.einsum("pqr,rm,q->pm",
                                   np.asarray(dsw), _jomega(node, start, nc, d, dt, m), a_k)
        # direct dependence on the step-k control slot
        cols = (k - start) * d + np.arange(d)
        jnew[:, cols] += sig * dt
        jx[k + 1] = jnew

    g_omega, g_x = xi.path_gradient(omega, x)
    grad = dt * slopes.reshape(m).copy()
    grad += np.einsum("kp,kpm->m", g_x, jx)
    # omega dependence is analytic: d omega_node / d alpha_j = dt for j < node - start
    gw = np.asarray(g_omega, dtype=float)
    tail = np.cumsum(gw[::-1], axis=0)[::-1]  # tail[node] = sum_{v >= node} gw[v]
    for j in range(nc):
        node = start + j + 1
        if node <= steps:
            grad[j * d : (j + 1) * d] += dt * tail[node]
    return grad.reshape(nc, d)


def _jomega(node, start, nc, d, dt, m):
    """d omega_node / d alpha as a dense (d, m) matrix (dt on active slots)."""
    j = np.zeros((d, m))
    upto = min(node - start, nc)
    for jj in range(max(upto, 0)):
        j[:, jj * d : (jj + 1) * d] += dt * np.eye(d)
    return j


def gradient(model: CoefficientModel, xi: TerminalFunctional, x0,
             control: ControlPath, scheme: str = "auto",
             shifted_start: PathPoint | None = None) -> np.ndarray:
    """Gradient of the fully discretized Laplace objective, shape (steps, d).

    central_fd uses steps h_i = 1e-5 (1 + |alpha_i|) per coordinate;
    forward_sensitivity is exact for models/payoffs with declared partials.
    """

    if scheme == "auto":
        scheme = ("forward_sensitivity"
                  if model.has_partials and xi.has_gradient else "central_fd")
    if scheme == "forward_sensitivity":
        if not (model.has_partials and xi.has_gradient):
            raise ValueError("model or payoff lacks closed-form partials; use central_fd")
        g = _sensitivity_gradient(model, xi, x0, control, shifted_start)
    elif scheme == "central_fd":
        g = _fd_gradient(model, xi, x0, control, shifted_start)
    else:
        raise ValueError(f"unknown gradient scheme {scheme!r}")
    if not np.all(np.isfinite(g)):
        raise NumericalFailure("non-finite gradient")
    return g
