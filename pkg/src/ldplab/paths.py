"""Discrete paths on uniform grids: canonical-space paths, piecewise-constant
controls, sup norms, concatenation and the path-space pseudo-distance.

All objects are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TimeGrid",
    "DiscretePath",
    "ControlPath",
    "PathPoint",
    "sup_norm_to",
    "concat",
    "pseudo_distance",
    "lipschitz_constant",
    "freeze_after",
    "path_to_csv",
    "path_from_csv",
]

# absolute tolerance for "is this time a grid node", relative to dt
_NODE_ATOL = 1e-9


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, horizon] with `steps` intervals (steps+1 nodes)."""

    horizon: float
    steps: int

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not (self.horizon > 0.0):
            raise ValueError(f"horizon must be > 0, got {self.horizon}")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.steps + 1)

    def index_of(self, t: float) -> int:
        """Node index of time t; raises if t is off-grid or outside [0, T]."""
        if t < -_NODE_ATOL * self.dt or t > self.horizon + _NODE_ATOL * self.dt:
            raise ValueError(f"time {t} outside [0, {self.horizon}]")
        i = int(round(t / self.dt))
        if abs(t - i * self.dt) > _NODE_ATOL * self.dt:
            raise ValueError(f"time {t} is not a node of the grid (dt={self.dt})")
        return min(max(i, 0), self.steps)

    def prefix(self, steps: int) -> "TimeGrid":
        """Sub-grid covering the first `steps` intervals with the same dt."""
        if not 1 <= steps <= self.steps:
            raise ValueError(f"prefix steps {steps} not in [1, {self.steps}]")
        return TimeGrid(steps * self.dt, steps)

    def compatible(self, other: "TimeGrid") -> bool:
        return abs(self.dt - other.dt) <= _NODE_ATOL * self.dt


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class DiscretePath:
    """Path sampled at the nodes of `grid`; values has shape (steps+1, dim)."""

    grid: TimeGrid
    values: np.ndarray
    origin_anchored: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] != self.grid.steps + 1:
            raise ValueError(
                f"values has {v.shape[0]} rows, grid has {self.grid.steps + 1} nodes"
            )
        if self.origin_anchored and not np.all(v[0] == 0.0):
            raise ValueError("origin-anchored path must start at 0")
        object.__setattr__(self, "values", _readonly(v))

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def value_at(self, t: float) -> np.ndarray:
        return self.values[self.grid.index_of(t)]


@dataclass(frozen=True)
class ControlPath:
    """Piecewise-constant control: `slopes` is constant on each [t_i, t_{i+1})."""

    grid: TimeGrid
    slopes: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.slopes, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        if s.shape[0] != self.grid.steps:
            raise ValueError(
                f"slopes has {s.shape[0]} rows, grid has {self.grid.steps} intervals"
            )
        if not np.all(np.isfinite(s)):
            raise ValueError("control slopes must be finite")
        object.__setattr__(self, "slopes", _readonly(s))

    @property
    def dim(self) -> int:
        return self.slopes.shape[1]

    @property
    def action(self) -> float:
        """Quadratic action 0.5 * sum_i |slopes_i|^2 * dt."""
        return 0.5 * float(np.sum(self.slopes * self.slopes)) * self.grid.dt

    def integrated(self, origin_anchored: bool = True) -> DiscretePath:
        """The piecewise-linear path t -> integral of the control (exact)."""
        vals = np.zeros((self.grid.steps + 1, self.dim))
        np.cumsum(self.slopes * self.grid.dt, axis=0, out=vals[1:])
        return DiscretePath(self.grid, vals, origin_anchored=origin_anchored)


@dataclass(frozen=True)
class PathPoint:
    """A point (t, omega_hat) of path space; content beyond t is ignored by
    all consumers (non-anticipativity)."""

    t: float
    omega_hat: DiscretePath
    index: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "index", self.omega_hat.grid.index_of(self.t))


def sup_norm_to(p: DiscretePath, t: float) -> float:
    """max over nodes t_i <= t of the Euclidean norm of p(t_i)."""
    i = p.grid.index_of(t)
    return float(np.max(np.linalg.norm(p.values[: i + 1], axis=1)))


def freeze_after(p: DiscretePath, t: float) -> DiscretePath:
    """Path equal to p up to t and constant (= p(t)) afterwards."""
    i = p.grid.index_of(t)
    vals = np.array(p.values, copy=True)
    vals[i + 1 :] = vals[i]
    return DiscretePath(p.grid, vals, origin_anchored=p.origin_anchored)


def concat(base: DiscretePath, t: float, tail: DiscretePath) -> DiscretePath:
    """Concatenation: equals base on [0, t] and base(t) + tail(s - t) after.

    `tail` must be origin-anchored on a grid with the same dt covering
    [0, T - t]; the result is continuous at t by construction.
    """
    i = base.grid.index_of(t)
    rest = base.grid.steps - i
    if rest > 0:
        if not base.grid.compatible(tail.grid):
            raise ValueError("base and tail grids have different dt")
        if tail.grid.steps < rest:
            raise ValueError(
                f"tail covers {tail.grid.steps} steps, {rest} needed after t={t}"
            )
        if not np.all(tail.values[0] == 0.0):
            raise ValueError("tail must be origin-anchored")
        if tail.dim != base.dim:
            raise ValueError("dimension mismatch between base and tail")
    vals = np.array(base.values, copy=True)
    if rest > 0:
        vals[i + 1 :] = vals[i] + tail.values[1 : rest + 1]
    return DiscretePath(base.grid, vals, origin_anchored=base.origin_anchored)


def pseudo_distance(a: PathPoint, b: PathPoint) -> float:
    """|t - t'| + sup-norm distance of the frozen paths (whole horizon)."""
    if a.omega_hat.grid != b.omega_hat.grid:
        raise ValueError("path points must share a grid")
    fa = freeze_after(a.omega_hat, a.t).values
    fb = freeze_after(b.omega_hat, b.t).values
    gap = float(np.max(np.linalg.norm(fa - fb, axis=1)))
    return abs(a.t - b.t) + gap


def lipschitz_constant(p: DiscretePath) -> float:
    """max_i |p(t_{i+1}) - p(t_i)| / dt; p is K-Lipschitz iff this is <= K."""
    inc = np.diff(p.values, axis=0)
    return float(np.max(np.linalg.norm(inc, axis=1))) / p.grid.dt


def path_to_csv(p: DiscretePath, fp) -> None:
    """Write `t,c0,...,c{dim-1}` rows with >= 15 significant digits."""
    close = False
    if isinstance(fp, (str, bytes)):
        fp = open(fp, "w", newline="")
        close = True
    try:
        fp.write("t," + ",".join(f"c{j}" for j in range(p.dim)) + "\n")
        for t, row in zip(p.grid.times(), p.values):
            fp.write(format(t, ".17g") + "," + ",".join(format(v, ".17g") for v in row) + "\n")
    finally:
        if close:
            fp.close()


def path_from_csv(fp, origin_anchored: bool = False) -> DiscretePath:
    close = False
    if isinstance(fp, (str, bytes)):
        fp = open(fp, "r", newline="")
        close = True
    try:
        header = fp.readline().strip().split(",")
        if not header or header[0] != "t":
            raise ValueError("path CSV must start with a 't' column")
        rows = [[float(x) for x in line.strip().split(",")] for line in fp if line.strip()]
    finally:
        if close:
            fp.close()
    data = np.asarray(rows)
    if data.shape[0] < 2:
        raise ValueError("path CSV needs at least two nodes")
    t = data[:, 0]
    grid = TimeGrid(float(t[-1]), data.shape[0] - 1)
    if not np.allclose(t, grid.times(), atol=1e-12 * max(1.0, t[-1])):
        raise ValueError("path CSV nodes are not a uniform grid starting at 0")
    return DiscretePath(grid, data[:, 1:], origin_anchored=origin_anchored)


def control_to_csv(c: ControlPath, fp) -> None:
    """Write `t,a0,...` rows, one per interval left endpoint."""
    close = False
    if isinstance(fp, (str, bytes)):
        fp = open(fp, "w", newline="")
        close = True
    try:
        fp.write("t," + ",".join(f"a{j}" for j in range(c.dim)) + "\n")
        for t, row in zip(c.grid.times()[:-1], c.slopes):
            fp.write(format(t, ".17g") + "," + ",".join(format(v, ".17g") for v in row) + "\n")
    finally:
        if close:
            fp.close()


def control_from_csv(fp, horizon: float | None = None) -> ControlPath:
    close = False
    if isinstance(fp, (str, bytes)):
        fp = open(fp, "r", newline="")
        close = True
    try:
        header = fp.readline().strip().split(",")
        if not header or header[0] != "t":
            raise ValueError("control CSV must start with a 't' column")
        rows = [[float(x) for x in line.strip().split(",")] for line in fp if line.strip()]
    finally:
        if close:
            fp.close()
    data = np.asarray(rows)
    n = data.shape[0]
    if n < 1:
        raise ValueError("control CSV needs at least one interval")
    dt = data[1, 0] - data[0, 0] if n > 1 else (horizon if horizon else 1.0)
    grid = TimeGrid(dt * n, n)
    return ControlPath(grid, data[:, 1:])
