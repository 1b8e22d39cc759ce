"""Model zoo: non-anticipative drift/diffusion functionals, terminal payoffs
and exit domains, plus sampling-based verification of their declared metadata
(non-anticipativity, Lipschitz constants, ellipticity).

Evaluation convention: coefficient functionals receive the node index k, the
node times, and full path arrays of shape (..., steps+1, dim); they may read
nodes 0..k only. Entries beyond k are unspecified scratch (the integrators
fill them progressively) and the non-anticipativity checker perturbs them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .paths import TimeGrid

__all__ = [
    "CoefficientModel",
    "ConstantModel",
    "LocalVol",
    "RunningMaxVol",
    "DelayVol",
    "LogPriceModel",
    "TerminalFunctional",
    "ConstantPayoff",
    "ClippedLinear",
    "RunningMaxPayoff",
    "ClippedCall",
    "Domain",
    "Interval",
    "Ball",
    "Box",
    "check_nonanticipative",
    "estimate_lipschitz",
    "check_ellipticity",
]


class CoefficientModel:
    """Drift b_t(w, x) in R^n and diffusion sigma_t(w, x) in R^{n x d}.

    Subclasses set the dimensions and declared constants and implement
    `drift` / `diffusion`; `drift_small_noise` defaults to the noise-free
    drift. Models with closed-form path derivatives also implement the
    *_path_partials hooks (single path, sparse in the path nodes) which the
    exact forward-sensitivity gradient uses.
    """

    d: int = 1
    n: int = 1
    lipschitz: float = 0.0
    bound_b: float = 0.0
    bound_sigma: float = 0.0
    ellipticity: float = 0.0
    has_partials: bool = False
    constant_scalar_sigma: float | None = None  # set when sigma is a scalar constant
    constant_coefficients: bool = False  # b, sigma read neither time nor path
    claims_time_indifference: bool = False

    def drift(self, k, times, omega, x):
        raise NotImplementedError

    def diffusion(self, k, times, omega, x):
        raise NotImplementedError

    def drift_small_noise(self, eps, k, times, omega, x):
        return self.drift(k, times, omega, x)

    # sparse path derivatives at step k for a single (steps+1, dim) path pair;
    # return ([(node, d_by_dx)], [(node, d_by_domega)]) with
    # d_by_dx[p, r] = d b[p] / d x[node, r]           for drift
    # d_by_dx[p, q, r] = d sigma[p, q] / d x[node, r] for diffusion
    def drift_path_partials(self, k, times, omega, x):
        return [], []

    def diffusion_path_partials(self, k, times, omega, x):
        return [], []

    @property
    def coefficient_bound(self) -> float:
        return max(self.bound_b, self.bound_sigma)


@dataclass
class ConstantModel(CoefficientModel):
    """b and sigma constant in both time and path."""

    b: np.ndarray = None
    sigma: np.ndarray = None

    def __post_init__(self):
        self.b = np.atleast_1d(np.asarray(self.b, dtype=float))
        sig = np.asarray(self.sigma, dtype=float)
        if sig.ndim == 0:
            sig = sig[None, None]
        elif sig.ndim == 1:
            sig = np.diag(sig)
        self.sigma = sig
        self.n = self.b.shape[0]
        self.d = sig.shape[1]
        if sig.shape[0] != self.n:
            raise ValueError("sigma rows must match drift dimension")
        self.lipschitz = 0.0
        self.bound_b = float(np.linalg.norm(self.b))
        self.bound_sigma = float(np.linalg.norm(self.sigma, 2))
        sv = np.linalg.svd(self.sigma, compute_uv=False)
        self.ellipticity = float(sv.min() ** 2) if self.n == self.d else 0.0
        self.has_partials = True
        self.constant_coefficients = True
        if self.n == 1 and self.d == 1:
            self.constant_scalar_sigma = float(self.sigma[0, 0])
        self.claims_time_indifference = True

    def drift(self, k, times, omega, x):
        shape = x.shape[:-2] + (self.n,)
        return np.broadcast_to(self.b, shape)

    def diffusion(self, k, times, omega, x):
        shape = x.shape[:-2] + (self.n, self.d)
        return np.broadcast_to(self.sigma, shape)


class _TanhVol(CoefficientModel):
    """Scalar driftless diffusion sigma = base + amp * tanh(feature(x)).

    `feature` is a 1-Lipschitz non-anticipative scalar functional of the
    state path, so the declared Lipschitz constant is `amp`.
    """

    def __init__(self, base: float, amp: float):
        if not 0.0 <= amp < base:
            raise ValueError("need 0 <= amp < base for a positive volatility")
        self.base = float(base)
        self.amp = float(amp)
        self.d = self.n = 1
        self.lipschitz = self.amp
        self.bound_b = 0.0
        self.bound_sigma = self.base + self.amp
        self.sigma_low = self.base - self.amp
        self.sigma_high = self.base + self.amp
        self.ellipticity = self.sigma_low**2
        self.has_partials = True

    def _feature(self, k, times, x):
        raise NotImplementedError

    def _feature_nodes(self, k, times, x):
        """[(node, weight)] decomposition of d feature / d x[node, 0]."""
        raise NotImplementedError

    def drift(self, k, times, omega, x):
        return np.zeros(x.shape[:-2] + (1,))

    def diffusion(self, k, times, omega, x):
        f = self._feature(k, times, x)
        return (self.base + self.amp * np.tanh(f))[..., None, None]

    def diffusion_path_partials(self, k, times, omega, x):
        f = self._feature(k, times, x[None])[0]
        slope = self.amp / math.cosh(f) ** 2
        deps = [
            (node, np.array(slope * w).reshape(1, 1, 1))
            for node, w in self._feature_nodes(k, times, x)
        ]
        return deps, []


class LocalVol(_TanhVol):
    """sigma depends on the current state value x_t."""

    claims_time_indifference = True

    def _feature(self, k, times, x):
        return x[..., k, 0]

    def _feature_nodes(self, k, times, x):
        return [(k, 1.0)]


class RunningMaxVol(_TanhVol):
    """sigma depends on the running maximum max_{s<=t} x_s (path dependent)."""

    claims_time_indifference = True

    def _feature(self, k, times, x):
        return np.max(x[..., : k + 1, 0], axis=-1)

    def _feature_nodes(self, k, times, x):
        return [(int(np.argmax(x[: k + 1, 0])), 1.0)]


class DelayVol(_TanhVol):
    """sigma reads the lagged state x_{(t - delay) v 0} (linear interpolation
    between nodes when the lagged time is off-grid)."""

    def __init__(self, base: float, amp: float, delay: float):
        super().__init__(base, amp)
        if delay < 0:
            raise ValueError("delay must be >= 0")
        self.delay = float(delay)

    def _lag_weights(self, k, times):
        tl = max(times[k] - self.delay, 0.0)
        j = int(np.searchsorted(times, tl, side="right")) - 1
        j = min(max(j, 0), k)
        if j == k or times[j] >= tl:
            return [(j, 1.0)]
        dt = times[j + 1] - times[j]
        w = (tl - times[j]) / dt
        return [(j, 1.0 - w), (j + 1, w)]

    def _feature(self, k, times, x):
        pairs = self._lag_weights(k, times)
        return sum(w * x[..., j, 0] for j, w in pairs)

    def _feature_nodes(self, k, times, x):
        return self._lag_weights(k, times)


class LogPriceModel(CoefficientModel):
    """Log-price under the small-noise measure: the drift is the parametric
    martingale correction -(eps/2) sigma^2 and vanishes in the limit flow."""

    def __init__(self, vol: CoefficientModel):
        if vol.n != 1 or vol.d != 1:
            raise ValueError("log-price model is scalar")
        self.vol = vol
        self.d = self.n = 1
        self.lipschitz = vol.lipschitz
        self.bound_b = 0.0  # limit drift is zero; the eps-drift is bounded by sigma_high^2/2
        self.bound_sigma = vol.bound_sigma
        self.sigma_low = getattr(vol, "sigma_low", None)
        self.sigma_high = getattr(vol, "sigma_high", None)
        self.ellipticity = vol.ellipticity
        self.has_partials = vol.has_partials
        self.constant_scalar_sigma = vol.constant_scalar_sigma
        self.constant_coefficients = vol.constant_coefficients
        self.claims_time_indifference = vol.claims_time_indifference

    def drift(self, k, times, omega, x):
        return np.zeros(x.shape[:-2] + (1,))

    def diffusion(self, k, times, omega, x):
        return self.vol.diffusion(k, times, omega, x)

    def drift_small_noise(self, eps, k, times, omega, x):
        sig = self.vol.diffusion(k, times, omega, x)[..., 0, 0]
        return (-0.5 * eps * sig * sig)[..., None]

    def diffusion_path_partials(self, k, times, omega, x):
        return self.vol.diffusion_path_partials(k, times, omega, x)


class TerminalFunctional:
    """Payoff xi(omega, x) on full-horizon path pairs, with declared bound
    and Lipschitz constant. Batched: arrays (..., steps+1, dim) -> (...,)."""

    bound: float = math.inf
    lipschitz: float = math.inf
    has_gradient: bool = False

    def __call__(self, omega, x):
        raise NotImplementedError

    def path_gradient(self, omega, x):
        """Single path pair -> (g_omega (steps+1, d), g_x (steps+1, n))."""
        raise NotImplementedError


class ConstantPayoff(TerminalFunctional):
    has_gradient = True

    def __init__(self, c: float):
        self.c = float(c)
        self.bound = abs(self.c)
        self.lipschitz = 0.0

    def __call__(self, omega, x):
        return np.full(x.shape[:-2], self.c)

    def path_gradient(self, omega, x):
        return np.zeros_like(omega), np.zeros_like(x)


class ClippedLinear(TerminalFunctional):
    """slope . x_T clipped to [-cap, cap]; cap=inf gives the plain linear
    payoff used by the exact Gaussian identity checks."""

    has_gradient = True

    def __init__(self, slope, cap: float = 10.0):
        self.slope = np.atleast_1d(np.asarray(slope, dtype=float))
        self.cap = float(cap)
        self.bound = self.cap
        self.lipschitz = float(np.linalg.norm(self.slope))

    def __call__(self, omega, x):
        inner = x[..., -1, :] @ self.slope
        return np.clip(inner, -self.cap, self.cap)

    def path_gradient(self, omega, x):
        g_x = np.zeros_like(x)
        inner = float(x[-1, :] @ self.slope)
        if abs(inner) < self.cap:
            g_x[-1, :] = self.slope
        return np.zeros_like(omega), g_x


class RunningMaxPayoff(TerminalFunctional):
    """slope * max_{t<=T} x_t (scalar state), clipped to [-cap, cap]."""

    has_gradient = True

    def __init__(self, slope: float = 1.0, cap: float = 10.0):
        self.slope = float(slope)
        self.cap = float(cap)
        self.bound = self.cap
        self.lipschitz = abs(self.slope)

    def __call__(self, omega, x):
        m = np.max(x[..., :, 0], axis=-1)
        return np.clip(self.slope * m, -self.cap, self.cap)

    def path_gradient(self, omega, x):
        g_x = np.zeros_like(x)
        j = int(np.argmax(x[:, 0]))
        if abs(self.slope * x[j, 0]) < self.cap:
            g_x[j, 0] = self.slope
        return np.zeros_like(omega), g_x


class ClippedCall(TerminalFunctional):
    """(e^{x_T} - e^k)^+ clipped at `cap` (default e^{10(1+|k|)}), scalar."""

    has_gradient = True

    def __init__(self, k: float, cap: float | None = None):
        self.k = float(k)
        self.cap = float(cap) if cap is not None else math.exp(10.0 * (1.0 + abs(self.k)))
        self.bound = self.cap
        self.lipschitz = self.cap + math.exp(self.k)

    def __call__(self, omega, x):
        xt = x[..., -1, 0]
        return np.minimum(np.maximum(np.exp(xt) - math.exp(self.k), 0.0), self.cap)

    def path_gradient(self, omega, x):
        g_x = np.zeros_like(x)
        xt = float(x[-1, 0])
        payoff = math.exp(xt) - math.exp(self.k)
        if 0.0 < payoff < self.cap:
            g_x[-1, 0] = math.exp(xt)
        return np.zeros_like(omega), g_x


class Domain:
    """Bounded open set O with signed distance (negative inside), nearest
    boundary projection and an a.e. gradient of the signed distance."""

    n: int = 1
    radius: float = math.inf

    def signed_distance(self, x):
        raise NotImplementedError

    def inside(self, x):
        return self.signed_distance(x) < 0.0

    def boundary_project(self, x):
        raise NotImplementedError

    def sd_gradient(self, x):
        """Unit gradient of the signed distance at a single point x."""
        raise NotImplementedError


class Interval(Domain):
    def __init__(self, lower: float, upper: float):
        if not lower < upper:
            raise ValueError("need lower < upper")
        self.lower = float(lower)
        self.upper = float(upper)
        self.n = 1
        self.radius = max(abs(self.lower), abs(self.upper))

    def signed_distance(self, x):
        x0 = np.asarray(x, dtype=float)[..., 0]
        return np.maximum(self.lower - x0, x0 - self.upper)

    def boundary_project(self, x):
        out = np.array(np.asarray(x, dtype=float), copy=True)
        x0 = out[..., 0]
        # tie at the midpoint goes to the upper boundary
        out[..., 0] = np.where(x0 - self.lower < self.upper - x0, self.lower, self.upper)
        return out

    def sd_gradient(self, x):
        x0 = float(np.asarray(x).reshape(-1)[0])
        return np.array([-1.0]) if (self.lower - x0) > (x0 - self.upper) else np.array([1.0])


class Ball(Domain):
    def __init__(self, center, radius: float):
        self.center = np.atleast_1d(np.asarray(center, dtype=float))
        if not radius > 0:
            raise ValueError("radius must be > 0")
        self.r = float(radius)
        self.n = self.center.shape[0]
        self.radius = float(np.linalg.norm(self.center)) + self.r

    def signed_distance(self, x):
        x = np.asarray(x, dtype=float)
        return np.linalg.norm(x - self.center, axis=-1) - self.r

    def _direction(self, x):
        v = np.asarray(x, dtype=float) - self.center
        nrm = np.linalg.norm(v, axis=-1, keepdims=True)
        e = np.zeros_like(v)
        e[..., 0] = 1.0
        return np.where(nrm > 0, v / np.where(nrm > 0, nrm, 1.0), e)

    def boundary_project(self, x):
        direction = self._direction(x)
        proj = self.center + self.r * direction
        # rounding must not leave the projection strictly inside
        for bump in (1e-16, 4e-16, 1.6e-15, 6.4e-15):
            sd = self.signed_distance(proj)
            if np.all(sd >= 0.0):
                break
            proj = np.where((sd < 0.0)[..., None],
                            self.center + self.r * (1.0 + bump) * direction, proj)
        return proj

    def sd_gradient(self, x):
        return self._direction(np.asarray(x, dtype=float))


class Box(Domain):
    def __init__(self, lower, upper):
        self.lower = np.atleast_1d(np.asarray(lower, dtype=float))
        self.upper = np.atleast_1d(np.asarray(upper, dtype=float))
        if not np.all(self.lower < self.upper):
            raise ValueError("need lower < upper componentwise")
        self.n = self.lower.shape[0]
        self.radius = float(np.max(np.abs(np.stack([self.lower, self.upper]))))

    def signed_distance(self, x):
        x = np.asarray(x, dtype=float)
        q = np.maximum(self.lower - x, x - self.upper)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inner = np.max(q, axis=-1)
        return np.where(inner > 0.0, outside, inner)

    def boundary_project(self, x):
        x = np.asarray(x, dtype=float)
        out = np.array(np.broadcast_to(x, x.shape), copy=True)
        q = np.maximum(self.lower - x, x - self.upper)
        if out.ndim == 1:
            out = out[None]
            q = q[None]
            squeeze = True
        else:
            squeeze = False
        for row, qr in zip(out, q):
            if np.max(qr) > 0.0:  # outside: clamp into the box
                np.clip(row, self.lower, self.upper, out=row)
            else:  # inside: push the deepest coordinate to its nearer face
                i = int(np.argmax(qr))
                lo_gap = row[i] - self.lower[i]
                hi_gap = self.upper[i] - row[i]
                row[i] = self.lower[i] if lo_gap < hi_gap else self.upper[i]
        return out[0] if squeeze else out

    def sd_gradient(self, x):
        x = np.asarray(x, dtype=float).reshape(-1)
        q = np.maximum(self.lower - x, x - self.upper)
        g = np.zeros_like(x)
        if np.max(q) > 0.0:
            v = np.maximum(q, 0.0) * np.where(x > self.upper, 1.0, -1.0)
            v[(x >= self.lower) & (x <= self.upper)] = 0.0
            return v / np.linalg.norm(v)
        i = int(np.argmax(q))
        g[i] = -1.0 if (self.lower[i] - x[i]) > (x[i] - self.upper[i]) else 1.0
        return g


@dataclass
class NonAnticipativityReport:
    trials: int
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def _random_path_pair(rng, grid: TimeGrid, d: int, n: int, scale: float = 1.0):
    dt = grid.dt
    dw = rng.standard_normal((grid.steps, d)) * math.sqrt(dt) * scale
    dx = rng.standard_normal((grid.steps, n)) * math.sqrt(dt) * scale
    omega = np.vstack([np.zeros((1, d)), np.cumsum(dw, axis=0)])
    x = np.vstack([rng.standard_normal((1, n)) * 0.3, np.zeros((grid.steps, n))])
    x[1:] = x[0] + np.cumsum(dx, axis=0)
    return omega, x


def check_nonanticipative(model: CoefficientModel, trials: int = 1000,
                          rng_seed: int = 0, steps: int = 16,
                          horizon: float = 1.0) -> NonAnticipativityReport:
    """Perturb path values strictly after a random node and require that
    drift/diffusion evaluations at that node are bitwise unchanged."""

    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(rng_seed)
    grid = TimeGrid(horizon, steps)
    times = grid.times()
    report = NonAnticipativityReport(trials=trials)
    for trial in range(trials):
        omega, x = _random_path_pair(rng, grid, model.d, model.n)
        k = int(rng.integers(0, steps))  # leaves at least one future node
        b0 = model.drift(k, times, omega, x)
        s0 = model.diffusion(k, times, omega, x)
        be0 = model.drift_small_noise(0.37, k, times, omega, x)
        omega2 = np.array(omega, copy=True)
        x2 = np.array(x, copy=True)
        omega2[k + 1 :] += rng.standard_normal(omega2[k + 1 :].shape)
        x2[k + 1 :] += rng.standard_normal(x2[k + 1 :].shape)
        b1 = model.drift(k, times, omega2, x2)
        s1 = model.diffusion(k, times, omega2, x2)
        be1 = model.drift_small_noise(0.37, k, times, omega2, x2)
        if not (np.array_equal(b0, b1) and np.array_equal(s0, s1)
                and np.array_equal(be0, be1)):
            report.violations.append({"trial": trial, "node": k})
    return report


def estimate_lipschitz(f, trials: int = 1000, rng_seed: int = 0,
                       steps: int = 16, horizon: float = 1.0) -> float:
    """Max sampled ratio |f(path) - f(path')| / sup-norm distance; compare
    against the declared constant (x 1.01) in the caller."""

    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(rng_seed)
    grid = TimeGrid(horizon, steps)
    times = grid.times()
    worst = 0.0
    is_model = isinstance(f, CoefficientModel)
    d = f.d if is_model else 1
    n = f.n if is_model else 1
    for _ in range(trials):
        omega1, x1 = _random_path_pair(rng, grid, d, n)
        omega2 = omega1 + rng.standard_normal(omega1.shape) * 0.1
        omega2[0] = 0.0
        x2 = x1 + rng.standard_normal(x1.shape) * 0.1
        if is_model:
            k = int(rng.integers(0, steps + 1))
            dw = np.max(np.linalg.norm(omega1[: k + 1] - omega2[: k + 1], axis=1))
            dx = np.max(np.linalg.norm(x1[: k + 1] - x2[: k + 1], axis=1))
            denom = dw + dx
            if denom == 0.0:
                continue
            db = np.linalg.norm(f.drift(k, times, omega1, x1) - f.drift(k, times, omega2, x2))
            ds = np.linalg.norm(f.diffusion(k, times, omega1, x1) - f.diffusion(k, times, omega2, x2))
            worst = max(worst, float(max(db, ds)) / denom)
        else:
            denom = max(
                np.max(np.linalg.norm(omega1 - omega2, axis=1)),
                np.max(np.linalg.norm(x1 - x2, axis=1)),
            )
            if denom == 0.0:
                continue
            gap = abs(float(f(omega1, x1) - f(omega2, x2)))
            worst = max(worst, gap / denom)
    return worst


def check_ellipticity(model: CoefficientModel, trials: int = 200,
                      rng_seed: int = 0, steps: int = 16) -> float:
    """Smallest sampled eigenvalue of sigma sigma^T; must be >= the declared
    ellipticity floor when one is claimed."""

    rng = np.random.default_rng(rng_seed)
    grid = TimeGrid(1.0, steps)
    times = grid.times()
    smallest = math.inf
    for _ in range(trials):
        omega, x = _random_path_pair(rng, grid, model.d, model.n)
        k = int(rng.integers(0, steps + 1))
        sig = model.diffusion(k, times, omega, x)
        a = sig @ sig.swapaxes(-1, -2)
        smallest = min(smallest, float(np.min(np.linalg.eigvalsh(a))))
    return smallest
