"""Large-deviation rate functions for path-dependent SDEs: deterministic
optimal-control rates, small-noise Monte Carlo cross-checks, path-dependent
Eikonal residuals, and short-maturity implied-volatility asymptotics."""

__version__ = "0.1.0"

from .paths import ControlPath, DiscretePath, PathPoint, TimeGrid  # noqa: F401
