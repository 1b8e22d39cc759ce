"""Deterministic SVG line plots (fixed dimensions, no timestamps) for the
convergence CSV schema: estimate vs epsilon with a CI band and the
rate-function limit as a dashed horizontal line. Byte-identical output for
identical input, suitable for golden-file comparison."""

from __future__ import annotations

import math

from .errors import ConfigError

WIDTH, HEIGHT = 640, 480
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 20, 20, 50


def _fmt(x: float) -> str:
    return format(x, ".6g")


def _finite(vals):
    return [v for v in vals if v is not None and math.isfinite(v)]


def render_convergence_svg(rows: list, title: str = "estimate vs eps") -> str:
    """rows: dicts with eps, estimate, ci_lo, ci_hi and optional limit."""
    if not rows:
        raise ConfigError("plot: no data rows")
    xs = [float(r["eps"]) for r in rows]
    ys = [float(r["estimate"]) for r in rows]
    lo = [float(r.get("ci_lo", math.nan)) for r in rows]
    hi = [float(r.get("ci_hi", math.nan)) for r in rows]
    limits = _finite([r.get("limit") for r in rows])
    limit = limits[0] if limits else None

    ally = _finite(ys + lo + hi + ([limit] if limit is not None else []))
    x_min, x_max = min(xs), max(xs)
    y_min, y_max = min(ally), max(ally)
    if x_max == x_min:
        x_min, x_max = x_min - 0.5, x_max + 0.5
    if y_max == y_min:
        y_min, y_max = y_min - 0.5, y_max + 0.5
    y_pad = 0.08 * (y_max - y_min)
    y_min, y_max = y_min - y_pad, y_max + y_pad

    def sx(x):
        return MARGIN_L + (x - x_min) / (x_max - x_min) * (WIDTH - MARGIN_L - MARGIN_R)

    def sy(y):
        return HEIGHT - MARGIN_B - (y - y_min) / (y_max - y_min) * (HEIGHT - MARGIN_T - MARGIN_B)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{WIDTH - MARGIN_L - MARGIN_R}" '
        f'height="{HEIGHT - MARGIN_T - MARGIN_B}" fill="none" stroke="black"/>',
    ]

    band = [(x, l, h) for x, l, h in zip(xs, lo, hi)
            if math.isfinite(l) and math.isfinite(h)]
    if len(band) >= 2:
        fwd = " ".join(f"{_fmt(sx(x))},{_fmt(sy(h))}" for x, _, h in band)
        back = " ".join(f"{_fmt(sx(x))},{_fmt(sy(l))}" for x, l, _ in reversed(band))
        parts.append(f'<polygon points="{fwd} {back}" fill="#9ecae1" fill-opacity="0.5"/>')

    if limit is not None:
        y = _fmt(sy(limit))
        parts.append(f'<line x1="{MARGIN_L}" y1="{y}" x2="{WIDTH - MARGIN_R}" y2="{y}" '
                     'stroke="#d62728" stroke-dasharray="6,4"/>')

    if len(xs) >= 2:
        pts = " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>')
    for x, y in zip(xs, ys):
        parts.append(f'<circle cx="{_fmt(sx(x))}" cy="{_fmt(sy(y))}" r="3.5" fill="#1f77b4"/>')

    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        xv = x_min + frac * (x_max - x_min)
        yv = y_min + frac * (y_max - y_min)
        parts.append(f'<text x="{_fmt(sx(xv))}" y="{HEIGHT - MARGIN_B + 18}" '
                     f'font-family="monospace" font-size="11" text-anchor="middle">{_fmt(xv)}</text>')
        parts.append(f'<text x="{MARGIN_L - 6}" y="{_fmt(sy(yv) + 4)}" '
                     f'font-family="monospace" font-size="11" text-anchor="end">{_fmt(yv)}</text>')
    parts.append(f'<text x="{WIDTH // 2}" y="{HEIGHT - 12}" font-family="monospace" '
                 f'font-size="12" text-anchor="middle">eps</text>')
    parts.append(f'<text x="{WIDTH // 2}" y="{MARGIN_T - 6}" font-family="monospace" '
                 f'font-size="12" text-anchor="middle">{title}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
