"""Minimal deterministic SVG line plots.

Output files are experiment artifacts, not an interactive UI, so this stays
dependency-free: polylines on a framed canvas with optional log-scaled y
axis, tick labels, and a legend. Identical input always produces identical
bytes.
"""

from __future__ import annotations

import math

__all__ = ["line_plot"]

WIDTH, HEIGHT = 640, 420
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 20, 36, 48
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def _ticks(lo: float, hi: float, log: bool) -> list[float]:
    if log:
        lo_e = math.floor(math.log10(lo))
        hi_e = math.ceil(math.log10(hi))
        step = max(1, (hi_e - lo_e) // 6)
        return [10.0**e for e in range(lo_e, hi_e + 1, step)]
    if hi == lo:
        return [lo]
    raw = (hi - lo) / 5.0
    mag = 10.0 ** math.floor(math.log10(raw))
    step = mag * min(s for s in (1, 2, 5, 10) if raw / mag <= s)
    first = math.ceil(lo / step) * step
    ticks = []
    t = first
    while t <= hi + 1e-12 * abs(hi):
        ticks.append(t)
        t += step
    return ticks


def line_plot(
    path,
    series: list[tuple[str, list[float], list[float]]],
    title: str = "",
    x_label: str = "",
    y_label: str = "",
    log_y: bool = False,
) -> None:
    """Write a line chart of the (label, xs, ys) series to ``path``.

    With ``log_y`` the y axis is log10-scaled and nonpositive values are
    dropped from the drawing.
    """
    pts = []
    for _, xs, ys in series:
        for x, y in zip(xs, ys):
            if not log_y or y > 0:
                pts.append((float(x), float(y)))
    if not pts:
        pts = [(0.0, 1.0), (1.0, 1.0)]
    x_lo = min(p[0] for p in pts)
    x_hi = max(p[0] for p in pts)
    y_lo = min(p[1] for p in pts)
    y_hi = max(p[1] for p in pts)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo * 10.0 if log_y else y_lo + 1.0

    def tx(x):
        return MARGIN_L + (x - x_lo) / (x_hi - x_lo) * (WIDTH - MARGIN_L - MARGIN_R)

    def ty(y):
        if log_y:
            frac = (math.log10(y) - math.log10(y_lo)) / (math.log10(y_hi) - math.log10(y_lo))
        else:
            frac = (y - y_lo) / (y_hi - y_lo)
        return HEIGHT - MARGIN_B - frac * (HEIGHT - MARGIN_T - MARGIN_B)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{WIDTH - MARGIN_L - MARGIN_R}" '
        f'height="{HEIGHT - MARGIN_T - MARGIN_B}" fill="none" stroke="#444"/>',
    ]
    if title:
        parts.append(
            f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" '
            f'font-family="sans-serif" font-size="14">{title}</text>'
        )
    for t in _ticks(x_lo, x_hi, log=False):
        parts.append(
            f'<text x="{tx(t):.1f}" y="{HEIGHT - MARGIN_B + 18}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="11">{_fmt(t)}</text>'
        )
        parts.append(
            f'<line x1="{tx(t):.1f}" y1="{HEIGHT - MARGIN_B}" x2="{tx(t):.1f}" '
            f'y2="{HEIGHT - MARGIN_B + 4}" stroke="#444"/>'
        )
    for t in _ticks(y_lo, y_hi, log=log_y):
        if log_y and not (y_lo <= t <= y_hi):
            continue
        parts.append(
            f'<text x="{MARGIN_L - 8}" y="{ty(t) + 4:.1f}" text-anchor="end" '
            f'font-family="sans-serif" font-size="11">{_fmt(t)}</text>'
        )
        parts.append(
            f'<line x1="{MARGIN_L - 4}" y1="{ty(t):.1f}" x2="{MARGIN_L}" '
            f'y2="{ty(t):.1f}" stroke="#444"/>'
        )
    if x_label:
        parts.append(
            f'<text x="{WIDTH / 2:.1f}" y="{HEIGHT - 10}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="12">{x_label}</text>'
        )
    if y_label:
        parts.append(
            f'<text x="16" y="{HEIGHT / 2:.1f}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="12" '
            f'transform="rotate(-90 16 {HEIGHT / 2:.1f})">{y_label}</text>'
        )
    for i, (label, xs, ys) in enumerate(series):
        color = COLORS[i % len(COLORS)]
        coords = [
            f"{tx(float(x)):.2f},{ty(float(y)):.2f}"
            for x, y in zip(xs, ys)
            if not log_y or y > 0
        ]
        if coords:
            parts.append(
                f'<polyline points="{" ".join(coords)}" fill="none" '
                f'stroke="{color}" stroke-width="1.5"/>'
            )
        ly = MARGIN_T + 14 + 16 * i
        parts.append(
            f'<line x1="{WIDTH - MARGIN_R - 130}" y1="{ly - 4}" '
            f'x2="{WIDTH - MARGIN_R - 110}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{WIDTH - MARGIN_R - 104}" y="{ly}" font-family="sans-serif" '
            f'font-size="11">{label}</text>'
        )
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts) + "\n")
