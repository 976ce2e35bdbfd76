"""Static SVG line plots, emitted directly without a plotting dependency.

Plots are pure functions of their data: identical series produce identical
bytes, so every figure can be regenerated offline from its CSV.
"""

from __future__ import annotations

import math

__all__ = ["line_plot"]

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
            "#8c564b", "#17becf", "#7f7f7f")

_W, _H = 640, 420
_ML, _MR, _MT, _MB = 64, 16, 34, 46


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    span = hi - lo
    step = 10 ** math.floor(math.log10(span / n))
    for mult in (1, 2, 5, 10):
        if span / (step * mult) <= n:
            step *= mult
            break
    first = math.ceil(lo / step) * step
    out = []
    v = first
    while v <= hi + 1e-12 * span:
        out.append(round(v, 12))
        v += step
    return out


def line_plot(series, title: str = "", xlabel: str = "", ylabel: str = "",
              log_y: bool = False) -> str:
    """Render labelled (x, y) series to an SVG string.

    ``series`` is a list of dicts with keys ``label``, ``x``, ``y``.
    """
    pts = [(float(x), float(y)) for s in series for x, y in zip(s["x"], s["y"])]
    if not pts:
        raise ValueError("nothing to plot")

    def ty(y):
        return math.log10(max(y, 1e-300)) if log_y else y

    xs = [p[0] for p in pts]
    ys = [ty(p[1]) for p in pts]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    pw, ph = _W - _ML - _MR, _H - _MT - _MB

    def px(x):
        return _ML + (x - x_lo) / (x_hi - x_lo) * pw

    def py(y):
        return _MT + ph - (ty(y) - y_lo) / (y_hi - y_lo) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W // 2}" y="20" text-anchor="middle" font-family="monospace" '
        f'font-size="14">{title}</text>',
    ]
    # axes
    parts.append(f'<rect x="{_ML}" y="{_MT}" width="{pw}" height="{ph}" '
                 f'fill="none" stroke="#333" stroke-width="1"/>')
    for tx in _ticks(x_lo, x_hi):
        parts.append(f'<line x1="{_fmt(px(tx))}" y1="{_MT + ph}" x2="{_fmt(px(tx))}" '
                     f'y2="{_MT + ph + 4}" stroke="#333"/>')
        parts.append(f'<text x="{_fmt(px(tx))}" y="{_MT + ph + 18}" text-anchor="middle" '
                     f'font-family="monospace" font-size="11">{_fmt(tx)}</text>')
    for tv in _ticks(y_lo, y_hi):
        label = _fmt(10 ** tv) if log_y else _fmt(tv)
        yy = _MT + ph - (tv - y_lo) / (y_hi - y_lo) * ph
        parts.append(f'<line x1="{_ML - 4}" y1="{_fmt(yy)}" x2="{_ML}" '
                     f'y2="{_fmt(yy)}" stroke="#333"/>')
        parts.append(f'<text x="{_ML - 8}" y="{_fmt(yy + 4)}" text-anchor="end" '
                     f'font-family="monospace" font-size="11">{label}</text>')
    parts.append(f'<text x="{_ML + pw // 2}" y="{_H - 8}" text-anchor="middle" '
                 f'font-family="monospace" font-size="12">{xlabel}</text>')
    parts.append(f'<text x="16" y="{_MT + ph // 2}" text-anchor="middle" '
                 f'font-family="monospace" font-size="12" '
                 f'transform="rotate(-90 16 {_MT + ph // 2})">{ylabel}</text>')
    # series
    for i, s in enumerate(series):
        color = _PALETTE[i % len(_PALETTE)]
        coords = " ".join(f"{_fmt(px(float(x)))},{_fmt(py(float(y)))}"
                          for x, y in zip(s["x"], s["y"]))
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" '
                     f'stroke-width="1.5"/>')
        ly = _MT + 14 + 16 * i
        parts.append(f'<line x1="{_ML + pw - 130}" y1="{ly - 4}" x2="{_ML + pw - 110}" '
                     f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{_ML + pw - 104}" y="{ly}" font-family="monospace" '
                     f'font-size="11">{s["label"]}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
