"""Minimal deterministic SVG line charts for sweep outputs.

Output bytes depend only on the data passed in, so regenerating a chart
from the same table is byte-identical.
"""
from __future__ import annotations

from pathlib import Path

_PALETTE = (
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
    "#8c564b", "#17becf", "#7f7f7f", "#bcbd22", "#e377c2",
)

_W, _H, _MARGIN = 480, 320, 48


def _sx(v, lo, hi):
    span = hi - lo if hi > lo else 1.0
    return _MARGIN + (v - lo) / span * (_W - 2 * _MARGIN)


def _sy(v):
    # y axis fixed to [0, 1]: accuracies
    return _H - _MARGIN - v * (_H - 2 * _MARGIN)


def line_chart_svg(x_values, series: dict, x_label: str, path) -> Path:
    """series maps name -> list of y values aligned with x_values."""
    xs = [float(v) for v in x_values]
    lo, hi = min(xs), max(xs)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
        f'<line x1="{_sx(lo, lo, hi):.2f}" y1="{_sy(0):.2f}" '
        f'x2="{_sx(hi, lo, hi):.2f}" y2="{_sy(0):.2f}" stroke="black"/>',
        f'<line x1="{_sx(lo, lo, hi):.2f}" y1="{_sy(0):.2f}" '
        f'x2="{_sx(lo, lo, hi):.2f}" y2="{_sy(1):.2f}" stroke="black"/>',
        f'<text x="{_W / 2:.0f}" y="{_H - 10}" font-size="12" '
        f'text-anchor="middle">{x_label}</text>',
        f'<text x="14" y="{_H / 2:.0f}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 14 {_H / 2:.0f})">accuracy</text>',
    ]
    for k, (name, ys) in enumerate(series.items()):
        color = _PALETTE[k % len(_PALETTE)]
        pts = " ".join(f"{_sx(x, lo, hi):.2f},{_sy(float(y)):.2f}" for x, y in zip(xs, ys))
        parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>'
        )
        ly = 16 + 14 * k
        parts.append(
            f'<line x1="{_W - 130}" y1="{ly}" x2="{_W - 110}" y2="{ly}" '
            f'stroke="{color}" stroke-width="1.5"/>'
        )
        parts.append(
            f'<text x="{_W - 104}" y="{ly + 4}" font-size="10">{name}</text>'
        )
    parts.append("</svg>")
    out = Path(path)
    out.write_text("\n".join(parts) + "\n")
    return out
