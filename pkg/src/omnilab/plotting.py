"""Dependency-free SVG line plots with a log-scaled y axis."""
from __future__ import annotations

import math
from xml.sax.saxutils import escape, quoteattr

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"]


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def render_svg(
    curves: dict,
    threshold: float | None = None,
    title: str = "",
    xlabel: str = "step",
    ylabel: str = "smoothed loss",
    width: int = 720,
    height: int = 440,
) -> str:
    """``curves`` maps a series name to ``(xs, ys)``; non-positive y values are
    clipped to the smallest positive value present (log axis)."""
    if not curves:
        raise ValueError("need at least one series")
    for name, (xs, ys) in curves.items():
        if len(xs) != len(ys) or len(xs) < 2:
            raise ValueError(f"series {name!r} needs at least two (x, y) points")

    positives = [y for _, ys in curves.values() for y in ys if y > 0 and math.isfinite(y)]
    if threshold is not None and threshold > 0:
        positives.append(threshold)
    if not positives:
        raise ValueError("no positive finite y values to plot on a log axis")
    lo = math.floor(math.log10(min(positives)))
    hi = math.ceil(math.log10(max(positives)))
    if hi == lo:
        hi += 1
    x_min = min(min(xs) for xs, _ in curves.values())
    x_max = max(max(xs) for xs, _ in curves.values())
    if x_max == x_min:
        x_max = x_min + 1

    left, right, top, bottom = 70, 170, 40, 50
    pw, ph = width - left - right, height - top - bottom

    def sx(x):
        return left + (x - x_min) / (x_max - x_min) * pw

    def sy(y):
        y = max(y, 10.0**lo)
        return top + (hi - math.log10(y)) / (hi - lo) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="{left}" y="22" font-size="14">{escape(title)}</text>')
    out.append(f'<g class="axes" stroke="#333" fill="none">')
    out.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}"/>')
    out.append("</g>")
    for e in range(lo, hi + 1):
        y = sy(10.0**e)
        out.append(f'<line x1="{left}" y1="{_fmt(y)}" x2="{left + pw}" y2="{_fmt(y)}" stroke="#ddd"/>')
        out.append(f'<text x="{left - 6}" y="{_fmt(y + 4)}" text-anchor="end">1e{e}</text>')
    for i in range(6):
        xv = x_min + (x_max - x_min) * i / 5
        x = sx(xv)
        out.append(f'<text x="{_fmt(x)}" y="{top + ph + 16}" text-anchor="middle">{xv:g}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{height - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(
        f'<text x="16" y="{top + ph / 2}" text-anchor="middle" '
        f'transform="rotate(-90 16 {top + ph / 2})">{escape(ylabel)} (log)</text>'
    )
    if threshold is not None and threshold > 0:
        y = sy(threshold)
        out.append(
            f'<line class="threshold" x1="{left}" y1="{_fmt(y)}" x2="{left + pw}" y2="{_fmt(y)}" '
            f'stroke="#444" stroke-dasharray="6 4"/>'
        )
        out.append(f'<text x="{left + pw - 4}" y="{_fmt(y - 4)}" text-anchor="end">target {threshold:g}</text>')

    for i, (name, (xs, ys)) in enumerate(curves.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in zip(xs, ys) if math.isfinite(y))
        out.append(
            f'<polyline data-series={quoteattr(str(name))} fill="none" stroke="{color}" '
            f'stroke-width="1.5" points="{pts}"/>'
        )
    out.append('<g class="legend">')
    for i, name in enumerate(curves):
        color = PALETTE[i % len(PALETTE)]
        y = top + 10 + 18 * i
        x = left + pw + 12
        out.append(f'<line x1="{x}" y1="{y}" x2="{x + 20}" y2="{y}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{x + 26}" y="{y + 4}">{escape(str(name))}</text>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_plot(curves: dict, path, threshold: float | None = None, title: str = "") -> None:
    svg = render_svg(curves, threshold=threshold, title=title)
    with open(path, "w", encoding="utf-8") as f:
        f.write(svg)
