"""Minimal SVG line charts arranged as small multiples."""

from __future__ import annotations

from dataclasses import dataclass, field
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


@dataclass
class Series:
    label: str
    x: np.ndarray
    y: np.ndarray
    style: str = "line"  # line, dashed or points
    color: str | None = None


@dataclass
class Panel:
    title: str
    series: list = field(default_factory=list)
    xlabel: str = ""
    ylabel: str = ""


def _ticks(lo, hi, n=5):
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** np.floor(np.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = np.ceil(lo / step) * step
    return list(np.arange(start, hi + step * 1e-9, step))


def _range(values):
    finite = values[np.isfinite(values)] if values.size else values
    if finite.size == 0:
        return 0.0, 1.0
    lo, hi = float(finite.min()), float(finite.max())
    if hi - lo < 1e-12:
        pad = max(abs(lo) * 0.05, 0.5)
        return lo - pad, hi + pad
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def _f(v):
    return f"{v:.2f}"


def render(panels, title: str = "", columns: int = 2, width: int = 420,
           height: int = 260) -> str:
    """SVG document with one chart per panel."""
    columns = max(1, min(columns, len(panels)))
    rows = int(np.ceil(len(panels) / columns)) if panels else 1
    top = 30 if title else 0
    total_w, total_h = columns * width, rows * height + top
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{total_w}" height="{total_h}" '
           f'viewBox="0 0 {total_w} {total_h}" font-family="sans-serif" font-size="10">',
           f'<rect width="{total_w}" height="{total_h}" fill="white"/>']
    if title:
        out.append(f'<text x="{total_w / 2:.1f}" y="20" text-anchor="middle" '
                   f'font-size="14">{escape(title)}</text>')
    for k, panel in enumerate(panels):
        ox = (k % columns) * width
        oy = top + (k // columns) * height
        out.extend(_panel(panel, ox, oy, width, height))
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _panel(panel: Panel, ox, oy, width, height):
    ml, mr, mt, mb = 55, 10, 22, 36
    pw, ph = width - ml - mr, height - mt - mb
    xs = np.concatenate([np.asarray(s.x, dtype=float) for s in panel.series]) \
        if panel.series else np.zeros(0)
    ys = np.concatenate([np.asarray(s.y, dtype=float) for s in panel.series]) \
        if panel.series else np.zeros(0)
    x0, x1 = _range(xs)
    y0, y1 = _range(ys)

    def px(v):
        return ox + ml + (v - x0) / (x1 - x0) * pw

    def py(v):
        return oy + mt + ph - (v - y0) / (y1 - y0) * ph

    out = [f'<text x="{_f(ox + ml + pw / 2)}" y="{_f(oy + 14)}" text-anchor="middle" '
           f'font-size="12">{escape(panel.title)}</text>',
           f'<rect x="{_f(ox + ml)}" y="{_f(oy + mt)}" width="{_f(pw)}" height="{_f(ph)}" '
           f'fill="none" stroke="#444"/>']
    for t in _ticks(x0, x1):
        out.append(f'<text x="{_f(px(t))}" y="{_f(oy + mt + ph + 12)}" '
                   f'text-anchor="middle">{t:g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<line x1="{_f(ox + ml)}" x2="{_f(ox + ml + pw)}" y1="{_f(py(t))}" '
                   f'y2="{_f(py(t))}" stroke="#ddd"/>')
        out.append(f'<text x="{_f(ox + ml - 4)}" y="{_f(py(t) + 3)}" '
                   f'text-anchor="end">{t:.4g}</text>')
    if panel.xlabel:
        out.append(f'<text x="{_f(ox + ml + pw / 2)}" y="{_f(oy + height - 6)}" '
                   f'text-anchor="middle">{escape(panel.xlabel)}</text>')
    if panel.ylabel:
        cx, cy = ox + 12, oy + mt + ph / 2
        out.append(f'<text x="{_f(cx)}" y="{_f(cy)}" text-anchor="middle" '
                   f'transform="rotate(-90 {_f(cx)} {_f(cy)})">{escape(panel.ylabel)}</text>')
    for i, s in enumerate(panel.series):
        color = s.color or PALETTE[i % len(PALETTE)]
        x = np.asarray(s.x, dtype=float)
        y = np.asarray(s.y, dtype=float)
        ok = np.isfinite(x) & np.isfinite(y)
        x, y = x[ok], y[ok]
        if s.style == "points":
            out.extend(f'<circle cx="{_f(px(a))}" cy="{_f(py(b))}" r="1.6" fill="{color}"/>'
                       for a, b in zip(x, y))
        elif x.size:
            pts = " ".join(f"{_f(px(a))},{_f(py(b))}" for a, b in zip(x, y))
            dash = ' stroke-dasharray="5,3"' if s.style == "dashed" else ""
            out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                       f'stroke-width="1.2"{dash}/>')
        ly = oy + mt + 10 + 11 * i
        out.append(f'<text x="{_f(ox + ml + pw - 4)}" y="{_f(ly)}" text-anchor="end" '
                   f'fill="{color}">{escape(s.label)}</text>')
    return out


def write_svg(path, panels, **kwargs):
    with open(path, "w") as fh:
        fh.write(render(panels, **kwargs))
