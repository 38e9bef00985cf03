"""Minimal deterministic SVG line charts.

Every finite data point is drawn as one ``<circle class="marker">``, so the
number of markers in a file can be checked by parsing it. Coordinates are
formatted with a fixed precision, which makes the output byte-identical for
identical inputs.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from dataclasses import dataclass
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#7f7f7f")


@dataclass(frozen=True)
class Series:
    label: str
    x: Sequence[float]
    y: Sequence[float]


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _ticks(lo: float, hi: float, count: int = 5) -> np.ndarray:
    return np.linspace(lo, hi, count)


def _bounds(values: np.ndarray) -> tuple[float, float]:
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        pad = 1.0 if lo == 0 else abs(lo) * 0.1
        return lo - pad, hi + pad
    return lo, hi


def line_chart(series: Sequence[Series], title: str = "", xlabel: str = "", ylabel: str = "",
               width: int = 640, height: int = 400) -> str:
    """Render ``series`` as an SVG document string.

    Raises:
        ValueError: if there is no finite point to draw.
    """
    xs, ys = [], []
    for s in series:
        x, y = np.asarray(s.x, dtype=float), np.asarray(s.y, dtype=float)
        if x.shape != y.shape:
            raise ValueError(f"series {s.label!r}: x and y lengths differ")
        keep = np.isfinite(x) & np.isfinite(y)
        xs.append(x[keep])
        ys.append(y[keep])
    if not series or sum(len(x) for x in xs) == 0:
        raise ValueError("nothing to plot")
    x_lo, x_hi = _bounds(np.concatenate(xs))
    y_lo, y_hi = _bounds(np.concatenate(ys))
    left, right, top, bottom = 70, 20, 40, 50
    pw, ph = width - left - right, height - top - bottom

    def px(v):
        return left + (v - x_lo) / (x_hi - x_lo) * pw

    def py(v):
        return top + ph - (v - y_lo) / (y_hi - y_lo) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for v in _ticks(x_lo, x_hi):
        out.append(f'<text x="{_fmt(px(v))}" y="{top + ph + 16}" text-anchor="middle">{v:.3g}</text>')
    for v in _ticks(y_lo, y_hi):
        out.append(f'<text x="{left - 6}" y="{_fmt(py(v) + 4)}" text-anchor="end">{v:.3g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="15" y="{top + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 15 {top + ph / 2:.1f})">{escape(ylabel)}</text>')
    for idx, (s, x, y) in enumerate(zip(series, xs, ys)):
        color = PALETTE[idx % len(PALETTE)]
        if len(x) > 1:
            pts = " ".join(f"{_fmt(px(a))},{_fmt(py(b))}" for a, b in zip(x, y))
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        for a, b in zip(x, y):
            out.append(f'<circle class="marker" cx="{_fmt(px(a))}" cy="{_fmt(py(b))}" r="2.5" fill="{color}"/>')
        out.append(f'<text x="{left + pw - 4}" y="{top + 14 * (idx + 1)}" text-anchor="end" '
                   f'fill="{color}">{escape(s.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def count_markers(svg_text: str) -> int:
    """Number of data markers in a document produced by :func:`line_chart`."""
    root = ET.fromstring(svg_text)
    return sum(1 for el in root.iter("{http://www.w3.org/2000/svg}circle") if el.get("class") == "marker")
