"""Minimal native SVG line plots (reliability diagrams and Qini curves)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

_W, _H, _PAD = 360, 360, 40
_COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728")


def _xy(x: float, y: float, lo: float, hi: float) -> tuple[float, float]:
    span = hi - lo or 1.0
    px = _PAD + (x - lo) / span * (_W - 2 * _PAD)
    py = _H - _PAD - (y - lo) / span * (_H - 2 * _PAD)
    return px, py


def line_plot(series: Sequence[tuple[str, Sequence[float], Sequence[float]]], title: str,
              xlabel: str, ylabel: str, lo: float = 0.0, hi: float = 1.0) -> str:
    """SVG text for the given ``(label, xs, ys)`` series plus a dashed diagonal."""
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" font-family="sans-serif" '
             f'font-size="11">',
             f'<rect x="{_PAD}" y="{_PAD}" width="{_W - 2 * _PAD}" height="{_H - 2 * _PAD}" fill="none" '
             f'stroke="#444"/>']
    (x0, y0), (x1, y1) = _xy(lo, lo, lo, hi), _xy(hi, hi, lo, hi)
    parts.append(f'<line x1="{x0:.2f}" y1="{y0:.2f}" x2="{x1:.2f}" y2="{y1:.2f}" stroke="#999" '
                 f'stroke-dasharray="4 3"/>')
    for i, (label, xs, ys) in enumerate(series):
        pts = " ".join("{:.2f},{:.2f}".format(*_xy(float(a), float(b), lo, hi)) for a, b in zip(xs, ys))
        color = _COLORS[i % len(_COLORS)]
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{_PAD + 6}" y="{_PAD + 14 + 13 * i}" fill="{color}">{label}</text>')
    parts.append(f'<text x="{_W / 2}" y="{_PAD - 12}" text-anchor="middle">{title}</text>')
    parts.append(f'<text x="{_W / 2}" y="{_H - 10}" text-anchor="middle">{xlabel}</text>')
    parts.append(f'<text x="12" y="{_H / 2}" transform="rotate(-90 12 {_H / 2})" text-anchor="middle">'
                 f'{ylabel}</text>')
    parts.append("</svg>\n")
    return "\n".join(parts)


def reliability_svg(path, curves: dict, title: str = "coverage") -> Path:
    """``curves`` maps a label to a CoverageCurve-like object with ``levels`` and ``coverage``."""
    series = [(k, c.levels, c.coverage) for k, c in curves.items()]
    path = Path(path)
    path.write_text(line_plot(series, title, "credibility level", "empirical coverage"), encoding="utf-8")
    return path


def qini_svg(path, curve, title: str = "Qini curve") -> Path:
    path = Path(path)
    xs = [0.0, *curve.q_grid]
    ys = [0.0, *curve.Q]
    lo, hi = min(0.0, min(ys)), max(1.0, max(ys))
    path.write_text(line_plot([("Q(q)", xs, ys)], title, "fraction targeted q", "normalized uplift", lo, hi),
                    encoding="utf-8")
    return path
