"""Minimal deterministic SVG line plots with 95% CI error bars.

Hand-rolled on purpose: the canonical experiment outputs are the CSV files,
and the SVG is a dependency-free convenience rendering of the same numbers.
"""

from __future__ import annotations

import math
from pathlib import Path

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]

_W, _H = 640, 440
_ML, _MR, _MT, _MB = 72, 24, 46, 58


def _ticks(lo: float, hi: float, target: int = 6) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / target
    mag = 10 ** math.floor(math.log10(raw))
    for mult in (1, 2, 2.5, 5, 10):
        if raw <= mult * mag:
            step = mult * mag
            break
    start = math.ceil(lo / step) * step
    out = []
    v = start
    while v <= hi + 1e-12:
        out.append(round(v, 10))
        v += step
    return out


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def line_plot_svg(path, series: list[dict], title: str, xlabel: str, ylabel: str) -> None:
    """Write a line plot; each series dict has name, x, y and optional lo/hi.

    ``lo``/``hi`` draw vertical 95% interval bars with caps at each point.
    """
    xs = [x for s in series for x in s["x"]]
    ys = [y for s in series for y in s["y"]]
    for s in series:
        ys.extend(s.get("lo", []))
        ys.extend(s.get("hi", []))
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    if x_hi == x_lo:
        x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
    pad = 0.06 * (y_hi - y_lo or 1.0)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    def sx(v):
        return _ML + (v - x_lo) / (x_hi - x_lo) * (_W - _ML - _MR)

    def sy(v):
        return _H - _MB - (v - y_lo) / (y_hi - y_lo) * (_H - _MT - _MB)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}" font-family="Helvetica, Arial, sans-serif">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2:.1f}" y="24" text-anchor="middle" font-size="15">{_esc(title)}</text>',
    ]

    # axes, ticks, grid
    parts.append(
        f'<line x1="{_ML}" y1="{_H - _MB}" x2="{_W - _MR}" y2="{_H - _MB}" stroke="black"/>'
    )
    parts.append(f'<line x1="{_ML}" y1="{_MT}" x2="{_ML}" y2="{_H - _MB}" stroke="black"/>')
    for tx in _ticks(x_lo, x_hi):
        if not x_lo <= tx <= x_hi:
            continue
        parts.append(
            f'<line x1="{sx(tx):.1f}" y1="{_H - _MB}" x2="{sx(tx):.1f}" y2="{_H - _MB + 5}" stroke="black"/>'
        )
        parts.append(
            f'<text x="{sx(tx):.1f}" y="{_H - _MB + 20}" text-anchor="middle" font-size="12">{tx:g}</text>'
        )
    for ty in _ticks(y_lo, y_hi):
        if not y_lo <= ty <= y_hi:
            continue
        parts.append(
            f'<line x1="{_ML}" y1="{sy(ty):.1f}" x2="{_W - _MR}" y2="{sy(ty):.1f}" '
            f'stroke="#dddddd" stroke-width="0.7"/>'
        )
        parts.append(
            f'<text x="{_ML - 8}" y="{sy(ty) + 4:.1f}" text-anchor="end" font-size="12">{ty:g}</text>'
        )
    parts.append(
        f'<text x="{(_ML + _W - _MR) / 2:.1f}" y="{_H - 14}" text-anchor="middle" '
        f'font-size="13">{_esc(xlabel)}</text>'
    )
    parts.append(
        f'<text x="20" y="{(_MT + _H - _MB) / 2:.1f}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 20 {(_MT + _H - _MB) / 2:.1f})">{_esc(ylabel)}</text>'
    )

    # series
    for k, s in enumerate(series):
        color = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(s["x"], s["y"]))
        if "lo" in s and "hi" in s:
            for x, lo, hi in zip(s["x"], s["lo"], s["hi"]):
                parts.append(
                    f'<line x1="{sx(x):.2f}" y1="{sy(lo):.2f}" x2="{sx(x):.2f}" '
                    f'y2="{sy(hi):.2f}" stroke="{color}" stroke-width="1.2"/>'
                )
                for v in (lo, hi):
                    parts.append(
                        f'<line x1="{sx(x) - 3:.2f}" y1="{sy(v):.2f}" x2="{sx(x) + 3:.2f}" '
                        f'y2="{sy(v):.2f}" stroke="{color}" stroke-width="1.2"/>'
                    )
        parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.8"/>'
        )
        for x, y in zip(s["x"], s["y"]):
            parts.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="2.6" fill="{color}"/>')

    # legend
    lx, ly = _W - _MR - 150, _MT + 8
    for k, s in enumerate(series):
        color = PALETTE[k % len(PALETTE)]
        y = ly + 18 * k
        parts.append(
            f'<line x1="{lx}" y1="{y}" x2="{lx + 22}" y2="{y}" stroke="{color}" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{lx + 28}" y="{y + 4}" font-size="12">{_esc(str(s["name"]))}</text>'
        )

    parts.append("</svg>")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(parts) + "\n")
