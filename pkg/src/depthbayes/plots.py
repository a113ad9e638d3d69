"""Tiny deterministic SVG line/dot plots.

Hand-rolled so report output is byte-stable across reruns (no timestamps, no
library version drift). Each file embeds its data as XML comments; the plots
are presentation-only.
"""
from __future__ import annotations

import math

__all__ = ["svg_plot"]

_WIDTH, _HEIGHT = 640, 420
_MARGIN_L, _MARGIN_R, _MARGIN_T, _MARGIN_B = 70, 160, 40, 50
_PALETTE = (
    "#1f77b4",
    "#d62728",
    "#2ca02c",
    "#9467bd",
    "#ff7f0e",
    "#8c564b",
    "#17becf",
    "#e377c2",
    "#bcbd22",
    "#7f7f7f",
)


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def _bounds(values, pad_fraction=0.08):
    lo, hi = min(values), max(values)
    if not math.isfinite(lo) or not math.isfinite(hi):
        lo, hi = 0.0, 1.0
    if hi - lo < 1e-12:
        pad = max(abs(hi), 1.0) * 0.1
        return lo - pad, hi + pad
    pad = (hi - lo) * pad_fraction
    return lo - pad, hi + pad


def svg_plot(path, title, xlabel, ylabel, series, connect=True) -> None:
    """Write a line/dot plot.

    ``series`` is a list of dicts with keys label, xs, ys and optionally
    err (error-bar half-widths aligned with ys).
    """
    xs_all = [x for s in series for x in s["xs"]]
    ys_all = [y for s in series for y in s["ys"]]
    for s in series:
        for e, y in zip(s.get("err") or [], s["ys"]):
            ys_all += [y - e, y + e]
    if not xs_all:
        xs_all, ys_all = [0.0, 1.0], [0.0, 1.0]
    x_lo, x_hi = _bounds(xs_all)
    y_lo, y_hi = _bounds(ys_all)

    plot_w = _WIDTH - _MARGIN_L - _MARGIN_R
    plot_h = _HEIGHT - _MARGIN_T - _MARGIN_B

    def sx(x):
        return _MARGIN_L + (x - x_lo) / (x_hi - x_lo) * plot_w

    def sy(y):
        return _MARGIN_T + (y_hi - y) / (y_hi - y_lo) * plot_h

    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_WIDTH}" height="{_HEIGHT}" '
        f'viewBox="0 0 {_WIDTH} {_HEIGHT}">',
        f"<!-- title: {title} -->",
    ]
    for s in series:
        errs = s.get("err") or [0.0] * len(s["ys"])
        points = "; ".join(
            f"{float(x)!r},{float(y)!r},{float(e)!r}" for x, y, e in zip(s["xs"], s["ys"], errs)
        )
        lines.append(f"<!-- data {s['label']}: {points} -->")
    lines.append(f'<rect width="{_WIDTH}" height="{_HEIGHT}" fill="white"/>')
    lines.append(
        f'<rect x="{_MARGIN_L}" y="{_MARGIN_T}" width="{plot_w}" height="{plot_h}" '
        'fill="none" stroke="#333333" stroke-width="1"/>'
    )
    lines.append(
        f'<text x="{_MARGIN_L + plot_w / 2:.1f}" y="24" text-anchor="middle" '
        f'font-family="sans-serif" font-size="15">{title}</text>'
    )
    lines.append(
        f'<text x="{_MARGIN_L + plot_w / 2:.1f}" y="{_HEIGHT - 12}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12">{xlabel}</text>'
    )
    lines.append(
        f'<text x="18" y="{_MARGIN_T + plot_h / 2:.1f}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 18 {_MARGIN_T + plot_h / 2:.1f})">{ylabel}</text>'
    )
    # axis ticks: 5 per axis
    for i in range(5):
        tx = x_lo + (x_hi - x_lo) * i / 4
        ty = y_lo + (y_hi - y_lo) * i / 4
        lines.append(
            f'<text x="{sx(tx):.1f}" y="{_MARGIN_T + plot_h + 16:.1f}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="10">{_fmt(tx)}</text>'
        )
        lines.append(
            f'<text x="{_MARGIN_L - 6}" y="{sy(ty) + 3:.1f}" text-anchor="end" '
            f'font-family="sans-serif" font-size="10">{_fmt(ty)}</text>'
        )

    for index, s in enumerate(series):
        color = _PALETTE[index % len(_PALETTE)]
        pts = [(sx(x), sy(y)) for x, y in zip(s["xs"], s["ys"])]
        if connect and len(pts) > 1:
            path_d = " ".join(f"{'M' if i == 0 else 'L'}{px:.1f},{py:.1f}" for i, (px, py) in enumerate(pts))
            lines.append(f'<path d="{path_d}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        errs = s.get("err")
        if errs:
            for (px, py), y, e in zip(pts, s["ys"], errs):
                if e > 0:
                    lines.append(
                        f'<line x1="{px:.1f}" y1="{sy(y - e):.1f}" x2="{px:.1f}" y2="{sy(y + e):.1f}" '
                        f'stroke="{color}" stroke-width="1"/>'
                    )
        for px, py in pts:
            lines.append(f'<circle cx="{px:.1f}" cy="{py:.1f}" r="3" fill="{color}"/>')
        ly = _MARGIN_T + 14 + 16 * index
        lx = _MARGIN_L + plot_w + 10
        lines.append(f'<circle cx="{lx + 5}" cy="{ly - 4:.1f}" r="4" fill="{color}"/>')
        lines.append(
            f'<text x="{lx + 14}" y="{ly:.1f}" font-family="sans-serif" font-size="10">{s["label"]}</text>'
        )
    lines.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
