"""Hand-written SVG charts with a fixed layout, so output is byte-stable."""

from __future__ import annotations

import math
from typing import Sequence
from xml.sax.saxutils import escape

PALETTE = ("#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860")
WIDTH, HEIGHT = 720, 400
LEFT, RIGHT, TOP, BOTTOM = 70, 150, 40, 70


def _f(v: float) -> str:
    return f"{v:.2f}"


def _nice_max(v: float) -> float:
    if v <= 0 or not math.isfinite(v):
        return 1.0
    mag = 10 ** math.floor(math.log10(v))
    for step in (1, 2, 2.5, 5, 10):
        if step * mag >= v:
            return step * mag
    return 10 * mag


def _nice_range(lo: float, hi: float) -> tuple[float, float]:
    if not (math.isfinite(lo) and math.isfinite(hi)):
        return 0.0, 1.0
    if hi <= lo:
        hi = lo + 1.0
    span = _nice_max(hi - lo)
    step = span / 5
    return math.floor(lo / step) * step, math.ceil(hi / step) * step


def _frame(title: str, ylabel: str, ymin: float, ymax: float) -> list[str]:
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>']
    x0, x1 = LEFT, WIDTH - RIGHT
    y0, y1 = HEIGHT - BOTTOM, TOP
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>')
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>')
    for k in range(6):
        v = ymin + (ymax - ymin) * k / 5
        y = y0 - (y0 - y1) * k / 5
        out.append(f'<line x1="{x0 - 4}" y1="{_f(y)}" x2="{x1}" y2="{_f(y)}" stroke="#dddddd"/>')
        out.append(f'<text x="{x0 - 6}" y="{_f(y + 4)}" text-anchor="end">{v:g}</text>')
    out.append(f'<text x="16" y="{(y0 + y1) / 2}" text-anchor="middle" '
               f'transform="rotate(-90 16 {(y0 + y1) / 2})">{escape(ylabel)}</text>')
    return out


def _legend(labels: Sequence[str]) -> list[str]:
    out = []
    for k, label in enumerate(labels):
        y = TOP + 10 + 18 * k
        x = WIDTH - RIGHT + 15
        out.append(f'<rect x="{x}" y="{y - 9}" width="12" height="12" '
                   f'fill="{PALETTE[k % len(PALETTE)]}"/>')
        out.append(f'<text x="{x + 18}" y="{y + 1}">{escape(label)}</text>')
    return out


def stacked_bars(path, title: str, categories: Sequence[str], groups: Sequence[str],
                 layers: Sequence[str], values, ylabel: str = "beds") -> None:
    """``values[g][l][c]``: one bar per (category, group), stacked by layer."""
    totals = [sum(values[g][l][c] for l in range(len(layers)))
              for g in range(len(groups)) for c in range(len(categories))]
    ymax = _nice_max(max(totals, default=1.0))
    out = _frame(title, ylabel, 0.0, ymax)
    x0, x1 = LEFT, WIDTH - RIGHT
    y0, y1 = HEIGHT - BOTTOM, TOP
    slot = (x1 - x0) / max(len(categories), 1)
    bar = slot * 0.8 / max(len(groups), 1)
    for c, cat in enumerate(categories):
        for g in range(len(groups)):
            x = x0 + slot * c + slot * 0.1 + bar * g
            base = 0.0
            for l in range(len(layers)):
                v = float(values[g][l][c])
                h = (y0 - y1) * v / ymax
                y = y0 - (y0 - y1) * base / ymax - h
                color = PALETTE[(g * len(layers) + l) % len(PALETTE)]
                out.append(f'<rect x="{_f(x)}" y="{_f(y)}" width="{_f(bar * 0.95)}" '
                           f'height="{_f(h)}" fill="{color}"/>')
                base += v
        cx = x0 + slot * (c + 0.5)
        out.append(f'<text x="{_f(cx)}" y="{y0 + 14}" text-anchor="middle">{escape(cat)}</text>')
    out += _legend([f"{g} {l}" for g in groups for l in layers])
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")


def lines(path, title: str, x: Sequence[float], series: dict[str, Sequence[float]],
          xlabel: str, ylabel: str, errors: dict[str, Sequence[float]] | None = None) -> None:
    errors = errors or {}
    vals = []
    for name, ys in series.items():
        err = errors.get(name, [0.0] * len(ys))
        vals += [v + s * e for v, e in zip(ys, err) for s in (-1, 1) if math.isfinite(v + e)]
    ymin, ymax = _nice_range(min(vals, default=0.0), max(vals, default=1.0))
    out = _frame(title, ylabel, ymin, ymax)
    x0, x1 = LEFT, WIDTH - RIGHT
    y0, y1 = HEIGHT - BOTTOM, TOP
    xlo, xhi = min(x), max(x)
    xspan = (xhi - xlo) or 1.0

    def px(v):
        return x0 + 20 + (x1 - x0 - 40) * (v - xlo) / xspan

    def py(v):
        return y0 - (y0 - y1) * (v - ymin) / (ymax - ymin)

    for v in x:
        out.append(f'<text x="{_f(px(v))}" y="{y0 + 14}" text-anchor="middle">{v:g}</text>')
    out.append(f'<text x="{(x0 + x1) / 2}" y="{y0 + 34}" text-anchor="middle">'
               f'{escape(xlabel)}</text>')
    for k, (name, ys) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        pts = [(px(a), py(b)) for a, b in zip(x, ys) if math.isfinite(b)]
        if pts:
            d = " ".join(f"{_f(a)},{_f(b)}" for a, b in pts)
            out.append(f'<polyline points="{d}" fill="none" stroke="{color}" stroke-width="2"/>')
        for i, (a, b) in enumerate(zip(x, ys)):
            if not math.isfinite(b):
                continue
            out.append(f'<circle cx="{_f(px(a))}" cy="{_f(py(b))}" r="3" fill="{color}"/>')
            if name in errors:
                e = errors[name][i]
                out.append(f'<line x1="{_f(px(a))}" y1="{_f(py(b - e))}" x2="{_f(px(a))}" '
                           f'y2="{_f(py(b + e))}" stroke="{color}"/>')
    out += _legend(list(series))
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")
