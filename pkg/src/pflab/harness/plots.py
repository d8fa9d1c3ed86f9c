"""Minimal SVG emitter: scatter with a marginal CDF strip, and line charts.

Plots are rendered straight from rows already written to CSV, so every
figure is regenerable from the CSV artifacts alone.  Output is plain text
with fixed number formatting, hence byte-stable across reruns.
"""

from __future__ import annotations

import math

PALETTE = [
    "#1f77b4",
    "#d62728",
    "#2ca02c",
    "#9467bd",
    "#ff7f0e",
    "#8c564b",
    "#17becf",
    "#7f7f7f",
    "#bcbd22",
    "#e377c2",
]


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def _ticks(lo: float, hi: float, n: int = 5):
    if not math.isfinite(lo) or not math.isfinite(hi) or lo == hi:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(abs(raw)))
    for mult in (1, 2, 2.5, 5, 10):
        if raw <= mult * mag:
            step = mult * mag
            break
    first = math.ceil(lo / step) * step
    out = []
    v = first
    while v <= hi + 1e-12 * abs(step):
        out.append(v)
        v += step
    return out


class _Canvas:
    def __init__(self, width, height):
        self.width = width
        self.height = height
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
            f'height="{height}" viewBox="0 0 {width} {height}">',
            f'<rect width="{width}" height="{height}" fill="white"/>',
        ]

    def line(self, x1, y1, x2, y2, color="#333", width=1.0, dash=None):
        d = f' stroke-dasharray="{dash}"' if dash else ""
        self.parts.append(
            f'<line x1="{_fmt(x1)}" y1="{_fmt(y1)}" x2="{_fmt(x2)}" y2="{_fmt(y2)}" '
            f'stroke="{color}" stroke-width="{width}"{d}/>'
        )

    def circle(self, x, y, r, color):
        self.parts.append(
            f'<circle cx="{_fmt(x)}" cy="{_fmt(y)}" r="{r}" fill="{color}" '
            f'fill-opacity="0.75"/>'
        )

    def polyline(self, pts, color, width=1.5):
        coords = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in pts)
        self.parts.append(
            f'<polyline points="{coords}" fill="none" stroke="{color}" '
            f'stroke-width="{width}"/>'
        )

    def text(self, x, y, s, size=11, anchor="middle", color="#222"):
        self.parts.append(
            f'<text x="{_fmt(x)}" y="{_fmt(y)}" font-size="{size}" '
            f'font-family="sans-serif" text-anchor="{anchor}" fill="{color}">{s}</text>'
        )

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


class _Axes:
    def __init__(self, canvas, box, xlim, ylim, xlabel, ylabel):
        self.c = canvas
        self.x0, self.y0, self.x1, self.y1 = box  # pixel box, y0 = top
        xpad = 0.05 * (xlim[1] - xlim[0]) or 1.0
        ypad = 0.05 * (ylim[1] - ylim[0]) or 1.0
        self.xlim = (xlim[0] - xpad, xlim[1] + xpad)
        self.ylim = (ylim[0] - ypad, ylim[1] + ypad)
        canvas.line(self.x0, self.y1, self.x1, self.y1)
        canvas.line(self.x0, self.y0, self.x0, self.y1)
        for t in _ticks(*self.xlim):
            px = self.px(t)
            canvas.line(px, self.y1, px, self.y1 + 4)
            canvas.text(px, self.y1 + 16, _fmt(t), size=9)
        for t in _ticks(*self.ylim):
            py = self.py(t)
            canvas.line(self.x0 - 4, py, self.x0, py)
            canvas.text(self.x0 - 6, py + 3, _fmt(t), size=9, anchor="end")
        if xlabel:
            canvas.text((self.x0 + self.x1) / 2, self.y1 + 32, xlabel)
        if ylabel:
            mid = (self.y0 + self.y1) / 2
            canvas.parts.append(
                f'<text x="14" y="{_fmt(mid)}" font-size="11" font-family="sans-serif" '
                f'text-anchor="middle" fill="#222" transform="rotate(-90 14 {_fmt(mid)})">'
                f"{ylabel}</text>"
            )

    def px(self, x):
        lo, hi = self.xlim
        return self.x0 + (x - lo) / (hi - lo) * (self.x1 - self.x0)

    def py(self, y):
        lo, hi = self.ylim
        return self.y1 - (y - lo) / (hi - lo) * (self.y1 - self.y0)


def _finite_range(values):
    vals = [v for v in values if math.isfinite(v)]
    if not vals:
        return (0.0, 1.0)
    return (min(vals), max(vals))


def scatter_with_cdf(path, series, xlabel, ylabel):
    """Scatter of (x, y) groups with a marginal CDF strip of x on top.

    ``series`` maps label -> (xs, ys); insertion order fixes colors.
    """
    width, height = 760, 560
    canvas = _Canvas(width, height)
    all_x = [v for xs, _ in series.values() for v in xs]
    all_y = [v for _, ys in series.values() for v in ys]
    xlim = _finite_range(all_x)
    ylim = _finite_range(all_y)

    cdf_box = (70, 20, 580, 150)
    cdf = _Axes(canvas, cdf_box, xlim, (0.0, 1.0), "", "CDF")
    main_box = (70, 190, 580, 510)
    axes = _Axes(canvas, main_box, xlim, ylim, xlabel, ylabel)

    for idx, (label, (xs, ys)) in enumerate(series.items()):
        color = PALETTE[idx % len(PALETTE)]
        pairs = sorted(v for v in xs if math.isfinite(v))
        if pairs:
            n = len(pairs)
            pts = []
            for i, v in enumerate(pairs):
                pts.append((cdf.px(v), cdf.py(i / n)))
                pts.append((cdf.px(v), cdf.py((i + 1) / n)))
            canvas.polyline(pts, color, width=1.2)
        for x, y in zip(xs, ys):
            if math.isfinite(x) and math.isfinite(y):
                canvas.circle(axes.px(x), axes.py(y), 3.0, color)
        canvas.circle(606, 196 + 18 * idx, 4, color)
        canvas.text(614, 200 + 18 * idx, label, size=10, anchor="start")

    with open(path, "w") as fh:
        fh.write(canvas.render())


def line_chart(path, series, xlabel, ylabel, title=""):
    """Simple multi-series line chart; ``series`` maps label -> (xs, ys)."""
    width, height = 760, 480
    canvas = _Canvas(width, height)
    all_x = [v for xs, _ in series.values() for v in xs]
    all_y = [v for _, ys in series.values() for v in ys if math.isfinite(v)]
    axes = _Axes(
        canvas, (70, 40, 580, 430), _finite_range(all_x), _finite_range(all_y),
        xlabel, ylabel,
    )
    if title:
        canvas.text(325, 20, title, size=13)
    for idx, (label, (xs, ys)) in enumerate(series.items()):
        color = PALETTE[idx % len(PALETTE)]
        pts = [
            (axes.px(x), axes.py(y))
            for x, y in zip(xs, ys)
            if math.isfinite(x) and math.isfinite(y)
        ]
        if pts:
            canvas.polyline(pts, color)
        canvas.circle(606, 46 + 18 * idx, 4, color)
        canvas.text(614, 50 + 18 * idx, label, size=10, anchor="start")
    with open(path, "w") as fh:
        fh.write(canvas.render())
