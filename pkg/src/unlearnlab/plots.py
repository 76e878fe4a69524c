"""Small deterministic SVG 1.1 charts (no plotting dependency)."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2",
           "#7f7f7f", "#bcbd22", "#17becf", "#393b79", "#637939", "#8c6d31", "#843c39"]


def _f(v: float) -> str:
    return f"{v:.2f}"


class _Canvas:
    def __init__(self, width: int, height: int):
        self.w, self.h = width, height
        self.parts: list[str] = []

    def add(self, s: str) -> None:
        self.parts.append(s)

    def text(self, x, y, s, size=11, anchor="start", rotate=None) -> None:
        rot = f' transform="rotate({rotate} {_f(x)} {_f(y)})"' if rotate is not None else ""
        self.add(f'<text x="{_f(x)}" y="{_f(y)}" font-size="{size}" font-family="sans-serif" '
                 f'text-anchor="{anchor}"{rot}>{escape(str(s))}</text>')

    def line(self, x1, y1, x2, y2, color="#000", width=1.0, dash=None) -> None:
        d = f' stroke-dasharray="{dash}"' if dash else ""
        self.add(f'<line x1="{_f(x1)}" y1="{_f(y1)}" x2="{_f(x2)}" y2="{_f(y2)}" '
                 f'stroke="{color}" stroke-width="{width}"{d}/>')

    def render(self) -> str:
        head = (f'<?xml version="1.0" encoding="UTF-8"?>\n'
                f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
                f'width="{self.w}" height="{self.h}" viewBox="0 0 {self.w} {self.h}">\n'
                f'<rect width="{self.w}" height="{self.h}" fill="#ffffff"/>\n')
        return head + "\n".join(self.parts) + "\n</svg>\n"


class _Axes:
    """A plotting rectangle mapping data in [x0,x1]x[y0,y1] to canvas pixels."""

    def __init__(self, c: _Canvas, left, top, width, height, xlim=(0, 1), ylim=(0, 1),
                 title="", xlabel="", ylabel=""):
        self.c, self.left, self.top, self.width, self.height = c, left, top, width, height
        self.xlim, self.ylim = xlim, ylim
        c.add(f'<rect x="{_f(left)}" y="{_f(top)}" width="{_f(width)}" height="{_f(height)}" '
              f'fill="none" stroke="#000"/>')
        for i in range(6):
            fx = xlim[0] + (xlim[1] - xlim[0]) * i / 5
            fy = ylim[0] + (ylim[1] - ylim[0]) * i / 5
            px, py = self.px(fx), self.py(fy)
            c.line(px, top + height, px, top + height + 4)
            c.text(px, top + height + 15, f"{fx:.2g}", 9, "middle")
            c.line(left - 4, py, left, py)
            c.text(left - 6, py + 3, f"{fy:.2g}", 9, "end")
        if title:
            c.text(left + width / 2, top - 8, title, 12, "middle")
        if xlabel:
            c.text(left + width / 2, top + height + 30, xlabel, 10, "middle")
        if ylabel:
            c.text(left - 34, top + height / 2, ylabel, 10, "middle", rotate=-90)

    def px(self, x: float) -> float:
        x0, x1 = self.xlim
        return self.left + (x - x0) / ((x1 - x0) or 1.0) * self.width

    def py(self, y: float) -> float:
        y0, y1 = self.ylim
        return self.top + self.height - (y - y0) / ((y1 - y0) or 1.0) * self.height


def _legend(c: _Canvas, x, y, names: list[str]) -> None:
    for i, name in enumerate(names):
        yy = y + 14 * i
        c.add(f'<rect x="{_f(x)}" y="{_f(yy - 8)}" width="9" height="9" '
              f'fill="{PALETTE[i % len(PALETTE)]}"/>')
        c.text(x + 13, yy, name, 10)


def scatter_panels(points: list[dict], panels: list[str]) -> str:
    """One panel per label in ``panels``; ``points`` carry panel, method, x (test), y (forget)."""
    methods = sorted({p["method"] for p in points})
    n = max(len(panels), 1)
    pw, ph = 230, 230
    c = _Canvas(70 + n * (pw + 40) + 170, ph + 90)
    for k, panel in enumerate(panels or [""]):
        ax = _Axes(c, 60 + k * (pw + 40), 30, pw, ph, title=panel,
                   xlabel="test accuracy", ylabel="forget accuracy" if k == 0 else "")
        for p in points:
            if p["panel"] != panel or not (math.isfinite(p["x"]) and math.isfinite(p["y"])):
                continue
            col = PALETTE[methods.index(p["method"]) % len(PALETTE)]
            c.add(f'<circle cx="{_f(ax.px(p["x"]))}" cy="{_f(ax.py(p["y"]))}" r="4" '
                  f'fill="{col}" stroke="#000" stroke-width="0.5"/>')
    _legend(c, 70 + n * (pw + 40), 40, methods)
    return c.render()


def line_plot(series: dict[str, tuple[list[float], list[float]]], title: str = "",
              xlabel: str = "alpha", ylabel: str = "accuracy") -> str:
    names = sorted(series)
    c = _Canvas(520, 320)
    ax = _Axes(c, 60, 30, 300, 240, title=title, xlabel=xlabel, ylabel=ylabel)
    for i, name in enumerate(names):
        xs, ys = series[name]
        pts = " ".join(f"{_f(ax.px(x))},{_f(ax.py(y))}" for x, y in zip(xs, ys)
                       if math.isfinite(x) and math.isfinite(y))
        c.add(f'<polyline points="{pts}" fill="none" stroke="{PALETTE[i % len(PALETTE)]}" '
              f'stroke-width="1.5"/>')
    _legend(c, 375, 40, names)
    return c.render()


def bar_chart(values: dict[str, float], title: str = "", ylabel: str = "") -> str:
    # non-finite values are drawn as empty bars
    values = {k: (v if math.isfinite(v) else 0.0) for k, v in values.items()}
    names = list(values)
    top = max(list(values.values()) + [1e-12])
    bw = 26
    c = _Canvas(90 + max(len(names), 1) * (bw + 8) + 20, 340)
    ax = _Axes(c, 60, 30, max(len(names), 1) * (bw + 8), 200, ylim=(0, top), title=title,
               ylabel=ylabel)
    for i, name in enumerate(names):
        x = 60 + 4 + i * (bw + 8)
        y = ax.py(values[name])
        c.add(f'<rect x="{_f(x)}" y="{_f(y)}" width="{bw}" height="{_f(230 - y)}" '
              f'fill="{PALETTE[i % len(PALETTE)]}"/>')
        c.text(x + bw / 2, 246, name, 9, "end", rotate=-60)
    return c.render()
