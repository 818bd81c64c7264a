"""Minimal deterministic SVG charts: line series and empirical CDFs.

No plotting library: output bytes depend only on the input data, so charts
can be diffed across runs. Fixed canvas, axes with five ticks per side, and
a legend keyed by series insertion order.
"""

from __future__ import annotations

import math

from .errors import DataError

WIDTH, HEIGHT = 640, 420
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 20, 40, 50

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _tick_label(v: float) -> str:
    return f"{v:.4g}"


def _axes(lines: list[str], x_lo, x_hi, y_lo, y_hi, title, xlabel, ylabel) -> tuple:
    plot_w = WIDTH - MARGIN_L - MARGIN_R
    plot_h = HEIGHT - MARGIN_T - MARGIN_B

    def sx(v: float) -> float:
        if x_hi == x_lo:
            return MARGIN_L + plot_w / 2.0
        return MARGIN_L + (v - x_lo) / (x_hi - x_lo) * plot_w

    def sy(v: float) -> float:
        if y_hi == y_lo:
            return MARGIN_T + plot_h / 2.0
        return MARGIN_T + plot_h - (v - y_lo) / (y_hi - y_lo) * plot_h

    lines.append(
        f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{plot_w}" height="{plot_h}" '
        'fill="none" stroke="#333333" stroke-width="1"/>'
    )
    lines.append(
        f'<text x="{WIDTH // 2}" y="24" text-anchor="middle" font-size="15">{title}</text>'
    )
    lines.append(
        f'<text x="{WIDTH // 2}" y="{HEIGHT - 12}" text-anchor="middle" font-size="12">{xlabel}</text>'
    )
    lines.append(
        f'<text x="18" y="{HEIGHT // 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 18 {HEIGHT // 2})">{ylabel}</text>'
    )
    for i in range(5):
        frac = i / 4.0
        xv = x_lo + frac * (x_hi - x_lo)
        yv = y_lo + frac * (y_hi - y_lo)
        xp, yp = _fmt(sx(xv)), _fmt(sy(yv))
        lines.append(
            f'<line x1="{xp}" y1="{MARGIN_T + plot_h}" x2="{xp}" '
            f'y2="{MARGIN_T + plot_h + 5}" stroke="#333333"/>'
        )
        lines.append(
            f'<text x="{xp}" y="{MARGIN_T + plot_h + 18}" text-anchor="middle" '
            f'font-size="11">{_tick_label(xv)}</text>'
        )
        lines.append(
            f'<line x1="{MARGIN_L - 5}" y1="{yp}" x2="{MARGIN_L}" y2="{yp}" stroke="#333333"/>'
        )
        lines.append(
            f'<text x="{MARGIN_L - 8}" y="{yp}" text-anchor="end" dominant-baseline="middle" '
            f'font-size="11">{_tick_label(yv)}</text>'
        )
    return sx, sy


def _legend(lines: list[str], names: list[str]) -> None:
    for i, name in enumerate(names):
        color = PALETTE[i % len(PALETTE)]
        y = MARGIN_T + 14 + 16 * i
        x = WIDTH - MARGIN_R - 150
        lines.append(
            f'<line x1="{x}" y1="{y}" x2="{x + 22}" y2="{y}" stroke="{color}" stroke-width="2"/>'
        )
        lines.append(f'<text x="{x + 28}" y="{y + 4}" font-size="11">{name}</text>')


def _document(lines: list[str]) -> str:
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif">\n'
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>\n'
    )
    return head + "\n".join(lines) + "\n</svg>\n"


def line_chart(path: str, series: dict, title: str, xlabel: str, ylabel: str) -> None:
    """Polyline chart of {name: (xs, ys)} series; empty input draws bare axes."""
    xs_all, ys_all = [], []
    for name, (xs, ys) in series.items():
        if len(xs) != len(ys):
            raise DataError(f"series {name!r} has mismatched lengths")
        xs_all.extend(float(v) for v in xs)
        ys_all.extend(float(v) for v in ys)
    if xs_all:
        x_lo, x_hi = min(xs_all), max(xs_all)
        y_lo, y_hi = min(ys_all), max(ys_all)
        if y_hi == y_lo:
            y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
        if x_hi == x_lo:
            x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
    else:
        x_lo, x_hi, y_lo, y_hi = 0.0, 1.0, 0.0, 1.0
    lines: list[str] = []
    sx, sy = _axes(lines, x_lo, x_hi, y_lo, y_hi, title, xlabel, ylabel)
    for i, (name, (xs, ys)) in enumerate(series.items()):
        if len(xs) == 0:
            continue
        color = PALETTE[i % len(PALETTE)]
        points = " ".join(f"{_fmt(sx(float(x)))},{_fmt(sy(float(y)))}" for x, y in zip(xs, ys))
        lines.append(
            f'<polyline points="{points}" fill="none" stroke="{color}" stroke-width="2"/>'
        )
        for x, y in zip(xs, ys):
            lines.append(
                f'<circle cx="{_fmt(sx(float(x)))}" cy="{_fmt(sy(float(y)))}" r="3" fill="{color}"/>'
            )
    _legend(lines, list(series.keys()))
    with open(path, "w", encoding="ascii", newline="\n") as handle:
        handle.write(_document(lines))


def cdf_chart(path: str, groups: dict, title: str, xlabel: str) -> None:
    """Empirical CDF step curves of {name: values}; monotone by construction."""
    xs_all = [float(v) for values in groups.values() for v in values]
    if xs_all:
        x_lo, x_hi = min(xs_all), max(xs_all)
        if x_hi == x_lo:
            x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
    else:
        x_lo, x_hi = 0.0, 1.0
    lines: list[str] = []
    sx, sy = _axes(lines, x_lo, x_hi, 0.0, 1.0, title, xlabel, "cumulative fraction")
    for i, (name, values) in enumerate(groups.items()):
        values = sorted(float(v) for v in values)
        if not values:
            continue
        color = PALETTE[i % len(PALETTE)]
        n = len(values)
        points = [f"{_fmt(sx(values[0]))},{_fmt(sy(0.0))}"]
        for k, v in enumerate(values, start=1):
            points.append(f"{_fmt(sx(v))},{_fmt(sy((k - 1) / n))}")
            points.append(f"{_fmt(sx(v))},{_fmt(sy(k / n))}")
        lines.append(
            f'<polyline points="{" ".join(points)}" fill="none" stroke="{color}" stroke-width="2"/>'
        )
    _legend(lines, list(groups.keys()))
    with open(path, "w", encoding="ascii", newline="\n") as handle:
        handle.write(_document(lines))
