"""Minimal SVG line charts: axes, tick labels, one polyline per series and a legend."""

from __future__ import annotations

import math
from html import escape
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence, Union

from BatchlessNorm.experiments.results import header_lines

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")
WIDTH, HEIGHT = 640, 400
MARGIN_LEFT, MARGIN_RIGHT, MARGIN_TOP, MARGIN_BOTTOM = 70, 150, 40, 50

Series = Mapping[str, Sequence[tuple[float, float]]]


def _fmt(value: float) -> str:
    return f"{value:.2f}"


def _ticks(low: float, high: float, count: int = 5) -> list[float]:
    if high == low:
        return [low]
    return [low + (high - low) * i / (count - 1) for i in range(count)]


def svg_line_chart(
    series: Series,
    title: str,
    x_label: str,
    y_label: str,
    log_x: bool = False,
    metadata: Optional[Mapping[str, Any]] = None,
) -> str:
    """Render ``series`` (label -> [(x, y), ...]) as an SVG document string.

    ``metadata`` goes into a ``<desc>`` element in the same `# key: json` lines the
    result files start with, so a chart carries the configuration and seed behind it.
    """
    points = [(x, y) for values in series.values() for x, y in values]
    transform = (lambda x: math.log2(x)) if log_x else (lambda x: x)
    if points:
        xs = [transform(x) for x, _ in points]
        ys = [y for _, y in points]
        x_low, x_high = min(xs), max(xs)
        y_low, y_high = min(ys), max(ys)
    else:
        x_low = x_high = y_low = y_high = 0.0
    if x_high == x_low:
        x_high = x_low + 1.0
    if y_high == y_low:
        y_high = y_low + 1.0

    plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM

    def px(x: float) -> float:
        return MARGIN_LEFT + (transform(x) - x_low) / (x_high - x_low) * plot_w

    def py(y: float) -> float:
        return MARGIN_TOP + (1.0 - (y - y_low) / (y_high - y_low)) * plot_h

    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.0f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{MARGIN_LEFT}" y1="{MARGIN_TOP + plot_h}" x2="{MARGIN_LEFT + plot_w}" '
        f'y2="{MARGIN_TOP + plot_h}" stroke="black"/>',
        f'<line x1="{MARGIN_LEFT}" y1="{MARGIN_TOP}" x2="{MARGIN_LEFT}" y2="{MARGIN_TOP + plot_h}" stroke="black"/>',
    ]
    if metadata:
        lines.insert(1, f"<desc>\n{escape(header_lines(metadata), quote=False)}</desc>")
    for tick in _ticks(x_low, x_high):
        x = MARGIN_LEFT + (tick - x_low) / (x_high - x_low) * plot_w
        label = f"{2 ** tick:.4g}" if log_x else f"{tick:.4g}"
        lines.append(
            f'<text x="{_fmt(x)}" y="{MARGIN_TOP + plot_h + 16}" text-anchor="middle">{label}</text>'
        )
    for tick in _ticks(y_low, y_high):
        y = py(tick)
        lines.append(f'<text x="{MARGIN_LEFT - 6}" y="{_fmt(y + 4)}" text-anchor="end">{tick:.4g}</text>')
    lines.append(
        f'<text x="{MARGIN_LEFT + plot_w / 2:.0f}" y="{HEIGHT - 10}" text-anchor="middle">{escape(x_label)}</text>'
    )
    lines.append(
        f'<text x="16" y="{MARGIN_TOP + plot_h / 2:.0f}" text-anchor="middle" '
        f'transform="rotate(-90 16 {MARGIN_TOP + plot_h / 2:.0f})">{escape(y_label)}</text>'
    )

    for index, (label, values) in enumerate(series.items()):
        color = PALETTE[index % len(PALETTE)]
        coords = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in values)
        lines.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        legend_y = MARGIN_TOP + 14 * index
        lines.append(
            f'<line x1="{WIDTH - MARGIN_RIGHT + 10}" y1="{legend_y}" x2="{WIDTH - MARGIN_RIGHT + 30}" '
            f'y2="{legend_y}" stroke="{color}" stroke-width="2"/>'
        )
        lines.append(f'<text x="{WIDTH - MARGIN_RIGHT + 35}" y="{legend_y + 4}">{escape(label)}</text>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def write_svg(path: Union[str, Path], svg: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(svg, encoding="utf-8")
    return path
