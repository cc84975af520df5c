"""Deterministic SVG charts from long-format result CSVs, no plotting libs.

Input rows use the ablation CSV schema (grid, cell, fold, task, metric,
value); only the fold == "mean" aggregate rows are drawn, with the cell on
the x-axis and one series per metric. Output is a self-contained SVG written
as plain text; rendering the same CSV twice yields byte-identical files.

Axis transform (documented for downstream checks): with data ranges
[x_min, x_max] and [y_min, y_max] padded to be non-degenerate,

    px = MARGIN_LEFT + (x - x_min) / (x_max - x_min) * PLOT_W
    py = MARGIN_TOP + (1 - (y - y_min) / (y_max - y_min)) * PLOT_H

Coordinates are written with 4 decimal places; every marker also carries
``data-x`` / ``data-y`` attributes holding the exact repr of its CSV values.
"""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError, DataFormatError

WIDTH, HEIGHT = 640, 420
MARGIN_LEFT, MARGIN_RIGHT = 70, 150
MARGIN_TOP, MARGIN_BOTTOM = 30, 50
PLOT_W = WIDTH - MARGIN_LEFT - MARGIN_RIGHT
PLOT_H = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _fmt(v: float) -> str:
    return f"{v:.4f}"


def _axis_ranges(xs, ys):
    x_min, x_max = min(xs), max(xs)
    y_min, y_max = min(ys), max(ys)
    if x_max == x_min:
        x_min, x_max = x_min - 0.5, x_max + 0.5
    if y_max == y_min:
        y_min, y_max = y_min - 0.5, y_max + 0.5
    return x_min, x_max, y_min, y_max


def data_to_px(x, x_min, x_max):
    return MARGIN_LEFT + (x - x_min) / (x_max - x_min) * PLOT_W


def data_to_py(y, y_min, y_max):
    return MARGIN_TOP + (1.0 - (y - y_min) / (y_max - y_min)) * PLOT_H


def _cell_positions(rows):
    """Numeric x for each cell: the cell value itself when numeric, else its
    first-appearance index."""
    order, seen = [], set()
    for row in rows:
        if row["cell"] not in seen:
            seen.add(row["cell"])
            order.append(row["cell"])
    try:
        return {c: float(c) for c in order}, False
    except ValueError:
        return {c: float(i) for i, c in enumerate(order)}, True


def render_plot(rows: list[dict], kind: str = "line") -> str:
    """Render mean-aggregate rows to an SVG string (kind: line | bar)."""
    if kind not in ("line", "bar"):
        raise ConfigError(f"unknown plot kind {kind!r}")
    means = [r for r in rows if str(r["fold"]) == "mean"]
    if not means:
        raise DataFormatError("no aggregate (fold == mean) rows to plot")
    positions, _ = _cell_positions(means)
    metrics = sorted({r["metric"] for r in means})
    xs = [positions[r["cell"]] for r in means]
    ys = [float(r["value"]) for r in means]
    x_min, x_max, y_min, y_max = _axis_ranges(xs, ys)
    if kind == "bar":
        y_min = min(y_min, 0.0)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<!-- axes: x in [{repr(x_min)}, {repr(x_max)}], '
        f'y in [{repr(y_min)}, {repr(y_max)}] -->',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<rect x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{PLOT_W}" '
        f'height="{PLOT_H}" fill="none" stroke="#333333" stroke-width="1"/>',
    ]

    # y ticks at min / mid / max
    for frac in (0.0, 0.5, 1.0):
        y_val = y_min + frac * (y_max - y_min)
        py = data_to_py(y_val, y_min, y_max)
        parts.append(f'<line x1="{MARGIN_LEFT - 4}" y1="{_fmt(py)}" '
                     f'x2="{MARGIN_LEFT}" y2="{_fmt(py)}" stroke="#333333"/>')
        parts.append(f'<text x="{MARGIN_LEFT - 8}" y="{_fmt(py + 4)}" '
                     f'font-size="11" text-anchor="end">{y_val:.4g}</text>')
    # x ticks per cell
    for cell, x_val in positions.items():
        px = data_to_px(x_val, x_min, x_max)
        parts.append(f'<line x1="{_fmt(px)}" y1="{HEIGHT - MARGIN_BOTTOM}" '
                     f'x2="{_fmt(px)}" y2="{HEIGHT - MARGIN_BOTTOM + 4}" stroke="#333333"/>')
        parts.append(f'<text x="{_fmt(px)}" y="{HEIGHT - MARGIN_BOTTOM + 18}" '
                     f'font-size="11" text-anchor="middle">{cell}</text>')

    n_series = len(metrics)
    for si, metric in enumerate(metrics):
        color = PALETTE[si % len(PALETTE)]
        series = [r for r in means if r["metric"] == metric]
        series.sort(key=lambda r: positions[r["cell"]])
        pts = [(positions[r["cell"]], float(r["value"]), r) for r in series]
        if kind == "line":
            if len(pts) > 1:
                path = " ".join(
                    f"{_fmt(data_to_px(x, x_min, x_max))},{_fmt(data_to_py(y, y_min, y_max))}"
                    for x, y, _ in pts)
                parts.append(f'<polyline points="{path}" fill="none" '
                             f'stroke="{color}" stroke-width="1.5"/>')
            for x, y, r in pts:
                parts.append(
                    f'<circle cx="{_fmt(data_to_px(x, x_min, x_max))}" '
                    f'cy="{_fmt(data_to_py(y, y_min, y_max))}" r="3" fill="{color}" '
                    f'data-x="{repr(x)}" data-y="{repr(float(r["value"]))}"/>')
        else:
            slot = PLOT_W / max(len(pts), 1)
            bar_w = slot / (n_series + 1)
            for bi, (x, y, r) in enumerate(pts):
                x0 = MARGIN_LEFT + bi * slot + (si + 0.5) * bar_w
                py = data_to_py(y, y_min, y_max)
                py0 = data_to_py(max(y_min, 0.0), y_min, y_max)
                top, bottom = min(py, py0), max(py, py0)
                parts.append(
                    f'<rect x="{_fmt(x0)}" y="{_fmt(top)}" width="{_fmt(bar_w)}" '
                    f'height="{_fmt(bottom - top)}" fill="{color}" '
                    f'data-x="{repr(x)}" data-y="{repr(float(r["value"]))}"/>')
        # legend
        ly = MARGIN_TOP + 10 + si * 18
        lx = WIDTH - MARGIN_RIGHT + 12
        parts.append(f'<rect x="{lx}" y="{ly - 9}" width="12" height="12" '
                     f'fill="{color}" class="legend"/>')
        parts.append(f'<text x="{lx + 18}" y="{ly + 2}" font-size="12">{metric}</text>')

    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def plot_results(rows: list[dict], kind: str, out_path: str | Path) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(render_plot(rows, kind), encoding="ascii", newline="\n")
    return out_path
