"""Static SVG line charts of metrics columns against episode."""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

from .io import atomic_write_text, read_csv_columns

WIDTH, HEIGHT = 720, 420
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 170, 30, 50
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


class PlotError(ValueError):
    pass


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def render_svg(x: np.ndarray, series: dict[str, np.ndarray], xlabel: str = "episode") -> str:
    finite = [v[np.isfinite(v)] for v in series.values()]
    finite = [v for v in finite if v.size]
    lo = min(float(v.min()) for v in finite) if finite else 0.0
    hi = max(float(v.max()) for v in finite) if finite else 1.0
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    x0, x1 = float(x.min()), float(x.max())
    if x1 == x0:
        x1 = x0 + 1.0
    pw = WIDTH - MARGIN_L - MARGIN_R
    ph = HEIGHT - MARGIN_T - MARGIN_B

    def px(v):
        return MARGIN_L + (v - x0) / (x1 - x0) * pw

    def py(v):
        return MARGIN_T + (hi - v) / (hi - lo) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for k in range(5):
        v = lo + (hi - lo) * k / 4
        y = py(v)
        out.append(f'<line x1="{MARGIN_L - 4}" y1="{y:.2f}" x2="{MARGIN_L}" y2="{y:.2f}" stroke="black"/>')
        out.append(f'<text x="{MARGIN_L - 6}" y="{y + 4:.2f}" text-anchor="end">{_fmt(v)}</text>')
    for k in range(5):
        v = x0 + (x1 - x0) * k / 4
        xp = px(v)
        out.append(f'<line x1="{xp:.2f}" y1="{MARGIN_T + ph}" x2="{xp:.2f}" y2="{MARGIN_T + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{xp:.2f}" y="{MARGIN_T + ph + 18}" text-anchor="middle">{_fmt(v)}</text>')
    out.append(f'<text x="{MARGIN_L + pw / 2:.2f}" y="{HEIGHT - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    for i, (name, y) in enumerate(series.items()):
        color = COLORS[i % len(COLORS)]
        ok = np.isfinite(y)
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x[ok], y[ok]))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = MARGIN_T + 16 + 18 * i
        lx = WIDTH - MARGIN_R + 12
        out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 20}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 26}" y="{ly}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_metrics(csv_path, columns, svg_path):
    """Render ``columns`` of a metrics CSV against its episode column; returns the SVG text."""
    if not columns:
        raise PlotError("no columns requested")
    try:
        header, cols = read_csv_columns(csv_path)
    except ValueError as exc:
        raise PlotError(str(exc)) from None
    missing = [c for c in columns if c not in cols]
    if missing:
        raise PlotError(f"unknown column(s): {', '.join(missing)}; available: {', '.join(header)}")
    n = len(cols[header[0]])
    if n == 0:
        raise PlotError(f"{csv_path}: no data rows")
    x = cols["episode"] if "episode" in cols else np.arange(n, dtype=float)
    series = {}
    for c in columns:
        if cols[c].dtype == object:
            raise PlotError(f"column {c!r} is not numeric")
        series[c] = cols[c].astype(float)
    svg = render_svg(np.asarray(x, dtype=float), series)
    atomic_write_text(svg_path, svg)
    return svg


def polyline_points(svg: str) -> list[int]:
    """Number of vertices in each polyline (used by tests and sanity checks)."""
    counts = []
    for part in svg.split("<polyline")[1:]:
        pts = part.split('points="', 1)[1].split('"', 1)[0].split()
        counts.append(len(pts))
    return counts

