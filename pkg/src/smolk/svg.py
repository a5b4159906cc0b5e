"""Minimal SVG output: line charts, kernel grids and heat strips."""

from __future__ import annotations

from html import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")
POSITIVE = "#1f5fbf"
NEGATIVE = "#c0392b"


def _scale(values, lo, hi, out_lo, out_hi):
    if hi == lo:
        return np.full(np.shape(values), (out_lo + out_hi) / 2.0)
    return out_lo + (np.asarray(values, dtype=float) - lo) * (out_hi - out_lo) / (hi - lo)


def _polyline(xs, ys, color, width=1.5):
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
    return f'<polyline fill="none" stroke="{color}" stroke-width="{width}" points="{pts}"/>'


def _finite_range(arrays):
    vals = np.concatenate([np.asarray(a, dtype=float).ravel() for a in arrays])
    vals = vals[np.isfinite(vals)]
    if vals.size == 0:
        return 0.0, 1.0
    return float(vals.min()), float(vals.max())


def line_chart(series, title="", xlabel="", ylabel="", width=640, height=400, markers=True):
    """``series`` is a list of ``(label, xs, ys)`` or ``(label, xs, ys, color)``."""
    ml, mr, mt, mb = 70, 20, 40, 50
    x0, x1 = _finite_range([s[1] for s in series])
    y0, y1 = _finite_range([s[2] for s in series])
    pad = 0.05 * (y1 - y0 or 1.0)
    y0, y1 = y0 - pad, y1 + pad
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'font-family="sans-serif" font-size="12">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
             f'<line x1="{ml}" y1="{height - mb}" x2="{width - mr}" y2="{height - mb}" stroke="black"/>',
             f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{height - mb}" stroke="black"/>']
    for frac in np.linspace(0, 1, 5):
        xv, yv = x0 + frac * (x1 - x0), y0 + frac * (y1 - y0)
        px = ml + frac * (width - ml - mr)
        py = height - mb - frac * (height - mt - mb)
        parts.append(f'<text x="{px:.1f}" y="{height - mb + 16}" text-anchor="middle">{xv:.3g}</text>')
        parts.append(f'<text x="{ml - 6}" y="{py + 4:.1f}" text-anchor="end">{yv:.3g}</text>')
    parts.append(f'<text x="{width / 2}" y="{height - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    parts.append(f'<text x="16" y="{height / 2}" text-anchor="middle" '
                 f'transform="rotate(-90 16 {height / 2})">{escape(ylabel)}</text>')
    for i, s in enumerate(series):
        label, xs, ys = s[0], s[1], s[2]
        color = s[3] if len(s) > 3 else PALETTE[i % len(PALETTE)]
        px = _scale(xs, x0, x1, ml, width - mr)
        py = _scale(ys, y0, y1, height - mb, mt)
        parts.append(_polyline(px, py, color))
        if markers and len(px) <= 64:
            parts += [f'<circle cx="{a:.2f}" cy="{b:.2f}" r="3" fill="{color}"/>'
                      for a, b in zip(px, py)]
        if label:
            parts.append(f'<text x="{width - mr - 4}" y="{mt + 14 * (i + 1)}" text-anchor="end" '
                         f'fill="{color}">{escape(str(label))}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def kernel_grid(traces, columns=4, cell_w=180, cell_h=90):
    """``traces`` is a list of ``(label, taps, color)``, one small panel each."""
    rows = max(1, -(-len(traces) // columns))
    width, height = columns * cell_w, rows * cell_h
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'font-family="sans-serif" font-size="10">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    for i, (label, taps, color) in enumerate(traces):
        cx, cy = (i % columns) * cell_w, (i // columns) * cell_h
        taps = np.asarray(taps, dtype=float)
        lo, hi = float(taps.min()), float(taps.max())
        px = _scale(np.arange(taps.size), 0, max(taps.size - 1, 1), cx + 6, cx + cell_w - 6)
        py = _scale(taps, lo, hi, cy + cell_h - 8, cy + 16)
        parts.append(f'<text x="{cx + 6}" y="{cy + 12}">{escape(label)}</text>')
        parts.append(_polyline(px, py, color, 1.2))
    parts.append("</svg>")
    return "\n".join(parts)


def _diverging(v):
    v = float(np.clip(v, -1, 1))
    if v >= 0:
        r, g, b = 255, int(255 * (1 - v)), int(255 * (1 - v))
    else:
        r, g, b = int(255 * (1 + v)), int(255 * (1 + v)), 255
    return f"#{r:02x}{g:02x}{b:02x}"


def heat_strip(trace, values, title="", width=900, height=220):
    """The trace drawn over a strip colored by ``values`` (red positive, blue negative)."""
    trace = np.asarray(trace, dtype=float)
    values = np.asarray(values, dtype=float)
    n = trace.size
    peak = float(np.max(np.abs(values))) or 1.0
    n_cells = min(n, 600)
    edges = np.linspace(0, n, n_cells + 1).astype(int)
    cell_w = width / n_cells
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'font-family="sans-serif" font-size="12">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width / 2}" y="16" text-anchor="middle">{escape(title)}</text>']
    for c in range(n_cells):
        seg = values[edges[c]:max(edges[c + 1], edges[c] + 1)]
        color = _diverging(seg.mean() / peak)
        parts.append(f'<rect x="{c * cell_w:.2f}" y="24" width="{cell_w + 0.5:.2f}" '
                     f'height="{height - 30}" fill="{color}"/>')
    px = _scale(np.arange(n), 0, max(n - 1, 1), 0, width)
    py = _scale(trace, float(trace.min()), float(trace.max()), height - 10, 30)
    parts.append(_polyline(px, py, "black", 1.0))
    parts.append("</svg>")
    return "\n".join(parts)


def write(path, svg_text: str) -> None:
    with open(path, "w") as fh:
        fh.write(svg_text)
