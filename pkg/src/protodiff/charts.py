"""Tiny raster renderers for comparison outputs.

These are convenience visualizations only; the CSV files next to them are
the actual contract. Charts are written as 8-bit PGM like everything else.
"""

from __future__ import annotations

import numpy as np

from .phantom import save_image


def render_bar_chart(values, path, *, height: int = 64, bar_width: int = 12,
                     gap: int = 4) -> None:
    """White bars on black, one per value, heights scaled to the maximum."""
    values = [float(v) for v in values]
    if not values:
        raise ValueError("nothing to draw")
    n = len(values)
    width = n * bar_width + (n + 1) * gap
    canvas = np.zeros((height, width))
    top = max(max(values), 1e-12)
    for i, v in enumerate(values):
        h = int(round(max(v, 0.0) / top * (height - 2)))
        x0 = gap + i * (bar_width + gap)
        if h > 0:
            canvas[height - h:, x0:x0 + bar_width] = 1.0
    save_image(path, canvas)


def render_histogram(values, path, *, bins: int = 10, lo: float = 0.0,
                     hi: float = 1.0, height: int = 64, bar_width: int = 8,
                     gap: int = 1) -> None:
    """Histogram of values over [lo, hi], rendered as a bar chart."""
    values = np.asarray(list(values), dtype=np.float64)
    if values.size == 0:
        raise ValueError("nothing to draw")
    counts, _ = np.histogram(values, bins=bins, range=(lo, hi))
    render_bar_chart(counts.tolist(), path, height=height,
                     bar_width=bar_width, gap=gap)
