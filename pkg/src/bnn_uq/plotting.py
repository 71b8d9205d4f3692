"""CSV and SVG output for posterior predictive bands and probability maps.

The SVG writer formats every coordinate with a fixed number of decimals so
identical inputs produce identical bytes.
"""

from __future__ import annotations

import csv

import numpy as np

from bnn_uq.metrics import IntervalBand

WIDTH, HEIGHT, PAD = 480, 320, 40


def emit_band_csv(band: IntervalBand, x_grid, path) -> None:
    """One row per grid point: ``x, mean, low, high``."""
    x = np.asarray(x_grid, dtype=float).reshape(-1)
    if np.any(np.diff(x) < 0):
        raise ValueError("grid must be sorted")
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["x", "mean", "low", "high"])
        for row in zip(x, band.mean, band.low, band.high):
            out.writerow([f"{v:.17g}" for v in row])


def read_band_csv(path) -> tuple[np.ndarray, IntervalBand]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], IntervalBand(data[:, 1], data[:, 2], data[:, 3])


def _scale(lo, hi, a, b):
    span = hi - lo if hi > lo else 1.0
    return lambda v: a + (np.asarray(v, dtype=float) - lo) * (b - a) / span


def _pts(xs, ys):
    return " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))


def band_polygon(x, band: IntervalBand):
    """Closed outline of the band: upper edge left to right, lower edge back."""
    xs = np.concatenate([x, x[::-1]])
    ys = np.concatenate([band.high, band.low[::-1]])
    return xs, ys


def emit_svg_plot(band: IntervalBand, x_grid, train_x, train_y, path, title: str = "") -> None:
    """Mean curve, shaded 95% band and training points in one SVG panel."""
    x = np.asarray(x_grid, dtype=float).reshape(-1)
    tx = np.asarray(train_x, dtype=float).reshape(-1)
    ty = np.asarray(train_y, dtype=float).reshape(-1)
    y_all = np.concatenate([band.low, band.high, ty])
    y_lo, y_hi = float(y_all.min()), float(y_all.max())
    sx = _scale(float(x.min()), float(x.max()), PAD, WIDTH - PAD)
    sy = _scale(y_lo, y_hi, HEIGHT - PAD, PAD)
    px, py = band_polygon(x, band)
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<rect x="{PAD}" y="{PAD}" width="{WIDTH - 2 * PAD}" height="{HEIGHT - 2 * PAD}" '
        'fill="none" stroke="black" stroke-width="1"/>',
        f'<polygon class="band" points="{_pts(sx(px), sy(py))}" fill="#9ecae1" '
        'fill-opacity="0.6" stroke="none"/>',
        f'<polyline class="mean" points="{_pts(sx(x), sy(band.mean))}" fill="none" '
        'stroke="#08519c" stroke-width="1.5"/>',
    ]
    for cx, cy in zip(sx(tx), sy(ty)):
        lines.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="2.5" fill="#d62728"/>')
    lines.append(f'<text x="{PAD}" y="{HEIGHT - 12}" font-size="11">x: [{x.min():.3g}, '
                 f'{x.max():.3g}]  y: [{y_lo:.3g}, {y_hi:.3g}]</text>')
    if title:
        lines.append(f'<text x="{PAD}" y="24" font-size="13">{title}</text>')
    lines.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def probability_grid(extent=(-6.0, 6.0), n: int = 50):
    """Cell-centre coordinates of an ``n x n`` raster; rows run along x2."""
    lo, hi = extent
    step = (hi - lo) / n
    c = lo + step * (np.arange(n) + 0.5)
    g1, g2 = np.meshgrid(c, c)
    return np.column_stack([g1.ravel(), g2.ravel()])


def _colour(v):
    # white -> blue for v in [0, 1]
    v = float(np.clip(v, 0.0, 1.0))
    r = int(round(255 * (1 - v) + 8 * v))
    g = int(round(255 * (1 - v) + 81 * v))
    b = int(round(255 * (1 - v) + 156 * v))
    return f"#{r:02x}{g:02x}{b:02x}"


def emit_heatmap_svg(prob_samples: np.ndarray, train_x, train_y, path,
                     extent=(-6.0, 6.0), n: int = 50) -> None:
    """Three rasters: predictive mean probability, its std (scaled to max), and mean label.

    ``prob_samples`` is ``S x n^2`` class-1 probabilities on :func:`probability_grid`.
    """
    prob_samples = np.asarray(prob_samples, dtype=float)
    mean = prob_samples.mean(axis=0)
    std = prob_samples.std(axis=0)
    label = (prob_samples > 0.5).mean(axis=0)
    panels = [mean, std / std.max() if std.max() > 0 else std, label]
    size = 200
    cell = size / n
    lo, hi = extent
    s = _scale(lo, hi, 0.0, size)
    tx = np.asarray(train_x, dtype=float)
    ty = np.asarray(train_y).reshape(-1)
    width = 3 * size + 4 * 10
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{size + 20}" '
             f'viewBox="0 0 {width} {size + 20}">']
    for k, values in enumerate(panels):
        ox = 10 + k * (size + 10)
        lines.append(f'<g class="panel{k}" transform="translate({ox},10)">')
        grid = values.reshape(n, n)
        for i in range(n):  # x2 index, drawn top-down
            for j in range(n):
                lines.append(f'<rect x="{j * cell:.2f}" y="{(n - 1 - i) * cell:.2f}" '
                             f'width="{cell:.2f}" height="{cell:.2f}" '
                             f'fill="{_colour(grid[i, j])}"/>')
        for (a, b), t in zip(tx, ty):
            fill = "#d62728" if t == 1 else "#2ca02c"
            lines.append(f'<circle cx="{float(s(a)):.2f}" cy="{size - float(s(b)):.2f}" r="2" '
                         f'fill="{fill}"/>')
        lines.append("</g>")
    lines.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
