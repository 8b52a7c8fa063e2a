"""Plot-data emission: labeled sample CSVs and a dependency-free SVG scatter."""

from __future__ import annotations

import csv

import numpy as np

PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]


def write_samples_csv(path, points, labels) -> None:
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(points.shape[1])] + ["label"])
        for p, lab in zip(points, labels):
            w.writerow([repr(float(v)) for v in p] + [int(lab)])


def read_samples_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))[1:]
    pts = np.array([[float(v) for v in r[:-1]] for r in rows])
    return pts, np.array([int(r[-1]) for r in rows], dtype=np.int64)


def scatter_svg(path, panels, size: int = 320, radius: float = 1.2) -> None:
    """Side-by-side scatter panels of 2-D points colored by label.

    ``panels`` is a list of (title, points, labels). All panels share one
    coordinate frame so they can be compared by eye.
    """
    if not panels:
        raise ValueError("nothing to plot")
    allpts = np.concatenate([np.asarray(p, dtype=np.float64) for _, p, _ in panels])
    if allpts.shape[1] != 2:
        raise ValueError("scatter_svg only draws 2-D points")
    lo, hi = allpts.min(axis=0), allpts.max(axis=0)
    span = float(np.max(hi - lo)) or 1.0
    pad, top = 10, 24
    width = len(panels) * (size + pad) + pad
    height = size + top + pad
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>']
    for k, (title, pts, labels) in enumerate(panels):
        x0 = pad + k * (size + pad)
        out.append(f'<rect x="{x0}" y="{top}" width="{size}" height="{size}" fill="none" stroke="#999"/>')
        out.append(f'<text x="{x0 + 4}" y="{top - 8}" font-family="sans-serif" font-size="12">{title}</text>')
        uv = (np.asarray(pts, dtype=np.float64) - lo) / span
        for (u, v), lab in zip(uv, labels):
            cx = x0 + 4 + u * (size - 8)
            cy = top + size - 4 - v * (size - 8)
            out.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="{radius}" '
                       f'fill="{PALETTE[int(lab) % len(PALETTE)]}"/>')
    out.append("</svg>\n")
    with open(path, "w") as f:
        f.write("\n".join(out))
