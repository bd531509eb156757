"""Plain-text artifacts: CSV matrices, SVG heatmaps and PGM rasters.

No plotting library is needed; the SVGs are a grid of ``<rect>`` cells.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np


def write_matrix_csv(path, matrix: np.ndarray, row_labels: Sequence[str],
                     col_labels: Sequence[str], corner: str = "") -> None:
    matrix = np.asarray(matrix, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([corner, *col_labels])
        for label, row in zip(row_labels, matrix):
            w.writerow([label, *(repr(float(v)) for v in row)])


def read_matrix_csv(path) -> tuple[np.ndarray, list[str], list[str]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    cols = rows[0][1:]
    labels = [r[0] for r in rows[1:]]
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]]), labels, cols


def diverging_color(v: float, vmax: float) -> str:
    """Blue for negative, white at zero, red for positive."""
    t = 0.0 if vmax <= 0 else max(-1.0, min(1.0, v / vmax))
    if t >= 0:
        r, g, b = 255, round(255 * (1 - t)), round(255 * (1 - t))
    else:
        r, g, b = round(255 * (1 + t)), round(255 * (1 + t)), 255
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap_svg(matrix: np.ndarray, row_labels: Sequence[str], col_labels: Sequence[str],
                title: str, vmax: float | None = None, cell: int = 40) -> str:
    matrix = np.asarray(matrix, dtype=np.float64)
    if vmax is None:
        vmax = float(np.abs(matrix).max()) if matrix.size else 1.0
    left, top = 90, 60
    nr, nc = matrix.shape
    width = left + nc * cell + 20
    height = top + nr * cell + 20
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="sans-serif" font-size="11">',
        f'<text x="{left}" y="16" font-size="13">{escape(title)}</text>',
    ]
    for j, lab in enumerate(col_labels):
        x = left + j * cell + cell / 2
        out.append(f'<text x="{x:.1f}" y="{top - 6}" text-anchor="end" '
                   f'transform="rotate(-45 {x:.1f} {top - 6})">{escape(str(lab))}</text>')
    for i, lab in enumerate(row_labels):
        y = top + i * cell + cell / 2 + 4
        out.append(f'<text x="{left - 6}" y="{y:.1f}" text-anchor="end">{escape(str(lab))}</text>')
        for j in range(nc):
            v = matrix[i, j]
            out.append(f'<rect x="{left + j * cell}" y="{top + i * cell}" width="{cell}" '
                       f'height="{cell}" fill="{diverging_color(v, vmax)}" stroke="#888">'
                       f'<title>{v:.4f}</title></rect>')
            out.append(f'<text x="{left + j * cell + cell / 2:.1f}" y="{top + i * cell + cell / 2 + 4:.1f}" '
                       f'text-anchor="middle" font-size="9">{v:.2f}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_heatmap_svg(path, matrix, row_labels, col_labels, title, vmax=None) -> None:
    Path(path).write_text(heatmap_svg(matrix, row_labels, col_labels, title, vmax))


def pair_raster(original: np.ndarray, reconstruction: np.ndarray, scale: int = 8) -> np.ndarray:
    """Side-by-side 8-bit image: original | 1px separator | reconstruction."""
    a = np.clip(original, 0.0, 1.0)
    b = np.clip(reconstruction, 0.0, 1.0)
    sep = np.full((a.shape[0], 1), 0.5)
    img = np.concatenate([a, sep, b], axis=1)
    img = np.kron(img, np.ones((scale, scale)))
    return np.round(img * 255).astype(np.int64)


def write_pgm(path, image: np.ndarray, maxval: int = 255) -> None:
    """Plain (P2) PGM."""
    h, w = image.shape
    lines = ["P2", f"{w} {h}", str(maxval)]
    lines += [" ".join(str(int(v)) for v in row) for row in image]
    Path(path).write_text("\n".join(lines) + "\n")


def read_pgm(path) -> np.ndarray:
    tokens = Path(path).read_text().split()
    if tokens[0] != "P2":
        raise ValueError(f"{path}: not a plain PGM")
    w, h = int(tokens[1]), int(tokens[2])
    vals = np.array([int(t) for t in tokens[4:4 + w * h]])
    return vals.reshape(h, w)
