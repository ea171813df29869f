"""Image grids: one row per class, real image in the first column."""

from __future__ import annotations

import numpy as np

from .data import REAL, SYNTHETIC, DatasetManifest, save_image


def tile(rows, pad: int = 2, fill: float = 1.0) -> np.ndarray:
    """Tile a list of rows of ``(C, H, W)`` images into one ``(C, H', W')`` image."""
    first = next(img for row in rows for img in row)
    c, h, w = first.shape
    ncols = max(len(r) for r in rows)
    out = np.full((c, pad + len(rows) * (h + pad), pad + ncols * (w + pad)), fill, dtype=np.float32)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            out[:, y:y + h, x:x + w] = img
    return out


def grid_rows(manifest: DatasetManifest, n_real: int = 1, n_syn: int = 3, channels: int = 1):
    rows, labels = [], []
    for label in manifest.classes:
        real = manifest.select(label, REAL)[:n_real]
        syn = manifest.select(label, SYNTHETIC)[:n_syn]
        if not real and not syn:
            continue
        rows.append(list(manifest.load_images(real + syn, channels)))
        labels.append(label)
    return rows, labels


def render_grid(manifest: DatasetManifest, path, n_real: int = 1, n_syn: int = 3, channels: int = 1) -> np.ndarray:
    """Write a grid PNG; rows are classes, the first ``n_real`` columns are real images."""
    rows, _ = grid_rows(manifest, n_real, n_syn, channels)
    img = tile(rows)
    save_image(path, img)
    return img
