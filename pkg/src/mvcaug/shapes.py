"""Synthetic grayscale shapes dataset (circle / square / cross)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import rng as rng_mod
from .data import REAL, DatasetManifest, Record, save_image
from .errors import InvalidArgumentError

SHAPES = ("circle", "square", "cross")
_SUPERSAMPLE = 4


def _mask(kind: str, xx, yy, cx, cy, r):
    dx, dy = np.abs(xx - cx), np.abs(yy - cy)
    if kind == "circle":
        return dx**2 + dy**2 <= r**2
    if kind == "square":
        return (dx <= r * 0.85) & (dy <= r * 0.85)
    if kind == "cross":
        arm = r * 0.32
        return ((dx <= arm) & (dy <= r)) | ((dy <= arm) & (dx <= r))
    raise InvalidArgumentError(f"unknown shape {kind!r}")


def render_shape(kind: str, size: int, gen: np.random.Generator) -> tuple[np.ndarray, str]:
    """Render one antialiased shape; returns the ``(1, size, size)`` image and its descriptor."""
    scale = gen.choice(["small", "medium", "large"])
    lo, hi = {"small": (0.16, 0.24), "medium": (0.24, 0.32), "large": (0.32, 0.40)}[scale]
    r = gen.uniform(lo, hi) * size
    margin = r + 1.0
    cx = gen.uniform(margin, size - margin)
    cy = gen.uniform(margin, size - margin)
    intensity = gen.uniform(0.55, 1.0)
    background = gen.uniform(0.0, 0.15)

    n = size * _SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / _SUPERSAMPLE
    xx, yy = np.meshgrid(coords, coords)
    hi_res = _mask(kind, xx, yy, cx, cy, r).astype(np.float64)
    cover = hi_res.reshape(size, _SUPERSAMPLE, size, _SUPERSAMPLE).mean(axis=(1, 3))
    img = background + (intensity - background) * cover

    brightness = "bright" if intensity >= 0.78 else "dim"
    vert = ("top", "middle", "bottom")[min(int(3 * cy / size), 2)]
    horiz = ("left", "center", "right")[min(int(3 * cx / size), 2)]
    where = "the center" if (vert, horiz) == ("middle", "center") else f"the {vert} {horiz}"
    desc = f"a {scale} {brightness} {kind} near {where}"
    return img[None].astype(np.float32), desc


def generate_shapes(out_dir, classes=SHAPES, count: int = 20, size: int = 32, seed: int = 0,
                    prefix: str = "img") -> DatasetManifest:
    """Render ``count`` images per class under ``out_dir`` and write ``manifest.json``."""
    if size < 16:
        raise InvalidArgumentError(f"image size must be >= 16, got {size}")
    if count < 1:
        raise InvalidArgumentError("count must be >= 1")
    out_dir = Path(out_dir)
    records = []
    for label in classes:
        for i in range(count):
            gen = rng_mod.stream(seed, "shapes", label, i)
            img, desc = render_shape(label, size, gen)
            rel = f"{label}/{prefix}_{i:04d}.png"
            save_image(out_dir / rel, img)
            records.append(Record(rel, label, desc, REAL, None))
    manifest = DatasetManifest(records, list(classes), out_dir.resolve())
    manifest.save(out_dir / "manifest.json")
    return manifest
