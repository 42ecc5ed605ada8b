"""Mask encoding helpers matching the engine's manifest schema.

Uncompressed COCO-style RLE: column-major run lengths, first run counts
background. Implemented here independently so the adapters talk to the
engine only through its file formats.
"""

from __future__ import annotations

import numpy as np


def encode_mask(grid: np.ndarray) -> dict:
    """Boolean (H, W) grid to {"size": [h, w], "counts": [...]}."""
    arr = np.asarray(grid, dtype=bool)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"mask grid must be non-empty 2-D, got shape {arr.shape}")
    flat = arr.ravel(order="F")
    boundaries = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate(([0], boundaries, [flat.size]))
    counts = np.diff(edges).tolist()
    if flat[0]:
        counts.insert(0, 0)
    return {"size": [int(arr.shape[0]), int(arr.shape[1])], "counts": [int(c) for c in counts]}


def decode_mask(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    counts = rle["counts"]
    values = np.arange(len(counts)) % 2
    flat = np.repeat(values.astype(bool), counts)
    if flat.size != h * w:
        raise ValueError(f"rle covers {flat.size} pixels, expected {h * w}")
    return flat.reshape((h, w), order="F")


def tight_bbox(grid: np.ndarray) -> list[float]:
    """[x, y, w, h] of the foreground, matching the engine's derivation."""
    rows, cols = np.nonzero(grid)
    if rows.size == 0:
        raise ValueError("mask has no foreground pixels")
    return [float(cols.min()), float(rows.min()),
            float(cols.max() - cols.min() + 1), float(rows.max() - rows.min() + 1)]
