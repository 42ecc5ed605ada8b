"""Independent oracles and fixture builders shared across the test suite.

Everything here is deliberately brute-force and separate from the library
code paths it checks: pixel painting for IoU, pure-python run expansion
for RLE, float64 loops for cosine scores, O(k^2) re-counting for AP.
"""

from __future__ import annotations

import json

import numpy as np

from matir.core import RegionMask


# -- RLE / geometry oracles ----------------------------------------------------

def decode_rle_oracle(height: int, width: int, counts) -> np.ndarray:
    """Pure-python column-major run expansion."""
    grid = np.zeros((height, width), dtype=bool)
    pos = 0
    for i, c in enumerate(counts):
        value = i % 2 == 1
        for p in range(pos, pos + c):
            row, col = p % height, p // height
            grid[row, col] = value
        pos += c
    return grid


def bbox_scan_oracle(grid: np.ndarray):
    """Min/max pixel scan; returns (x, y, w, h) of the foreground."""
    rows, cols = np.nonzero(grid)
    assert rows.size > 0
    return (float(cols.min()), float(rows.min()),
            float(cols.max() - cols.min() + 1), float(rows.max() - rows.min() + 1))


def mask_iou_oracle(grid_a: np.ndarray, grid_b: np.ndarray) -> float:
    inter = int(np.count_nonzero(grid_a & grid_b))
    union = int(np.count_nonzero(grid_a | grid_b))
    return inter / union if union else 0.0


def bbox_iou_pixel_oracle(a, b, canvas: int = 128) -> float:
    """Paint two integer boxes on a canvas and count pixels."""
    def paint(box):
        x, y, w, h = (int(v) for v in box)
        grid = np.zeros((canvas, canvas), dtype=bool)
        grid[y:y + h, x:x + w] = True
        return grid
    return mask_iou_oracle(paint(a), paint(b))


# -- stage-1 oracle --------------------------------------------------------------

def brute_force_ranking(index, query_vector: np.ndarray, n_c: int):
    """Float64 cosine scan over the stored rows, spec tie-breaks.

    Returns [(image_id, score, best_mask_id | None)] sorted by score
    descending then image_id ascending, cut to n_c.
    """
    q = np.asarray(query_vector, dtype=np.float64)
    rows = np.asarray(index.embeddings, dtype=np.float64)
    scored = []
    for entry in index.images:
        best_score, best_mask = -1.0, None
        for region in entry.regions:
            v = rows[region.embedding_row]
            score = float(np.dot(q, v) / (np.linalg.norm(q) * np.linalg.norm(v)))
            if best_mask is None or score > best_score or (
                    score == best_score and region.mask_id < best_mask):
                best_score, best_mask = score, region.mask_id
        scored.append((entry.image_id, best_score, best_mask))
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored[:n_c]


# -- AP oracle -------------------------------------------------------------------

def average_precision_oracle(hits, total_relevant: int, k: int) -> float:
    """O(k^2) textbook AP: re-count precision at every hit position."""
    hits = list(hits)[:k]
    total = 0.0
    for p in range(1, len(hits) + 1):
        if hits[p - 1]:
            total += sum(1 for h in hits[:p] if h) / p
    return total / min(total_relevant, k)


# -- fixture builders --------------------------------------------------------------

def grid_mask(grid: np.ndarray) -> RegionMask:
    """Test-side encoder: build counts by walking the flat Fortran order."""
    flat = np.asarray(grid, dtype=bool).ravel(order="F")
    counts = []
    current, run = False, 0
    for v in flat:
        if bool(v) == current:
            run += 1
        else:
            counts.append(run)
            current, run = bool(v), 1
    counts.append(run)
    return RegionMask(grid.shape[0], grid.shape[1], tuple(counts))


def rect_grid(height: int, width: int, y0: int, x0: int, h: int, w: int) -> np.ndarray:
    grid = np.zeros((height, width), dtype=bool)
    grid[y0:y0 + h, x0:x0 + w] = True
    return grid


def random_mask(rng: np.random.Generator, height: int, width: int, p: float = 0.3) -> np.ndarray:
    """Random grid guaranteed to have at least one foreground pixel."""
    grid = rng.random((height, width)) < p
    if not grid.any():
        grid[rng.integers(height), rng.integers(width)] = True
    return grid


def manifest_line(image_id: str, width: int, height: int, mask_id=None, grid=None,
                  embedding_row=None, uri=None, bbox=None, rle=None) -> str:
    """One manifest JSON line; bbox/rle default to oracle-derived values."""
    obj = {"image_id": image_id, "width": width, "height": height}
    if uri is not None:
        obj["uri"] = uri
    if mask_id is not None:
        mask = grid_mask(grid)
        obj["mask_id"] = mask_id
        obj["bbox"] = list(bbox) if bbox is not None else list(bbox_scan_oracle(grid))
        obj["rle"] = rle if rle is not None else mask.to_json()
        obj["embedding_row"] = embedding_row
    return json.dumps(obj)


def tiny_gallery_files(dim: int = 4):
    """The two-image, four-region fixture: (manifest text, blob bytes, dim)."""
    rows = np.array([
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 2.0, 0.0, 0.0],
        [0.0, 0.0, 3.0, 0.0],
        [1.0, 1.0, 0.0, 0.0],
    ], dtype=np.float32)[:, :dim]
    g = [
        rect_grid(4, 4, 0, 0, 2, 2),
        rect_grid(4, 4, 2, 2, 2, 2),
        rect_grid(4, 4, 1, 1, 2, 2),
        rect_grid(4, 4, 0, 2, 1, 2),
    ]
    lines = [
        manifest_line("img_a", 4, 4, mask_id=0, grid=g[0], embedding_row=0, uri="mock://img_a"),
        manifest_line("img_a", 4, 4, mask_id=1, grid=g[1], embedding_row=1, uri="mock://img_a"),
        manifest_line("img_b", 4, 4, mask_id=0, grid=g[2], embedding_row=2, uri="mock://img_b"),
        manifest_line("img_b", 4, 4, mask_id=1, grid=g[3], embedding_row=3, uri="mock://img_b"),
    ]
    return "\n".join(lines) + "\n", rows.tobytes(), dim


def random_gallery(rng: np.random.Generator, max_images: int = 20, max_regions: int = 20,
                   dim: int = 8, tie_fraction: float = 0.0, empty_image_fraction: float = 0.0):
    """Random in-process gallery for oracle comparisons.

    Returns (images, embeddings) in matir.index.assemble_index form. With
    tie_fraction > 0, some rows duplicate earlier rows bit-for-bit to
    exercise tie-breaking.
    """
    n_images = int(rng.integers(1, max_images + 1))
    images = []
    rows = []
    for i in range(n_images):
        image_id = f"im{int(rng.integers(0, 10_000)):05d}_{i}"
        if empty_image_fraction and rng.random() < empty_image_fraction:
            images.append((image_id, 8, 8, None, []))
            continue
        n_regions = int(rng.integers(1, max_regions + 1))
        regions = []
        for j in range(n_regions):
            regions.append((j, grid_mask(random_mask(rng, 8, 8))))
            if rows and tie_fraction and rng.random() < tie_fraction:
                rows.append(np.array(rows[int(rng.integers(0, len(rows)))]))
            else:
                rows.append(rng.standard_normal(dim))
        images.append((image_id, 8, 8, None, regions))
    return images, np.asarray(rows, dtype=np.float32).reshape(len(rows), dim)
