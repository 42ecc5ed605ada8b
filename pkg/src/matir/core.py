"""Shared domain types and deterministic geometry/mask primitives.

Masks use COCO-style uncompressed RLE: runs are counted in column-major
(Fortran) order and the first run counts background pixels, so a mask whose
first pixel is foreground starts with a zero-length background run. Boxes
are (x, y, w, h) with continuous w*h area semantics; boxes derived from
masks are integer-aligned and tight.

All types here are immutable after construction and every operation is
pure, so everything is safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyMaskError, InvalidInputError, MalformedMaskError


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box: x/y is the left/top corner, w/h the extent."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise InvalidInputError(f"box extent must be non-negative, got w={self.w}, h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]


@dataclass(frozen=True)
class RegionMask:
    """Binary mask stored as uncompressed column-major RLE.

    ``counts`` alternates background/foreground run lengths, beginning with
    background. A zero is only permitted as the first element (mask starts
    with foreground); interior zero-length runs are malformed.
    """

    height: int
    width: int
    counts: tuple[int, ...]

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise MalformedMaskError(f"mask dimensions must be positive, got {self.height}x{self.width}")
        if not self.counts:
            raise MalformedMaskError("mask has no runs")
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        total = 0
        for i, c in enumerate(self.counts):
            if c < 0:
                raise MalformedMaskError(f"negative run length {c} at run {i}")
            if c == 0 and i != 0:
                raise MalformedMaskError(f"zero-length run at interior position {i}")
            total += c
        if total != self.height * self.width:
            raise MalformedMaskError(
                f"run lengths sum to {total}, expected {self.height}x{self.width}={self.height * self.width}"
            )

    @property
    def foreground_count(self) -> int:
        return sum(self.counts[1::2])

    def to_json(self) -> dict:
        return {"size": [self.height, self.width], "counts": list(self.counts)}

    @classmethod
    def from_json(cls, obj: dict) -> "RegionMask":
        try:
            h, w = obj["size"]
            counts = obj["counts"]
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedMaskError(f"bad rle object: {obj!r}") from exc
        return cls(int(h), int(w), tuple(counts))


@dataclass(frozen=True)
class RegionRecord:
    """One mask proposal of an image: mask, its tight box, embedding row."""

    mask_id: int
    mask: RegionMask
    bbox: BoundingBox
    embedding_row: int


@dataclass(frozen=True)
class ImageEntry:
    """A gallery image with its region proposals."""

    image_id: str
    width: int
    height: int
    regions: tuple[RegionRecord, ...]
    uri: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "regions", tuple(self.regions))
        seen = set()
        for r in self.regions:
            if (r.mask.height, r.mask.width) != (self.height, self.width):
                raise InvalidInputError(
                    f"image {self.image_id}: region {r.mask_id} mask is "
                    f"{r.mask.height}x{r.mask.width}, image is {self.height}x{self.width}"
                )
            if r.mask_id in seen:
                raise InvalidInputError(f"image {self.image_id}: duplicate mask_id {r.mask_id}")
            seen.add(r.mask_id)

    @property
    def backend_uri(self) -> str:
        """Reference sent to model backends: the uri when set, else the id."""
        return self.uri if self.uri is not None else self.image_id


def validate_embedding(values, dimension: int | None = None) -> np.ndarray:
    """Check a raw vector (finite, 1-D, optionally of a given dimension)."""
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1 or vec.size == 0:
        raise InvalidInputError(f"embedding must be a non-empty 1-D vector, got shape {vec.shape}")
    if dimension is not None and vec.size != dimension:
        raise InvalidInputError(f"embedding has dimension {vec.size}, expected {dimension}")
    if not np.isfinite(vec).all():
        raise InvalidInputError("embedding contains non-finite components")
    return vec


def rle_decode(mask: RegionMask) -> np.ndarray:
    """Expand an RLE mask to a boolean (height, width) grid."""
    values = np.arange(len(mask.counts), dtype=np.int64) % 2
    flat = np.repeat(values.astype(bool), mask.counts)
    return flat.reshape((mask.height, mask.width), order="F")


def rle_encode(grid) -> RegionMask:
    """Encode a boolean grid into an RLE mask. Inverse of rle_decode."""
    arr = np.asarray(grid)
    if arr.ndim != 2 or arr.size == 0:
        raise InvalidInputError(f"grid must be a non-empty 2-D array, got shape {arr.shape}")
    flat = arr.astype(bool).ravel(order="F")
    boundaries = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate(([0], boundaries, [flat.size]))
    counts = np.diff(edges).tolist()
    if flat[0]:
        counts.insert(0, 0)
    return RegionMask(arr.shape[0], arr.shape[1], tuple(counts))


def _foreground_runs(mask: RegionMask):
    """Yield (start, end) flat column-major extents of foreground runs."""
    pos = 0
    for i, c in enumerate(mask.counts):
        if i % 2 == 1 and c > 0:
            yield pos, pos + c
        pos += c


def bbox_from_mask(mask: RegionMask) -> BoundingBox:
    """Tightest integer-aligned box around the mask's foreground.

    Works directly on the runs: a run crossing a column boundary spans the
    full row range, otherwise it stays inside one column.
    """
    h = mask.height
    min_row = min_col = None
    max_row = max_col = None
    for start, end in _foreground_runs(mask):
        first_col, last_col = start // h, (end - 1) // h
        if last_col > first_col:
            lo_row, hi_row = 0, h - 1
        else:
            lo_row, hi_row = start % h, (end - 1) % h
        if min_col is None:
            min_row, max_row = lo_row, hi_row
            min_col, max_col = first_col, last_col
        else:
            min_row = min(min_row, lo_row)
            max_row = max(max_row, hi_row)
            min_col = min(min_col, first_col)
            max_col = max(max_col, last_col)
    if min_col is None:
        raise EmptyMaskError("mask has no foreground pixels")
    return BoundingBox(float(min_col), float(min_row), float(max_col - min_col + 1), float(max_row - min_row + 1))


def bbox_iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union of two boxes; 0.0 when both are degenerate."""
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    # The true intersection never exceeds either area; the cap stops
    # x+w rounding from pushing identical boxes past IoU 1.
    inter = min(ix * iy, a.area, b.area)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def mask_iou(a: RegionMask, b: RegionMask) -> float:
    """Pixelwise intersection-over-union of two equal-sized masks."""
    if (a.height, a.width) != (b.height, b.width):
        raise InvalidInputError(
            f"mask dimensions differ: {a.height}x{a.width} vs {b.height}x{b.width}"
        )
    ga = rle_decode(a)
    gb = rle_decode(b)
    inter = int(np.count_nonzero(ga & gb))
    union = int(np.count_nonzero(ga | gb))
    if union == 0:
        return 0.0
    return inter / union


def clamp_box_to_image(x1: float, y1: float, x2: float, y2: float, width: int, height: int):
    """Clamp absolute-pixel corners to [0, width] x [0, height]."""
    cx1 = min(max(x1, 0.0), float(width))
    cy1 = min(max(y1, 0.0), float(height))
    cx2 = min(max(x2, 0.0), float(width))
    cy2 = min(max(y2, 0.0), float(height))
    return cx1, cy1, cx2, cy2


def corners_to_box(x1: float, y1: float, x2: float, y2: float) -> BoundingBox:
    """Convert (x1, y1, x2, y2) corners to the internal (x, y, w, h) form."""
    if x2 < x1 or y2 < y1:
        raise InvalidInputError(f"inverted corners: ({x1}, {y1}, {x2}, {y2})")
    return BoundingBox(x1, y1, x2 - x1, y2 - y1)
