"""Offline gallery index: build from manifest + embedding blob, persist, load.

The manifest is UTF-8 JSON Lines, one region per line with keys image_id,
width, height, uri (optional), mask_id, bbox [x,y,w,h], rle {size, counts}
and embedding_row (the row in the float32 blob). A line carrying only
image_id/width/height/uri (mask fields null or absent) declares an image
with zero regions, which stays in the gallery.

At build time embeddings are L2-normalized (so query-time cosine reduces
to a dot product) and physically regrouped so each image's regions occupy
a contiguous row range, with regions ordered by mask_id. RegionRecord
.embedding_row always refers to a row of GalleryIndex.embeddings.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable

import numpy as np

from .core import BoundingBox, ImageEntry, RegionMask, RegionRecord, bbox_from_mask
from .errors import (EmptyMaskError, IndexBuildError, IndexFormatError, InvalidInputError,
                     MalformedMaskError)

MAGIC = b"MATIRIDX"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<8sIIQQQ")  # magic, version, dim, n_images, n_regions, meta bytes


@dataclass(frozen=True)
class IndexStats:
    image_count: int
    total_regions: int
    min_regions: int
    mean_regions: float
    max_regions: int
    dimension: int

    def to_json(self) -> dict:
        return {
            "image_count": self.image_count,
            "total_regions": self.total_regions,
            "min_regions": self.min_regions,
            "mean_regions": self.mean_regions,
            "max_regions": self.max_regions,
            "dimension": self.dimension,
        }


class GalleryIndex:
    """Immutable gallery of images with unit-norm float32 region embeddings."""

    def __init__(self, dimension: int, images: Iterable[ImageEntry], embeddings: np.ndarray,
                 version: int = FORMAT_VERSION):
        self.dimension = int(dimension)
        self.images: tuple[ImageEntry, ...] = tuple(images)
        self.embeddings = embeddings
        self.version = int(version)
        self._validate()
        self.embeddings.flags.writeable = False
        self._pos_by_id = {e.image_id: i for i, e in enumerate(self.images)}
        counts = np.array([len(e.regions) for e in self.images], dtype=np.int64)
        self._region_counts = counts
        self._row_offsets = np.concatenate(([0], np.cumsum(counts)))

    def _validate(self):
        if self.embeddings.ndim != 2 or self.embeddings.shape[1] != self.dimension:
            raise InvalidInputError(
                f"embedding matrix shape {self.embeddings.shape} does not match dimension {self.dimension}"
            )
        if self.embeddings.dtype != np.float32:
            raise InvalidInputError(f"embeddings must be float32, got {self.embeddings.dtype}")
        total = sum(len(e.regions) for e in self.images)
        if self.embeddings.shape[0] != total:
            raise InvalidInputError(
                f"embedding matrix has {self.embeddings.shape[0]} rows for {total} regions"
            )
        ids = set()
        for entry in self.images:
            if entry.image_id in ids:
                raise InvalidInputError(f"duplicate image_id {entry.image_id}")
            ids.add(entry.image_id)
        rows = [r.embedding_row for e in self.images for r in e.regions]
        if sorted(rows) != list(range(total)):
            raise InvalidInputError("embedding_row values are not a permutation of 0..total_regions-1")
        if total:
            # einsum with a float64 accumulator casts in buffered chunks, so
            # no 2x float64 copy of the matrix is materialized.
            norms = np.sqrt(np.einsum("ij,ij->i", self.embeddings, self.embeddings,
                                      dtype=np.float64))
            bad = np.flatnonzero(np.abs(norms - 1.0) > 1e-4)
            if bad.size:
                raise InvalidInputError(
                    f"{bad.size} embeddings are not unit-norm (first offender row {int(bad[0])})"
                )

    # -- lookups -----------------------------------------------------------

    def entry(self, image_id: str) -> ImageEntry:
        try:
            return self.images[self._pos_by_id[image_id]]
        except KeyError:
            raise InvalidInputError(f"unknown image_id {image_id!r}") from None

    def has_image(self, image_id: str) -> bool:
        return image_id in self._pos_by_id

    def position(self, image_id: str) -> int:
        try:
            return self._pos_by_id[image_id]
        except KeyError:
            raise InvalidInputError(f"unknown image_id {image_id!r}") from None

    def image_rows(self, position: int) -> tuple[int, int]:
        """Contiguous [start, end) embedding-row range of an image's regions."""
        return int(self._row_offsets[position]), int(self._row_offsets[position + 1])

    @property
    def row_offsets(self) -> np.ndarray:
        return self._row_offsets

    @property
    def region_counts(self) -> np.ndarray:
        return self._region_counts

    @property
    def total_regions(self) -> int:
        return int(self.embeddings.shape[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, GalleryIndex):
            return NotImplemented
        return (
            self.dimension == other.dimension
            and self.version == other.version
            and self.images == other.images
            and self.embeddings.shape == other.embeddings.shape
            and bool(np.array_equal(
                self.embeddings.view(np.uint32), other.embeddings.view(np.uint32)
            ))
        )


def index_stats(index: GalleryIndex) -> IndexStats:
    counts = index.region_counts
    n = len(index.images)
    return IndexStats(
        image_count=n,
        total_regions=index.total_regions,
        min_regions=int(counts.min()) if n else 0,
        mean_regions=float(counts.mean()) if n else 0.0,
        max_regions=int(counts.max()) if n else 0,
        dimension=index.dimension,
    )


# -- build ------------------------------------------------------------------

@dataclass
class _PendingImage:
    image_id: str
    width: int
    height: int
    uri: str | None
    first_line: int
    regions: list[tuple]  # (mask_id, mask, bbox, blob row, line)
    mask_ids: set


def _open_text(source) -> IO[str]:
    if isinstance(source, (str, Path)):
        return open(source, "r", encoding="utf-8")
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(source.decode("utf-8"))
    return source


def _read_blob(source):
    if isinstance(source, (str, Path)):
        return Path(source).read_bytes()
    if isinstance(source, (bytes, bytearray)):
        return source
    return source.read()


def _parse_manifest(stream: IO[str]) -> tuple[list[_PendingImage], int]:
    # Hot loop for large galleries: error messages are built only on the
    # failure paths, never eagerly.
    images: dict[str, _PendingImage] = {}
    seen_rows: dict[int, int] = {}
    total_regions = 0
    loads = json.loads
    for line_no, raw in enumerate(stream, start=1):
        raw = raw.strip()
        if not raw:
            continue
        try:
            obj = loads(raw)
        except json.JSONDecodeError as exc:
            raise IndexBuildError(f"invalid JSON: {exc}", line_no) from exc
        if not isinstance(obj, dict):
            raise IndexBuildError("manifest line is not a JSON object", line_no)
        try:
            image_id = obj["image_id"]
            width = obj["width"]
            height = obj["height"]
        except KeyError as exc:
            raise IndexBuildError(f"missing key {exc}", line_no) from exc
        if not isinstance(image_id, str) or not image_id:
            raise IndexBuildError("image_id must be a non-empty string", line_no)
        if not isinstance(width, int) or not isinstance(height, int) or width <= 0 or height <= 0:
            raise IndexBuildError("width/height must be positive integers", line_no)
        uri = obj.get("uri")
        if uri is not None and not isinstance(uri, str):
            raise IndexBuildError("uri must be a string when present", line_no)

        pending = images.get(image_id)
        if pending is None:
            pending = _PendingImage(image_id, width, height, uri, line_no, [], set())
            images[image_id] = pending
        else:
            if (pending.width, pending.height) != (width, height):
                raise IndexBuildError(
                    f"image {image_id} declared {pending.width}x{pending.height} at line "
                    f"{pending.first_line} but {width}x{height} here", line_no)
            if pending.uri != uri:
                raise IndexBuildError(f"image {image_id} has conflicting uri values", line_no)

        mask_id = obj.get("mask_id")
        if mask_id is None:
            # Image-declaration line: no region payload allowed.
            if obj.get("rle") is not None or obj.get("bbox") is not None \
                    or obj.get("embedding_row") is not None:
                raise IndexBuildError(
                    "line without mask_id must not carry rle/bbox/embedding_row", line_no)
            continue
        if not isinstance(mask_id, int):
            raise IndexBuildError("mask_id must be an integer", line_no)
        if mask_id in pending.mask_ids:
            raise IndexBuildError(
                f"duplicate (image_id, mask_id) = ({image_id}, {mask_id})", line_no)
        pending.mask_ids.add(mask_id)

        try:
            rle_obj = obj["rle"]
            bbox_raw = obj["bbox"]
            row = obj["embedding_row"]
        except KeyError as exc:
            raise IndexBuildError(f"missing key {exc}", line_no) from exc
        if not isinstance(row, int) or row < 0:
            raise IndexBuildError("embedding_row must be a non-negative integer", line_no)
        if row in seen_rows:
            raise IndexBuildError(
                f"embedding_row {row} already used at line {seen_rows[row]}", line_no)
        seen_rows[row] = line_no

        try:
            mask = RegionMask.from_json(rle_obj)
        except MalformedMaskError as exc:
            raise IndexBuildError(f"image {image_id} mask {mask_id}: {exc}", line_no) from exc
        if (mask.height, mask.width) != (height, width):
            raise IndexBuildError(
                f"image {image_id} mask {mask_id}: mask size {mask.height}x{mask.width} "
                f"differs from image {height}x{width}", line_no)

        try:
            derived = bbox_from_mask(mask)
        except EmptyMaskError:
            raise IndexBuildError(
                f"image {image_id} mask {mask_id}: empty foreground", line_no) from None
        if not isinstance(bbox_raw, list) or len(bbox_raw) != 4:
            raise IndexBuildError("bbox must be a 4-element list", line_no)
        if [float(v) for v in bbox_raw] != derived.as_list():
            raise IndexBuildError(
                f"image {image_id} mask {mask_id}: manifest bbox {bbox_raw} does not equal "
                f"bbox derived from rle {derived.as_list()}", line_no)

        pending.regions.append((mask_id, mask, derived, row, line_no))
        total_regions += 1

    rows = sorted(seen_rows)
    if rows and (rows[0] != 0 or rows[-1] != total_regions - 1):
        raise IndexBuildError(
            f"embedding_row values must cover 0..{total_regions - 1}, got range "
            f"[{rows[0]}, {rows[-1]}]", seen_rows[rows[-1]])
    return list(images.values()), total_regions


def build_index(manifest, blob, dimension: int) -> GalleryIndex:
    """Build a validated index from a manifest stream and a float32 blob.

    ``manifest`` and ``blob`` may be paths, bytes, or open file objects.
    Embeddings are L2-normalized; zero-norm or non-finite rows abort the
    build naming the offending manifest line.
    """
    if dimension <= 0:
        raise InvalidInputError(f"dimension must be positive, got {dimension}")
    stream = _open_text(manifest)
    try:
        pending, total_regions = _parse_manifest(stream)
    finally:
        if stream is not manifest:
            stream.close()

    raw = _read_blob(blob)
    expected = total_regions * dimension * 4
    if len(raw) != expected:
        raise IndexBuildError(
            f"embedding blob size mismatch: {len(raw)} bytes, expected {expected} "
            f"({total_regions} regions x {dimension} dims x 4 bytes)")
    flat = np.frombuffer(raw, dtype="<f4")
    blob_matrix = flat.reshape(total_regions, dimension)

    # Permutation: manifest blob row -> internal row (grouped per image,
    # regions sorted by mask_id).
    provenance = []  # internal row -> (image_id, mask_id, manifest line)
    perm = np.empty(total_regions, dtype=np.int64)
    internal = 0
    for img in pending:
        img.regions.sort(key=lambda t: t[0])
        for mask_id, _, _, blob_row, line_no in img.regions:
            perm[internal] = blob_row
            provenance.append((img.image_id, mask_id, line_no))
            internal += 1

    matrix = blob_matrix[perm] if total_regions else blob_matrix.copy()
    if total_regions:
        finite_rows = np.isfinite(matrix).all(axis=1)
        if not finite_rows.all():
            img_id, mask_id, line_no = provenance[int(np.flatnonzero(~finite_rows)[0])]
            raise IndexBuildError(
                f"image {img_id} mask {mask_id}: embedding has non-finite values", line_no)
        norms = np.sqrt(np.einsum("ij,ij->i", matrix, matrix, dtype=np.float64))
        zero = np.flatnonzero(norms == 0.0)
        if zero.size:
            img_id, mask_id, line_no = provenance[int(zero[0])]
            raise IndexBuildError(f"image {img_id} mask {mask_id}: zero-norm embedding", line_no)
        matrix /= norms[:, None].astype(np.float32)

    images = []
    internal = 0
    for img in pending:
        records = []
        for mask_id, mask, box, _, _ in img.regions:
            records.append(RegionRecord(
                mask_id=mask_id, mask=mask, bbox=box, embedding_row=internal))
            internal += 1
        images.append(ImageEntry(
            image_id=img.image_id, width=img.width, height=img.height,
            regions=tuple(records), uri=img.uri))

    return GalleryIndex(dimension=dimension, images=images, embeddings=matrix)


def assemble_index(images: Iterable[tuple], embeddings: np.ndarray, dimension: int) -> GalleryIndex:
    """Programmatic twin of build_index for in-process gallery construction.

    ``images`` is an iterable of (image_id, width, height, uri, regions)
    where regions is a list of (mask_id, RegionMask) and ``embeddings``
    holds one row per region in the same traversal order. Rows are
    normalized and regrouped exactly like the file path.
    """
    images = list(images)
    total = sum(len(regions) for _, _, _, _, regions in images)
    mat = np.ascontiguousarray(np.asarray(embeddings, dtype=np.float32)).reshape(total, dimension)
    if total:
        if not np.isfinite(mat).all():
            raise InvalidInputError("embeddings contain non-finite values")
        if (np.linalg.norm(mat, axis=1) == 0.0).any():
            raise InvalidInputError("zero-norm embedding")

    input_row = {}
    row = 0
    for image_id, _, _, _, regions in images:
        for mask_id, _ in regions:
            input_row[(image_id, mask_id)] = row
            row += 1

    order = []
    entries = []
    internal = 0
    for image_id, width, height, uri, regions in images:
        records = []
        for mask_id, mask in sorted(regions, key=lambda t: t[0]):
            if mask.foreground_count == 0:
                raise InvalidInputError(f"image {image_id} mask {mask_id}: empty foreground")
            records.append(RegionRecord(
                mask_id=mask_id, mask=mask, bbox=bbox_from_mask(mask), embedding_row=internal))
            order.append(input_row[(image_id, mask_id)])
            internal += 1
        entries.append(ImageEntry(image_id=image_id, width=width, height=height,
                                  regions=tuple(records), uri=uri))

    matrix = mat[np.array(order, dtype=np.int64)] if total else mat.copy()
    if total:
        matrix /= np.linalg.norm(matrix, axis=1)[:, None]
    return GalleryIndex(dimension=dimension, images=entries, embeddings=matrix)


# -- persistence --------------------------------------------------------------

def _entry_to_json(entry: ImageEntry) -> dict:
    return {
        "image_id": entry.image_id,
        "width": entry.width,
        "height": entry.height,
        "uri": entry.uri,
        "regions": [
            {
                "mask_id": r.mask_id,
                "bbox": r.bbox.as_list(),
                "rle": r.mask.to_json(),
                "embedding_row": r.embedding_row,
            }
            for r in entry.regions
        ],
    }


def _entry_from_json(obj: dict) -> ImageEntry:
    regions = tuple(
        RegionRecord(
            mask_id=r["mask_id"],
            mask=RegionMask.from_json(r["rle"]),
            bbox=BoundingBox(*r["bbox"]),
            embedding_row=r["embedding_row"],
        )
        for r in obj["regions"]
    )
    return ImageEntry(
        image_id=obj["image_id"], width=obj["width"], height=obj["height"],
        regions=regions, uri=obj.get("uri"))


def save_index(index: GalleryIndex, path) -> None:
    """Write the versioned binary index file (magic, header, metadata, blob)."""
    meta = json.dumps([_entry_to_json(e) for e in index.images]).encode("utf-8")
    block = np.ascontiguousarray(index.embeddings, dtype="<f4").tobytes()
    header = _HEADER.pack(MAGIC, index.version, index.dimension,
                          len(index.images), index.total_regions, len(meta))
    with open(path, "wb") as f:
        f.write(header)
        f.write(meta)
        f.write(block)


def load_index(path) -> GalleryIndex:
    """Read an index file back; bit-identical to what save_index wrote."""
    with open(path, "rb") as f:
        header = f.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise IndexFormatError(f"file too short for header ({len(header)} bytes)")
        magic, version, dim, n_images, n_regions, meta_len = _HEADER.unpack(header)
        if magic != MAGIC:
            raise IndexFormatError(f"bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise IndexFormatError(f"unsupported format version {version}")
        meta = f.read(meta_len)
        if len(meta) < meta_len:
            raise IndexFormatError("truncated metadata block")
        block_len = n_regions * dim * 4
        block = f.read(block_len + 1)
        if len(block) < block_len:
            raise IndexFormatError(
                f"truncated embedding block: {len(block)} of {block_len} bytes")
        if len(block) > block_len:
            raise IndexFormatError("trailing bytes after embedding block")
    try:
        entries = [_entry_from_json(obj) for obj in json.loads(meta.decode("utf-8"))]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise IndexFormatError(f"corrupt metadata: {exc}") from exc
    if len(entries) != n_images:
        raise IndexFormatError(f"header declares {n_images} images, metadata has {len(entries)}")
    matrix = np.frombuffer(block[:block_len], dtype="<f4").reshape(n_regions, dim).copy()
    return GalleryIndex(dimension=dim, images=entries, embeddings=matrix, version=version)
