"""Stage-1 retrieval: max-cosine scoring of gallery images for a query.

Embeddings are unit-normalized at index build time, so an image's score is
the maximum dot product between the query vector and its region rows.
Images with zero regions score -1.0, below any cosine. Ties in the
per-image max go to the smallest mask_id; ranking ties go to the
lexicographically smallest image_id. The scan may be partitioned across
worker threads; the merged result reproduces the same canonical order.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import ImageEntry, validate_embedding
from .errors import InvalidInputError, InvalidQueryError, NoRegionError
from .index import GalleryIndex

EMPTY_IMAGE_SCORE = -1.0

DEFAULT_CANDIDATES = 100
DEFAULT_KEEP = 50


@dataclass(frozen=True)
class SearchParams:
    """Candidate cutoff after stage 1 and keep count after reranking."""

    n_c: int = DEFAULT_CANDIDATES
    n_k: int = DEFAULT_KEEP

    def __post_init__(self):
        if not (1 <= self.n_k <= self.n_c):
            raise InvalidInputError(f"require 1 <= n_k <= n_c, got n_k={self.n_k}, n_c={self.n_c}")


@dataclass(frozen=True)
class QueryEmbedding:
    """Unit-norm float32 query vector."""

    vector: np.ndarray

    def __post_init__(self):
        vec = np.ascontiguousarray(self.vector, dtype=np.float32)
        if vec.ndim != 1 or vec.size == 0:
            raise InvalidQueryError(f"query vector must be 1-D and non-empty, got shape {vec.shape}")
        if not np.isfinite(vec).all():
            raise InvalidQueryError("query vector has non-finite components")
        norm = float(np.linalg.norm(vec.astype(np.float64)))
        if abs(norm - 1.0) > 1e-4:
            raise InvalidQueryError(f"query vector norm {norm} is not within 1e-4 of 1")
        vec.flags.writeable = False
        object.__setattr__(self, "vector", vec)

    @property
    def dimension(self) -> int:
        return int(self.vector.size)


@dataclass(frozen=True)
class RankedResult:
    """A stage-1 scored image; best_region is None iff it has no regions."""

    image_id: str
    stage1_score: float
    best_region: int | None


def ensemble_query(per_prompt_embeddings) -> QueryEmbedding:
    """Average per-prompt embeddings component-wise and L2-normalize."""
    vectors = list(per_prompt_embeddings)
    if not vectors:
        raise InvalidQueryError("no embeddings to ensemble")
    first = validate_embedding(vectors[0])
    rows = [first]
    for v in vectors[1:]:
        vec = validate_embedding(v)
        if vec.size != first.size:
            raise InvalidQueryError(f"embedding dimensions differ: {vec.size} vs {first.size}")
        rows.append(vec)
    for i, vec in enumerate(rows):
        if float(np.linalg.norm(vec)) == 0.0:
            raise InvalidQueryError(f"embedding {i} is the zero vector")
    mean = np.mean(np.stack(rows), axis=0)
    norm = float(np.linalg.norm(mean))
    if norm == 0.0:
        raise InvalidQueryError("prompt embeddings cancel to a zero-norm mean")
    return QueryEmbedding(vector=(mean / norm).astype(np.float32))


def _check_query(q: QueryEmbedding, index: GalleryIndex):
    if q.dimension != index.dimension:
        raise InvalidQueryError(
            f"query dimension {q.dimension} does not match index dimension {index.dimension}")


def _row_dots(block: np.ndarray, vector: np.ndarray, out: np.ndarray) -> None:
    # einsum's per-row reduction is bitwise position-independent (identical
    # rows score identically anywhere in the matrix), unlike BLAS gemv whose
    # block/tail kernels differ; exact tie reproduction depends on this.
    np.einsum("ij,j->i", block, vector, out=out)


def region_scores(q: QueryEmbedding, index: GalleryIndex, workers: int = 1) -> np.ndarray:
    """Dot product of the query against every region row, optionally chunked
    across worker threads (row order and values do not depend on workers)."""
    _check_query(q, index)
    total = index.total_regions
    out = np.empty(total, dtype=np.float32)
    if total == 0:
        return out
    if workers <= 1:
        _row_dots(index.embeddings, q.vector, out)
        return out
    bounds = np.linspace(0, total, workers + 1).astype(np.int64)

    def run(i: int):
        a, b = int(bounds[i]), int(bounds[i + 1])
        if b > a:
            _row_dots(index.embeddings[a:b], q.vector, out[a:b])

    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(run, range(workers)))
    return out


def _reduce_image_max(per_region: np.ndarray, index: GalleryIndex) -> np.ndarray:
    scores = np.full(len(index.images), EMPTY_IMAGE_SCORE, dtype=np.float32)
    nonempty = np.flatnonzero(index.region_counts > 0)
    if nonempty.size:
        offsets = index.row_offsets[nonempty]
        scores[nonempty] = np.maximum.reduceat(per_region, offsets)
    return scores


def image_scores(q: QueryEmbedding, index: GalleryIndex, workers: int = 1) -> np.ndarray:
    """Per-image max over region scores; empty images get -1.0."""
    return _reduce_image_max(region_scores(q, index, workers=workers), index)


def score_image(q: QueryEmbedding, entry: ImageEntry, index: GalleryIndex) -> RankedResult:
    """Score one image: max cosine over its regions, argmax tie to the
    smallest mask_id."""
    _check_query(q, index)
    pos = index.position(entry.image_id)
    if index.images[pos] is not entry and index.images[pos] != entry:
        raise InvalidInputError(f"entry {entry.image_id!r} does not belong to this index")
    if not entry.regions:
        return RankedResult(image_id=entry.image_id, stage1_score=EMPTY_IMAGE_SCORE, best_region=None)
    start, end = index.image_rows(pos)
    scores = np.empty(end - start, dtype=np.float32)
    _row_dots(index.embeddings[start:end], q.vector, scores)
    best = int(np.argmax(scores))  # first occurrence; regions are mask_id-sorted
    return RankedResult(
        image_id=entry.image_id,
        stage1_score=float(scores[best]),
        best_region=entry.regions[best].mask_id,
    )


def search(q: QueryEmbedding, index: GalleryIndex, params: SearchParams | None = None,
           workers: int = 1) -> list[RankedResult]:
    """Rank the gallery by stage-1 score and return the top n_c images.

    Deterministic: sorted by score descending, then image_id ascending.
    An empty index yields an empty result.
    """
    params = params or SearchParams()
    n = len(index.images)
    if n == 0:
        return []
    per_region = region_scores(q, index, workers=workers)
    scores = _reduce_image_max(per_region, index)
    k = min(params.n_c, n)
    if n > k:
        threshold = np.partition(scores, n - k)[n - k]
        candidates = np.flatnonzero(scores >= threshold)
    else:
        candidates = np.arange(n)
    picked = sorted(candidates.tolist(), key=lambda i: (-scores[i], index.images[i].image_id))[:k]

    results = []
    for pos in picked:
        entry = index.images[pos]
        if not entry.regions:
            results.append(RankedResult(entry.image_id, float(scores[pos]), None))
            continue
        start, end = index.image_rows(pos)
        best = int(np.argmax(per_region[start:end]))
        results.append(RankedResult(entry.image_id, float(scores[pos]), entry.regions[best].mask_id))
    return results


def stage1_ground(q: QueryEmbedding, entry: ImageEntry, index: GalleryIndex) -> int:
    """Mask selection from stage 1 alone: the region with the highest
    query similarity."""
    if not entry.regions:
        raise NoRegionError(f"image {entry.image_id} has no regions")
    return score_image(q, entry, index).best_region
