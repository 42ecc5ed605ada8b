"""Mask selection for reranked images via a box-grounding backend.

For each kept image the grounder proposes boxes in absolute pixel corners;
the first box is clamped to the image and matched against the indexed
region boxes by IoU. When the grounder yields nothing usable (no boxes, an
invalid box, zero overlap with every region, or a hard call failure) the
image falls back to its stage-1 best region, so grounding never drops an
image from the result.
"""

from __future__ import annotations

import math
from concurrent.futures import Executor
from dataclasses import dataclass
from typing import Protocol, Sequence

from .backends import CallPolicy, fan_out
from .core import BoundingBox, ImageEntry, RegionMask, bbox_iou, clamp_box_to_image, corners_to_box
from .errors import BackendCallError, BackendUnavailableError, NoRegionError
from .index import GalleryIndex
from .rerank import RerankedResult

GROUNDER_MATCHED = "grounder-matched"
STAGE1_FALLBACK = "stage1-fallback"


@dataclass(frozen=True)
class GroundedResult:
    """Final per-image output: the selected mask and how it was chosen."""

    image_id: str
    relevance: float
    stage1_score: float
    mask_id: int | None
    mask: RegionMask | None
    matched_iou: float
    source: str  # GROUNDER_MATCHED or STAGE1_FALLBACK
    scorer_failed: bool = False


class Grounder(Protocol):
    def ground(self, image_uri: str, object_text: str) -> Sequence[tuple[float, float, float, float]]: ...


def match_mask(box: BoundingBox, entry: ImageEntry) -> tuple[int, float]:
    """Region whose bbox maximizes IoU with ``box``; ties to smallest mask_id."""
    if not entry.regions:
        raise NoRegionError(f"image {entry.image_id} has no regions")
    best_id = entry.regions[0].mask_id
    best_iou = bbox_iou(box, entry.regions[0].bbox)
    for region in entry.regions[1:]:
        iou = bbox_iou(box, region.bbox)
        if iou > best_iou or (iou == best_iou and region.mask_id < best_id):
            best_id, best_iou = region.mask_id, iou
    return best_id, best_iou


def _first_usable_box(boxes, entry: ImageEntry) -> BoundingBox | None:
    """Clamp the first returned box to the image; None when unusable."""
    if not boxes:
        return None
    box = boxes[0]
    try:
        x1, y1, x2, y2 = (float(v) for v in box)
    except (TypeError, ValueError):
        return None
    if not all(math.isfinite(v) for v in (x1, y1, x2, y2)):
        return None
    if x2 < x1 or y2 < y1:
        return None
    cx1, cy1, cx2, cy2 = clamp_box_to_image(x1, y1, x2, y2, entry.width, entry.height)
    return corners_to_box(cx1, cy1, cx2, cy2)


def _fallback(entry: ImageEntry, item: RerankedResult) -> GroundedResult:
    mask = None
    if item.best_region is not None:
        mask = next(r.mask for r in entry.regions if r.mask_id == item.best_region)
    return GroundedResult(
        image_id=item.image_id, relevance=item.relevance, stage1_score=item.stage1_score,
        mask_id=item.best_region, mask=mask, matched_iou=0.0, source=STAGE1_FALLBACK,
        scorer_failed=item.scorer_failed)


def ground(query_text: str, reranked: Sequence[RerankedResult], grounder: Grounder,
           index: GalleryIndex, policy: CallPolicy | None = None,
           executor: Executor | None = None) -> list[GroundedResult]:
    """Ground every reranked image to one of its indexed masks.

    Output preserves the reranked order exactly. Images without regions
    are never sent to the grounder and come back mask-less.
    """
    policy = policy or CallPolicy()
    entries = [index.entry(item.image_id) for item in reranked]
    askable = [i for i, e in enumerate(entries) if e.regions]

    def call(i: int):
        return grounder.ground(entries[i].backend_uri, query_text)

    outcomes = dict(zip(askable, fan_out(askable, call, policy, "grounder call", executor=executor)))

    hard_failures = sum(1 for v in outcomes.values() if isinstance(v, BackendCallError))
    if askable and hard_failures == len(askable):
        raise BackendUnavailableError(f"grounder failed for all {hard_failures} images")

    results: list[GroundedResult] = []
    for i, item in enumerate(reranked):
        entry = entries[i]
        if i not in outcomes:
            results.append(_fallback(entry, item))
            continue
        outcome = outcomes[i]
        if isinstance(outcome, BackendCallError):
            results.append(_fallback(entry, item))
            continue
        box = _first_usable_box(outcome, entry)
        if box is None:
            results.append(_fallback(entry, item))
            continue
        mask_id, iou = match_mask(box, entry)
        if iou == 0.0:
            results.append(_fallback(entry, item))
            continue
        mask = next(r.mask for r in entry.regions if r.mask_id == mask_id)
        results.append(GroundedResult(
            image_id=item.image_id, relevance=item.relevance, stage1_score=item.stage1_score,
            mask_id=mask_id, mask=mask, matched_iou=iou, source=GROUNDER_MATCHED,
            scorer_failed=item.scorer_failed))
    return results


def degraded_ground(reranked: Sequence[RerankedResult], index: GalleryIndex) -> list[GroundedResult]:
    """All-fallback grounding for use when the grounder is entirely down."""
    return [_fallback(index.entry(item.image_id), item) for item in reranked]
