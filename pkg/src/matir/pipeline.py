"""End-to-end query orchestration shared by the service, CLI, and evaluator.

A query runs in one of three modes: "stage1" (coarse max-cosine ranking
only), "rerank-only" (stage 1 + relevance reranking), or "full" (plus box
grounding and mask selection). When a backend suffers a total outage the
caller chooses between degrading (stage-1-ordered results with zeroed
relevance, or all-fallback masks) and propagating the error.
"""

from __future__ import annotations

from concurrent.futures import Executor
from dataclasses import dataclass

from .backends import CallPolicy
from .errors import BackendUnavailableError, InvalidInputError
from .grounding import GroundedResult, degraded_ground, ground
from .index import GalleryIndex
from .rerank import RerankedResult, degraded_rerank, rerank
from .search import QueryEmbedding, RankedResult, SearchParams, search

MODE_STAGE1 = "stage1"
MODE_RERANK_ONLY = "rerank-only"
MODE_FULL = "full"
MODES = (MODE_FULL, MODE_RERANK_ONLY, MODE_STAGE1)

OUTAGE_DEGRADE = "degrade"
OUTAGE_ERROR = "error"


@dataclass
class PipelineResult:
    mode: str
    stage1: list[RankedResult]
    reranked: list[RerankedResult] | None = None
    grounded: list[GroundedResult] | None = None

    @property
    def final_length(self) -> int:
        if self.grounded is not None:
            return len(self.grounded)
        if self.reranked is not None:
            return len(self.reranked)
        return len(self.stage1)


def run_pipeline(index: GalleryIndex, query: QueryEmbedding, mode: str,
                 params: SearchParams | None = None, query_text: str | None = None,
                 scorer=None, grounder=None, policy: CallPolicy | None = None,
                 executor: Executor | None = None, workers: int = 1,
                 outage_policy: str = OUTAGE_DEGRADE) -> PipelineResult:
    """Run the pipeline as far as ``mode`` asks, degrading per policy."""
    if mode not in MODES:
        raise InvalidInputError(f"unknown mode {mode!r}")
    if outage_policy not in (OUTAGE_DEGRADE, OUTAGE_ERROR):
        raise InvalidInputError(f"unknown outage policy {outage_policy!r}")
    params = params or SearchParams()
    policy = policy or CallPolicy()

    stage1 = search(query, index, params, workers=workers)
    result = PipelineResult(mode=mode, stage1=stage1)
    if mode == MODE_STAGE1 or not stage1:
        return result

    if scorer is None:
        raise BackendUnavailableError("no relevance scorer configured")
    if query_text is None:
        raise InvalidInputError(f"mode {mode!r} requires query_text for the backends")
    try:
        result.reranked = rerank(stage1, scorer, query_text, index, params,
                                 policy=policy, executor=executor)
    except BackendUnavailableError:
        if outage_policy == OUTAGE_ERROR:
            raise
        result.reranked = degraded_rerank(stage1, params)
    if mode == MODE_RERANK_ONLY:
        return result

    if grounder is None:
        raise BackendUnavailableError("no grounder configured")
    try:
        result.grounded = ground(query_text, result.reranked, grounder, index,
                                 policy=policy, executor=executor)
    except BackendUnavailableError:
        if outage_policy == OUTAGE_ERROR:
            raise
        result.grounded = degraded_ground(result.reranked, index)
    return result


def _mask_of(index: GalleryIndex, image_id: str, mask_id: int | None):
    if mask_id is None:
        return None
    entry = index.entry(image_id)
    for region in entry.regions:
        if region.mask_id == mask_id:
            return region.mask
    raise InvalidInputError(f"image {image_id} has no mask {mask_id}")


def result_rows(result: PipelineResult, index: GalleryIndex) -> list[dict]:
    """Uniform JSON-ready rows for the final ranking of any mode.

    Full mode reports the grounded mask, its matched IoU, and its source;
    the other modes report the stage-1 best-region mask with source
    "stage1" and null relevance/matched_iou where not applicable.
    """
    rows = []
    if result.grounded is not None:
        for g in result.grounded:
            rows.append({
                "image_id": g.image_id,
                "relevance": g.relevance,
                "stage1_score": g.stage1_score,
                "mask": g.mask.to_json() if g.mask is not None else None,
                "matched_iou": g.matched_iou,
                "source": g.source,
            })
    elif result.reranked is not None:
        for r in result.reranked:
            mask = _mask_of(index, r.image_id, r.best_region)
            rows.append({
                "image_id": r.image_id,
                "relevance": r.relevance,
                "stage1_score": r.stage1_score,
                "mask": mask.to_json() if mask is not None else None,
                "matched_iou": None,
                "source": "stage1",
            })
    else:
        for s in result.stage1:
            mask = _mask_of(index, s.image_id, s.best_region)
            rows.append({
                "image_id": s.image_id,
                "relevance": None,
                "stage1_score": s.stage1_score,
                "mask": mask.to_json() if mask is not None else None,
                "matched_iou": None,
                "source": "stage1",
            })
    return rows


def masked_ranking(result: PipelineResult, index: GalleryIndex,
                   pad_to: int = 50) -> list[tuple[str, object, float]]:
    """(image_id, mask, score) ranking for metrics and dumps.

    The final order is padded with the remaining stage-1 candidates (in
    stage-1 order, mask-less) up to ``pad_to`` positions when the kept set
    is shorter, so rank cutoffs beyond n_k stay meaningful.
    """
    rows: list[tuple[str, object, float]] = []
    if result.grounded is not None:
        rows = [(g.image_id, g.mask, g.relevance) for g in result.grounded]
    elif result.reranked is not None:
        rows = [(r.image_id, _mask_of(index, r.image_id, r.best_region), r.relevance)
                for r in result.reranked]
    else:
        return [(s.image_id, _mask_of(index, s.image_id, s.best_region), s.stage1_score)
                for s in result.stage1]
    kept = {image_id for image_id, _, _ in rows}
    if len(rows) < pad_to:
        for s in result.stage1:
            if len(rows) >= pad_to:
                break
            if s.image_id not in kept:
                rows.append((s.image_id, None, s.stage1_score))
    return rows
