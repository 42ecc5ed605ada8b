"""Batch evaluation: run queries through the pipeline and score them.

Queries are processed in sorted query_id order with one log line each;
backend calls inside a query fan out under the usual bounded policy. The
report can also be computed offline from a previously dumped results file.
"""

from __future__ import annotations

import logging
from concurrent.futures import Executor
from typing import Mapping, Sequence

from .backends import CallPolicy, call_with_retries
from .errors import BackendCallError, BackendUnavailableError, InvalidInputError
from .grounding import STAGE1_FALLBACK
from .index import GalleryIndex
from .metrics import EvalReport, GroundTruth, compute_eval_report
from .pipeline import MODE_FULL, MODE_STAGE1, masked_ranking, run_pipeline
from .search import QueryEmbedding, SearchParams, ensemble_query

log = logging.getLogger("matir.evaluate")


def embed_query(embedder, text: str, index: GalleryIndex, retries: int = 0) -> QueryEmbedding:
    """Fetch per-prompt embeddings for one query text and ensemble them."""
    try:
        rows = call_with_retries(lambda: embedder.embed([text]), "embedder call", retries)
    except BackendCallError as exc:
        raise BackendUnavailableError(f"text embedder unavailable: {exc}") from exc
    if any(len(row) != index.dimension for row in rows):
        raise BackendUnavailableError(
            f"embedder returned dimension {len(rows[0])}, index has {index.dimension}")
    return ensemble_query(rows)


def run_evaluation(index: GalleryIndex, gts: Sequence[GroundTruth], embedder,
                   scorer=None, grounder=None, mode: str = MODE_FULL,
                   params: SearchParams | None = None, policy: CallPolicy | None = None,
                   executor: Executor | None = None, workers: int = 1,
                   queries: Mapping[str, str] | None = None,
                   ) -> tuple[EvalReport, dict[str, list[tuple]]]:
    """Evaluate ``queries`` (default: every GT query) against ground truth.

    Returns the report plus the per-query masked rankings, suitable for
    dump_results.
    """
    params = params or SearchParams()
    policy = policy or CallPolicy()
    if queries is None:
        queries = {gt.query_id: gt.text for gt in gts}
    unknown = set(queries) - {gt.query_id for gt in gts}
    if unknown:
        raise InvalidInputError(f"queries without ground truth: {sorted(unknown)}")
    gts = [gt for gt in gts if gt.query_id in queries]

    rankings: dict[str, list[tuple]] = {}
    fallback_grounded = 0
    failed_scored = 0
    for query_id in sorted(queries):
        text = queries[query_id]
        query = embed_query(embedder, text, index, retries=policy.retries)
        result = run_pipeline(
            index, query, mode, params, query_text=text, scorer=scorer, grounder=grounder,
            policy=policy, executor=executor, workers=workers)
        if result.reranked is not None:
            failed_scored += sum(1 for r in result.reranked if r.scorer_failed)
        if result.grounded is not None:
            fallback_grounded += sum(1 for g in result.grounded if g.source == STAGE1_FALLBACK)
        rankings[query_id] = masked_ranking(result, index)
        log.info("query %s (%r): %d results", query_id, text, len(rankings[query_id]))

    report = compute_eval_report(
        {qid: [(image_id, mask) for image_id, mask, _ in ranking]
         for qid, ranking in rankings.items()},
        gts,
        fallback_grounded=fallback_grounded if result_has_grounding(mode) else None,
        failed_scored=failed_scored if mode != MODE_STAGE1 else None,
    )
    return report, rankings


def result_has_grounding(mode: str) -> bool:
    return mode == MODE_FULL


def score_dumped_results(rankings: Mapping[str, Sequence[tuple]], gts: Sequence[GroundTruth]) -> EvalReport:
    """Offline scoring of a results dump (no backend work)."""
    return compute_eval_report(
        {qid: [(image_id, mask) for image_id, mask, _ in ranking]
         for qid, ranking in rankings.items()},
        gts)
