"""Retrieval evaluation: mAP@50 (image level) and mAP@50@50 (object level).

mAP@50 is the macro mean, over queries with at least one relevant image,
of average precision computed on the top 50 ranked images. mAP@50@50 is
identical except a position only counts as a hit when the predicted mask
also reaches IoU >= 0.5 (closed threshold) with one of that image's
ground-truth masks. Queries with zero relevant images are excluded from
the mean and reported.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .core import RegionMask, mask_iou
from .errors import InvalidInputError, NoEvaluableQueriesError

RANK_CUTOFF = 50
IOU_THRESHOLD = 0.5


@dataclass(frozen=True)
class GroundTruth:
    """Relevant images of one query, each with its ground-truth masks."""

    query_id: str
    text: str
    relevant: dict[str, tuple[RegionMask, ...]]

    def __post_init__(self):
        for image_id, masks in self.relevant.items():
            if not masks:
                raise InvalidInputError(
                    f"query {self.query_id}: relevant image {image_id} has no ground-truth masks")


@dataclass
class QueryEval:
    query_id: str
    relevant_count: int
    ap50: float
    ap50_50: float


@dataclass
class EvalReport:
    """Per-query APs plus macro means and pipeline health counters.

    fallback_grounded counts kept results whose mask came from the stage-1
    fallback; failed_scored counts candidates whose scorer call failed
    after retries. Both are None when scoring a pre-dumped results file.
    """

    map50: float
    map50_50: float
    per_query: list[QueryEval] = field(default_factory=list)
    excluded_queries: list[str] = field(default_factory=list)
    fallback_grounded: int | None = None
    failed_scored: int | None = None

    def to_json(self) -> dict:
        return {
            "map50": self.map50,
            "map50_50": self.map50_50,
            "evaluated_queries": len(self.per_query),
            "excluded_queries": self.excluded_queries,
            "fallback_grounded": self.fallback_grounded,
            "failed_scored": self.failed_scored,
            "per_query": [
                {"query_id": q.query_id, "relevant_count": q.relevant_count,
                 "ap50": q.ap50, "ap50_50": q.ap50_50}
                for q in self.per_query
            ],
        }


def average_precision_at_k(ranked_hits: Sequence[bool], total_relevant: int, k: int) -> float:
    """AP over the first k positions, normalized by min(total_relevant, k)."""
    if total_relevant < 1:
        raise InvalidInputError("average precision is undefined with zero relevant items")
    if k < 1:
        raise InvalidInputError(f"k must be >= 1, got {k}")
    hits = list(ranked_hits)[:k]
    found = 0
    score = 0.0
    for pos, hit in enumerate(hits, start=1):
        if hit:
            found += 1
            score += found / pos
    return score / min(total_relevant, k)


def _hits_image_level(ranking: Sequence[str], gt: GroundTruth, k: int) -> list[bool]:
    hits = []
    seen = set()
    for image_id in ranking[:k]:
        hit = image_id in gt.relevant and image_id not in seen
        seen.add(image_id)
        hits.append(hit)
    return hits


def _hits_object_level(ranking: Sequence[tuple[str, RegionMask | None]], gt: GroundTruth,
                       k: int) -> list[bool]:
    hits = []
    seen = set()
    for image_id, mask in ranking[:k]:
        hit = False
        if image_id in gt.relevant and image_id not in seen and mask is not None:
            hit = any(mask_iou(mask, gt_mask) >= IOU_THRESHOLD for gt_mask in gt.relevant[image_id])
        seen.add(image_id)
        hits.append(hit)
    return hits


def _macro_mean(aps: dict[str, float]) -> float:
    if not aps:
        raise NoEvaluableQueriesError("every query has zero relevant images")
    ordered = [aps[qid] for qid in sorted(aps)]
    return math.fsum(ordered) / len(ordered)


def _split_queries(gts: Sequence[GroundTruth], rankings: Mapping[str, Sequence]) -> tuple[list[GroundTruth], list[str]]:
    ids = set()
    evaluable, excluded = [], []
    for gt in gts:
        if gt.query_id in ids:
            raise InvalidInputError(f"duplicate query_id {gt.query_id}")
        ids.add(gt.query_id)
        if not gt.relevant:
            excluded.append(gt.query_id)
            continue
        if gt.query_id not in rankings:
            raise InvalidInputError(f"no ranking supplied for query {gt.query_id}")
        evaluable.append(gt)
    return evaluable, excluded


def map_at_50(rankings: Mapping[str, Sequence[str]], gts: Sequence[GroundTruth]) -> float:
    """Image-level mAP over the top 50 of each query's ranking."""
    evaluable, _ = _split_queries(gts, rankings)
    aps = {
        gt.query_id: average_precision_at_k(
            _hits_image_level(rankings[gt.query_id], gt, RANK_CUTOFF), len(gt.relevant), RANK_CUTOFF)
        for gt in evaluable
    }
    return _macro_mean(aps)


def map_at_50_50(rankings: Mapping[str, Sequence[tuple[str, RegionMask | None]]],
                 gts: Sequence[GroundTruth]) -> float:
    """Object-level mAP: a hit needs a relevant image and a mask at IoU >= 0.5."""
    evaluable, _ = _split_queries(gts, rankings)
    aps = {
        gt.query_id: average_precision_at_k(
            _hits_object_level(rankings[gt.query_id], gt, RANK_CUTOFF), len(gt.relevant), RANK_CUTOFF)
        for gt in evaluable
    }
    return _macro_mean(aps)


def compute_eval_report(rankings: Mapping[str, Sequence[tuple[str, RegionMask | None]]],
                        gts: Sequence[GroundTruth],
                        fallback_grounded: int | None = None,
                        failed_scored: int | None = None) -> EvalReport:
    """Both metrics from one masked-ranking structure, per query and macro."""
    evaluable, excluded = _split_queries(gts, rankings)
    per_query = []
    ap50s, ap5050s = {}, {}
    for gt in sorted(evaluable, key=lambda g: g.query_id):
        ranking = rankings[gt.query_id]
        ids = [image_id for image_id, _ in ranking]
        ap50 = average_precision_at_k(
            _hits_image_level(ids, gt, RANK_CUTOFF), len(gt.relevant), RANK_CUTOFF)
        ap5050 = average_precision_at_k(
            _hits_object_level(ranking, gt, RANK_CUTOFF), len(gt.relevant), RANK_CUTOFF)
        per_query.append(QueryEval(gt.query_id, len(gt.relevant), ap50, ap5050))
        ap50s[gt.query_id] = ap50
        ap5050s[gt.query_id] = ap5050
    return EvalReport(
        map50=_macro_mean(ap50s),
        map50_50=_macro_mean(ap5050s),
        per_query=per_query,
        excluded_queries=sorted(excluded),
        fallback_grounded=fallback_grounded,
        failed_scored=failed_scored,
    )


# -- file formats -------------------------------------------------------------

def load_ground_truth(source, index=None) -> list[GroundTruth]:
    """Read ground truth JSONL; with ``index`` given, relevant image_ids
    must exist in the gallery."""
    if isinstance(source, (str, Path)):
        lines = Path(source).read_text(encoding="utf-8").splitlines()
    else:
        lines = [line.rstrip("\n") for line in source]
    out = []
    seen = set()
    for line_no, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
            query_id = obj["query_id"]
            text = obj["text"]
            relevant_raw = obj["relevant"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise InvalidInputError(f"ground truth line {line_no}: {exc}") from exc
        if not isinstance(query_id, str) or not isinstance(text, str) or not isinstance(relevant_raw, list):
            raise InvalidInputError(f"ground truth line {line_no}: bad field types")
        if query_id in seen:
            raise InvalidInputError(f"ground truth line {line_no}: duplicate query_id {query_id}")
        seen.add(query_id)
        relevant = {}
        for item in relevant_raw:
            try:
                image_id = item["image_id"]
                masks = tuple(RegionMask.from_json(m) for m in item["masks"])
            except (KeyError, TypeError) as exc:
                raise InvalidInputError(f"ground truth line {line_no}: {exc}") from exc
            if image_id in relevant:
                raise InvalidInputError(
                    f"ground truth line {line_no}: duplicate relevant image {image_id}")
            if index is not None and not index.has_image(image_id):
                raise InvalidInputError(
                    f"ground truth line {line_no}: image {image_id} not in gallery")
            relevant[image_id] = masks
        try:
            out.append(GroundTruth(query_id=query_id, text=text, relevant=relevant))
        except InvalidInputError as exc:
            raise InvalidInputError(f"ground truth line {line_no}: {exc}") from exc
    return out


def dump_results(rankings: Mapping[str, Sequence[tuple[str, RegionMask | None, float]]], path) -> None:
    """Write the offline-scoring dump: one query per line."""
    with open(path, "w", encoding="utf-8") as f:
        for query_id in sorted(rankings):
            entries = [
                {"image_id": image_id, "mask": mask.to_json() if mask is not None else None,
                 "score": score}
                for image_id, mask, score in rankings[query_id]
            ]
            f.write(json.dumps({"query_id": query_id, "ranking": entries}) + "\n")


def load_results(source) -> dict[str, list[tuple[str, RegionMask | None, float]]]:
    """Read a results dump back into per-query (image_id, mask, score) lists."""
    if isinstance(source, (str, Path)):
        lines = Path(source).read_text(encoding="utf-8").splitlines()
    else:
        lines = [line.rstrip("\n") for line in source]
    out: dict[str, list[tuple[str, RegionMask | None, float]]] = {}
    for line_no, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
            query_id = obj["query_id"]
            ranking = obj["ranking"]
            parsed = [
                (item["image_id"],
                 RegionMask.from_json(item["mask"]) if item.get("mask") is not None else None,
                 float(item["score"]))
                for item in ranking
            ]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise InvalidInputError(f"results line {line_no}: {exc}") from exc
        if query_id in out:
            raise InvalidInputError(f"results line {line_no}: duplicate query_id {query_id}")
        out[query_id] = parsed
    return out
