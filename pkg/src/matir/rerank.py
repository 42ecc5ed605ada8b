"""Candidate reranking by a relevance-scorer backend.

Each stage-1 candidate is scored once (with bounded retries) by asking the
backend for the logits of the "True" and "False" answers to a relevance
question; the final relevance is the two-way softmax of those logits,
computed in the numerically stable logistic form. Candidates whose calls
fail after retries keep a relevance of 0.0 and a diagnostic flag; if every
call fails the scorer is considered down.
"""

from __future__ import annotations

import math
from concurrent.futures import Executor
from dataclasses import dataclass
from typing import Protocol, Sequence

from .backends import CallPolicy, fan_out
from .errors import BackendCallError, BackendUnavailableError, InvalidLogitError
from .index import GalleryIndex
from .search import RankedResult, SearchParams


@dataclass(frozen=True)
class LogitPair:
    """Raw logits of the "True" and "False" answer tokens."""

    z_true: float
    z_false: float

    def __post_init__(self):
        if not (math.isfinite(self.z_true) and math.isfinite(self.z_false)):
            raise InvalidLogitError(f"logits must be finite, got ({self.z_true}, {self.z_false})")


@dataclass(frozen=True)
class RerankedResult:
    image_id: str
    relevance: float
    stage1_score: float
    best_region: int | None
    scorer_failed: bool = False


class RelevanceScorer(Protocol):
    def score(self, image_uri: str, object_text: str) -> LogitPair: ...


def relevance_from_logits(pair: LogitPair) -> float:
    """Two-way softmax of (z_true, z_false) via the stable logistic form."""
    diff = pair.z_true - pair.z_false
    if diff >= 0:
        return 1.0 / (1.0 + math.exp(-diff))
    e = math.exp(diff)
    return e / (1.0 + e)


def rerank(candidates: Sequence[RankedResult], scorer: RelevanceScorer, query_text: str,
           index: GalleryIndex, params: SearchParams | None = None,
           policy: CallPolicy | None = None, executor: Executor | None = None) -> list[RerankedResult]:
    """Score every candidate and keep the top n_k by relevance.

    Order: relevance descending, then stage-1 score descending, then
    image_id ascending. Output is reassembled by candidate position, so
    request concurrency and completion order never change the result.
    """
    params = params or SearchParams()
    policy = policy or CallPolicy()
    if not candidates:
        return []

    uris = [index.entry(c.image_id).backend_uri for c in candidates]

    def call(i: int) -> LogitPair:
        return scorer.score(uris[i], query_text)

    outcomes = fan_out(range(len(candidates)), call, policy, "scorer call", executor=executor)

    scored: list[RerankedResult] = []
    failures = 0
    for cand, outcome in zip(candidates, outcomes):
        if isinstance(outcome, BackendCallError):
            failures += 1
            scored.append(RerankedResult(
                image_id=cand.image_id, relevance=0.0, stage1_score=cand.stage1_score,
                best_region=cand.best_region, scorer_failed=True))
        else:
            scored.append(RerankedResult(
                image_id=cand.image_id, relevance=relevance_from_logits(outcome),
                stage1_score=cand.stage1_score, best_region=cand.best_region))
    if failures == len(candidates):
        raise BackendUnavailableError(
            f"relevance scorer failed for all {failures} candidates")

    scored.sort(key=lambda r: (-r.relevance, -r.stage1_score, r.image_id))
    return scored[: min(params.n_k, len(scored))]


def degraded_rerank(candidates: Sequence[RankedResult], params: SearchParams | None = None) -> list[RerankedResult]:
    """Stage-1-ordered results, every relevance 0.0 and flagged, for use
    when the scorer backend is entirely unavailable."""
    params = params or SearchParams()
    out = [RerankedResult(image_id=c.image_id, relevance=0.0, stage1_score=c.stage1_score,
                          best_region=c.best_region, scorer_failed=True)
           for c in candidates]
    out.sort(key=lambda r: (-r.relevance, -r.stage1_score, r.image_id))
    return out[: min(params.n_k, len(out))]
