"""Mask-aware text-to-image retrieval engine.

Indexes per-mask region embeddings offline, answers textual object
queries with ranked images via max-cosine scoring, refines rankings with
a pluggable relevance scorer, grounds each result to a segmentation mask,
and evaluates itself with image-level and object-level mAP.
"""

from .core import (BoundingBox, ImageEntry, RegionMask, RegionRecord, bbox_from_mask,
                   bbox_iou, mask_iou, rle_decode, rle_encode)
from .errors import (BackendCallError, BackendUnavailableError, EmptyMaskError,
                     IndexBuildError, IndexFormatError, InvalidInputError, InvalidLogitError,
                     InvalidQueryError, MalformedMaskError, MatirError, NoEvaluableQueriesError,
                     NoRegionError)
from .grounding import GroundedResult, ground, match_mask
from .index import (GalleryIndex, IndexStats, assemble_index, build_index, index_stats,
                    load_index, save_index)
from .metrics import (EvalReport, GroundTruth, average_precision_at_k, compute_eval_report,
                      map_at_50, map_at_50_50)
from .rerank import LogitPair, RerankedResult, relevance_from_logits, rerank
from .search import (QueryEmbedding, RankedResult, SearchParams, ensemble_query, score_image,
                     search, stage1_ground)

__version__ = "0.1.0"

__all__ = [
    "BoundingBox", "ImageEntry", "RegionMask", "RegionRecord",
    "bbox_from_mask", "bbox_iou", "mask_iou", "rle_decode", "rle_encode",
    "GalleryIndex", "IndexStats", "assemble_index", "build_index", "index_stats",
    "load_index", "save_index",
    "QueryEmbedding", "RankedResult", "SearchParams", "ensemble_query", "score_image",
    "search", "stage1_ground",
    "LogitPair", "RerankedResult", "relevance_from_logits", "rerank",
    "GroundedResult", "ground", "match_mask",
    "EvalReport", "GroundTruth", "average_precision_at_k", "compute_eval_report",
    "map_at_50", "map_at_50_50",
    "MatirError", "MalformedMaskError", "EmptyMaskError", "InvalidInputError",
    "InvalidQueryError", "InvalidLogitError", "NoRegionError", "IndexBuildError",
    "IndexFormatError", "BackendCallError", "BackendUnavailableError",
    "NoEvaluableQueriesError",
]
