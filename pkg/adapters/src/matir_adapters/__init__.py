"""Model adapters for the matir retrieval engine.

Exports real-model artifacts into the engine's file formats and serves
the three backend wire protocols (text embedding, relevance scoring, box
grounding).
"""

from .config import ExtractionConfig
from .extract import extract_gallery
from .groundtruth import convert_groundtruth
from .prompts import grounding_prompt, parse_grounding_boxes, relevance_prompt
from .servers import serve_all, serve_embedder, serve_grounder, serve_scorer

__version__ = "0.1.0"

__all__ = [
    "ExtractionConfig",
    "extract_gallery",
    "convert_groundtruth",
    "relevance_prompt",
    "grounding_prompt",
    "parse_grounding_boxes",
    "serve_embedder",
    "serve_scorer",
    "serve_grounder",
    "serve_all",
]
