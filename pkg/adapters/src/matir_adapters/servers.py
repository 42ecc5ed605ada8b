"""The three backend protocol servers, parameterized by model engines.

Wire contracts (shared with the engine's mocks, which define the
conformance suite):

  POST /v1/embed_text  {"texts": [...]}             -> {"embeddings": [[...], ...]}
  POST /v1/score       {"image_uri", "object_text"} -> {"z_true": n, "z_false": n}
  POST /v1/ground      {"image_uri", "object_text"} -> {"boxes": [[x1,y1,x2,y2], ...]}
  GET  /v1/health                                   -> {"status": "ok"}

The embedder applies the configured prompt-template ensemble per text and
returns one averaged, normalized vector per input. The scorer forwards
the relevance question and returns the raw answer-token logits. The
grounder forwards the localization instruction and parses the model's
JSON reply into pixel-corner boxes; an unparseable reply is an empty box
list, a model failure is a 500.
"""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from .config import ExtractionConfig
from .httpserver import JsonHttpServer
from .interfaces import TextEmbedder, VlmEngine
from .prompts import ANSWER_TOKENS, grounding_prompt, parse_grounding_boxes, relevance_prompt
from .synthetic import SyntheticTextEmbedder, SyntheticVlm

log = logging.getLogger("matir_adapters.servers")


def build_text_embedder(config: ExtractionConfig, engine: str = "synthetic") -> TextEmbedder:
    if engine == "synthetic":
        return SyntheticTextEmbedder(config.embedding_dim, seed=config.seed)
    if engine == "hf":
        from . import hf

        return hf.build_text_embedder(config)
    raise ValueError(f"unknown engine {engine!r}")


def build_vlm(config: ExtractionConfig, engine: str = "synthetic") -> VlmEngine:
    if engine == "synthetic":
        return SyntheticVlm(seed=config.seed)
    if engine == "hf":
        from . import hf

        return hf.build_vlm(config)
    raise ValueError(f"unknown engine {engine!r}")


def ensembled_embeddings(embedder: TextEmbedder, templates: Sequence[str],
                         texts: Sequence[str]) -> np.ndarray:
    """Per text: embed every prompt template, average, L2-normalize."""
    expanded = [template.format(text) for text in texts for template in templates]
    rows = np.asarray(embedder.embed_texts(expanded), dtype=np.float64)
    per_text = rows.reshape(len(texts), len(templates), -1).mean(axis=1)
    norms = np.linalg.norm(per_text, axis=1, keepdims=True)
    if (norms == 0).any():
        raise ValueError("prompt ensemble collapsed to a zero vector")
    return (per_text / norms).astype(np.float32)


def _health(_payload):
    return 200, {"status": "ok"}


def _request_fields(payload):
    uri, text = payload.get("image_uri"), payload.get("object_text")
    if not isinstance(uri, str) or not isinstance(text, str):
        return None
    return uri, text


def embedder_routes(config: ExtractionConfig, embedder: TextEmbedder) -> dict:
    if embedder.dimension != config.embedding_dim:
        raise ValueError(
            f"text embedder emits dimension {embedder.dimension}, config says "
            f"{config.embedding_dim}; refusing to run")

    def handle(payload):
        texts = payload.get("texts")
        if not isinstance(texts, list) or not texts or not all(isinstance(t, str) for t in texts):
            return 400, {"error": "texts must be a non-empty list of strings"}
        try:
            rows = ensembled_embeddings(embedder, config.prompt_templates, texts)
        except Exception as exc:
            log.exception("embedding failed")
            return 500, {"error": str(exc)}
        return 200, {"embeddings": [[float(v) for v in row] for row in rows]}

    return {("POST", "/v1/embed_text"): handle}


def scorer_routes(vlm: VlmEngine) -> dict:
    def handle(payload):
        fields = _request_fields(payload)
        if fields is None:
            return 400, {"error": "image_uri and object_text must be strings"}
        uri, text = fields
        try:
            z_true, z_false = vlm.answer_logits(uri, relevance_prompt(text), ANSWER_TOKENS)
        except Exception as exc:
            log.exception("scoring failed")
            return 500, {"error": str(exc)}
        if not (np.isfinite(z_true) and np.isfinite(z_false)):
            return 500, {"error": "model produced non-finite logits"}
        return 200, {"z_true": float(z_true), "z_false": float(z_false)}

    return {("POST", "/v1/score"): handle}


def grounder_routes(vlm: VlmEngine) -> dict:
    def handle(payload):
        fields = _request_fields(payload)
        if fields is None:
            return 400, {"error": "image_uri and object_text must be strings"}
        uri, text = fields
        try:
            reply = vlm.generate(uri, grounding_prompt(text))
        except Exception as exc:
            log.exception("grounding failed")
            return 500, {"error": str(exc)}
        return 200, {"boxes": parse_grounding_boxes(reply)}

    return {("POST", "/v1/ground"): handle}


def _serve(routes: dict, host: str, port: int) -> JsonHttpServer:
    routes = {**routes, ("GET", "/v1/health"): _health}
    return JsonHttpServer(routes, host=host, port=port).start()


def serve_embedder(config: ExtractionConfig, port: int = 0, host: str = "127.0.0.1",
                   embedder: TextEmbedder | None = None, engine: str = "synthetic") -> JsonHttpServer:
    embedder = embedder or build_text_embedder(config, engine)
    return _serve(embedder_routes(config, embedder), host, port)


def serve_scorer(config: ExtractionConfig, port: int = 0, host: str = "127.0.0.1",
                 vlm: VlmEngine | None = None, engine: str = "synthetic") -> JsonHttpServer:
    return _serve(scorer_routes(vlm or build_vlm(config, engine)), host, port)


def serve_grounder(config: ExtractionConfig, port: int = 0, host: str = "127.0.0.1",
                   vlm: VlmEngine | None = None, engine: str = "synthetic") -> JsonHttpServer:
    return _serve(grounder_routes(vlm or build_vlm(config, engine)), host, port)


def serve_all(config: ExtractionConfig, port: int = 0, host: str = "127.0.0.1",
              engine: str = "synthetic") -> JsonHttpServer:
    """All three protocols on one port (handy for single-box setups)."""
    embedder = build_text_embedder(config, engine)
    vlm = build_vlm(config, engine)
    routes = {}
    routes.update(embedder_routes(config, embedder))
    routes.update(scorer_routes(vlm))
    routes.update(grounder_routes(vlm))
    return _serve(routes, host, port)
