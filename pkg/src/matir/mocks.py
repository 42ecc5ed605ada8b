"""Deterministic backend implementations for testing and CI.

These mocks define the conformance bar for any real adapter: they speak
the exact wire protocols, both in-process and over HTTP, with optional
seeded failure injection. check_backend_conformance() runs the same
schema/behavior checks against any server, mock or real.

Also home to the planted-gallery builder: a synthetic gallery whose ideal
ranking and masks are known by construction, paired with perfect backends
that reproduce them.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import random
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import requests

from .core import RegionMask, mask_iou, rle_encode
from .errors import BackendCallError, InvalidInputError
from .httpserver import JsonHttpServer
from .index import GalleryIndex, assemble_index
from .metrics import GroundTruth
from .rerank import LogitPair

RELEVANT_LOGITS = (10.0, -10.0)
IRRELEVANT_LOGITS = (-10.0, 10.0)


@dataclass(frozen=True)
class FailureSpec:
    """Per-endpoint fault injection: failure probability and added latency."""

    error_rate: float = 0.0
    latency_s: float = 0.0


@dataclass
class MockSpec:
    """Declarative behavior of the three mock backends.

    embedder_table maps query text to its vector; unknown texts fall back
    to a seeded hash-derived unit vector of ``dimension``. relevant maps
    query text to the set of image uris the scorer answers True for.
    boxes maps (query text -> image uri -> list of corner boxes).
    """

    dimension: int
    seed: int = 0
    embedder_table: dict[str, list[float]] = field(default_factory=dict)
    relevant: dict[str, set[str]] = field(default_factory=dict)
    boxes: dict[str, dict[str, list[list[float]]]] = field(default_factory=dict)
    failures: dict[str, FailureSpec] = field(default_factory=dict)

    @classmethod
    def from_json(cls, obj: dict) -> "MockSpec":
        failures = {
            endpoint: FailureSpec(
                error_rate=float(f.get("error_rate", 0.0)),
                latency_s=float(f.get("latency_s", 0.0)))
            for endpoint, f in obj.get("failures", {}).items()
        }
        return cls(
            dimension=int(obj["dimension"]),
            seed=int(obj.get("seed", 0)),
            embedder_table={k: list(v) for k, v in obj.get("embedder_table", {}).items()},
            relevant={k: set(v) for k, v in obj.get("relevant", {}).items()},
            boxes=obj.get("boxes", {}),
            failures=failures,
        )

    @classmethod
    def from_file(cls, path) -> "MockSpec":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


class _Faulty:
    """Seeded failure injection shared by the in-process and HTTP mocks."""

    def __init__(self, spec: FailureSpec | None, seed: int, endpoint: str):
        self._spec = spec or FailureSpec()
        digest = hashlib.sha256(f"{seed}:{endpoint}".encode()).digest()
        self._rng = random.Random(int.from_bytes(digest[:8], "big"))
        self._lock = threading.Lock()

    def tick(self, what: str):
        if self._spec.latency_s > 0:
            time.sleep(self._spec.latency_s)
        if self._spec.error_rate > 0:
            with self._lock:
                draw = self._rng.random()
            if draw < self._spec.error_rate:
                raise BackendCallError(f"injected {what} failure")


def _hash_vector(text: str, dimension: int, seed: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}:{text}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
    vec = rng.standard_normal(dimension)
    return vec / np.linalg.norm(vec)


class MockTextEmbedder:
    def __init__(self, spec: MockSpec):
        self._spec = spec
        self._fault = _Faulty(spec.failures.get("embed"), spec.seed, "embed")

    def embed(self, texts) -> list[np.ndarray]:
        if not texts:
            raise InvalidInputError("no texts to embed")
        self._fault.tick("embedder")
        out = []
        for text in texts:
            if text in self._spec.embedder_table:
                out.append(np.asarray(self._spec.embedder_table[text], dtype=np.float64))
            else:
                out.append(_hash_vector(text, self._spec.dimension, self._spec.seed))
        return out


class MockRelevanceScorer:
    def __init__(self, spec: MockSpec):
        self._spec = spec
        self._fault = _Faulty(spec.failures.get("score"), spec.seed, "score")

    def score(self, image_uri: str, object_text: str) -> LogitPair:
        self._fault.tick("scorer")
        relevant = self._spec.relevant.get(object_text, set())
        z_true, z_false = RELEVANT_LOGITS if image_uri in relevant else IRRELEVANT_LOGITS
        return LogitPair(z_true=z_true, z_false=z_false)


class MockGrounder:
    def __init__(self, spec: MockSpec):
        self._spec = spec
        self._fault = _Faulty(spec.failures.get("ground"), spec.seed, "ground")

    def ground(self, image_uri: str, object_text: str) -> list[tuple[float, float, float, float]]:
        self._fault.tick("grounder")
        boxes = self._spec.boxes.get(object_text, {}).get(image_uri, [])
        return [tuple(float(v) for v in box) for box in boxes]


class EmptyGrounder:
    """Always returns no boxes; every image falls back to its stage-1 mask."""

    def ground(self, image_uri: str, object_text: str):
        return []


def make_backends(spec: MockSpec):
    return MockTextEmbedder(spec), MockRelevanceScorer(spec), MockGrounder(spec)


def make_perfect_backends(gts, index: GalleryIndex, failures: dict[str, FailureSpec] | None = None,
                          seed: int = 0):
    """Backends that reproduce the ground truth of a planted gallery.

    The embedder answers each query text with the embedding of the
    ground-truth region of its first relevant image; the scorer answers
    True exactly for relevant images; the grounder returns the bounding
    box of the region best matching a ground-truth mask.
    """
    spec = perfect_mock_spec(gts, index, failures=failures, seed=seed)
    return make_backends(spec)


def perfect_mock_spec(gts, index: GalleryIndex, failures: dict[str, FailureSpec] | None = None,
                      seed: int = 0) -> MockSpec:
    embedder_table: dict[str, list[float]] = {}
    relevant: dict[str, set[str]] = {}
    boxes: dict[str, dict[str, list[list[float]]]] = {}
    for gt in gts:
        uri_boxes: dict[str, list[list[float]]] = {}
        uris = set()
        planted_vector = None
        for image_id in sorted(gt.relevant):
            entry = index.entry(image_id)
            uris.add(entry.backend_uri)
            best = None
            for region in entry.regions:
                score = max((mask_iou(region.mask, gm) for gm in gt.relevant[image_id]), default=0.0)
                if best is None or score > best[0]:
                    best = (score, region)
            if best is None or best[0] == 0.0:
                raise InvalidInputError(
                    f"query {gt.query_id}: image {image_id} has no region overlapping its GT masks")
            region = best[1]
            b = region.bbox
            uri_boxes[entry.backend_uri] = [[b.x, b.y, b.x + b.w, b.y + b.h]]
            if planted_vector is None:
                planted_vector = index.embeddings[region.embedding_row].astype(np.float64)
        embedder_table[gt.text] = list(planted_vector) if planted_vector is not None else []
        relevant[gt.text] = uris
        boxes[gt.text] = uri_boxes
    return MockSpec(
        dimension=index.dimension, seed=seed, embedder_table=embedder_table,
        relevant=relevant, boxes=boxes, failures=failures or {})


# -- planted gallery ----------------------------------------------------------

def _cell_mask(height: int, width: int, slot: int) -> RegionMask:
    """A small rectangle in grid cell ``slot``; distinct slots never overlap."""
    cells_per_row = width // 8
    row0 = (slot // cells_per_row) * 8 + 1
    col0 = (slot % cells_per_row) * 8 + 1
    grid = np.zeros((height, width), dtype=bool)
    grid[row0:row0 + 6, col0:col0 + 6] = True
    return rle_encode(grid)


def build_planted_gallery(n_images: int = 50, n_queries: int = 10, dimension: int = 64,
                          regions_per_image: int = 3, seed: int = 0,
                          image_size: int = 32) -> tuple[GalleryIndex, list[GroundTruth]]:
    """Synthetic gallery with known-best behavior.

    Image i is relevant to query (i mod n_queries) when (i div n_queries)
    is even, and pure noise otherwise. Each relevant image carries exactly
    one planted region whose embedding equals the query direction (a basis
    vector), so its ideal stage-1 score is 1.0; noise regions live in the
    orthogonal complement and score exactly 0. The planted mask doubles as
    the ground-truth mask.
    """
    if dimension < n_queries + 2:
        raise InvalidInputError(f"dimension {dimension} too small for {n_queries} planted queries")
    max_slots = (image_size // 8) ** 2
    if regions_per_image > max_slots:
        raise InvalidInputError(f"at most {max_slots} regions fit an {image_size}px image")
    rng = np.random.default_rng(seed)
    images = []
    rows = []
    relevant_by_query: dict[int, dict[str, tuple[RegionMask, ...]]] = {k: {} for k in range(n_queries)}

    def noise_vector() -> np.ndarray:
        vec = np.zeros(dimension)
        tail = rng.standard_normal(dimension - n_queries)
        vec[n_queries:] = tail / np.linalg.norm(tail)
        return vec

    for i in range(n_images):
        image_id = f"img{i:04d}"
        uri = f"mock://{image_id}"
        query_of_image = i % n_queries
        is_relevant = (i // n_queries) % 2 == 0
        regions = []
        for j in range(regions_per_image):
            mask = _cell_mask(image_size, image_size, j)
            regions.append((j, mask))
            if is_relevant and j == 0:
                planted = np.zeros(dimension)
                planted[query_of_image] = 1.0
                rows.append(planted)
                relevant_by_query[query_of_image][image_id] = (mask,)
            else:
                rows.append(noise_vector())
        images.append((image_id, image_size, image_size, uri, regions))

    index = assemble_index(images, np.asarray(rows, dtype=np.float32), dimension)
    gts = [
        GroundTruth(query_id=f"q{k:03d}", text=f"planted object {k}", relevant=relevant_by_query[k])
        for k in range(n_queries)
    ]
    return index, gts


# -- standalone HTTP server ----------------------------------------------------

def serve_mocks(spec: MockSpec, port: int = 0, host: str = "127.0.0.1") -> JsonHttpServer:
    """Serve /v1/embed_text, /v1/score, /v1/ground (and /v1/health) from a
    MockSpec. Returns a started server; call .stop() to shut down."""
    embedder, scorer, grounder = make_backends(spec)

    def handle_embed(payload):
        texts = payload.get("texts")
        if not isinstance(texts, list) or not texts or not all(isinstance(t, str) for t in texts):
            return 400, {"error": "texts must be a non-empty list of strings"}
        try:
            vectors = embedder.embed(texts)
        except BackendCallError as exc:
            return 500, {"error": str(exc)}
        return 200, {"embeddings": [[float(v) for v in vec] for vec in vectors]}

    def handle_score(payload):
        uri, text = payload.get("image_uri"), payload.get("object_text")
        if not isinstance(uri, str) or not isinstance(text, str):
            return 400, {"error": "image_uri and object_text must be strings"}
        try:
            pair = scorer.score(uri, text)
        except BackendCallError as exc:
            return 500, {"error": str(exc)}
        return 200, {"z_true": pair.z_true, "z_false": pair.z_false}

    def handle_ground(payload):
        uri, text = payload.get("image_uri"), payload.get("object_text")
        if not isinstance(uri, str) or not isinstance(text, str):
            return 400, {"error": "image_uri and object_text must be strings"}
        try:
            boxes = grounder.ground(uri, text)
        except BackendCallError as exc:
            return 500, {"error": str(exc)}
        return 200, {"boxes": [[float(v) for v in box] for box in boxes]}

    def handle_health(_payload):
        return 200, {"status": "ok"}

    server = JsonHttpServer({
        ("POST", "/v1/embed_text"): handle_embed,
        ("POST", "/v1/score"): handle_score,
        ("POST", "/v1/ground"): handle_ground,
        ("GET", "/v1/health"): handle_health,
    }, host=host, port=port)
    return server.start()


# -- protocol conformance -------------------------------------------------------

def check_backend_conformance(base_url: str, texts: list[str], uris: list[str],
                              dimension: int | None = None, timeout_s: float = 10.0) -> list[str]:
    """Schema/behavior checks every backend server must pass.

    Returns a list of problems; conformant servers return []. The same
    checks validate the mocks and any real adapter.
    """
    problems: list[str] = []
    base = base_url.rstrip("/")

    def post(path, payload):
        resp = requests.post(base + path, json=payload, timeout=timeout_s)
        if resp.status_code != 200:
            raise BackendCallError(f"{path}: HTTP {resp.status_code}")
        return resp.json()

    try:
        resp = requests.get(base + "/v1/health", timeout=timeout_s)
        if resp.status_code != 200:
            problems.append(f"/v1/health: HTTP {resp.status_code}")
    except requests.RequestException as exc:
        problems.append(f"/v1/health: {exc}")

    try:
        body = post("/v1/embed_text", {"texts": texts})
        rows = body.get("embeddings")
        if not isinstance(rows, list) or len(rows) != len(texts):
            problems.append("/v1/embed_text: embeddings must map 1:1 to texts")
        else:
            dims = set()
            for row in rows:
                if not isinstance(row, list) or not row or not all(
                        isinstance(v, (int, float)) and not isinstance(v, bool) and np.isfinite(v)
                        for v in row):
                    problems.append("/v1/embed_text: embedding rows must be non-empty finite number lists")
                    break
                dims.add(len(row))
            if len(dims) > 1:
                problems.append(f"/v1/embed_text: inconsistent dimensions {sorted(dims)}")
            if dimension is not None and dims and dims != {dimension}:
                problems.append(f"/v1/embed_text: dimension {sorted(dims)} != expected {dimension}")
    except (BackendCallError, requests.RequestException, ValueError) as exc:
        problems.append(f"/v1/embed_text: {exc}")

    for uri in uris:
        for text in texts:
            try:
                body = post("/v1/score", {"image_uri": uri, "object_text": text})
                for key in ("z_true", "z_false"):
                    v = body.get(key)
                    if isinstance(v, bool) or not isinstance(v, (int, float)) or not np.isfinite(v):
                        problems.append(f"/v1/score: {key} must be a finite number, got {v!r}")
            except (BackendCallError, requests.RequestException, ValueError) as exc:
                problems.append(f"/v1/score: {exc}")
            try:
                body = post("/v1/ground", {"image_uri": uri, "object_text": text})
                boxes = body.get("boxes")
                if not isinstance(boxes, list):
                    problems.append("/v1/ground: boxes must be a list")
                else:
                    for box in boxes:
                        if (not isinstance(box, list) or len(box) != 4 or not all(
                                isinstance(v, (int, float)) and not isinstance(v, bool)
                                and np.isfinite(v) for v in box)):
                            problems.append(f"/v1/ground: bad box {box!r}")
            except (BackendCallError, requests.RequestException, ValueError) as exc:
                problems.append(f"/v1/ground: {exc}")
    return problems


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="python -m matir.mocks",
        description="Serve deterministic mock model backends over HTTP.")
    parser.add_argument("--spec", required=True, help="MockSpec JSON file")
    parser.add_argument("--port", type=int, default=0)
    parser.add_argument("--host", default="127.0.0.1")
    args = parser.parse_args(argv)
    spec = MockSpec.from_file(args.spec)
    server = serve_mocks(spec, port=args.port, host=args.host)
    print(f"mock backends listening on {server.url}", flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        server.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
