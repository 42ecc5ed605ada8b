"""HTTP clients for the three model backends and shared fan-out machinery.

Wire protocols (JSON over HTTP):
  POST {base}/v1/embed_text  {"texts": [...]}            -> {"embeddings": [[...], ...]}
  POST {base}/v1/score       {"image_uri", "object_text"} -> {"z_true": n, "z_false": n}
  POST {base}/v1/ground      {"image_uri", "object_text"} -> {"boxes": [[x1,y1,x2,y2], ...]}

A non-200 status, malformed JSON, or a shape violation counts as a call
failure. Calls fan out across a bounded worker pool with a per-call
timeout and bounded retries; results are reassembled by input position so
completion order never affects output.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence, TypeVar

import numpy as np
import requests

from .errors import BackendCallError, InvalidInputError

log = logging.getLogger("matir.backends")

T = TypeVar("T")
R = TypeVar("R")

DEFAULT_MAX_IN_FLIGHT = 8
DEFAULT_TIMEOUT_S = 30.0
DEFAULT_RETRIES = 2


@dataclass(frozen=True)
class CallPolicy:
    """Fan-out contract shared by all backend calls."""

    max_in_flight: int = DEFAULT_MAX_IN_FLIGHT
    timeout_s: float = DEFAULT_TIMEOUT_S
    retries: int = DEFAULT_RETRIES


def call_with_retries(fn: Callable[[], R], what: str, retries: int) -> R:
    """Run fn, retrying up to ``retries`` extra times on BackendCallError."""
    attempts = retries + 1
    last: BackendCallError | None = None
    for attempt in range(1, attempts + 1):
        try:
            return fn()
        except BackendCallError as exc:
            last = exc
            if attempt < attempts:
                log.warning("%s failed (attempt %d/%d): %s; retrying", what, attempt, attempts, exc)
            else:
                log.warning("%s failed (attempt %d/%d): %s; giving up", what, attempt, attempts, exc)
    raise last


def fan_out(items: Sequence[T], call: Callable[[T], R], policy: CallPolicy,
            what: str, executor: Executor | None = None) -> list[R | BackendCallError]:
    """Apply ``call`` (with retries) to every item, at most max_in_flight
    concurrently. The output list is positional; failures are returned as
    the BackendCallError that exhausted the retries."""

    def attempt(item: T) -> R | BackendCallError:
        try:
            return call_with_retries(lambda: call(item), what, policy.retries)
        except BackendCallError as exc:
            return exc

    if not items:
        return []
    if policy.max_in_flight <= 1 and executor is None:
        return [attempt(item) for item in items]
    if executor is not None:
        futures = [executor.submit(attempt, item) for item in items]
        return [f.result() for f in futures]
    with ThreadPoolExecutor(max_workers=policy.max_in_flight) as pool:
        return list(pool.map(attempt, items))


def _finite_number(value, field: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise BackendCallError(f"field {field!r} is not a number: {value!r}")
    v = float(value)
    if not math.isfinite(v):
        raise BackendCallError(f"field {field!r} is not finite: {value!r}")
    return v


class _HttpBackend:
    def __init__(self, base_url: str, timeout_s: float = DEFAULT_TIMEOUT_S,
                 session: requests.Session | None = None):
        self.base_url = base_url.rstrip("/")
        self.timeout_s = timeout_s
        self._session = session or requests.Session()

    def _post(self, path: str, payload: dict) -> dict:
        url = self.base_url + path
        try:
            resp = self._session.post(url, json=payload, timeout=self.timeout_s)
        except requests.RequestException as exc:
            raise BackendCallError(f"POST {url}: {exc}") from exc
        if resp.status_code != 200:
            raise BackendCallError(f"POST {url}: HTTP {resp.status_code}")
        try:
            body = resp.json()
        except ValueError as exc:
            raise BackendCallError(f"POST {url}: malformed JSON response") from exc
        if not isinstance(body, dict):
            raise BackendCallError(f"POST {url}: response is not a JSON object")
        return body

    def reachable(self) -> bool:
        """Liveness probe: any HTTP response counts, connection failure does not."""
        try:
            self._session.get(self.base_url + "/v1/health", timeout=min(self.timeout_s, 5.0))
            return True
        except requests.RequestException:
            return False


class HttpTextEmbedder(_HttpBackend):
    """Client for /v1/embed_text: one embedding row per input text."""

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        if not texts:
            raise InvalidInputError("no texts to embed")
        body = self._post("/v1/embed_text", {"texts": list(texts)})
        rows = body.get("embeddings")
        if not isinstance(rows, list) or len(rows) != len(texts):
            raise BackendCallError(
                f"embedder returned {0 if not isinstance(rows, list) else len(rows)} "
                f"embeddings for {len(texts)} texts")
        out = []
        for row in rows:
            if not isinstance(row, list) or not row:
                raise BackendCallError("embedder returned a non-list or empty embedding")
            vec = np.asarray([_finite_number(v, "embeddings[][]") for v in row], dtype=np.float64)
            out.append(vec)
        if len({v.size for v in out}) > 1:
            raise BackendCallError("embedder returned embeddings of differing dimensions")
        return out


class HttpRelevanceScorer(_HttpBackend):
    """Client for /v1/score: true/false token logits for (image, text)."""

    def score(self, image_uri: str, object_text: str):
        body = self._post("/v1/score", {"image_uri": image_uri, "object_text": object_text})
        from .rerank import LogitPair

        if "z_true" not in body or "z_false" not in body:
            raise BackendCallError("scorer response missing z_true/z_false")
        return LogitPair(
            z_true=_finite_number(body["z_true"], "z_true"),
            z_false=_finite_number(body["z_false"], "z_false"),
        )


class HttpGrounder(_HttpBackend):
    """Client for /v1/ground: candidate boxes in absolute pixel corners."""

    def ground(self, image_uri: str, object_text: str) -> list[tuple[float, float, float, float]]:
        body = self._post("/v1/ground", {"image_uri": image_uri, "object_text": object_text})
        boxes = body.get("boxes")
        if not isinstance(boxes, list):
            raise BackendCallError("grounder response missing boxes list")
        out = []
        for box in boxes:
            if not isinstance(box, list) or len(box) != 4:
                raise BackendCallError(f"grounder box is not a 4-list: {box!r}")
            out.append(tuple(_finite_number(v, "boxes[][]") for v in box))
        return out
