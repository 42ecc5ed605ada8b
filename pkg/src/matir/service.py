"""HTTP service exposing the full pipeline over a shared immutable index.

Endpoints: POST /v1/search (text query), POST /v1/search_embedding (raw
vector, bypasses the embedder), GET /v1/health. The service owns the
clients for the three model backends; backend fan-out across concurrent
requests shares one bounded executor so the model servers see at most
max_in_flight calls at a time. With deterministic backends, identical
requests produce byte-identical response bodies.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from urllib.parse import urlparse

import numpy as np

from .backends import CallPolicy, HttpGrounder, HttpRelevanceScorer, HttpTextEmbedder
from .errors import (BackendCallError, BackendUnavailableError, InvalidInputError,
                     InvalidQueryError, MatirError)
from .evaluation import embed_query
from .httpserver import JsonHttpServer
from .index import GalleryIndex, index_stats, load_index
from .pipeline import (MODE_FULL, MODE_RERANK_ONLY, MODE_STAGE1, MODES, OUTAGE_DEGRADE,
                       OUTAGE_ERROR, result_rows, run_pipeline)
from .search import SearchParams, ensemble_query

log = logging.getLogger("matir.service")

ENV_INDEX = "MATIR_INDEX"
ENV_LISTEN = "MATIR_LISTEN"


@dataclass
class ServiceConfig:
    index_path: str | None = None
    text_embedder_url: str | None = None
    scorer_url: str | None = None
    grounder_url: str | None = None
    n_c: int = 100
    n_k: int = 50
    max_in_flight: int = 8
    call_timeout_s: float = 30.0
    retries: int = 2
    listen_address: str = "127.0.0.1:8080"
    outage_policy: str = OUTAGE_DEGRADE

    def __post_init__(self):
        if not (1 <= self.n_k <= self.n_c):
            raise InvalidInputError(f"require 1 <= n_k <= n_c, got n_k={self.n_k}, n_c={self.n_c}")
        if self.max_in_flight < 1:
            raise InvalidInputError("max_in_flight must be >= 1")
        if self.outage_policy not in (OUTAGE_DEGRADE, OUTAGE_ERROR):
            raise InvalidInputError(f"unknown outage_policy {self.outage_policy!r}")
        for name in ("text_embedder_url", "scorer_url", "grounder_url"):
            url = getattr(self, name)
            if url is None:
                continue
            parsed = urlparse(url)
            if parsed.scheme not in ("http", "https") or not parsed.netloc:
                raise InvalidInputError(f"{name} is not a well-formed http(s) URL: {url!r}")

    @classmethod
    def from_file(cls, path=None, overrides: dict | None = None) -> "ServiceConfig":
        """Load config from a JSON file; environment variables MATIR_INDEX
        and MATIR_LISTEN override file values, explicit overrides win last."""
        data: dict = {}
        if path is not None:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
            if not isinstance(raw, dict):
                raise InvalidInputError("service config must be a JSON object")
            known = {f.name for f in fields(cls)}
            unknown = set(raw) - known
            if unknown:
                raise InvalidInputError(f"unknown config keys: {sorted(unknown)}")
            data.update(raw)
        if os.environ.get(ENV_INDEX):
            data["index_path"] = os.environ[ENV_INDEX]
        if os.environ.get(ENV_LISTEN):
            data["listen_address"] = os.environ[ENV_LISTEN]
        for key, value in (overrides or {}).items():
            if value is not None:
                data[key] = value
        return cls(**data)

    def policy(self) -> CallPolicy:
        return CallPolicy(max_in_flight=self.max_in_flight, timeout_s=self.call_timeout_s,
                          retries=self.retries)


class RetrievalService:
    """Request handlers over a loaded index and configured backends."""

    def __init__(self, config: ServiceConfig, index: GalleryIndex | None = None,
                 embedder=None, scorer=None, grounder=None):
        self.config = config
        self.index = index
        if self.index is None and config.index_path:
            self.index = load_index(config.index_path)
        timeout = config.call_timeout_s
        self.embedder = embedder
        if self.embedder is None and config.text_embedder_url:
            self.embedder = HttpTextEmbedder(config.text_embedder_url, timeout_s=timeout)
        self.scorer = scorer
        if self.scorer is None and config.scorer_url:
            self.scorer = HttpRelevanceScorer(config.scorer_url, timeout_s=timeout)
        self.grounder = grounder
        if self.grounder is None and config.grounder_url:
            self.grounder = HttpGrounder(config.grounder_url, timeout_s=timeout)
        self._policy = config.policy()
        # One executor for all backend fan-out: the global in-flight limiter.
        self._executor = ThreadPoolExecutor(max_workers=config.max_in_flight)

    def close(self):
        self._executor.shutdown(wait=False)

    # -- helpers ---------------------------------------------------------

    def _auto_mode(self, want_text_stages: bool) -> str:
        if not want_text_stages:
            return MODE_STAGE1
        if self.scorer is not None and self.grounder is not None:
            return MODE_FULL
        if self.scorer is not None:
            return MODE_RERANK_ONLY
        return MODE_STAGE1

    def _mode_supported(self, mode: str) -> str | None:
        if mode in (MODE_FULL, MODE_RERANK_ONLY) and self.scorer is None:
            return "no scorer backend configured"
        if mode == MODE_FULL and self.grounder is None:
            return "no grounder backend configured"
        return None

    def _params(self, payload: dict) -> SearchParams:
        n_k = payload.get("n_k", self.config.n_k)
        if not isinstance(n_k, int) or isinstance(n_k, bool):
            raise InvalidInputError("n_k must be an integer")
        return SearchParams(n_c=self.config.n_c, n_k=n_k)

    def _run(self, query, query_text, mode, params):
        result = run_pipeline(
            self.index, query, mode, params, query_text=query_text,
            scorer=self.scorer, grounder=self.grounder, policy=self._policy,
            executor=self._executor, outage_policy=self.config.outage_policy)
        return result_rows(result, self.index)

    # -- handlers ---------------------------------------------------------

    def handle_search(self, payload: dict) -> tuple[int, dict]:
        if self.index is None:
            return 503, {"error": "no index loaded"}
        query_text = payload.get("query_text")
        if not isinstance(query_text, str) or not query_text:
            return 400, {"error": "query_text must be a non-empty string"}
        mode = payload.get("mode", self._auto_mode(True))
        if mode not in MODES:
            return 400, {"error": f"mode must be one of {list(MODES)}"}
        unsupported = self._mode_supported(mode)
        if unsupported:
            return 503, {"error": unsupported}
        if self.embedder is None:
            return 503, {"error": "no text embedder configured"}
        try:
            params = self._params(payload)
            query = embed_query(self.embedder, query_text, self.index,
                                retries=self._policy.retries)
            rows = self._run(query, query_text, mode, params)
        except (InvalidInputError, InvalidQueryError) as exc:
            return 400, {"error": str(exc)}
        except (BackendUnavailableError, BackendCallError) as exc:
            return 503, {"error": str(exc)}
        except MatirError as exc:
            return 500, {"error": str(exc)}
        return 200, {"query_text": query_text, "results": rows}

    def handle_search_embedding(self, payload: dict) -> tuple[int, dict]:
        if self.index is None:
            return 503, {"error": "no index loaded"}
        embedding = payload.get("embedding")
        if not isinstance(embedding, list) or not embedding:
            return 400, {"error": "embedding must be a non-empty list of numbers"}
        if len(embedding) != self.index.dimension:
            return 400, {"error": f"embedding has dimension {len(embedding)}, "
                                  f"index expects {self.index.dimension}"}
        query_text = payload.get("query_text")
        if query_text is not None and not isinstance(query_text, str):
            return 400, {"error": "query_text must be a string when present"}
        mode = payload.get("mode", self._auto_mode(query_text is not None))
        if mode not in MODES:
            return 400, {"error": f"mode must be one of {list(MODES)}"}
        if mode != MODE_STAGE1 and not query_text:
            return 400, {"error": f"mode {mode!r} needs query_text for the backends"}
        unsupported = self._mode_supported(mode)
        if unsupported:
            return 503, {"error": unsupported}
        try:
            params = self._params(payload)
            vec = np.asarray(embedding, dtype=np.float64)
            query = ensemble_query([vec])
            rows = self._run(query, query_text, mode, params)
        except (InvalidInputError, InvalidQueryError) as exc:
            return 400, {"error": str(exc)}
        except (BackendUnavailableError, BackendCallError) as exc:
            return 503, {"error": str(exc)}
        except MatirError as exc:
            return 500, {"error": str(exc)}
        return 200, {"query_text": query_text, "results": rows}

    def handle_health(self, _payload=None) -> tuple[int, dict]:
        backends = {}
        for name, client in (("embedder", self.embedder), ("scorer", self.scorer),
                             ("grounder", self.grounder)):
            if client is None:
                backends[name] = None
            else:
                probe = getattr(client, "reachable", None)
                backends[name] = bool(probe()) if callable(probe) else True
        if self.index is None:
            status = "unavailable"
            stats = None
        else:
            stats = index_stats(self.index).to_json()
            status = "ok" if all(v is not False for v in backends.values()) else "degraded"
        return 200, {"status": status, "index": stats, "backends": backends}

    def routes(self):
        return {
            ("POST", "/v1/search"): self.handle_search,
            ("POST", "/v1/search_embedding"): self.handle_search_embedding,
            ("GET", "/v1/health"): self.handle_health,
        }


def make_server(service: RetrievalService, host: str | None = None,
                port: int | None = None) -> JsonHttpServer:
    """Build the HTTP server for a service (unstarted)."""
    if host is None or port is None:
        addr = service.config.listen_address
        cfg_host, _, cfg_port = addr.rpartition(":")
        if host is None:
            host = cfg_host or "127.0.0.1"
        if port is None:
            try:
                port = int(cfg_port)
            except ValueError:
                raise InvalidInputError(f"bad listen_address {addr!r}") from None
    return JsonHttpServer(service.routes(), host=host, port=port)


def serve(config: ServiceConfig) -> None:
    """Run the service until interrupted."""
    service = RetrievalService(config)
    server = make_server(service)
    host, port = server.address
    log.info("listening on %s:%d", host, port)
    print(f"matir service listening on http://{host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
        service.close()
