"""Minimal threaded JSON-over-HTTP server used by the service and the mocks.

Routes are a {(method, path): handler} table; handlers take the decoded
JSON payload (None for GET) and return (status, body). Responses are
serialized compactly with a stable key order, so identical bodies yield
identical bytes.
"""

from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable

log = logging.getLogger("matir.http")

Handler = Callable[[dict | None], tuple[int, dict]]


def encode_body(body: dict) -> bytes:
    return json.dumps(body, separators=(",", ":")).encode("utf-8")


class JsonHttpServer:
    """Threaded HTTP server dispatching JSON requests to a route table."""

    def __init__(self, routes: dict[tuple[str, str], Handler], host: str = "127.0.0.1",
                 port: int = 0):
        outer = self

        class _RequestHandler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, fmt, *args):
                log.debug("%s %s", self.address_string(), fmt % args)

            def _dispatch(self, method: str):
                path = self.path.split("?", 1)[0]
                handler = outer.routes.get((method, path))
                if handler is None:
                    self._reply(404, {"error": f"no route {method} {path}"})
                    return
                payload = None
                if method == "POST":
                    length = int(self.headers.get("Content-Length", "0"))
                    raw = self.rfile.read(length) if length else b""
                    try:
                        payload = json.loads(raw.decode("utf-8")) if raw else {}
                    except (json.JSONDecodeError, UnicodeDecodeError):
                        self._reply(400, {"error": "request body is not valid JSON"})
                        return
                    if not isinstance(payload, dict):
                        self._reply(400, {"error": "request body must be a JSON object"})
                        return
                try:
                    status, body = handler(payload)
                except Exception as exc:  # handler bug: surface as 500
                    log.exception("handler for %s %s raised", method, path)
                    status, body = 500, {"error": f"internal error: {exc}"}
                self._reply(status, body)

            def _reply(self, status: int, body: dict):
                data = encode_body(body)
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def do_GET(self):
                self._dispatch("GET")

            def do_POST(self):
                self._dispatch("POST")

        class _Server(ThreadingHTTPServer):
            daemon_threads = True

            def handle_error(self, request, client_address):
                # Client hang-ups (timeouts, broken pipes) are routine.
                log.debug("request from %s aborted", client_address)

        self.routes = routes
        self._server = _Server((host, port), _RequestHandler)
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    @property
    def url(self) -> str:
        host, port = self.address
        return f"http://{host}:{port}"

    def start(self) -> "JsonHttpServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self):
        self._server.serve_forever()

    def stop(self):
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None
