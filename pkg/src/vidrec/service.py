"""Read-only HTTP retrieval service over an immutable index snapshot."""

from __future__ import annotations

import json
import logging
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from vidrec.embedding import EmbeddingProvider, as_embedding
from vidrec.errors import DataError, UnknownEntity
from vidrec.index import VideoIndex
from vidrec.profiler import InteractionEvent, ProfileConfig, UserHistory, user_profile

log = logging.getLogger(__name__)

MAX_K = 1000


class RetrievalService:
    """Maps request bodies to responses; HTTP-free so it can be tested directly.

    Until :meth:`load` is called every retrieval answers 503.
    """

    def __init__(self, products: EmbeddingProvider, profile_cfg: ProfileConfig, histories: dict | None = None,
                 index: VideoIndex | None = None):
        self.products = products
        self.profile_cfg = profile_cfg
        self.histories = histories or {}
        self.index = index

    def load(self, index: VideoIndex) -> None:
        if index.dimension != self.products.dimension:
            raise DataError("index and product embeddings differ in dimension")
        self.index = index

    def healthz(self):
        if self.index is None:
            return 503, {"status": "loading"}
        return 200, {"status": "ok", "size": len(self.index), "build_ts": self.index.build_ts,
                     "dimension": self.index.dimension}

    def _history(self, body: dict) -> UserHistory:
        if "events" in body:
            events = body["events"]
            if not isinstance(events, list):
                raise DataError("events must be a list")
            try:
                evs = sorted((InteractionEvent(int(e["product_id"]), int(e["ts"]), e.get("kind", "click"))
                              for e in events), key=lambda e: e.ts)
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"malformed event: {exc}") from None
            return UserHistory(int(body.get("user_id", -1)), tuple(evs))
        if "user_id" in body:
            uid = int(body["user_id"])
            return self.histories.get(uid, UserHistory(uid, ()))
        raise DataError("request needs 'events' or 'user_id'")

    def retrieve(self, body) -> tuple:
        """Returns (status, payload)."""
        if self.index is None:
            return 503, {"error": "index not loaded"}
        start = time.perf_counter()
        try:
            if not isinstance(body, dict):
                raise DataError("request body must be a JSON object")
            k = body.get("k", 10)
            if not isinstance(k, int) or not 1 <= k <= MAX_K:
                raise DataError(f"k must be an integer in [1, {MAX_K}]")
            exclude = body.get("exclude", [])
            if not isinstance(exclude, list):
                raise DataError("exclude must be a list of video ids")
            if "profile" in body:
                query = as_embedding(body["profile"], self.index.dimension)
                user_id = body.get("user_id")
            else:
                history = self._history(body)
                user_id = history.user_id
                last = history.events[-1].ts if history.events else self.index.build_ts
                t_now = int(body.get("t_now", max(last, self.index.build_ts)))
                query = user_profile(history, self.products, t_now, self.profile_cfg)
            results = self.index.top_k(query, k, [int(v) for v in exclude])
        except UnknownEntity as exc:
            return 422, {"error": str(exc)}
        except (DataError, TypeError, ValueError) as exc:
            return 400, {"error": str(exc)}
        return 200, {
            "user_id": user_id,
            "results": [{"video_id": v, "score": s} for v, s in results],
            "latency_ms": round((time.perf_counter() - start) * 1000.0, 3),
        }


class _Handler(BaseHTTPRequestHandler):
    service: RetrievalService = None  # set on the subclass built by make_server

    def _send(self, status: int, payload: dict) -> None:
        raw = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(raw)))
        self.end_headers()
        self.wfile.write(raw)

    def do_GET(self):
        if self.path == "/healthz":
            self._send(*self.service.healthz())
        else:
            self._send(404, {"error": "not found"})

    def do_POST(self):
        if self.path != "/v1/retrieve":
            self._send(404, {"error": "not found"})
            return
        length = int(self.headers.get("Content-Length") or 0)
        try:
            body = json.loads(self.rfile.read(length) or b"null")
        except ValueError:
            self._send(400, {"error": "body is not valid JSON"})
            return
        self._send(*self.service.retrieve(body))

    def log_message(self, fmt, *args):
        log.debug("%s " + fmt, self.address_string(), *args)


def make_server(service: RetrievalService, host: str = "127.0.0.1", port: int = 8080) -> ThreadingHTTPServer:
    handler = type("RetrievalHandler", (_Handler,), {"service": service})
    server = ThreadingHTTPServer((host, port), handler)
    server.daemon_threads = True
    return server


def serve_in_thread(service: RetrievalService, host: str = "127.0.0.1", port: int = 0):
    """Start a server on a background thread; returns (server, thread). Port 0 picks a free port."""
    server = make_server(service, host, port)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, thread
