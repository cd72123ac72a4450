"""HTTP service: ``POST /v1/rerank`` and ``GET /v1/health``.

Handlers are synchronous and run on the server's thread pool. Two limits
apply: at most ``max_in_flight`` rerank requests at once (excess requests
get 503 immediately, no queueing) and one backend concurrency budget
shared by every request.
"""

from __future__ import annotations

import threading
import time
from typing import List, Optional

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from . import __version__
from .backend import Backend, ConcurrencyLimiter
from .config import ServiceConfig
from .core import Candidate, Document, Query
from .errors import AllFailed, BackendError, DataError
from .ranking import RerankConfig, rerank_query


class QueryIn(BaseModel):
    id: Optional[str] = None
    text: str = Field(min_length=1)


class DocumentIn(BaseModel):
    id: Optional[str] = None
    text: str


class RerankRequest(BaseModel):
    query: QueryIn
    documents: List[DocumentIn] = Field(min_length=1)
    top_k: Optional[int] = Field(default=None, ge=1)
    return_components: bool = False


class Counters:
    def __init__(self):
        self._lock = threading.Lock()
        self.requests = 0
        self.rejected = 0
        self.failed = 0

    def bump(self, name: str) -> None:
        with self._lock:
            setattr(self, name, getattr(self, name) + 1)


def _error(status: int, kind: str, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": kind, "detail": message})


def create_app(
    backend: Backend,
    rerank_config: Optional[RerankConfig] = None,
    service_config: Optional[ServiceConfig] = None,
) -> FastAPI:
    rerank_config = rerank_config or RerankConfig()
    service_config = service_config or ServiceConfig()
    requests_gate = ConcurrencyLimiter(service_config.max_in_flight)
    backend_budget = ConcurrencyLimiter(service_config.backend_concurrency)
    counters = Counters()

    app = FastAPI(title="nothink-rerank", version=__version__)
    app.state.backend = backend
    app.state.requests_gate = requests_gate
    app.state.backend_budget = backend_budget
    app.state.counters = counters

    @app.exception_handler(RequestValidationError)
    async def _bad_request(request: Request, exc: RequestValidationError):
        return _error(400, "malformed_request", str(exc.errors()))

    @app.get("/v1/health")
    def health():
        try:
            reachable = bool(backend.ping())
        except Exception:
            reachable = False
        return {"status": "ok", "backend_reachable": reachable, "version": __version__}

    @app.post("/v1/rerank")
    def rerank(req: RerankRequest):
        counters.bump("requests")
        if not requests_gate.acquire(blocking=False):
            counters.bump("rejected")
            return _error(503, "overloaded", f"more than {service_config.max_in_flight} requests in flight")
        try:
            return _rerank(req)
        finally:
            requests_gate.release()

    def _rerank(req: RerankRequest):
        start = time.perf_counter()
        qid = req.query.id or "query"
        try:
            query = Query(qid, req.query.text)
            docs = [Document(d.id if d.id is not None else str(i), d.text) for i, d in enumerate(req.documents, 1)]
            top_k = min(req.top_k or len(docs), service_config.max_top_k)
            docs = docs[:top_k]
            candidates = [Candidate(qid, d.id, i) for i, d in enumerate(docs, 1)]
            corpus = {d.id: d for d in docs}
            # validates ids before any backend call
            entries, metrics = rerank_query(query, candidates, corpus, backend, rerank_config, backend_budget)
        except DataError as exc:
            return _error(400, "malformed_request", str(exc))
        except AllFailed as exc:
            counters.bump("failed")
            return _error(502, "backend_unavailable", str(exc))
        except BackendError as exc:
            counters.bump("failed")
            return _error(502, "backend_error", str(exc))

        results = []
        for e in entries:
            item = {"doc_id": e.doc_id, "score": e.score, "rank": e.rank}
            if req.return_components:
                item.update(p_bi=e.components.p_bi, s_fg=e.components.s_fg, fallbacks=list(e.fallbacks))
            results.append(item)
        return {
            "results": results,
            "metrics": {"latency": time.perf_counter() - start, "backend_calls": metrics.backend_calls},
        }

    return app


def serve(app: FastAPI, host: str, port: int) -> None:  # pragma: no cover - blocking
    import uvicorn

    uvicorn.run(app, host=host, port=port, log_level="info")
