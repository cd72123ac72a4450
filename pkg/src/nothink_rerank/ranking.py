"""End-to-end pointwise reranking.

Every candidate becomes a fine-grained no-think pointwise prompt; prompts are
completed at bounded concurrency, scored with logprob fusion and sorted by
(descending score, ascending first-stage rank). A candidate whose backend call
fails gets the neutral score and a ``backend_error`` flag instead of aborting.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

from .backend import Backend, BackendConfig, ConcurrencyLimiter, GenerationResult
from .core import Candidate, Document, LabelGranularity, Query, ThinkMode, validate_candidate_list
from .errors import AllFailed, BackendError, DataError
from .prompting import RenderedPrompt, render_pointwise
from .scoring import FusedScore, FusionConfig, neutral_score, score_result
from .trec import RunRow

logger = logging.getLogger(__name__)

DEFAULT_TAG = "nothink-rerank"


@dataclass(frozen=True)
class RerankConfig:
    backend: BackendConfig = field(default_factory=BackendConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    concurrency_limit: int = 8
    top_k: int = 100
    tag: str = DEFAULT_TAG

    def __post_init__(self):
        if self.concurrency_limit < 1:
            raise DataError("concurrency_limit must be >= 1")
        if self.top_k < 1:
            raise DataError("top_k must be >= 1")


@dataclass(frozen=True)
class RankedEntry:
    query_id: str
    doc_id: str
    score: float
    rank: int
    first_stage_rank: int
    fallbacks: Tuple[str, ...] = ()
    latency: float = 0.0
    components: Optional[FusedScore] = None

    def to_row(self, tag: str = DEFAULT_TAG) -> RunRow:
        return RunRow(self.query_id, self.doc_id, self.rank, self.score, tag)


@dataclass
class RunMetrics:
    queries_processed: int = 0
    wall_time: float = 0.0
    queries_per_hour: float = 0.0
    generated_tokens_total: int = 0
    fallback_rate: float = 0.0
    candidates_scored: int = 0
    backend_calls: int = 0
    failed_queries: int = 0

    def to_dict(self) -> Dict[str, float]:
        return dict(self.__dict__)

    def summary(self) -> str:
        return (
            f"queries={self.queries_processed} failed={self.failed_queries} "
            f"candidates={self.candidates_scored} wall={self.wall_time:.3f}s "
            f"queries/hour={self.queries_per_hour:.1f} tokens={self.generated_tokens_total} "
            f"fallback_rate={self.fallback_rate:.3f}"
        )


def _qph(queries: int, wall_time: float) -> float:
    return queries / (wall_time / 3600.0) if wall_time > 0 else 0.0


@dataclass
class RunResult:
    entries: Dict[str, List[RankedEntry]]
    metrics: RunMetrics
    failures: Dict[str, Exception] = field(default_factory=dict)  # query id -> cause

    def rows(self, tag: str = DEFAULT_TAG) -> List[RunRow]:
        return [e.to_row(tag) for qid in self.entries for e in self.entries[qid]]

    def rankings(self) -> Dict[str, List[str]]:
        return {qid: [e.doc_id for e in es] for qid, es in self.entries.items()}


def build_prompts(query: Query, candidates: Sequence[Candidate], corpus: Mapping[str, Document]) -> List[RenderedPrompt]:
    prompts = []
    for c in candidates:
        doc = corpus.get(c.doc_id)
        if doc is None:
            raise DataError(f"document {c.doc_id!r} of query {query.id!r} is not in the corpus")
        prompts.append(render_pointwise(query, doc, LabelGranularity.FINE_GRAINED, ThinkMode.NO_THINK))
    return prompts


def rank_scored(
    query_id: str,
    candidates: Sequence[Candidate],
    results: Sequence[Union[GenerationResult, BackendError]],
    fusion: FusionConfig,
) -> List[RankedEntry]:
    """Score generations and order them; raises AllFailed if every call failed."""
    if results and all(isinstance(r, BackendError) for r in results):
        raise AllFailed(f"all {len(results)} backend calls failed: {results[0]}", query_id)
    scored = []
    for c, r in zip(candidates, results):
        if isinstance(r, BackendError):
            fs, flags, latency = neutral_score(fusion), ("backend_error",), 0.0
            logger.warning("candidate %s/%s degraded to neutral: %s", c.query_id, c.doc_id, r)
        else:
            fs = score_result(r, fusion)
            flags = tuple(name for name, on in (("binary", fs.used_binary_fallback), ("fine_grained", fs.used_finegrained_fallback)) if on)
            latency = r.latency
        scored.append((c, fs, flags, latency))
    # stable: equal (score, first-stage rank) keep input order
    scored.sort(key=lambda s: (-s[1].fused, s[0].first_stage_rank))
    return [
        RankedEntry(query_id, c.doc_id, fs.fused, rank, c.first_stage_rank, flags, latency, fs)
        for rank, (c, fs, flags, latency) in enumerate(scored, 1)
    ]


def _tokens(results: Iterable) -> int:
    return sum(len(r.tokens) for r in results if isinstance(r, GenerationResult))


def rerank_query(
    query: Query,
    candidates: Sequence[Candidate],
    corpus: Mapping[str, Document],
    backend: Backend,
    config: Optional[RerankConfig] = None,
    limiter: Optional[ConcurrencyLimiter] = None,
) -> Tuple[List[RankedEntry], RunMetrics]:
    """Rerank one query's candidates; each is scored exactly once."""
    config = config or RerankConfig()
    candidates = validate_candidate_list(candidates)
    if candidates[0].query_id != query.id:
        raise DataError(f"candidates belong to {candidates[0].query_id!r}, not {query.id!r}")
    start = time.perf_counter()
    prompts = build_prompts(query, candidates, corpus)
    results = backend.complete_batch(prompts, config.backend, config.concurrency_limit, limiter)
    entries = rank_scored(query.id, candidates, results, config.fusion)
    wall = time.perf_counter() - start
    fallbacks = sum(1 for e in entries if e.fallbacks)
    metrics = RunMetrics(
        queries_processed=1,
        wall_time=wall,
        queries_per_hour=_qph(1, wall),
        generated_tokens_total=_tokens(results),
        fallback_rate=fallbacks / len(entries),
        candidates_scored=len(entries),
        backend_calls=len(prompts),
    )
    return entries, metrics


def rerank_run(
    candidates: Mapping[str, Sequence[Candidate]],
    queries: Mapping[str, Query],
    corpus: Mapping[str, Document],
    backend: Backend,
    config: Optional[RerankConfig] = None,
    top_k: Optional[int] = None,
) -> RunResult:
    """Rerank the ``top_k`` first-stage candidates of every query.

    All prompts of all queries share one concurrency window, so queries are
    pipelined while their candidates run in parallel. A query that cannot be
    processed is recorded in ``failures`` and the rest still complete.
    """
    config = config or RerankConfig()
    top_k = top_k or config.top_k
    start = time.perf_counter()

    failures: Dict[str, Exception] = {}
    plans: List[Tuple[str, List[Candidate], List[RenderedPrompt]]] = []
    for qid, cands in candidates.items():
        try:
            cands = validate_candidate_list(cands)
            query = queries.get(qid)
            if query is None:
                raise DataError(f"query {qid!r} is not in the queries file")
            cands = sorted(cands, key=lambda c: c.first_stage_rank)[:top_k]
            plans.append((qid, cands, build_prompts(query, cands, corpus)))
        except DataError as exc:
            failures[qid] = exc

    flat = [p for _, _, prompts in plans for p in prompts]
    results = backend.complete_batch(flat, config.backend, config.concurrency_limit)

    entries: Dict[str, List[RankedEntry]] = {}
    offset = 0
    for qid, cands, prompts in plans:
        chunk = results[offset:offset + len(prompts)]
        offset += len(prompts)
        try:
            entries[qid] = rank_scored(qid, cands, chunk, config.fusion)
        except AllFailed as exc:
            failures[qid] = exc

    wall = time.perf_counter() - start
    scored = [e for es in entries.values() for e in es]
    metrics = RunMetrics(
        queries_processed=len(entries),
        wall_time=wall,
        queries_per_hour=_qph(len(entries), wall),
        generated_tokens_total=_tokens(results),
        fallback_rate=(sum(1 for e in scored if e.fallbacks) / len(scored)) if scored else 0.0,
        candidates_scored=len(scored),
        backend_calls=len(flat),
        failed_queries=len(failures),
    )
    return RunResult(entries, metrics, failures)


def write_metrics_report(result: RunResult, path: Union[str, Path]) -> None:
    """One JSON line per query, then a summary line."""
    with open(path, "w", encoding="utf-8") as f:
        for qid, es in result.entries.items():
            rec = {
                "query_id": qid,
                "candidates": len(es),
                "fallbacks": sum(1 for e in es if e.fallbacks),
                "mean_latency": sum(e.latency for e in es) / len(es),
            }
            f.write(json.dumps(rec) + "\n")
        for qid, reason in result.failures.items():
            f.write(json.dumps({"query_id": qid, "failed": str(reason)}) + "\n")
        f.write(json.dumps({"summary": result.metrics.to_dict()}) + "\n")
