"""Inference backends returning generated text with per-token top-k logprobs.

``HttpBackend`` speaks the completions-style HTTP+JSON protocol served by
vLLM and similar servers. ``MockBackend`` produces deterministic answers from
a fixture of (query_id, doc_id) -> (p_yes, score distribution) and is the test
oracle for everything downstream.
"""

from __future__ import annotations

import json
import logging
import math
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import httpx

from .core import MAX_GRADE, TaskParadigm, ThinkMode
from .errors import (
    BackendError,
    BackendTimeout,
    DataError,
    HttpStatus,
    MalformedResponse,
    RetriesExhausted,
    UnknownPair,
)
from .prompting import RenderedPrompt

logger = logging.getLogger(__name__)

NO_THINK_MAX_TOKENS = 16
THINK_MAX_TOKENS = 2048
# yes, no and the five digits must all fit in the top-k list
MIN_TOP_LOGPROBS = 7


@dataclass(frozen=True)
class TokenLogprob:
    token_text: str
    logprob: float
    top_alternatives: Tuple[Tuple[str, float], ...] = ()

    def __post_init__(self):
        alts = tuple((str(t), float(lp)) for t, lp in self.top_alternatives)
        # stable sort keeps server order among equal logprobs
        object.__setattr__(self, "top_alternatives", tuple(sorted(alts, key=lambda a: -a[1])))


@dataclass(frozen=True)
class GenerationResult:
    text: str
    tokens: Tuple[TokenLogprob, ...]
    latency: float = 0.0
    backend_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))

    @property
    def has_logprobs(self) -> bool:
        return any(t.top_alternatives for t in self.tokens)

    def joined_tokens(self, joiner: Callable[[Sequence[str]], str] = "".join) -> str:
        return joiner([t.token_text for t in self.tokens])


@dataclass(frozen=True)
class BackendConfig:
    endpoint: str = "http://localhost:8000/v1/completions"
    model_name: str = "default"
    temperature: float = 0.0
    top_logprobs: int = 20
    max_tokens: Optional[int] = None  # None: derived from the prompt's think mode
    timeout: float = 30.0
    max_retries: int = 3
    backoff: float = 0.5
    api_key_env: str = "OPENAI_API_KEY"

    def __post_init__(self):
        if self.top_logprobs < MIN_TOP_LOGPROBS:
            raise DataError(f"top_logprobs must be >= {MIN_TOP_LOGPROBS}, got {self.top_logprobs}")
        if self.temperature < 0:
            raise DataError("temperature must be >= 0")
        if self.max_retries < 0:
            raise DataError("max_retries must be >= 0")
        if self.timeout <= 0:
            raise DataError("timeout must be positive")

    def max_tokens_for(self, mode: ThinkMode) -> int:
        if self.max_tokens is not None:
            return self.max_tokens
        return THINK_MAX_TOKENS if mode is ThinkMode.THINK else NO_THINK_MAX_TOKENS


class ConcurrencyLimiter:
    """Counting semaphore that records how many holders it has ever seen at once."""

    def __init__(self, limit: int):
        if limit < 1:
            raise ValueError("concurrency limit must be >= 1")
        self.limit = limit
        self._sem = threading.BoundedSemaphore(limit)
        self._lock = threading.Lock()
        self.in_flight = 0
        self.peak = 0

    def acquire(self, blocking: bool = True) -> bool:
        if not self._sem.acquire(blocking):
            return False
        with self._lock:
            self.in_flight += 1
            self.peak = max(self.peak, self.in_flight)
        return True

    def release(self) -> None:
        with self._lock:
            self.in_flight -= 1
        self._sem.release()

    def __enter__(self):
        self.acquire()
        return self

    def __exit__(self, *exc):
        self.release()


class _Unreachable(BackendError):
    """Connection-level failure; retried like a timeout."""


def _retryable(exc: BackendError) -> bool:
    if isinstance(exc, (BackendTimeout, _Unreachable)):
        return True
    return isinstance(exc, HttpStatus) and exc.code >= 500


class Backend:
    """Base class: subclasses implement one attempt in ``_attempt``."""

    backend_id = "backend"

    def __init__(self, config: Optional[BackendConfig] = None):
        self.config = config or BackendConfig()
        self._calls_lock = threading.Lock()
        self.calls = 0

    def joiner(self, tokens: Sequence[str]) -> str:
        return "".join(tokens)

    def _attempt(self, prompt: RenderedPrompt, config: BackendConfig) -> GenerationResult:
        raise NotImplementedError

    def complete(self, prompt: RenderedPrompt, config: Optional[BackendConfig] = None) -> GenerationResult:
        """One prompt, retried with exponential backoff on timeouts and 5xx."""
        config = config or self.config
        with self._calls_lock:
            self.calls += 1
        attempts = config.max_retries + 1
        for attempt in range(attempts):
            try:
                return self._attempt(prompt, config)
            except BackendError as exc:
                if not exc.query_id:
                    exc.query_id, exc.doc_ids = prompt.query_id, prompt.doc_ids
                if not _retryable(exc):
                    raise
                last = exc
                if attempt + 1 < attempts:
                    delay = config.backoff * (2 ** attempt)
                    logger.debug("retrying %s/%s after %s (%.3fs)", prompt.query_id, prompt.doc_ids, exc, delay)
                    time.sleep(delay)
        if isinstance(last, BackendTimeout):
            raise BackendTimeout(f"timed out after {attempts} attempts", prompt.query_id, prompt.doc_ids)
        raise RetriesExhausted(attempts, last, prompt.query_id, prompt.doc_ids)

    def complete_batch(
        self,
        prompts: Sequence[RenderedPrompt],
        config: Optional[BackendConfig] = None,
        concurrency_limit: int = 8,
        limiter: Optional[ConcurrencyLimiter] = None,
    ) -> List[Union[GenerationResult, BackendError]]:
        """Complete ``prompts`` with at most ``concurrency_limit`` in flight.

        Results keep input order. A failed item is returned as its
        BackendError instance instead of aborting the batch. A shared
        ``limiter`` additionally bounds concurrency across batches.
        """
        if concurrency_limit < 1:
            raise ValueError("concurrency_limit must be >= 1")
        config = config or self.config

        def run(prompt: RenderedPrompt):
            try:
                if limiter is None:
                    return self.complete(prompt, config)
                with limiter:
                    return self.complete(prompt, config)
            except BackendError as exc:
                return exc

        if not prompts:
            return []
        workers = min(concurrency_limit, len(prompts))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, prompts))

    def ping(self) -> bool:
        return True

    def close(self) -> None:
        pass


# -- HTTP -----------------------------------------------------------------------


def _parse_top(entry) -> Tuple[Tuple[str, float], ...]:
    if entry is None:
        return ()
    if isinstance(entry, Mapping):
        return tuple((str(t), float(lp)) for t, lp in entry.items())
    # chat-style list of {"token": ..., "logprob": ...}
    return tuple((str(e["token"]), float(e["logprob"])) for e in entry)


def parse_completion_response(body: Mapping, top_k: int, latency: float = 0.0, backend_id: str = "http") -> GenerationResult:
    """Turn a completions-style JSON body into a GenerationResult.

    Raises MalformedResponse when choices or logprobs are missing.
    """
    try:
        choice = body["choices"][0]
        text = choice["text"]
    except (KeyError, IndexError, TypeError):
        raise MalformedResponse("response has no choices[0].text") from None
    lp = choice.get("logprobs")
    if not lp or lp.get("tokens") is None or lp.get("top_logprobs") is None:
        raise MalformedResponse("response carries no logprobs")
    tokens, token_lps, tops = lp["tokens"], lp.get("token_logprobs") or [], lp["top_logprobs"]
    if len(tops) != len(tokens):
        raise MalformedResponse("tokens and top_logprobs differ in length")
    out = []
    try:
        for i, tok in enumerate(tokens):
            alts = sorted(_parse_top(tops[i]), key=lambda a: -a[1])[:top_k]
            own = token_lps[i] if i < len(token_lps) and token_lps[i] is not None else (alts[0][1] if alts else 0.0)
            out.append(TokenLogprob(str(tok), float(own), tuple(alts)))
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedResponse(f"bad logprob entry: {exc}") from None
    return GenerationResult(text, tuple(out), latency, backend_id)


class HttpBackend(Backend):
    backend_id = "http"

    def __init__(
        self,
        config: Optional[BackendConfig] = None,
        client: Optional[httpx.Client] = None,
        transport: Optional[httpx.BaseTransport] = None,
    ):
        super().__init__(config)
        self.backend_id = f"http:{self.config.model_name}"
        self._client = client or httpx.Client(transport=transport, timeout=self.config.timeout)

    def _headers(self, config: BackendConfig) -> Dict[str, str]:
        key = os.environ.get(config.api_key_env, "")
        return {"Authorization": f"Bearer {key}"} if key else {}

    def _attempt(self, prompt: RenderedPrompt, config: BackendConfig) -> GenerationResult:
        payload = {
            "model": config.model_name,
            "prompt": prompt.text,
            "temperature": config.temperature,
            "max_tokens": config.max_tokens_for(prompt.spec.mode),
            "logprobs": config.top_logprobs,
        }
        ids = (prompt.query_id, prompt.doc_ids)
        start = time.perf_counter()
        try:
            resp = self._client.post(config.endpoint, json=payload, headers=self._headers(config), timeout=config.timeout)
        except httpx.TimeoutException as exc:
            raise BackendTimeout(f"timeout after {config.timeout}s ({exc.__class__.__name__})", *ids) from None
        except httpx.TransportError as exc:
            raise _Unreachable(f"cannot reach {config.endpoint}: {exc}", *ids) from None
        latency = time.perf_counter() - start
        if resp.status_code >= 400:
            raise HttpStatus(resp.status_code, resp.text[:200], *ids)
        try:
            body = resp.json()
        except ValueError:
            raise MalformedResponse("response body is not JSON", *ids) from None
        try:
            return parse_completion_response(body, config.top_logprobs, latency, self.backend_id)
        except MalformedResponse as exc:
            raise MalformedResponse(str(exc), *ids) from None

    def ping(self) -> bool:
        base = self.config.endpoint.rsplit("/completions", 1)[0]
        try:
            self._client.get(base + "/models", headers=self._headers(self.config), timeout=min(self.config.timeout, 5.0))
        except httpx.HTTPError:
            return False
        return True

    def close(self) -> None:
        self._client.close()


# -- mock -----------------------------------------------------------------------


@dataclass(frozen=True)
class FixtureEntry:
    p_yes: float
    score_dist: Tuple[float, ...]

    def __post_init__(self):
        dist = tuple(float(p) for p in self.score_dist)
        object.__setattr__(self, "score_dist", dist)
        if not 0.0 <= self.p_yes <= 1.0:
            raise DataError(f"p_yes must lie in [0, 1], got {self.p_yes}")
        if len(dist) != MAX_GRADE + 1 or any(p < 0 for p in dist) or abs(sum(dist) - 1.0) > 1e-9:
            raise DataError(f"score_dist must be 5 non-negative probabilities summing to 1, got {dist}")


NEUTRAL_ENTRY = FixtureEntry(0.5, (0.2,) * 5)

Fixture = Dict[Tuple[str, str], FixtureEntry]


def _ln(p: float) -> float:
    return math.log(p) if p > 0 else -math.inf


class MockBackend(Backend):
    """Deterministic pointwise backend driven by a fixture.

    Output text is ``<think>\\n\\n</think>{yes|no}({argmax score})`` and the
    answer tokens' alternatives carry exactly ln of the fixture probabilities.

    ``latency`` sleeps per attempt; ``fail_first`` makes the first n attempts
    of each prompt fail with a retryable 503; ``fail_pairs`` always fail.
    """

    backend_id = "mock"

    def __init__(
        self,
        fixture: Mapping[Tuple[str, str], FixtureEntry],
        latency: float = 0.0,
        fallback_unknown: bool = False,
        fail_first: int = 0,
        fail_pairs: Iterable[Tuple[str, str]] = (),
        config: Optional[BackendConfig] = None,
        reachable: bool = True,
    ):
        super().__init__(config or BackendConfig(backoff=0.0))
        self.fixture = dict(fixture)
        self.latency = latency
        self.fallback_unknown = fallback_unknown
        self.fail_first = fail_first
        self.fail_pairs = set(fail_pairs)
        self.reachable = reachable
        self.limiter_lock = threading.Lock()
        self.in_flight = 0
        self.peak_in_flight = 0
        self._attempts: Dict[Tuple[str, str], int] = {}

    def _attempt(self, prompt: RenderedPrompt, config: BackendConfig) -> GenerationResult:
        start = time.perf_counter()
        with self.limiter_lock:
            self.in_flight += 1
            self.peak_in_flight = max(self.peak_in_flight, self.in_flight)
        try:
            if self.latency:
                time.sleep(self.latency)
            return self._generate(prompt, start)
        finally:
            with self.limiter_lock:
                self.in_flight -= 1

    def _generate(self, prompt: RenderedPrompt, start: float) -> GenerationResult:
        if prompt.spec.paradigm is not TaskParadigm.POINTWISE:
            raise MalformedResponse("mock backend only serves pointwise prompts")
        key = (prompt.query_id, prompt.doc_ids[0])
        if not self.reachable:
            raise HttpStatus(503, "mock backend down")
        if key in self.fail_pairs:
            raise HttpStatus(500, "injected failure")
        with self.limiter_lock:
            seen = self._attempts.get(key, 0)
            self._attempts[key] = seen + 1
        if seen < self.fail_first:
            raise HttpStatus(503, "injected transient failure")

        entry = self.fixture.get(key)
        if entry is None:
            if not self.fallback_unknown:
                raise UnknownPair(f"no fixture entry for {key}")
            entry = NEUTRAL_ENTRY

        word = "yes" if entry.p_yes >= 0.5 else "no"
        score = max(range(MAX_GRADE + 1), key=lambda i: (entry.score_dist[i], -i))
        yes_alts = (("yes", _ln(entry.p_yes)), ("no", _ln(1.0 - entry.p_yes)))
        digit_alts = tuple((str(i), _ln(p)) for i, p in enumerate(entry.score_dist))
        tokens = (
            TokenLogprob("<think>", 0.0, (("<think>", 0.0),)),
            TokenLogprob("\n\n", 0.0, (("\n\n", 0.0),)),
            TokenLogprob("</think>", 0.0, (("</think>", 0.0),)),
            TokenLogprob(word, dict(yes_alts)[word], yes_alts),
            TokenLogprob("(", 0.0, (("(", 0.0),)),
            TokenLogprob(str(score), _ln(entry.score_dist[score]), digit_alts),
            TokenLogprob(")", 0.0, ((")", 0.0),)),
        )
        text = "".join(t.token_text for t in tokens)
        return GenerationResult(text, tokens, time.perf_counter() - start, self.backend_id)

    def ping(self) -> bool:
        return self.reachable


def load_fixture(path: Union[str, Path]) -> Fixture:
    """Read a line-delimited fixture: {query_id, doc_id, p_yes, score_dist}."""
    fixture: Fixture = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                fixture[(str(rec["query_id"]), str(rec["doc_id"]))] = FixtureEntry(float(rec["p_yes"]), tuple(rec["score_dist"]))
            except (KeyError, ValueError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return fixture


def save_fixture(fixture: Mapping[Tuple[str, str], FixtureEntry], path: Union[str, Path]) -> int:
    with open(path, "w", encoding="utf-8") as f:
        for (qid, did), e in sorted(fixture.items()):
            f.write(json.dumps({"query_id": qid, "doc_id": did, "p_yes": e.p_yes, "score_dist": list(e.score_dist)}) + "\n")
    return len(fixture)


def entry_for_grade(grade: int, max_grade: int) -> FixtureEntry:
    """Fixture entry whose fused score increases strictly with ``grade``."""
    frac = grade / max_grade if max_grade > 0 else 0.0
    p_yes = 0.05 + 0.9 * frac
    center = MAX_GRADE * frac
    weights = [math.exp(-((i - center) ** 2)) for i in range(MAX_GRADE + 1)]
    total = sum(weights)
    dist = [w / total for w in weights]
    # absorb rounding so the distribution sums to one
    dist[-1] = 1.0 - sum(dist[:-1])
    return FixtureEntry(p_yes, tuple(dist))


def fixture_from_qrels(qrels: Mapping[str, Mapping[str, int]], pairs: Iterable[Tuple[str, str]] = ()) -> Fixture:
    """Build a mock fixture encoding graded relevance.

    Every judged pair gets an entry; extra ``pairs`` (e.g. unjudged
    candidates) get the grade-0 entry.
    """
    max_grade = max((g for docs in qrels.values() for g in docs.values()), default=0)
    fixture: Fixture = {}
    for qid, docs in qrels.items():
        for did, g in docs.items():
            fixture[(qid, did)] = entry_for_grade(g, max_grade)
    for qid, did in pairs:
        fixture.setdefault((qid, did), entry_for_grade(0, max_grade))
    return fixture
