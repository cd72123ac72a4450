"""Relevance score extraction and fusion from per-token logprobs.

The binary probability is a two-way softmax over the best "yes" and "no"
logprobs at the answer position; the fine-grained score is the expected grade
under a softmax over the digit tokens 0-4 at the score position, divided by
the grade range 4. The final score is their weighted average (0.5/0.5).
When a needed token is missing from the top-k list the component falls back
to a neutral 0.5 and a flag records it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Tuple

from .answers import THINK_CLOSE, parse_answer_text
from .backend import GenerationResult
from .core import MAX_GRADE
from .errors import BinaryTokenNotFound, DataError, Unparsable

__all__ = [
    "FusionConfig",
    "FusedScore",
    "normalize_token",
    "locate_answer_tokens",
    "extract_p_bi",
    "extract_s_fg",
    "fuse",
    "score_result",
    "neutral_score",
    "parse_answer_text",
]

# byte-level and sentencepiece word-boundary markers
_BPE_MARKERS = ("Ġ", "▁")


def normalize_token(text: str) -> str:
    t = text.strip()
    while t and t[0] in _BPE_MARKERS:
        t = t[1:].strip()
    return t.lower()


@dataclass(frozen=True)
class FusionConfig:
    w_bi: float = 0.5
    w_fg: float = 0.5
    yes_forms: Tuple[str, ...] = ("yes",)
    no_forms: Tuple[str, ...] = ("no",)
    digit_forms: Tuple[Tuple[str, ...], ...] = tuple((str(i),) for i in range(MAX_GRADE + 1))
    neutral: float = 0.5

    def __post_init__(self):
        if self.w_bi < 0 or self.w_fg < 0 or abs(self.w_bi + self.w_fg - 1.0) > 1e-9:
            raise DataError(f"fusion weights must be non-negative and sum to 1, got {self.w_bi}, {self.w_fg}")
        if len(self.digit_forms) != MAX_GRADE + 1:
            raise DataError("digit_forms needs one entry per grade 0..4")
        if not 0.0 <= self.neutral <= 1.0:
            raise DataError("neutral score must lie in [0, 1]")
        object.__setattr__(self, "yes_forms", tuple(normalize_token(f) for f in self.yes_forms))
        object.__setattr__(self, "no_forms", tuple(normalize_token(f) for f in self.no_forms))
        object.__setattr__(
            self, "digit_forms", tuple(tuple(normalize_token(f) for f in forms) for forms in self.digit_forms)
        )

    def digit_of(self, normalized: str) -> Optional[int]:
        for i, forms in enumerate(self.digit_forms):
            if normalized in forms:
                return i
        return None


DEFAULT_FUSION = FusionConfig()


@dataclass(frozen=True)
class FusedScore:
    p_bi: float
    s_fg: float
    fused: float
    used_binary_fallback: bool = False
    used_finegrained_fallback: bool = False
    parsed_answer: Optional[Tuple[bool, Optional[int]]] = None

    @property
    def any_fallback(self) -> bool:
        return self.used_binary_fallback or self.used_finegrained_fallback


Positions = Optional[Tuple[int, Optional[int]]]


def locate_answer_tokens(result: GenerationResult, config: FusionConfig = DEFAULT_FUSION) -> Tuple[int, Optional[int]]:
    """Index of the first yes/no token after ``</think>`` and of the first
    digit 0-4 token after it (None when absent)."""
    if not result.tokens:
        raise BinaryTokenNotFound("generation has no tokens")
    starts, offset = [], 0
    for tok in result.tokens:
        starts.append(offset)
        offset += len(tok.token_text)
    joined = "".join(t.token_text for t in result.tokens)
    close = joined.find(THINK_CLOSE)
    begin = 0
    if close >= 0:
        boundary = close + len(THINK_CLOSE)
        begin = next((i for i, s in enumerate(starts) if s >= boundary), len(result.tokens))

    targets = set(config.yes_forms) | set(config.no_forms)
    binary_pos = next((i for i in range(begin, len(result.tokens)) if normalize_token(result.tokens[i].token_text) in targets), None)
    if binary_pos is None:
        raise BinaryTokenNotFound(f"no yes/no token in {result.text!r}")
    score_pos = next(
        (
            i
            for i in range(binary_pos + 1, len(result.tokens))
            if config.digit_of(normalize_token(result.tokens[i].token_text)) is not None
        ),
        None,
    )
    return binary_pos, score_pos


def _best(alternatives: Iterable[Tuple[str, float]], forms: Iterable[str]) -> Optional[float]:
    forms = set(forms)
    vals = [lp for tok, lp in alternatives if normalize_token(tok) in forms]
    return max(vals) if vals else None


def extract_p_bi(result: GenerationResult, positions: Positions, config: FusionConfig = DEFAULT_FUSION) -> Tuple[float, bool]:
    """Two-way softmax of the best yes/no logprobs among the top-k alternatives."""
    if positions is None:
        return config.neutral, True
    alts = result.tokens[positions[0]].top_alternatives
    l_yes, l_no = _best(alts, config.yes_forms), _best(alts, config.no_forms)
    if l_yes is None or l_no is None:
        return config.neutral, True
    m = max(l_yes, l_no)
    if m == -math.inf:
        return config.neutral, True
    e_yes, e_no = math.exp(l_yes - m), math.exp(l_no - m)
    return e_yes / (e_yes + e_no), False


def extract_s_fg(result: GenerationResult, positions: Positions, config: FusionConfig = DEFAULT_FUSION) -> Tuple[float, bool]:
    """Expected grade over the digits present in the top-k list, divided by 4.

    Digits absent from the list are left out of the softmax support.
    """
    if positions is None or positions[1] is None:
        return config.neutral, True
    best: Dict[int, float] = {}
    for tok, lp in result.tokens[positions[1]].top_alternatives:
        d = config.digit_of(normalize_token(tok))
        if d is not None and (d not in best or lp > best[d]):
            best[d] = lp
    if not best:
        return config.neutral, True
    m = max(best.values())
    if m == -math.inf:
        return config.neutral, True
    weights = {d: math.exp(lp - m) for d, lp in best.items()}
    total = sum(weights.values())
    expectation = sum(d * w for d, w in weights.items()) / total
    return min(1.0, expectation / MAX_GRADE), False


def fuse(p_bi: float, s_fg: float, config: FusionConfig = DEFAULT_FUSION) -> float:
    return min(1.0, max(0.0, config.w_bi * p_bi + config.w_fg * s_fg))


def neutral_score(config: FusionConfig = DEFAULT_FUSION) -> FusedScore:
    n = config.neutral
    return FusedScore(n, n, fuse(n, n, config), True, True, None)


def score_result(result: GenerationResult, config: FusionConfig = DEFAULT_FUSION) -> FusedScore:
    """Full extraction for one generation; never raises on model output.

    Without any logprobs the parsed text decides: p_bi is 1 or 0 and s_fg
    is the parsed grade / 4, with both fallback flags set.
    """
    try:
        parsed: Optional[Tuple[bool, Optional[int]]] = parse_answer_text(result.text)
    except Unparsable:
        parsed = None

    if not result.has_logprobs:
        if parsed is None:
            return neutral_score(config)
        p_bi = 1.0 if parsed[0] else 0.0
        s_fg = parsed[1] / MAX_GRADE if parsed[1] is not None else config.neutral
        return FusedScore(p_bi, s_fg, fuse(p_bi, s_fg, config), True, True, parsed)

    try:
        positions: Positions = locate_answer_tokens(result, config)
    except BinaryTokenNotFound:
        positions = None
    p_bi, fb_bi = extract_p_bi(result, positions, config)
    s_fg, fb_fg = extract_s_fg(result, positions, config)
    return FusedScore(p_bi, s_fg, fuse(p_bi, s_fg, config), fb_bi, fb_fg, parsed)
