"""Answer grammars for the three task paradigms, plus think-block handling.

Formatting and parsing live side by side so every emitted response parses
back to the label it was rendered from.

Pointwise   ``yes`` / ``no(1)``
Pairwise    ``doc_2`` / ``doc_2(3) > doc_1(1)``   (first label is preferred)
Listwise    ``[2] > [1] > [3]`` / ``[2](4) > [1](2) > [3](0)``
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

from .core import LabelGranularity, ListOrder, PairPreference, RelevanceLabel, ThinkMode
from .errors import DataError, Unparsable

THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"
EMPTY_THINK = "<think>\n\n</think>"

_POINTWISE = re.compile(r"(yes|no)\s*(?:\(\s*([0-4])\s*\))?", re.IGNORECASE)
_PAIR_ITEM = re.compile(r"doc_([12])\s*(?:\(\s*([0-4])\s*\))?", re.IGNORECASE)
_LIST_ITEM = re.compile(r"\[\s*(\d+)\s*\]\s*(?:\(\s*([0-4])\s*\))?")
_EMPTY_THINK_PREFIX = re.compile(r"\s*<think>\s*</think>", re.IGNORECASE)


def wrap_think(answer: str, mode: ThinkMode, cot_text: Optional[str] = None) -> str:
    if mode is ThinkMode.NO_THINK:
        return EMPTY_THINK + answer
    return f"{THINK_OPEN}\n{cot_text}\n{THINK_CLOSE}{answer}"


def split_think(text: str) -> Tuple[Optional[str], str]:
    """Split ``text`` into (think content, answer).

    Think content is None when the text does not open with a closed think block.
    """
    stripped = text.lstrip()
    if stripped.startswith(THINK_OPEN):
        end = stripped.find(THINK_CLOSE)
        if end >= 0:
            return stripped[len(THINK_OPEN):end], stripped[end + len(THINK_CLOSE):]
    return None, text


def _score_rule(granularity: Optional[LabelGranularity], has_score: bool) -> bool:
    if granularity is LabelGranularity.FINE_GRAINED:
        return has_score
    if granularity is LabelGranularity.BINARY:
        return not has_score
    return True


# -- pointwise ----------------------------------------------------------------


def format_pointwise(label: RelevanceLabel, granularity: LabelGranularity) -> str:
    word = "yes" if label.binary else "no"
    if granularity is LabelGranularity.FINE_GRAINED:
        if label.fine_grained is None:
            raise DataError("fine-grained response needs a fine-grained score")
        return f"{word}({label.fine_grained})"
    return word


def parse_pointwise(answer: str, granularity: Optional[LabelGranularity] = None) -> Tuple[bool, Optional[int]]:
    m = _POINTWISE.fullmatch(answer.strip())
    if m is None or not _score_rule(granularity, m.group(2) is not None):
        raise Unparsable(answer)
    score = int(m.group(2)) if m.group(2) is not None else None
    return m.group(1).lower() == "yes", score


def parse_answer_text(text: str, granularity: Optional[LabelGranularity] = None) -> Tuple[bool, Optional[int]]:
    """Parse ``yes``/``no`` with an optional ``(0-4)`` score.

    An empty ``<think></think>`` prefix is allowed, matching is case-insensitive
    and surrounding whitespace is ignored. ``granularity`` makes the score
    mandatory (fine-grained) or forbidden (binary); None accepts either.
    """
    m = _EMPTY_THINK_PREFIX.match(text)
    body = text[m.end():] if m else text
    try:
        return parse_pointwise(body, granularity)
    except Unparsable:
        raise Unparsable(text) from None


# -- pairwise -----------------------------------------------------------------


@dataclass(frozen=True)
class ParsedPair:
    preferred: int
    scores: Optional[Tuple[int, int]] = None


def format_pairwise(label: PairPreference, granularity: LabelGranularity) -> str:
    if granularity is LabelGranularity.BINARY:
        return f"doc_{label.preferred}"
    if label.scores is None:
        raise DataError("fine-grained pairwise response needs per-document scores")
    other = 3 - label.preferred
    return (
        f"doc_{label.preferred}({label.scores[label.preferred - 1]}) > "
        f"doc_{other}({label.scores[other - 1]})"
    )


def parse_pairwise(answer: str, granularity: Optional[LabelGranularity] = None) -> ParsedPair:
    parts = [p.strip() for p in answer.strip().split(">")]
    items = [_PAIR_ITEM.fullmatch(p) for p in parts]
    if any(m is None for m in items) or len(items) not in (1, 2):
        raise Unparsable(answer)
    labels = [int(m.group(1)) for m in items]
    raw_scores = [m.group(2) for m in items]
    if len(items) == 1:
        if raw_scores[0] is not None or granularity is LabelGranularity.FINE_GRAINED:
            raise Unparsable(answer)
        return ParsedPair(labels[0])
    if labels[0] == labels[1]:
        raise Unparsable(answer)
    has = [s is not None for s in raw_scores]
    if any(has) and not all(has):
        raise Unparsable(answer)
    if not _score_rule(granularity, all(has)):
        raise Unparsable(answer)
    scores = None
    if all(has):
        by_pos = {labels[i]: int(raw_scores[i]) for i in range(2)}
        scores = (by_pos[1], by_pos[2])
    return ParsedPair(labels[0], scores)


# -- listwise -----------------------------------------------------------------


@dataclass(frozen=True)
class ParsedList:
    """Labels as written; may be an invalid permutation (checked by callers)."""

    order: Tuple[int, ...]
    scores: Optional[Dict[int, int]] = None

    def is_permutation(self, n: int) -> bool:
        return sorted(self.order) == list(range(1, n + 1))


def format_listwise(label: ListOrder, granularity: LabelGranularity) -> str:
    if granularity is LabelGranularity.BINARY:
        return " > ".join(f"[{i}]" for i in label.order)
    if label.grades is None:
        raise DataError("fine-grained listwise response needs per-document grades")
    return " > ".join(f"[{i}]({label.grades[i - 1]})" for i in label.order)


def parse_listwise(answer: str, granularity: Optional[LabelGranularity] = None) -> ParsedList:
    parts = [p.strip() for p in answer.strip().split(">")]
    items = [_LIST_ITEM.fullmatch(p) for p in parts]
    if not parts or any(m is None for m in items):
        raise Unparsable(answer)
    order = tuple(int(m.group(1)) for m in items)
    has = [m.group(2) is not None for m in items]
    if any(has) and not all(has):
        raise Unparsable(answer)
    if not _score_rule(granularity, all(has)):
        raise Unparsable(answer)
    scores = {int(m.group(1)): int(m.group(2)) for m in items} if all(has) else None
    return ParsedList(order, scores)
