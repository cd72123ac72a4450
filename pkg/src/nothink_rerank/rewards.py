"""GRPO rewards: ``r_total = r_content + lambda * r_format``.

Every function here is total: malformed rollouts earn low rewards rather than
exceptions, since a training loop cannot stop for one bad sample.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations
from typing import IO, Any, Dict, Iterable, Iterator, Mapping, Optional, Tuple

from . import answers
from .core import (
    LABEL_TYPES,
    MAX_GRADE,
    Label,
    LabelGranularity,
    ListOrder,
    PairPreference,
    RelevanceLabel,
    TaskParadigm,
    ThinkMode,
    label_from_dict,
)
from .errors import DataError, LabelMismatch, Unparsable
from .evaluation import ndcg_at_k
from .prompting import PromptSpec

DEFAULT_LAMBDA = 0.5
DEFAULT_MIN_THINK_CHARS = 50
LISTWISE_EPS = 1e-9


@dataclass(frozen=True)
class Rollout:
    spec: PromptSpec
    raw_text: str
    gold: Label

    def __post_init__(self):
        expected = LABEL_TYPES[self.spec.paradigm]
        if not isinstance(self.gold, expected):
            raise LabelMismatch(f"{self.spec.paradigm.value} rollout needs a {expected.__name__} gold label")

    def to_dict(self) -> Dict[str, Any]:
        return {**self.spec.to_dict(), "raw_text": self.raw_text, "gold": self.gold.to_dict()}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Rollout":
        return cls(PromptSpec.from_dict(d), d["raw_text"], label_from_dict(d["gold"]))


@dataclass(frozen=True)
class RewardBreakdown:
    r_content: float
    r_format: float
    lam: float
    r_total: float
    components: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "r_content": self.r_content,
            "r_format": self.r_format,
            "lambda": self.lam,
            "r_total": self.r_total,
            "components": dict(self.components),
        }


def score_term(predicted: Optional[int], gold: int) -> float:
    """1 - squared error of grades scaled to [0, 1]; 0 when no prediction."""
    if predicted is None:
        return 0.0
    return 1.0 - ((predicted - gold) / MAX_GRADE) ** 2


def _answer_part(text: str) -> str:
    return answers.split_think(text)[1]


# -- format ---------------------------------------------------------------------


def _answer_parses(rollout: Rollout, answer: str) -> bool:
    g = rollout.spec.granularity
    try:
        if rollout.spec.paradigm is TaskParadigm.POINTWISE:
            answers.parse_pointwise(answer, g)
        elif rollout.spec.paradigm is TaskParadigm.PAIRWISE:
            answers.parse_pairwise(answer, g)
        else:
            return answers.parse_listwise(answer, g).is_permutation(rollout.gold.size)
    except Unparsable:
        return False
    return True


def format_checks(rollout: Rollout, min_think_chars: int = DEFAULT_MIN_THINK_CHARS) -> Dict[str, float]:
    content, answer = answers.split_think(rollout.raw_text)
    think = rollout.spec.mode is ThinkMode.THINK
    if content is None:
        tag_ok = False
    elif think:
        tag_ok = bool(content.strip())
    else:
        tag_ok = not content.strip()
    tag_ok = tag_ok and answers.THINK_OPEN not in answer and answers.THINK_CLOSE not in answer
    length_ok = (not think) or (content is not None and len(content.strip()) >= min_think_chars)
    return {
        "format_think_tag": float(tag_ok),
        "format_length": float(length_ok),
        "format_answer": float(_answer_parses(rollout, answer)),
    }


def format_reward(rollout: Rollout, min_think_chars: int = DEFAULT_MIN_THINK_CHARS) -> float:
    """Mean of three pass/fail checks: think tag shape for the mode, reasoning
    length in think mode, and answer grammar for the paradigm."""
    checks = format_checks(rollout, min_think_chars)
    return sum(checks.values()) / len(checks)


# -- content --------------------------------------------------------------------


def pointwise_components(rollout: Rollout) -> Dict[str, float]:
    gold: RelevanceLabel = rollout.gold
    try:
        binary, score = answers.parse_pointwise(_answer_part(rollout.raw_text))
    except Unparsable:
        return {"accuracy": 0.0, "score": 0.0}
    acc = float(binary == gold.binary)
    if rollout.spec.granularity is LabelGranularity.FINE_GRAINED and gold.fine_grained is not None:
        return {"accuracy": acc, "score": score_term(score, gold.fine_grained)}
    return {"accuracy": acc, "score": acc}


def content_reward_pointwise(rollout: Rollout) -> float:
    """0.5 * binary accuracy + 0.5 * (1 - squared normalized grade error)."""
    c = pointwise_components(rollout)
    return 0.5 * c["accuracy"] + 0.5 * c["score"]


def pairwise_components(rollout: Rollout) -> Dict[str, float]:
    gold: PairPreference = rollout.gold
    try:
        parsed = answers.parse_pairwise(_answer_part(rollout.raw_text))
    except Unparsable:
        return {"preference": 0.0, "score": 0.0}
    pref = float(parsed.preferred == gold.preferred)
    if rollout.spec.granularity is LabelGranularity.FINE_GRAINED and gold.scores is not None:
        if parsed.scores is None:
            return {"preference": pref, "score": 0.0}
        terms = [score_term(p, g) for p, g in zip(parsed.scores, gold.scores)]
        return {"preference": pref, "score": sum(terms) / 2}
    # no gold grades: the score half mirrors preference accuracy
    return {"preference": pref, "score": pref}


def content_reward_pairwise(rollout: Rollout) -> float:
    c = pairwise_components(rollout)
    return 0.5 * c["preference"] + 0.5 * c["score"]


def relation_accuracy(order: Tuple[int, ...], grades: Tuple[int, ...]) -> float:
    """Fraction of differently-graded pairs that ``order`` puts the right way round."""
    pos = {label: i for i, label in enumerate(order)}
    total = correct = 0
    for a, b in combinations(range(1, len(grades) + 1), 2):
        ga, gb = grades[a - 1], grades[b - 1]
        if ga == gb:
            continue
        total += 1
        better, worse = (a, b) if ga > gb else (b, a)
        correct += pos[better] < pos[worse]
    return correct / total if total else 1.0


def relative_ndcg_gain(order: Tuple[int, ...], grades: Tuple[int, ...], eps: float = LISTWISE_EPS) -> float:
    """NDCG improvement of ``order`` over presentation order, scaled to [0, 1].

    If the presentation order is already ideal, keeping an ideal order earns 1.
    """
    if len(set(grades)) == 1:
        return 1.0
    judgments = {str(i): g for i, g in enumerate(grades, 1)}
    n = len(grades)
    initial = ndcg_at_k([str(i) for i in range(1, n + 1)], judgments, n)
    predicted = ndcg_at_k([str(i) for i in order], judgments, n)
    headroom = 1.0 - initial
    if headroom <= eps:
        return 1.0 if predicted >= 1.0 - eps else 0.0
    return min(1.0, max(0.0, (predicted - initial) / max(headroom, eps)))


def listwise_components(rollout: Rollout) -> Dict[str, float]:
    gold: ListOrder = rollout.gold
    n = gold.size
    try:
        parsed = answers.parse_listwise(_answer_part(rollout.raw_text))
    except Unparsable:
        return {"relation": 0.0, "score": 0.0, "ndcg_gain": 0.0}
    grades = gold.effective_grades()
    valid = parsed.is_permutation(n)
    relation = relation_accuracy(parsed.order, grades) if valid else 0.0
    gain = relative_ndcg_gain(parsed.order, grades) if valid else 0.0
    if rollout.spec.granularity is LabelGranularity.FINE_GRAINED and gold.grades is not None:
        if parsed.scores is None:
            score = 0.0
        else:
            score = sum(score_term(parsed.scores.get(i), gold.grades[i - 1]) for i in range(1, n + 1)) / n
    else:
        score = relation
    return {"relation": relation, "score": score, "ndcg_gain": gain}


def content_reward_listwise(rollout: Rollout) -> float:
    """Mean of pair relation accuracy, grade score term and relative NDCG gain."""
    c = listwise_components(rollout)
    return (c["relation"] + c["score"] + c["ndcg_gain"]) / 3.0


_CONTENT = {
    TaskParadigm.POINTWISE: pointwise_components,
    TaskParadigm.PAIRWISE: pairwise_components,
    TaskParadigm.LISTWISE: listwise_components,
}


def content_reward(rollout: Rollout) -> float:
    return {
        TaskParadigm.POINTWISE: content_reward_pointwise,
        TaskParadigm.PAIRWISE: content_reward_pairwise,
        TaskParadigm.LISTWISE: content_reward_listwise,
    }[rollout.spec.paradigm](rollout)


def total_reward(
    rollout: Rollout,
    lam: float = DEFAULT_LAMBDA,
    min_think_chars: int = DEFAULT_MIN_THINK_CHARS,
) -> RewardBreakdown:
    fmt = format_checks(rollout, min_think_chars)
    r_format = sum(fmt.values()) / len(fmt)
    r_content = content_reward(rollout)
    components = {**fmt, **{f"content_{k}": v for k, v in _CONTENT[rollout.spec.paradigm](rollout).items()}}
    return RewardBreakdown(r_content, r_format, lam, r_content + lam * r_format, components)


def reward_records(
    records: Iterable[Mapping[str, Any]],
    lam: float = DEFAULT_LAMBDA,
    min_think_chars: int = DEFAULT_MIN_THINK_CHARS,
) -> Iterator[Dict[str, Any]]:
    """Batch mode: rollout records in, breakdown records out (same order).

    A record that cannot even form a rollout yields zero rewards plus an
    ``error`` field.
    """
    for i, rec in enumerate(records):
        try:
            rollout = Rollout.from_dict(rec)
        except (DataError, KeyError, ValueError, TypeError) as exc:
            yield {"index": i, "r_content": 0.0, "r_format": 0.0, "lambda": lam, "r_total": 0.0, "components": {}, "error": str(exc)}
            continue
        yield {"index": i, **total_reward(rollout, lam, min_think_chars).to_dict()}


def reward_file(source: IO[str], sink: IO[str], lam: float = DEFAULT_LAMBDA, min_think_chars: int = DEFAULT_MIN_THINK_CHARS) -> int:
    def records():
        for line in source:
            if line.strip():
                try:
                    yield json.loads(line)
                except ValueError as exc:
                    yield {"_invalid": str(exc)}

    n = 0
    for out in reward_records(records(), lam, min_think_chars):
        sink.write(json.dumps(out) + "\n")
        n += 1
    return n
