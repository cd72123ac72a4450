"""Domain types shared by every module. No I/O happens here."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

from .errors import DataError, DuplicateDoc, EmptyList, LabelMismatch, MixedQuery

# scores 2..4 are positive, 0..1 negative
POSITIVE_THRESHOLD = 2
MAX_GRADE = 4


class TaskParadigm(str, Enum):
    POINTWISE = "pointwise"
    PAIRWISE = "pairwise"
    LISTWISE = "listwise"


class ThinkMode(str, Enum):
    THINK = "think"
    NO_THINK = "no_think"

    @property
    def token(self) -> str:
        return "/think" if self is ThinkMode.THINK else "/no think"


class LabelGranularity(str, Enum):
    BINARY = "binary"
    FINE_GRAINED = "fine_grained"


def _check_grade(value: Any, what: str = "score") -> int:
    if isinstance(value, bool) or not isinstance(value, int) or not 0 <= value <= MAX_GRADE:
        raise DataError(f"{what} must be an integer in 0..{MAX_GRADE}, got {value!r}")
    return value


@dataclass(frozen=True)
class Query:
    id: str
    text: str

    def __post_init__(self):
        if not self.id:
            raise DataError("query id must be non-empty")
        if not self.text.strip():
            raise DataError(f"query {self.id!r} has empty text")

    def to_dict(self) -> Dict[str, Any]:
        return {"id": self.id, "text": self.text}

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "Query":
        return cls(str(d["id"]), d["text"])


@dataclass(frozen=True)
class Document:
    id: str
    text: str = ""

    def __post_init__(self):
        if not self.id:
            raise DataError("document id must be non-empty")

    def to_dict(self) -> Dict[str, Any]:
        return {"id": self.id, "text": self.text}

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "Document":
        return cls(str(d["id"]), d.get("text", ""))


@dataclass(frozen=True)
class Candidate:
    query_id: str
    doc_id: str
    first_stage_rank: int
    first_stage_score: float = 0.0

    def __post_init__(self):
        if not self.query_id or not self.doc_id:
            raise DataError("candidate ids must be non-empty")
        if self.first_stage_rank < 1:
            raise DataError(f"first_stage_rank must be >= 1, got {self.first_stage_rank}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "query_id": self.query_id,
            "doc_id": self.doc_id,
            "first_stage_rank": self.first_stage_rank,
            "first_stage_score": self.first_stage_score,
        }

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "Candidate":
        return cls(d["query_id"], d["doc_id"], int(d["first_stage_rank"]), float(d["first_stage_score"]))


@dataclass(frozen=True)
class RelevanceLabel:
    """Pointwise gold label. ``binary`` must agree with ``fine_grained >= 2``."""

    binary: bool
    fine_grained: Optional[int] = None

    def __post_init__(self):
        if self.fine_grained is not None:
            _check_grade(self.fine_grained)
            if self.binary != (self.fine_grained >= POSITIVE_THRESHOLD):
                raise LabelMismatch(
                    f"binary={self.binary} contradicts fine-grained score {self.fine_grained}"
                )

    @classmethod
    def from_score(cls, score: int) -> "RelevanceLabel":
        return cls(score >= POSITIVE_THRESHOLD, score)

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": "pointwise", "binary": self.binary, "fine_grained": self.fine_grained}


@dataclass(frozen=True)
class PairPreference:
    """Pairwise gold: which position label (1 or 2) is more relevant.

    ``scores`` are optional per-position fine-grained grades.
    """

    preferred: int
    scores: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        if self.preferred not in (1, 2):
            raise DataError(f"preferred must be 1 or 2, got {self.preferred!r}")
        if self.scores is not None:
            scores = tuple(self.scores)
            if len(scores) != 2:
                raise DataError("pair scores need exactly two grades")
            for s in scores:
                _check_grade(s)
            object.__setattr__(self, "scores", scores)
            if scores[self.preferred - 1] <= scores[2 - self.preferred]:
                raise LabelMismatch(f"preferred doc_{self.preferred} does not outscore the other: {scores}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": "pairwise",
            "preferred": self.preferred,
            "scores": list(self.scores) if self.scores is not None else None,
        }


@dataclass(frozen=True)
class ListOrder:
    """Listwise gold: ``order`` lists the 1-based presentation labels from most
    to least relevant; ``grades`` (presentation order) are optional."""

    order: Tuple[int, ...]
    grades: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        order = tuple(self.order)
        object.__setattr__(self, "order", order)
        if sorted(order) != list(range(1, len(order) + 1)):
            raise DataError(f"order must be a permutation of 1..n, got {order}")
        if len(order) < 2:
            raise DataError("a list needs at least two documents")
        if self.grades is not None:
            grades = tuple(self.grades)
            if len(grades) != len(order):
                raise DataError("grades must have one entry per document")
            for g in grades:
                _check_grade(g, "grade")
            object.__setattr__(self, "grades", grades)
            along = [grades[i - 1] for i in order]
            if any(a < b for a, b in zip(along, along[1:])):
                raise LabelMismatch(f"order {order} is not sorted by grades {grades}")

    @property
    def size(self) -> int:
        return len(self.order)

    def effective_grades(self) -> Tuple[int, ...]:
        """Grades per presentation position; derived strictly from ``order`` when absent."""
        if self.grades is not None:
            return self.grades
        n = len(self.order)
        out = [0] * n
        for pos, label in enumerate(self.order):
            out[label - 1] = n - pos
        return tuple(out)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": "listwise",
            "order": list(self.order),
            "grades": list(self.grades) if self.grades is not None else None,
        }


Label = Union[RelevanceLabel, PairPreference, ListOrder]


def label_from_dict(d: Dict[str, Any]) -> Label:
    kind = d.get("kind")
    if kind == "pointwise":
        return RelevanceLabel(bool(d["binary"]), d.get("fine_grained"))
    if kind == "pairwise":
        scores = d.get("scores")
        return PairPreference(int(d["preferred"]), tuple(scores) if scores is not None else None)
    if kind == "listwise":
        grades = d.get("grades")
        return ListOrder(tuple(d["order"]), tuple(grades) if grades is not None else None)
    raise DataError(f"unknown label kind {kind!r}")


LABEL_TYPES = {
    TaskParadigm.POINTWISE: RelevanceLabel,
    TaskParadigm.PAIRWISE: PairPreference,
    TaskParadigm.LISTWISE: ListOrder,
}


def validate_candidate_list(candidates: Sequence[Candidate]) -> List[Candidate]:
    """Return ``candidates`` as a list if they form one query's candidate set.

    Raises EmptyList, MixedQuery or DuplicateDoc otherwise.
    """
    candidates = list(candidates)
    if not candidates:
        raise EmptyList()
    qids = [c.query_id for c in candidates]
    if len(set(qids)) > 1:
        raise MixedQuery(qids)
    seen = set()
    for c in candidates:
        if c.doc_id in seen:
            raise DuplicateDoc(c.doc_id)
        seen.add(c.doc_id)
    return candidates


def group_by_query(candidates: Iterable[Candidate]) -> Dict[str, List[Candidate]]:
    groups: Dict[str, List[Candidate]] = {}
    for c in candidates:
        groups.setdefault(c.query_id, []).append(c)
    return groups
