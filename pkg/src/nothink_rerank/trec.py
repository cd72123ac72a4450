"""File formats: TREC run and qrels files, line-delimited JSON records."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Mapping, Sequence, Union

from .core import Candidate, Document, Query
from .errors import DataError

PathLike = Union[str, Path]
Qrels = Dict[str, Dict[str, int]]


@dataclass(frozen=True)
class RunRow:
    query_id: str
    doc_id: str
    rank: int
    score: float
    tag: str = "run"


def read_jsonl(path: PathLike) -> Iterator[Dict[str, Any]]:
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc})") from exc


def write_jsonl(records: Iterable[Mapping[str, Any]], path: PathLike) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")
            n += 1
    return n


def read_queries(path: PathLike) -> Dict[str, Query]:
    try:
        return {q.id: q for q in (Query.from_dict(r) for r in read_jsonl(path))}
    except KeyError as exc:
        raise DataError(f"{path}: query record lacks field {exc}") from exc


def read_corpus(path: PathLike) -> Dict[str, Document]:
    try:
        return {d.id: d for d in (Document.from_dict(r) for r in read_jsonl(path))}
    except KeyError as exc:
        raise DataError(f"{path}: document record lacks field {exc}") from exc


def read_run(path: PathLike) -> Dict[str, List[RunRow]]:
    """Parse a 6-column ``qid Q0 docid rank score tag`` file.

    Rows of each query come back sorted by their rank column.
    """
    run: Dict[str, List[RunRow]] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise DataError(f"{path}:{lineno}: expected 6 columns, got {len(parts)}")
            qid, _, did, rank, score, tag = parts
            try:
                row = RunRow(qid, did, int(rank), float(score), tag)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            run.setdefault(qid, []).append(row)
    for rows in run.values():
        rows.sort(key=lambda r: r.rank)
    return run


def run_to_candidates(run: Mapping[str, Sequence[RunRow]]) -> Dict[str, List[Candidate]]:
    return {
        qid: [Candidate(r.query_id, r.doc_id, r.rank, r.score) for r in rows]
        for qid, rows in run.items()
    }


def run_to_rankings(run: Mapping[str, Sequence[RunRow]]) -> Dict[str, List[str]]:
    return {qid: [r.doc_id for r in rows] for qid, rows in run.items()}


def format_run_line(row: RunRow) -> str:
    return f"{row.query_id} Q0 {row.doc_id} {row.rank} {row.score:.6f} {row.tag}"


def write_run(rows: Iterable[RunRow], path: PathLike) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(format_run_line(row) + "\n")
            n += 1
    return n


def read_qrels(path: PathLike) -> Qrels:
    """Parse a 4-column ``qid 0 docid grade`` file."""
    qrels: Qrels = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 columns, got {len(parts)}")
            qid, _, did, grade = parts
            try:
                g = int(grade)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            if g < 0:
                raise DataError(f"{path}:{lineno}: negative grade {g}")
            qrels.setdefault(qid, {})[did] = g
    return qrels


def write_qrels(qrels: Mapping[str, Mapping[str, int]], path: PathLike) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for qid in qrels:
            for did, g in qrels[qid].items():
                f.write(f"{qid} 0 {did} {g}\n")
