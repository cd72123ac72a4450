"""Multi-task SFT corpus construction.

Fine-grained annotations are filtered (positives keep grades 2-4, negatives
0-1), expanded into pointwise samples, pairwise triplets and listwise sets
(at most two documents per grade level), and rendered in every requested
think mode and label granularity. CoT text is always an input, keyed by
sample id; think-mode variants lacking it are skipped and listed in
``cot_requests.jsonl`` so an external teacher can fill them in.
"""

from __future__ import annotations

import json
import os
import random
from collections import Counter
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union

import numpy as np

from .core import (
    MAX_GRADE,
    POSITIVE_THRESHOLD,
    Document,
    LabelGranularity,
    ListOrder,
    PairPreference,
    Query,
    RelevanceLabel,
    TaskParadigm,
    ThinkMode,
)
from .errors import DataError
from .prompting import (
    DEFAULT_MAX_LIST_DOCS,
    RenderedPrompt,
    SftSample,
    emit_sft_corpus,
    render_listwise,
    render_pairwise,
    render_pointwise,
    render_sft_sample,
)
from .trec import read_jsonl


@dataclass(frozen=True)
class AnnotatedPair:
    """One judged (query, doc). ``annotated_score`` None marks a binary-only source."""

    query_id: str
    doc_id: str
    is_positive_source: bool
    annotated_score: Optional[int] = None
    cot_text: Optional[str] = None

    def __post_init__(self):
        if not self.query_id or not self.doc_id:
            raise DataError("annotated pair needs query_id and doc_id")
        s = self.annotated_score
        if s is not None and (isinstance(s, bool) or not isinstance(s, int) or not 0 <= s <= MAX_GRADE):
            raise DataError(f"annotated_score must be in 0..{MAX_GRADE}, got {s!r}")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "AnnotatedPair":
        score = d.get("annotated_score")
        if isinstance(score, float) and score.is_integer():
            score = int(score)
        return cls(str(d["query_id"]), str(d["doc_id"]), bool(d["is_positive_source"]), score, d.get("cot_text"))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


_ALIASES = {
    "query_id": ("query_id", "qid", "query-id"),
    "doc_id": ("doc_id", "pid", "docid", "corpus-id", "passage_id"),
    "is_positive_source": ("is_positive_source", "is_positive", "positive", "label"),
    "annotated_score": ("annotated_score", "score", "fine_grained_score", "grade"),
    "cot_text": ("cot_text", "cot", "reasoning", "rationale"),
}


def adapt_record(rec: Mapping[str, Any]) -> AnnotatedPair:
    """Map common public-dataset field names onto an AnnotatedPair."""
    out: Dict[str, Any] = {}
    for name, aliases in _ALIASES.items():
        for a in aliases:
            if a in rec:
                out[name] = rec[a]
                break
    if "is_positive_source" not in out:
        raise DataError("record has no source label field")
    label = out["is_positive_source"]
    if isinstance(label, str):
        label = label.strip().lower() in ("1", "true", "yes", "positive", "pos")
    elif not isinstance(label, bool):
        label = bool(int(label))
    out["is_positive_source"] = label
    return AnnotatedPair.from_dict(out)


@dataclass(frozen=True)
class SamplingConfig:
    max_docs_per_level: int = 2
    list_size_range: Tuple[int, int] = (2, 10)
    pair_budget_per_query: int = 8
    rng_seed: int = 42

    def __post_init__(self):
        lo, hi = self.list_size_range
        if self.max_docs_per_level < 1:
            raise DataError("max_docs_per_level must be >= 1")
        if not 2 <= lo <= hi <= DEFAULT_MAX_LIST_DOCS:
            raise DataError(f"list_size_range must satisfy 2 <= min <= max <= {DEFAULT_MAX_LIST_DOCS}")
        if self.pair_budget_per_query < 1:
            raise DataError("pair_budget_per_query must be >= 1")


def _rng(seed: int, *keys: str) -> random.Random:
    # str seeds hash through sha512, so this is stable across processes
    return random.Random(f"{seed}|" + "|".join(keys))


def keep_finegrained(pair: AnnotatedPair) -> bool:
    if pair.annotated_score is None:
        return False
    positive = pair.annotated_score >= POSITIVE_THRESHOLD
    return positive == pair.is_positive_source


@dataclass
class FilterStats:
    kept: int = 0
    malformed: int = 0
    rejected: Counter = field(default_factory=Counter)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kept": self.kept,
            "malformed": self.malformed,
            "rejected": {f"{src}:{score}": n for (src, score), n in sorted(self.rejected.items())},
        }


def filter_finegrained(pairs: Iterable[Union[AnnotatedPair, Mapping[str, Any]]]) -> Tuple[List[AnnotatedPair], FilterStats]:
    """Keep positive-source pairs scored 2-4 and negative-source pairs scored 0-1.

    Records that do not parse, or carry no score, are counted as malformed.
    """
    stats = FilterStats()
    kept = []
    for item in pairs:
        try:
            pair = item if isinstance(item, AnnotatedPair) else AnnotatedPair.from_dict(item)
        except (DataError, KeyError, TypeError, ValueError):
            stats.malformed += 1
            continue
        if pair.annotated_score is None:
            stats.malformed += 1
        elif keep_finegrained(pair):
            kept.append(pair)
            stats.kept += 1
        else:
            src = "positive" if pair.is_positive_source else "negative"
            stats.rejected[(src, pair.annotated_score)] += 1
    return kept, stats


def pools_by_query(pairs: Iterable[AnnotatedPair]) -> Dict[str, List[AnnotatedPair]]:
    """Group pairs per query, first occurrence of a doc wins."""
    pools: Dict[str, Dict[str, AnnotatedPair]] = {}
    for p in pairs:
        pools.setdefault(p.query_id, {}).setdefault(p.doc_id, p)
    return {qid: list(docs.values()) for qid, docs in pools.items()}


@dataclass(frozen=True)
class PairSample:
    query_id: str
    doc_a: str
    doc_b: str
    preference: PairPreference

    @property
    def sample_id(self) -> str:
        return f"pairwise:{self.query_id}:{self.doc_a}:{self.doc_b}"


@dataclass(frozen=True)
class ListSample:
    query_id: str
    doc_ids: Tuple[str, ...]
    gold: ListOrder

    @property
    def sample_id(self) -> str:
        return f"listwise:{self.query_id}:" + ",".join(self.doc_ids)


def sample_pairs(pools: Mapping[str, Sequence[AnnotatedPair]], config: SamplingConfig = SamplingConfig()) -> Tuple[List[PairSample], Dict[str, int]]:
    """Up to ``pair_budget_per_query`` differently-scored pairs per query,
    with a seeded random choice of which doc is shown first."""
    out: List[PairSample] = []
    stats = Counter()
    for qid in sorted(pools):
        docs = sorted((p for p in pools[qid] if p.annotated_score is not None), key=lambda p: p.doc_id)
        eligible = [(x, y) for x, y in combinations(docs, 2) if x.annotated_score != y.annotated_score]
        if not eligible:
            stats["skipped_queries"] += 1
            continue
        rng = _rng(config.rng_seed, "pairs", qid)
        rng.shuffle(eligible)
        for x, y in eligible[:config.pair_budget_per_query]:
            a, b = (x, y) if rng.random() < 0.5 else (y, x)
            preferred = 1 if a.annotated_score > b.annotated_score else 2
            out.append(PairSample(qid, a.doc_id, b.doc_id, PairPreference(preferred, (a.annotated_score, b.annotated_score))))
        stats["queries"] += 1
    stats["pairs"] = len(out)
    return out, dict(stats)


def sample_lists(pools: Mapping[str, Sequence[AnnotatedPair]], config: SamplingConfig = SamplingConfig()) -> Tuple[List[ListSample], Dict[str, int]]:
    """One list per query drawing at most ``max_docs_per_level`` docs per grade.

    Presentation order is a seeded shuffle; the gold order sorts by grade
    with seeded shuffling inside tied grades.
    """
    lo, hi = config.list_size_range
    out: List[ListSample] = []
    stats = Counter()
    for qid in sorted(pools):
        levels: Dict[int, List[AnnotatedPair]] = {}
        for p in sorted(pools[qid], key=lambda p: p.doc_id):
            if p.annotated_score is not None:
                levels.setdefault(p.annotated_score, []).append(p)
        if len(levels) < 2:
            stats["skipped_single_level"] += 1
            continue
        rng = _rng(config.rng_seed, "lists", qid)
        chosen: List[AnnotatedPair] = []
        for score in sorted(levels):
            docs = levels[score]
            chosen.extend(rng.sample(docs, min(config.max_docs_per_level, len(docs))))
        rng.shuffle(chosen)
        chosen = chosen[:hi]
        if len(chosen) < lo or len({p.annotated_score for p in chosen}) < 2:
            stats["skipped_size"] += 1
            continue
        grades = tuple(p.annotated_score for p in chosen)
        tiebreak = [rng.random() for _ in chosen]
        order = tuple(sorted(range(1, len(chosen) + 1), key=lambda i: (-grades[i - 1], tiebreak[i - 1])))
        out.append(ListSample(qid, tuple(p.doc_id for p in chosen), ListOrder(order, grades)))
    stats["lists"] = len(out)
    return out, dict(stats)


def select_queries_by_length(
    queries: Mapping[str, str],
    fraction: float,
    n_buckets: int = 4,
    seed: int = 42,
) -> Set[str]:
    """Sample ``fraction`` of the queries from each length bucket.

    Buckets are quantiles (quartiles by default) of whitespace token counts.
    """
    if not 0 < fraction <= 1:
        raise DataError("fraction must lie in (0, 1]")
    if not queries:
        return set()
    qids = sorted(queries)
    lengths = np.array([len(queries[q].split()) for q in qids])
    edges = np.quantile(lengths, np.linspace(0, 1, n_buckets + 1)[1:-1])
    bucket_of = np.searchsorted(edges, lengths, side="right")
    rng = _rng(seed, "length-buckets")
    picked: Set[str] = set()
    for b in range(n_buckets):
        members = [q for q, bk in zip(qids, bucket_of) if bk == b]
        if members:
            k = max(1, round(fraction * len(members)))
            picked.update(rng.sample(members, k))
    return picked


# -- corpus assembly ------------------------------------------------------------


@dataclass
class CorpusSources:
    queries: Mapping[str, Query]
    documents: Mapping[str, Document]
    pairs: Sequence[AnnotatedPair]
    cot: Mapping[str, str] = field(default_factory=dict)
    malformed: int = 0  # source records that could not be read as pairs

    @classmethod
    def from_files(cls, queries_path, corpus_path, pairs_path, cot_path=None) -> "CorpusSources":
        from .trec import read_corpus, read_queries

        pairs, malformed = [], 0
        for rec in read_jsonl(pairs_path):
            try:
                pairs.append(adapt_record(rec))
            except (KeyError, TypeError, ValueError):
                malformed += 1
        cot = {}
        if cot_path is not None:
            cot = {str(r["sample_id"]): r["cot_text"] for r in read_jsonl(cot_path)}
        return cls(read_queries(queries_path), read_corpus(corpus_path), pairs, cot, malformed)


@dataclass
class _Logical:
    paradigm: TaskParadigm
    sample_id: str
    granularities: Tuple[LabelGranularity, ...]
    label: Any
    render: Any  # (granularity, mode) -> RenderedPrompt
    cot: Optional[str]


def _pointwise_logical(pair: AnnotatedPair, q: Query, d: Document, cot: Mapping[str, str]) -> _Logical:
    sid = f"pointwise:{pair.query_id}:{pair.doc_id}"
    if pair.annotated_score is None:
        label, grans = RelevanceLabel(pair.is_positive_source), (LabelGranularity.BINARY,)
    else:
        label, grans = RelevanceLabel.from_score(pair.annotated_score), tuple(LabelGranularity)
    return _Logical(
        TaskParadigm.POINTWISE, sid, grans, label,
        lambda g, m: render_pointwise(q, d, g, m), pair.cot_text or cot.get(sid),
    )


BOTH_MODES = (ThinkMode.THINK, ThinkMode.NO_THINK)
ALL_PARADIGMS = tuple(TaskParadigm)


def build_corpus(
    sources: CorpusSources,
    out_dir: Union[str, Path],
    config: SamplingConfig = SamplingConfig(),
    modes: Iterable[ThinkMode] = BOTH_MODES,
    paradigms: Iterable[TaskParadigm] = ALL_PARADIGMS,
    query_fraction: Optional[float] = None,
) -> Dict[str, Any]:
    """Write one SFT file per paradigm plus ``manifest.json``; return the manifest.

    Each logical sample appears once per (mode, granularity) variant, so a
    fully annotated pointwise sample yields four records. On failure every
    file written so far is removed.
    """
    modes = [m for m in ThinkMode if m in set(modes)]
    paradigms = [p for p in TaskParadigm if p in set(paradigms)]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    pairs = list(sources.pairs)
    if query_fraction is not None:
        keep = select_queries_by_length({q.id: q.text for q in sources.queries.values()}, query_fraction, seed=config.rng_seed)
        pairs = [p for p in pairs if p.query_id in keep]
    binary_only = [p for p in pairs if p.annotated_score is None]
    retained, fstats = filter_finegrained([p for p in pairs if p.annotated_score is not None])
    fstats.malformed += sources.malformed

    missing_text = Counter()

    def lookup(qid: str, dids: Sequence[str]):
        q = sources.queries.get(qid)
        ds = [sources.documents.get(d) for d in dids]
        if q is None or any(d is None for d in ds):
            missing_text[qid] += 1
            return None
        return q, ds

    logical: Dict[TaskParadigm, List[_Logical]] = {p: [] for p in paradigms}
    sampling_stats: Dict[str, Any] = {}
    if TaskParadigm.POINTWISE in paradigms:
        for pair in binary_only + retained:
            found = lookup(pair.query_id, [pair.doc_id])
            if found:
                logical[TaskParadigm.POINTWISE].append(_pointwise_logical(pair, found[0], found[1][0], sources.cot))
    pools = pools_by_query(retained)
    if TaskParadigm.PAIRWISE in paradigms:
        samples, sampling_stats["pairwise"] = sample_pairs(pools, config)
        for s in samples:
            found = lookup(s.query_id, [s.doc_a, s.doc_b])
            if found:
                q, (da, db) = found
                logical[TaskParadigm.PAIRWISE].append(_Logical(
                    TaskParadigm.PAIRWISE, s.sample_id, tuple(LabelGranularity), s.preference,
                    lambda g, m, q=q, da=da, db=db: render_pairwise(q, da, db, g, m), sources.cot.get(s.sample_id),
                ))
    if TaskParadigm.LISTWISE in paradigms:
        samples, sampling_stats["listwise"] = sample_lists(pools, config)
        for s in samples:
            found = lookup(s.query_id, s.doc_ids)
            if found:
                q, ds = found
                logical[TaskParadigm.LISTWISE].append(_Logical(
                    TaskParadigm.LISTWISE, s.sample_id, tuple(LabelGranularity), s.gold,
                    lambda g, m, q=q, ds=ds: render_listwise(q, ds, g, m), sources.cot.get(s.sample_id),
                ))

    counts: Dict[str, int] = {}
    cot_requests: List[Dict[str, Any]] = []
    written: List[Path] = []
    files: Dict[str, int] = {}
    try:
        for paradigm in paradigms:
            records: List[SftSample] = []
            for item in logical[paradigm]:
                for mode in modes:
                    if mode is ThinkMode.THINK and not (item.cot and item.cot.strip()):
                        prompt = item.render(item.granularities[-1], mode)
                        cot_requests.append({"sample_id": item.sample_id, "paradigm": paradigm.value,
                                             "query_id": prompt.query_id, "doc_ids": list(prompt.doc_ids),
                                             "prompt": prompt.text})
                        continue
                    for gran in item.granularities:
                        prompt = item.render(gran, mode)
                        cot = item.cot if mode is ThinkMode.THINK else None
                        records.append(render_sft_sample(prompt, item.label, cot))
                        key = f"{paradigm.value}/{mode.value}/{gran.value}"
                        counts[key] = counts.get(key, 0) + 1
            path = out_dir / f"{paradigm.value}.jsonl"
            written.append(path)
            files[path.name] = emit_sft_corpus(records, path)
        if cot_requests:
            path = out_dir / "cot_requests.jsonl"
            written.append(path)
            with open(path, "w", encoding="utf-8") as f:
                for rec in cot_requests:
                    f.write(json.dumps(rec, ensure_ascii=False) + "\n")
        manifest = {
            "seed": config.rng_seed,
            "sampling": {**asdict(config), "list_size_range": list(config.list_size_range)},
            "modes": [m.value for m in modes],
            "paradigms": [p.value for p in paradigms],
            "query_fraction": query_fraction,
            "counts": dict(sorted(counts.items())),
            "files": files,
            "total": sum(files.values()),
            "filter": fstats.to_dict(),
            "binary_only_pairs": len(binary_only),
            "sampling_stats": sampling_stats,
            "missing_text": sum(missing_text.values()),
            "missing_cot": len(cot_requests),
        }
        path = out_dir / "manifest.json"
        written.append(path)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")
    except BaseException:
        for p in written:
            if p.exists():
                os.remove(p)
        raise
    return manifest
