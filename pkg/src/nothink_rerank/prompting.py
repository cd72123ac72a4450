"""Prompt rendering and SFT sample construction.

Every prompt follows ``<Instruction><Query><Doc(s)><think mode>``: the layout
per paradigm and the instruction per (paradigm, granularity[, mode]) come from
a JSON template registry, so wording can change without touching code.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import IO, Any, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

from . import answers
from .core import (
    LABEL_TYPES,
    Document,
    Label,
    LabelGranularity,
    ListOrder,
    PairPreference,
    Query,
    RelevanceLabel,
    TaskParadigm,
    ThinkMode,
    label_from_dict,
)
from .errors import (
    DataError,
    LabelMismatch,
    MissingCot,
    SameDoc,
    TemplateError,
    TooFewDocs,
    TooManyDocs,
    UnexpectedCot,
)

DEFAULT_MAX_LIST_DOCS = 20

REQUIRED_PLACEHOLDERS = {
    TaskParadigm.POINTWISE: {"instruction", "query", "doc", "mode"},
    TaskParadigm.PAIRWISE: {"instruction", "query", "doc_1", "doc_2", "mode"},
    TaskParadigm.LISTWISE: {"instruction", "query", "docs", "mode"},
}


@dataclass(frozen=True)
class PromptSpec:
    paradigm: TaskParadigm
    granularity: LabelGranularity
    mode: ThinkMode = ThinkMode.NO_THINK

    def key(self) -> str:
        return f"{self.paradigm.value}/{self.granularity.value}/{self.mode.value}"

    def to_dict(self) -> Dict[str, str]:
        return {"paradigm": self.paradigm.value, "granularity": self.granularity.value, "mode": self.mode.value}

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "PromptSpec":
        return cls(TaskParadigm(d["paradigm"]), LabelGranularity(d["granularity"]), ThinkMode(d["mode"]))


@dataclass(frozen=True)
class RenderedPrompt:
    spec: PromptSpec
    text: str
    query_id: str
    doc_ids: Tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "doc_ids", tuple(self.doc_ids))
        if not self.text.endswith(self.spec.mode.token):
            raise DataError(f"prompt must end with {self.spec.mode.token!r}")
        n = len(self.doc_ids)
        expected_ok = {
            TaskParadigm.POINTWISE: n == 1,
            TaskParadigm.PAIRWISE: n == 2,
            TaskParadigm.LISTWISE: n >= 2,
        }[self.spec.paradigm]
        if not expected_ok:
            raise DataError(f"{self.spec.paradigm.value} prompt cannot carry {n} documents")

    @property
    def answer_grammar(self) -> str:
        return _GRAMMARS[(self.spec.paradigm, self.spec.granularity)]

    def to_dict(self) -> Dict[str, Any]:
        return {"spec": self.spec.to_dict(), "text": self.text, "query_id": self.query_id, "doc_ids": list(self.doc_ids)}

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "RenderedPrompt":
        return cls(PromptSpec.from_dict(d["spec"]), d["text"], d["query_id"], tuple(d["doc_ids"]))


_GRAMMARS = {
    (TaskParadigm.POINTWISE, LabelGranularity.BINARY): "(yes|no)",
    (TaskParadigm.POINTWISE, LabelGranularity.FINE_GRAINED): "(yes|no)([0-4])",
    (TaskParadigm.PAIRWISE, LabelGranularity.BINARY): "doc_(1|2)",
    (TaskParadigm.PAIRWISE, LabelGranularity.FINE_GRAINED): "doc_i([0-4]) > doc_j([0-4])",
    (TaskParadigm.LISTWISE, LabelGranularity.BINARY): "[i] > [j] > ...",
    (TaskParadigm.LISTWISE, LabelGranularity.FINE_GRAINED): "[i]([0-4]) > [j]([0-4]) > ...",
}


@dataclass(frozen=True)
class SftSample:
    prompt: RenderedPrompt
    response: str
    label: Label
    cot_text: Optional[str] = None

    def validate(self) -> None:
        """Re-derive the response from label and CoT; raise if anything disagrees."""
        expected = render_sft_sample(self.prompt, self.label, self.cot_text).response
        if expected != self.response:
            raise DataError(f"response {self.response!r} does not match label (expected {expected!r})")

    def to_record(self) -> Dict[str, Any]:
        spec = self.prompt.spec
        return {
            "messages": [
                {"role": "user", "content": self.prompt.text},
                {"role": "assistant", "content": self.response},
            ],
            "metadata": {
                **spec.to_dict(),
                "query_id": self.prompt.query_id,
                "doc_ids": list(self.prompt.doc_ids),
                "label": self.label.to_dict(),
                "cot_text": self.cot_text,
            },
        }

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> "SftSample":
        meta = record["metadata"]
        msgs = {m["role"]: m["content"] for m in record["messages"]}
        prompt = RenderedPrompt(PromptSpec.from_dict(meta), msgs["user"], meta["query_id"], tuple(meta["doc_ids"]))
        return cls(prompt, msgs["assistant"], label_from_dict(meta["label"]), meta.get("cot_text"))


class TemplateRegistry:
    """Layouts and instructions keyed by paradigm / granularity / mode.

    Instruction lookup tries ``paradigm/granularity/mode`` first, then
    ``paradigm/granularity``.
    """

    def __init__(self, layouts: Dict[str, str], instructions: Dict[str, str], version: str = "1"):
        self.version = version
        self.layouts = {TaskParadigm(k): v for k, v in layouts.items()}
        self.instructions = dict(instructions)
        self._check()

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "TemplateRegistry":
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
        return cls(data["layouts"], data["instructions"], str(data.get("version", "1")))

    @classmethod
    def default(cls) -> "TemplateRegistry":
        return _default_registry()

    def _check(self) -> None:
        for paradigm, required in REQUIRED_PLACEHOLDERS.items():
            layout = self.layouts.get(paradigm)
            if layout is None:
                raise TemplateError(f"no layout for {paradigm.value}")
            found = {name for _, name, _, _ in string.Formatter().parse(layout) if name is not None}
            if found != required:
                raise TemplateError(
                    f"{paradigm.value} layout placeholders {sorted(found)} != required {sorted(required)}"
                )
            if not layout.endswith("{mode}"):
                raise TemplateError(f"{paradigm.value} layout must end with the mode token")
            for granularity in LabelGranularity:
                for mode in ThinkMode:
                    self.instruction(PromptSpec(paradigm, granularity, mode))
        for key, text in self.instructions.items():
            if "{" in text or "}" in text:
                raise TemplateError(f"instruction {key!r} must not contain braces")

    def instruction(self, spec: PromptSpec) -> str:
        base = f"{spec.paradigm.value}/{spec.granularity.value}"
        for key in (f"{base}/{spec.mode.value}", base):
            if key in self.instructions:
                return self.instructions[key]
        raise TemplateError(f"no instruction for {base}")

    def render(self, spec: PromptSpec, **slots: str) -> str:
        return self.layouts[spec.paradigm].format(instruction=self.instruction(spec), mode=spec.mode.token, **slots)


@lru_cache(maxsize=1)
def _default_registry() -> TemplateRegistry:
    with resources.files(__package__).joinpath("templates.json").open(encoding="utf-8") as f:
        data = json.load(f)
    return TemplateRegistry(data["layouts"], data["instructions"], str(data.get("version", "1")))


def render_pointwise(
    query: Query,
    doc: Document,
    granularity: LabelGranularity = LabelGranularity.FINE_GRAINED,
    mode: ThinkMode = ThinkMode.NO_THINK,
    registry: Optional[TemplateRegistry] = None,
) -> RenderedPrompt:
    registry = registry or _default_registry()
    spec = PromptSpec(TaskParadigm.POINTWISE, granularity, mode)
    text = registry.render(spec, query=query.text, doc=doc.text)
    return RenderedPrompt(spec, text, query.id, (doc.id,))


def render_pairwise(
    query: Query,
    doc_a: Document,
    doc_b: Document,
    granularity: LabelGranularity = LabelGranularity.FINE_GRAINED,
    mode: ThinkMode = ThinkMode.NO_THINK,
    registry: Optional[TemplateRegistry] = None,
) -> RenderedPrompt:
    if doc_a.id == doc_b.id:
        raise SameDoc(doc_a.id)
    registry = registry or _default_registry()
    spec = PromptSpec(TaskParadigm.PAIRWISE, granularity, mode)
    text = registry.render(spec, query=query.text, doc_1=doc_a.text, doc_2=doc_b.text)
    return RenderedPrompt(spec, text, query.id, (doc_a.id, doc_b.id))


def render_listwise(
    query: Query,
    docs: Sequence[Document],
    granularity: LabelGranularity = LabelGranularity.FINE_GRAINED,
    mode: ThinkMode = ThinkMode.NO_THINK,
    max_docs: int = DEFAULT_MAX_LIST_DOCS,
    registry: Optional[TemplateRegistry] = None,
) -> RenderedPrompt:
    docs = list(docs)
    if len(docs) < 2:
        raise TooFewDocs(f"listwise prompt needs at least 2 documents, got {len(docs)}")
    if len(docs) > max_docs:
        raise TooManyDocs(f"listwise prompt allows at most {max_docs} documents, got {len(docs)}")
    ids = [d.id for d in docs]
    if len(set(ids)) != len(ids):
        raise DataError(f"duplicate documents in list: {ids}")
    registry = registry or _default_registry()
    spec = PromptSpec(TaskParadigm.LISTWISE, granularity, mode)
    block = "\n".join(f"[{i}] {d.text}" for i, d in enumerate(docs, 1))
    text = registry.render(spec, query=query.text, docs=block)
    return RenderedPrompt(spec, text, query.id, tuple(ids))


def format_answer(label: Label, spec: PromptSpec) -> str:
    if spec.paradigm is TaskParadigm.POINTWISE:
        return answers.format_pointwise(label, spec.granularity)
    if spec.paradigm is TaskParadigm.PAIRWISE:
        return answers.format_pairwise(label, spec.granularity)
    return answers.format_listwise(label, spec.granularity)


def render_sft_sample(prompt: RenderedPrompt, label: Label, cot_text: Optional[str] = None) -> SftSample:
    spec = prompt.spec
    if spec.mode is ThinkMode.THINK:
        if cot_text is None or not cot_text.strip():
            raise MissingCot(f"think-mode sample for {prompt.query_id} needs CoT text")
    elif cot_text:
        raise UnexpectedCot(f"no-think sample for {prompt.query_id} must not carry CoT text")
    else:
        cot_text = None

    expected = LABEL_TYPES[spec.paradigm]
    if not isinstance(label, expected):
        raise LabelMismatch(f"{spec.paradigm.value} prompt needs a {expected.__name__}, got {type(label).__name__}")
    fine = spec.granularity is LabelGranularity.FINE_GRAINED
    if isinstance(label, RelevanceLabel) and fine and label.fine_grained is None:
        raise LabelMismatch("fine-grained pointwise sample needs a fine-grained score")
    if isinstance(label, PairPreference) and fine and label.scores is None:
        raise LabelMismatch("fine-grained pairwise sample needs per-document scores")
    if isinstance(label, ListOrder):
        if label.size != len(prompt.doc_ids):
            raise LabelMismatch(f"list label covers {label.size} docs, prompt has {len(prompt.doc_ids)}")
        if fine and label.grades is None:
            raise LabelMismatch("fine-grained listwise sample needs per-document grades")

    response = answers.wrap_think(format_answer(label, spec), spec.mode, cot_text)
    return SftSample(prompt, response, label, cot_text)


def emit_sft_corpus(samples: Iterable[SftSample], sink: Union[str, Path, IO[str]]) -> int:
    """Write one JSON messages record per line; return the number written.

    Each sample is validated before it is written; a bad sample raises
    DataError naming its 1-based position in the stream.
    """
    if isinstance(sink, (str, Path)):
        with open(sink, "w", encoding="utf-8") as f:
            return emit_sft_corpus(samples, f)
    count = 0
    for i, sample in enumerate(samples, 1):
        try:
            sample.validate()
        except DataError as exc:
            raise DataError(f"sample {i}: {exc}") from exc
        sink.write(json.dumps(sample.to_record(), ensure_ascii=False) + "\n")
        count += 1
    return count


def read_sft_corpus(source: Union[str, Path, IO[str]]) -> List[SftSample]:
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as f:
            return read_sft_corpus(f)
    return list(_iter_records(source))


def _iter_records(lines: IO[str]) -> Iterator[SftSample]:
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            yield SftSample.from_record(json.loads(line))
        except (KeyError, ValueError) as exc:
            raise DataError(f"line {lineno}: {exc}") from exc
