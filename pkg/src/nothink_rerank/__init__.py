"""Pointwise LLM reranking with think-mode switched prompts and logprob score fusion."""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    Candidate,
    Document,
    LabelGranularity,
    ListOrder,
    PairPreference,
    Query,
    RelevanceLabel,
    TaskParadigm,
    ThinkMode,
)
from .errors import BackendError, DataError, RerankError  # noqa: E402

__all__ = [
    "__version__",
    "Candidate",
    "Document",
    "LabelGranularity",
    "ListOrder",
    "PairPreference",
    "Query",
    "RelevanceLabel",
    "TaskParadigm",
    "ThinkMode",
    "BackendError",
    "DataError",
    "RerankError",
]
