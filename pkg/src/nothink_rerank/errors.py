"""Exception hierarchy.

Two roots matter to callers: :class:`DataError` (bad input, exit code 2 in the
CLI) and :class:`BackendError` (inference failures, exit code 3).
"""

from __future__ import annotations

from typing import Optional, Sequence


class RerankError(Exception):
    """Base class for every error raised by this package."""


class DataError(RerankError, ValueError):
    """Input data violates a documented invariant."""


# -- core ------------------------------------------------------------------


class EmptyList(DataError):
    def __init__(self, what: str = "candidate list"):
        super().__init__(f"{what} is empty")


class DuplicateDoc(DataError):
    def __init__(self, doc_id: str):
        self.doc_id = doc_id
        super().__init__(f"duplicate doc_id {doc_id!r}")


class MixedQuery(DataError):
    def __init__(self, query_ids: Sequence[str]):
        self.query_ids = tuple(query_ids)
        super().__init__(f"candidates span several queries: {sorted(set(query_ids))}")


# -- prompting -------------------------------------------------------------


class SameDoc(DataError):
    def __init__(self, doc_id: str):
        self.doc_id = doc_id
        super().__init__(f"pairwise prompt needs two distinct documents, got {doc_id!r} twice")


class TooFewDocs(DataError):
    pass


class TooManyDocs(DataError):
    pass


class MissingCot(DataError):
    pass


class UnexpectedCot(DataError):
    pass


class LabelMismatch(DataError):
    pass


class TemplateError(DataError):
    pass


# -- scoring ---------------------------------------------------------------


class BinaryTokenNotFound(DataError):
    pass


class Unparsable(DataError):
    def __init__(self, text: str):
        self.text = text
        super().__init__(f"cannot parse answer from {text!r}")


# -- evaluation ------------------------------------------------------------


class EmptyIntersection(DataError):
    pass


class TooFewPairs(DataError):
    pass


class ZeroVariance(DataError):
    pass


# -- backend ---------------------------------------------------------------


class BackendError(RerankError):
    """Inference failed for one prompt.

    Carries the prompt's ids so batch callers can tell which candidate broke.
    """

    def __init__(self, message: str, query_id: str = "", doc_ids: Sequence[str] = ()):
        self.query_id = query_id
        self.doc_ids = tuple(doc_ids)
        where = f" [query={query_id} docs={','.join(self.doc_ids)}]" if query_id else ""
        super().__init__(message + where)


class BackendTimeout(BackendError):
    pass


class HttpStatus(BackendError):
    def __init__(self, code: int, message: str = "", query_id: str = "", doc_ids: Sequence[str] = ()):
        self.code = code
        super().__init__(f"HTTP {code} {message}".rstrip(), query_id, doc_ids)


class MalformedResponse(BackendError):
    pass


class RetriesExhausted(BackendError):
    def __init__(
        self,
        attempts: int,
        cause: Optional[BaseException] = None,
        query_id: str = "",
        doc_ids: Sequence[str] = (),
    ):
        self.attempts = attempts
        self.cause = cause
        super().__init__(f"gave up after {attempts} attempts: {cause}", query_id, doc_ids)


class UnknownPair(BackendError):
    pass


class AllFailed(BackendError):
    """Every candidate of a query failed at the backend."""
