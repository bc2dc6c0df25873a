"""Exception types raised across the package.

Everything derives from QsetagError so the CLI can map domain failures to
exit code 1 while letting genuine bugs surface as tracebacks.
"""

from __future__ import annotations


class QsetagError(Exception):
    """Base class for all domain errors."""


class TaxonomyError(QsetagError):
    pass


class IngestError(QsetagError):
    """Fatal ingestion problem (unreadable file, duplicate post id, ...)."""


class ContractViolation(QsetagError):
    """A caller broke a documented precondition."""


class ConfigError(QsetagError):
    pass


class LlmError(QsetagError):
    """Base class for chat-completion client failures."""

    def __init__(self, message: str, raw_reply: str | None = None) -> None:
        super().__init__(message)
        self.raw_reply = raw_reply


class UnparsableReply(LlmError):
    """No category name could be extracted from the reply."""


class AmbiguousReply(LlmError):
    """Two or more category names and no explicit "Category:" line."""


class ServiceUnavailable(LlmError):
    """Transport kept failing after the configured retries."""


class AnnotationError(QsetagError):
    pass


class ExportBlocked(AnnotationError):
    """Gold export refused because conflicts are still open (or store empty)."""

    def __init__(self, message: str, open_post_ids: list[str] | None = None) -> None:
        super().__init__(message)
        self.open_post_ids = open_post_ids or []


class DatasetError(QsetagError):
    pass


class TrainingError(QsetagError):
    pass


class EvaluationError(QsetagError):
    pass


class ExplainError(QsetagError):
    pass
