"""Exception hierarchy shared across the pipeline.

The CLI maps ConfigError to exit code 1 (validation) and every other
PipelineError to exit code 2 (runtime).
"""

from __future__ import annotations


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PipelineError):
    """Invalid run configuration; carries one message per violation."""

    def __init__(self, violations: list[str] | str):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = violations
        super().__init__("; ".join(violations))


class DatasetError(PipelineError):
    """Corpus or SFT dataset file violates its contract."""


class GatewayError(PipelineError):
    """Endpoint call failed (after retries, where applicable)."""


class TransientEndpointError(GatewayError):
    """Retryable endpoint failure: timeout, connection error, 5xx."""


class UnscriptedRequestError(GatewayError):
    """A mock backend received a request no script rule matches."""

    def __init__(self, request_text: str):
        self.request_text = request_text
        preview = request_text if len(request_text) <= 400 else request_text[:400] + "..."
        super().__init__(f"unscripted request: {preview!r}")


class TemplateError(PipelineError):
    """Malformed template or bad render context."""


class RetrievalError(PipelineError):
    """Index construction, persistence, or query failure."""


class ChainFormatError(PipelineError):
    """Serialized hierarchical chain violates the grammar.

    ``offset`` is the byte offset (UTF-8) of the first offending position
    (None for assembly-side errors with no input to point into),
    ``expected`` names the token the parser was looking for.
    """

    def __init__(self, message: str, offset: int | None = None, expected: str | None = None):
        self.offset = offset
        self.expected = expected
        super().__init__(message if offset is None else f"{message} at byte {offset}")


class EvaluationError(PipelineError):
    """Scoring input violates its preconditions."""


class ReviewError(PipelineError):
    """Review session operation failed."""


class AlreadyJudgedError(ReviewError):
    """A verdict for this (pair, annotator) was already recorded."""
