"""
core/errors.py
--------------

Exception hierarchy.  Every error carries a human readable ``detail``
that the CLI prints as its diagnostic.
"""

from __future__ import annotations

from typing import Optional


class FedsemError(Exception):
    def __init__(self, detail: str) -> None:
        super().__init__(detail)
        self.detail = detail


class InvalidInputError(FedsemError, ValueError):
    """Bad argument, empty input or out-of-range parameter."""


class ShapeMismatchError(InvalidInputError):
    pass


class UnknownLabelError(InvalidInputError):
    """A sample label with no prototype."""


class NonFiniteError(FedsemError):
    pass


class DivergenceError(NonFiniteError):
    """Gradient descent produced a non-finite loss or matrix."""

    def __init__(self, detail: str, epoch: int) -> None:
        super().__init__(detail)
        self.epoch = epoch


class SingularSystemError(FedsemError):
    pass


class AbstentionError(FedsemError):
    """Zero projection or zero-norm cosine operand; attribution abstains."""


class EncoderBackendError(FedsemError):
    """The remote encoder failed or answered with something unusable."""


class ClientFailureError(FedsemError):
    def __init__(self, detail: str, client_id: Optional[str] = None) -> None:
        super().__init__(detail)
        self.client_id = client_id


class StageError(FedsemError):
    """A pipeline stage failed; wraps the underlying error."""

    def __init__(self, stage: str, cause: BaseException) -> None:
        detail = getattr(cause, "detail", None) or str(cause) or type(cause).__name__
        super().__init__(f"stage '{stage}' failed: {detail}")
        self.stage = stage
        self.cause = cause
