"""Exception types raised across the adaptation engines."""

from __future__ import annotations

from typing import Sequence


class AdaptationError(Exception):
    """Base class for framework errors."""


class ManifestError(AdaptationError, ValueError):
    """A manifest row failed validation.

    ``row`` is the 1-based line number (0 for the header line).
    """

    def __init__(self, row: int, field: str, message: str) -> None:
        self.row = row
        self.field = field
        super().__init__(f"manifest row {row}, field '{field}': {message}")


class ProviderError(AdaptationError, RuntimeError):
    def __init__(self, subject: str, message: str) -> None:
        self.subject = subject
        super().__init__(f"embedding provider failed for {subject!r}: {message}")


class NonFiniteLossError(AdaptationError, RuntimeError):
    def __init__(self, component: str, batch_ids: Sequence[str] = ()) -> None:
        self.component = component
        self.batch_ids = list(batch_ids)
        shown = ", ".join(self.batch_ids[:8])
        more = "" if len(self.batch_ids) <= 8 else f" (+{len(self.batch_ids) - 8} more)"
        super().__init__(f"non-finite loss component '{component}' on batch [{shown}{more}]")


class CheckpointError(AdaptationError, RuntimeError):
    pass
