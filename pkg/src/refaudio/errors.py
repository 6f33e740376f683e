"""Exception hierarchy and the public API boundary helpers."""

from contextlib import ContextDecorator
from os import getenv
from types import TracebackType
from typing import Any, Type
from typing_extensions import (
    # Native in 3.11+
    Self,
)

__all__ = [
    "RefAudioError",
    "RefAudioOSError",
    "RefAudioRuntimeError",
    "RefAudioValueError",
    "ConfigError",
    "ForgeError",
    "MetricError",
    "TrainingError",
    "refaudio_public_api",
]


class RefAudioError(Exception):
    """Common base class for exceptions raised directly by refaudio.

    Note: exceptions raised by underlying libraries (torch, soundfile, ...)
          are NOT wrapped unless they concern a path or a value we validate.
    """

    exit_code = 1


class RefAudioOSError(OSError, RefAudioError):
    """A file could not be read or written. The message names the path."""

    exit_code = 3

    def __init__(self, message: str, path: Any = None) -> None:
        super().__init__(message)
        self.path = path


class RefAudioRuntimeError(RuntimeError, RefAudioError):
    """User requested an invalid sequence of operations."""


class RefAudioValueError(ValueError, RefAudioError):
    """User supplied an invalid value."""

    exit_code = 4


class ConfigError(RefAudioValueError):
    """A run configuration could not be parsed or validated."""

    exit_code = 2

    def __init__(self, message: str, line: int | None = None) -> None:
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ForgeError(RefAudioRuntimeError):
    """A dataset forge could not satisfy its construction constraints."""

    exit_code = 5


class TrainingError(RefAudioRuntimeError):
    """Training diverged or hit malformed data."""

    exit_code = 6

    def __init__(
        self,
        message: str,
        example_ids: list[str] | None = None,
        diagnostics: dict[str, Any] | None = None,
    ) -> None:
        if example_ids:
            message = f"{message} (examples: {', '.join(example_ids)})"
        super().__init__(message)
        self.example_ids = list(example_ids or [])
        self.diagnostics = dict(diagnostics or {})


class MetricError(RefAudioRuntimeError):
    """A metric failed its numerical self-verification."""

    exit_code = 7


def _truncate_traceback(exc: BaseException | None) -> None:
    """Truncate the traceback at the package boundary (by default)."""
    if exc is None:
        return
    # Check env var every time so it can be updated at runtime
    if getenv("REFAUDIO_KEEP_INTERNAL_STACK"):
        return
    if isinstance(exc, RefAudioError) or not isinstance(exc, Exception):
        # Other exceptions indicate bugs and keep a full traceback.
        exc.__traceback__ = None


class refaudio_public_api(ContextDecorator):
    """Marks a callable as part of the public boundary (the CLI commands).

    Tracebacks of refaudio exceptions are truncated at this boundary.
    Set REFAUDIO_KEEP_INTERNAL_STACK to a non-empty string to keep them.
    """

    def __enter__(self) -> Self:
        return self

    def __exit__(
        self,
        exc_type: Type[BaseException] | None,
        exc_val: BaseException | None,
        exc_tb: TracebackType | None,
    ) -> None:
        _truncate_traceback(exc_val)
