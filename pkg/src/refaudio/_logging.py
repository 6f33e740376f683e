"""Structured logging support."""

import json
import logging

from typing import Any

# Rudimentary structured logging based on the standard library recipe:
#
# https://docs.python.org/3/howto/logging-cookbook.html#implementing-structured-logging
#
# Each record is an event name plus a dict of context, rendered as sorted JSON.

LogEventContext = dict[str, Any]

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def _jsonable(value: Any) -> Any:
    # numpy and torch scalars show up in training/eval context
    item = getattr(value, "item", None)
    if callable(item):
        try:
            return item()
        except (TypeError, ValueError, RuntimeError):
            pass
    return repr(value)


class StructuredLogEvent:
    def __init__(self, event: str, event_dict: LogEventContext) -> None:
        event_dict["event"] = event
        self.event = event
        self.event_dict = event_dict

    def as_formatted_json(self) -> str:
        return json.dumps(self.event_dict, sort_keys=True, default=_jsonable)

    def __str__(self) -> str:
        return self.as_formatted_json()


class StructuredLogger:
    def __init__(self, logger: logging.Logger) -> None:
        self._stdlib_logger = logger
        self.event_context: LogEventContext = {}

    def update_context(
        self, log_context: LogEventContext | None = None, /, **additional_context: Any
    ) -> None:
        event_context = self.event_context
        if log_context is not None:
            event_context.update(log_context)
        event_context.update(additional_context)

    def isEnabledFor(self, level: int) -> bool:
        return self._stdlib_logger.isEnabledFor(level)

    def _log(
        self,
        level: int,
        msg: str,
        exc_info: bool,
        stacklevel: int,
        event_dict: LogEventContext,
    ) -> None:
        if not self._stdlib_logger.isEnabledFor(level):
            return
        event_data = self.event_context.copy()
        event_data.update(event_dict)
        logged_msg = StructuredLogEvent(msg, event_data)
        self._stdlib_logger.log(
            level,
            logged_msg,
            exc_info=exc_info,
            stacklevel=stacklevel + 1,
        )

    def debug(self, msg: str, *, stacklevel: int = 1, **event_dict: Any) -> None:
        self._log(logging.DEBUG, msg, False, stacklevel + 1, event_dict)

    def info(self, msg: str, *, stacklevel: int = 1, **event_dict: Any) -> None:
        self._log(logging.INFO, msg, False, stacklevel + 1, event_dict)

    def warn(self, msg: str, *, stacklevel: int = 1, **event_dict: Any) -> None:
        self._log(logging.WARN, msg, False, stacklevel + 1, event_dict)

    def error(
        self,
        msg: str,
        *,
        exc_info: bool = False,
        stacklevel: int = 1,
        **event_dict: Any,
    ) -> None:
        self._log(logging.ERROR, msg, exc_info, stacklevel + 1, event_dict)


def get_logger(name: str, /) -> StructuredLogger:
    return StructuredLogger(logging.getLogger(name))


def configure_logging(verbose: bool = False, log_file: str | None = None) -> None:
    handlers: list[logging.Handler] = [logging.StreamHandler()]
    if log_file is not None:
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )
