"""Logging setup: library records to stderr, structured run events as JSON lines."""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import Any, Optional, Union

EVENT_LOGGER = "consor.events"
events = logging.getLogger(EVENT_LOGGER)
events.propagate = False
events.setLevel(logging.INFO)


def _plain(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return repr(value)
    if hasattr(value, "item") and callable(value.item):
        try:
            return _plain(value.item())
        except (TypeError, ValueError):
            return str(value)
    return value


class JsonLineFormatter(logging.Formatter):
    """One JSON object per record: ``{"event": msg, **fields}``; no timestamps, sorted keys."""

    def format(self, record: logging.LogRecord) -> str:
        payload = {"event": record.getMessage()}
        fields = getattr(record, "fields", None) or {}
        for key, value in fields.items():
            payload[key] = _plain(value)
        return json.dumps(payload, sort_keys=True, default=str)


def emit(event: str, **fields: Any) -> None:
    events.info(event, extra={"fields": fields})


def attach_event_file(path: Union[str, Path]) -> logging.Handler:
    """Send events to ``path`` (truncated first so reruns produce identical files)."""

    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(target, mode="w", encoding="utf-8")
    handler.setFormatter(JsonLineFormatter())
    events.addHandler(handler)
    return handler


def detach_handler(handler: Optional[logging.Handler]) -> None:
    if handler is None:
        return
    events.removeHandler(handler)
    handler.close()


def configure_console(verbosity: int = 0) -> None:
    """Library warnings (truncation, corpus size, unmapped fields) go to stderr."""

    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG
    root = logging.getLogger("consor")
    root.setLevel(level)
    if not any(getattr(h, "_consor_console", False) for h in root.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter("consor: %(levelname)s: %(name)s: %(message)s"))
        handler._consor_console = True  # type: ignore[attr-defined]
        root.addHandler(handler)
