"""
JSON-lines logging for the workflow manager.

Runtime modules log short event names (``node_dispatched``, ``controller_retry``)
and pass correlation ids through ``extra=``; the formatter lifts those ids into
top-level keys so one execution can be followed across the engine, broker and
controller workers.
"""

from __future__ import annotations

import json
import logging
import sys
from datetime import datetime, timezone
from typing import Any

from .config import get_settings

CORRELATION_KEYS = (
    "request_id",
    "user_id",
    "execution_id",
    "node_id",
    "controller_id",
    "message_id",
    "template_id",
    "element_id",
    "kind",
    "state",
    "attempt",
    "queue",
    "service",
)


class JsonLinesFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        entry: dict[str, Any] = {
            "ts": datetime.fromtimestamp(record.created, timezone.utc).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "event": record.getMessage(),
        }
        entry.update(
            (key, value)
            for key in CORRELATION_KEYS
            if (value := getattr(record, key, None)) is not None
        )
        if record.exc_info:
            entry["exc_info"] = self.formatException(record.exc_info)
        return json.dumps(entry, ensure_ascii=False, default=str)


def configure_logging(level: str | None = None) -> None:
    """Route the root logger to stdout as JSON lines; safe to call repeatedly."""

    root = logging.getLogger()
    root.setLevel((level or get_settings().log_level).upper())
    handler = logging.StreamHandler(sys.stdout)
    handler.setFormatter(JsonLinesFormatter())
    for existing in list(root.handlers):
        root.removeHandler(existing)
    root.addHandler(handler)
