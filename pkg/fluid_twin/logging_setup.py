"""Diagnostics to stderr plus an optional JSON-lines log."""

from __future__ import annotations

import json
import logging
import sys
import time
from typing import Any, Dict, Optional

_PLAIN_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"
_RESERVED = set(logging.LogRecord("", 0, "", 0, "", (), None).__dict__) | {"message", "asctime"}


class JsonLinesFormatter(logging.Formatter):
    """One JSON object per record; ``extra=`` fields are kept as keys."""

    def format(self, record: logging.LogRecord) -> str:
        payload: Dict[str, Any] = {
            "ts": round(record.created, 6),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        for key, value in record.__dict__.items():
            if key in _RESERVED or key.startswith("_"):
                continue
            payload[key] = value
        return json.dumps(payload, default=str, sort_keys=True)


def configure_logging(level: str = "INFO", json_lines: Optional[str] = None) -> logging.Logger:
    """Route package diagnostics to stderr and, optionally, a JSON-lines file."""

    root = logging.getLogger("fluid_twin")
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()

    root.setLevel(getattr(logging, str(level).upper(), logging.INFO))
    root.propagate = False

    stderr_handler = logging.StreamHandler(sys.stderr)
    stderr_handler.setFormatter(logging.Formatter(_PLAIN_FORMAT))
    root.addHandler(stderr_handler)

    if json_lines:
        file_handler = logging.FileHandler(json_lines, mode="a", encoding="utf-8")
        file_handler.setFormatter(JsonLinesFormatter())
        root.addHandler(file_handler)
    return root


class StageTimer:
    """Context manager logging the wall time of one pipeline stage."""

    def __init__(self, logger: logging.Logger, stage: str, **fields: Any):
        self.logger = logger
        self.stage = stage
        self.fields = fields
        self.seconds = 0.0
        self._start = 0.0

    def __enter__(self) -> "StageTimer":
        self._start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.seconds = time.perf_counter() - self._start
        status = "failed" if exc_type else "done"
        self.logger.info(
            "[%s] %s in %.3f s",
            self.stage,
            status,
            self.seconds,
            extra={"stage": self.stage, "seconds": self.seconds, **self.fields},
        )


__all__ = ["JsonLinesFormatter", "StageTimer", "configure_logging"]
