from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Protocol
import json

import numpy as np


TRACE_FILENAME = "trace.jsonl"


class EventLog(Protocol):
    def log(self, event_type: str, **payload: Any) -> None: ...


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


@dataclass
class TraceLogger:
    """Append-only JSONL event stream; one object per line, keys sorted."""

    path: str

    def __post_init__(self) -> None:
        self._index = 0
        Path(self.path).parent.mkdir(parents=True, exist_ok=True)
        self._fp = open(self.path, "w", encoding="utf-8")

    @classmethod
    def in_directory(cls, out_dir: str | Path) -> "TraceLogger":
        return cls(str(Path(out_dir) / TRACE_FILENAME))

    def log(self, event_type: str, **payload: Any) -> None:
        self._index += 1
        line = {
            "index": self._index,
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "event_type": event_type,
            **payload,
        }
        self._fp.write(json.dumps(line, sort_keys=True, default=_jsonable) + "\n")
        self._fp.flush()

    def close(self) -> None:
        self._fp.close()

    def __enter__(self) -> "TraceLogger":
        return self

    def __exit__(self, exc_type: Any, exc: Any, tb: Any) -> None:
        self.close()


class NoopTraceLogger:
    def log(self, event_type: str, **payload: Any) -> None:
        del event_type
        del payload


def read_trace(path: str | Path) -> list[dict[str, Any]]:
    events = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            events.append(json.loads(line))
    return events
