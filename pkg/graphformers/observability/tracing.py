"""
Run tracing and structured logging.
Records wall-time spans for commands and training stages and exports them
as trace.json in the run directory.
"""
from typing import Optional, Dict, Any, List, Union
import json
import logging
import time
import uuid
from datetime import datetime, timezone
from contextlib import contextmanager
from pathlib import Path

logger = logging.getLogger(__name__)

TEXT_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


class JsonFormatter(logging.Formatter):
    """One JSON object per record."""

    def format(self, record: logging.LogRecord) -> str:
        entry = {
            "timestamp": self.formatTime(record),
            "logger": record.name,
            "level": record.levelname,
            "message": record.getMessage(),
        }
        if record.exc_info:
            entry["exception"] = self.formatException(record.exc_info)
        return json.dumps(entry, ensure_ascii=False)


def configure_logging(level: str = "INFO", fmt: str = "text") -> None:
    """
    Install the root handler. ``fmt`` is ``json`` for one JSON object per
    line or ``text`` for the plain format.
    """
    handler = logging.StreamHandler()
    handler.setFormatter(JsonFormatter() if fmt == "json" else logging.Formatter(TEXT_FORMAT))
    logging.basicConfig(level=getattr(logging, level.upper()), handlers=[handler], force=True)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


class RunTrace:
    """
    Trace of a single CLI run.
    """

    def __init__(self, command: str, run_id: Optional[str] = None, metadata: Optional[Dict[str, Any]] = None):
        self.run_id = run_id or str(uuid.uuid4())
        self.command = command
        self.metadata = metadata or {}
        self.start_time = time.perf_counter()
        self.spans: List[Dict[str, Any]] = []

    def add_span(
        self,
        name: str,
        span_type: str,
        output_data: Optional[Any] = None,
        metadata: Optional[Dict[str, Any]] = None,
        duration_ms: Optional[float] = None
    ):
        span = {
            "span_id": str(uuid.uuid4()),
            "name": name,
            "type": span_type,
            "output": output_data,
            "metadata": metadata or {},
            "duration_ms": duration_ms,
            "timestamp": _now()
        }
        self.spans.append(span)

    def get_duration_ms(self) -> float:
        return (time.perf_counter() - self.start_time) * 1000

    @contextmanager
    def trace_span(self, name: str, span_type: str, metadata: Optional[Dict[str, Any]] = None):
        """
        Context manager for tracing a span.

        Usage:
            with trace.trace_span("stage1", "train") as span:
                result = run_stage()
                span["output"] = {"steps": result.steps}
        """
        span_start = time.perf_counter()
        span_data = {"output": None, "metadata": metadata or {}}
        try:
            yield span_data
        finally:
            duration_ms = (time.perf_counter() - span_start) * 1000
            self.add_span(
                name=name,
                span_type=span_type,
                output_data=span_data.get("output"),
                metadata=span_data.get("metadata"),
                duration_ms=duration_ms
            )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "run_id": self.run_id,
            "command": self.command,
            "metadata": self.metadata,
            "spans": self.spans,
            "duration_ms": self.get_duration_ms(),
            "timestamp": _now()
        }

    def finalize(self, directory: Optional[Union[str, Path]] = None) -> Dict[str, Any]:
        """
        Log the trace as structured JSON and, with ``directory``, write it to
        ``<directory>/trace.json``.
        """
        trace_data = self.to_dict()
        if directory is not None:
            try:
                path = Path(directory) / "trace.json"
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_text(json.dumps(trace_data, indent=2, default=str))
            except OSError as e:
                logger.error(f"Failed to write trace: {e}")
        logger.debug(json.dumps(trace_data, default=str))
        return trace_data


# Global instance
_tracer: Optional[RunTrace] = None


def get_tracer() -> RunTrace:
    """
    Current run trace; a throwaway one is created when no command started one.
    """
    global _tracer
    if _tracer is None:
        _tracer = RunTrace(command="library")
    return _tracer


def start_trace(command: str, metadata: Optional[Dict[str, Any]] = None) -> RunTrace:
    global _tracer
    _tracer = RunTrace(command=command, metadata=metadata)
    return _tracer
