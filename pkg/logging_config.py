#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Logging configuration for mcaesthetics.

Every command logs JSON records to the log file of its run directory and
readable `message key=value` lines to stderr. Records carry the run context
(run directory, fingerprint, command) set once in setup_logging.
"""

import json
import logging
import logging.handlers
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Union


class JSONFormatter(logging.Formatter):
    """JSON formatter for structured logging.

    This formatter converts log records into JSON objects with standardized fields,
    making training logs easy to grep and to load back for analysis.
    """

    def format(self, record):
        """Format the log record as a JSON object."""
        log_data = {
            "timestamp": self.formatTime(record),
            "level": record.levelname,
            "name": record.name,
            "file": record.filename,
            "line": record.lineno,
            "message": record.getMessage(),
        }

        # Add exception info if present
        if record.exc_info and record.exc_info[0] is not None:
            log_data["exception"] = {
                "type": record.exc_info[0].__name__,
                "message": str(record.exc_info[1]),
                "traceback": self.formatException(record.exc_info)
            }

        # Add any custom fields attached to the record
        extra_data = getattr(record, "data", None)
        if isinstance(extra_data, dict):
            for key, value in extra_data.items():
                log_data[key] = value

        return json.dumps(log_data, default=str)


class StructuredLogger:
    """Logger that supports structured logging with additional context data."""

    def __init__(self, name: str, extra: Optional[Dict[str, Any]] = None):
        """Initialize the structured logger."""
        self.logger = logging.getLogger(name)
        self.extra = extra or {}

    def bind(self, **kwargs) -> "StructuredLogger":
        """Return a logger that adds the given context to every record."""
        return StructuredLogger(self.logger.name, {**self.extra, **kwargs})

    def _log(self, level: int, message: str, exc_info=None, **kwargs):
        """Internal method to handle logging with extra data."""
        extra_data = {**self.extra}
        if kwargs:
            extra_data.update(kwargs)
        self.logger.log(level, message, exc_info=exc_info, extra={"data": extra_data})

    def debug(self, message: str, **kwargs):
        """Log a debug message with structured data."""
        self._log(logging.DEBUG, message, **kwargs)

    def info(self, message: str, **kwargs):
        """Log an info message with structured data."""
        self._log(logging.INFO, message, **kwargs)

    def warning(self, message: str, **kwargs):
        """Log a warning message with structured data."""
        self._log(logging.WARNING, message, **kwargs)

    def error(self, message: str, exc_info=True, **kwargs):
        """Log an error message with structured data."""
        self._log(logging.ERROR, message, exc_info=exc_info, **kwargs)

    def critical(self, message: str, exc_info=True, **kwargs):
        """Log a critical message with structured data."""
        self._log(logging.CRITICAL, message, exc_info=exc_info, **kwargs)


class ConsoleFormatter(logging.Formatter):
    """Single-line console format with the structured context appended as key=value."""

    def __init__(self):
        super().__init__("%(asctime)s [%(levelname)s] %(message)s", datefmt="%H:%M:%S")

    def format(self, record):
        line = super().format(record)
        extra_data = getattr(record, "data", None)
        if isinstance(extra_data, dict) and extra_data:
            line += " " + " ".join(f"{k}={v}" for k, v in extra_data.items() if k not in RunContextFilter.KEYS)
        return line.rstrip()


class RunContextFilter(logging.Filter):
    """Adds the run context to the structured data of every record."""

    KEYS = ("run_dir", "fingerprint", "command")

    def __init__(self, context: Optional[Dict[str, Any]] = None):
        super().__init__()
        self.context = {k: v for k, v in (context or {}).items() if v is not None}

    def filter(self, record):
        if self.context:
            data = getattr(record, "data", None)
            record.data = {**self.context, **(data if isinstance(data, dict) else {})}
        return True


# Third-party loggers that are chatty at DEBUG (PNG chunk traces, plugin scans)
_QUIET_LOGGERS = ("PIL", "matplotlib", "urllib3")


def _as_level(level: Union[int, str]) -> int:
    if isinstance(level, int):
        return level
    value = logging.getLevelName(str(level).upper())
    return value if isinstance(value, int) else logging.INFO


def setup_logging(log_level_console: Union[int, str] = logging.INFO,
                  log_level_file: Union[int, str] = logging.DEBUG,
                  structured: bool = True,
                  log_file: Optional[Union[str, Path]] = "mcaesthetics.log",
                  context: Optional[Dict[str, Any]] = None):
    """Configure logging to the console (stderr) and a rotating run log file.

    Args:
        log_level_console: Console level (name or number)
        log_level_file: File level (name or number)
        structured: Write JSON records to the file instead of plain text
        log_file: Log file path, or None to skip file logging
        context: Run context added to every record (run_dir, fingerprint, command)
    """
    console_level = _as_level(log_level_console)
    file_level = _as_level(log_level_file) if log_file else console_level
    root_logger = logging.getLogger()

    for handler in root_logger.handlers[:]:
        root_logger.removeHandler(handler)
        handler.close()
    run_filter = RunContextFilter(context)

    if log_file:
        try:
            Path(log_file).parent.mkdir(parents=True, exist_ok=True)
            file_handler = logging.handlers.RotatingFileHandler(
                log_file, maxBytes=20 * 1024 * 1024, backupCount=3, encoding="utf-8"
            )
            file_handler.setFormatter(JSONFormatter() if structured else logging.Formatter(
                "%(asctime)s [%(levelname)s] %(name)s:%(lineno)d - %(message)s", datefmt="%Y-%m-%d %H:%M:%S"))
            file_handler.setLevel(file_level)
            file_handler.addFilter(run_filter)
            root_logger.addHandler(file_handler)
        except OSError as e:
            print(f"Warning: Could not create log file '{log_file}': {e}", file=sys.stderr)

    # stdout is reserved for rich tables
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setFormatter(ConsoleFormatter())
    console_handler.setLevel(console_level)
    console_handler.addFilter(run_filter)
    root_logger.addHandler(console_handler)

    root_logger.setLevel(min(console_level, file_level))
    for name in _QUIET_LOGGERS:
        logging.getLogger(name).setLevel(max(logging.INFO, file_level))

    logging.getLogger(__name__).debug("Logging configured", extra={"data": {"log_file": str(log_file)}})
