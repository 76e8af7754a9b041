"""
Utility functions for the EHR-RAG pipeline
Shared helpers used across all pipeline modules
"""

import hashlib
import json
import logging
import math
from datetime import datetime
from typing import Any, Iterable, Optional, Union

import numpy as np
import pandas as pd
import pytz
from dateutil import parser as date_parser

from ehr_rag import config

TimestampLike = Union[datetime, pd.Timestamp, str]

_LOG_RECORD_FIELDS = set(vars(logging.makeLogRecord({}))) | {"message", "asctime"}


def parse_timestamp(value: TimestampLike) -> datetime:
    """
    Parse a timestamp into a UTC-aware datetime

    Accepts "YYYY-MM-DD HH:MM:SS", ISO-8601 strings, datetimes and pandas
    Timestamps. Naive values are taken to be UTC.

    Args:
        value: Timestamp to parse

    Returns:
        Timezone-aware datetime in UTC

    Raises:
        ValueError: If the value cannot be parsed
    """
    if isinstance(value, pd.Timestamp):
        if pd.isna(value):
            raise ValueError("timestamp is NaT")
        value = value.to_pydatetime()

    if isinstance(value, datetime):
        dt = value
    elif isinstance(value, str):
        text = value.strip()
        if not text:
            raise ValueError("empty timestamp")
        try:
            dt = datetime.strptime(text, config.TIMESTAMP_FORMAT)
        except ValueError:
            try:
                dt = date_parser.isoparse(text)
            except (ValueError, OverflowError) as e:
                raise ValueError(f"unparseable timestamp '{text}'") from e
    else:
        raise ValueError(f"unsupported timestamp type {type(value).__name__}")

    if dt.tzinfo is None:
        return pytz.UTC.localize(dt)
    return dt.astimezone(pytz.UTC)


def format_timestamp(dt: datetime) -> str:
    """Render a timestamp in the event serialization format (UTC)"""
    return parse_timestamp(dt).strftime(config.TIMESTAMP_FORMAT)


def days_between(start: datetime, end: datetime) -> float:
    """
    Fractional days from start to end (negative if end precedes start)
    """
    return (end - start).total_seconds() / 86400.0


def format_number(value: float) -> str:
    """
    Render a numeric value in positional notation, trailing zeros trimmed

    Magnitudes >= 1 keep 6 decimals, smaller ones 6 significant digits.

    Examples:
        120.0 -> "120", 0.12345678 -> "0.123457", 1234567.0 -> "1234567"
    """
    if value == 0:
        return "0"
    return np.format_float_positional(
        float(value), precision=6, unique=False, fractional=abs(value) >= 1, trim="-"
    )


def is_finite_number(value: Any) -> bool:
    try:
        return math.isfinite(float(value))
    except (TypeError, ValueError):
        return False


def stable_hash(*parts: Any, length: int = 16) -> str:
    """
    Deterministic hex digest over the string form of the given parts
    """
    digest = hashlib.sha256()
    for part in parts:
        digest.update(str(part).encode("utf-8"))
        digest.update(b"\x1f")
    return digest.hexdigest()[:length]


def hash_files(paths: Iterable[str]) -> str:
    """SHA-256 over the contents of the given files, in the given order"""
    digest = hashlib.sha256()
    for path in paths:
        with open(path, "rb") as handle:
            for block in iter(lambda: handle.read(65536), b""):
                digest.update(block)
    return digest.hexdigest()


def estimate_tokens(text: str, chars_per_token: float = config.DEFAULT_CHARS_PER_TOKEN) -> int:
    """
    Estimate the token count of a prompt with a characters-per-token heuristic
    """
    if not text:
        return 0
    return int(math.ceil(len(text) / chars_per_token))


def truncate_text(text: str, max_chars: int) -> str:
    return text if len(text) <= max_chars else text[:max_chars]


def normalize_whitespace(text: Optional[str]) -> str:
    return " ".join((text or "").split())


class JsonLogFormatter(logging.Formatter):
    """
    One JSON object per log line

    Any fields passed through `extra=` are merged into the object.
    """

    def format(self, record: logging.LogRecord) -> str:
        payload = {
            "time": datetime.fromtimestamp(record.created, tz=pytz.UTC).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        for key, value in record.__dict__.items():
            if key not in _LOG_RECORD_FIELDS and not key.startswith("_"):
                payload[key] = value
        if record.exc_info:
            payload["exception"] = self.formatException(record.exc_info)
        return json.dumps(payload, default=str)


def configure_logging(level: str = "INFO", fmt: str = "json") -> None:
    """
    Configure the root logger for a CLI run

    Args:
        level: Logging level name
        fmt: "json" for line-delimited JSON, "text" for plain lines
    """
    handler = logging.StreamHandler()
    if fmt == "json":
        handler.setFormatter(JsonLogFormatter())
    else:
        handler.setFormatter(logging.Formatter("%(asctime)s - %(name)s - %(levelname)s - %(message)s"))

    root = logging.getLogger()
    for existing in list(root.handlers):
        root.removeHandler(existing)
    root.addHandler(handler)
    root.setLevel(level.upper())
