"""Injectable clock plus the UTC timestamp conventions used everywhere.

All timestamps in the system are timezone-aware UTC datetimes, truncated
to whole seconds wherever they may end up in a log file (log contents
must round-trip exactly through the text format).
"""

from __future__ import annotations

from datetime import datetime, timedelta, timezone
from typing import Protocol


class Clock(Protocol):
    def now(self) -> datetime: ...


class SystemClock:
    """Wall clock; always UTC, whole seconds."""

    def now(self) -> datetime:
        return datetime.now(timezone.utc).replace(microsecond=0)


class SimClock:
    """Manually advanced clock for tests and simulations."""

    def __init__(self, start: datetime | None = None):
        self._now = start or datetime(2025, 1, 1, tzinfo=timezone.utc)

    def now(self) -> datetime:
        return self._now

    def advance(self, seconds: float) -> datetime:
        self._now += timedelta(seconds=seconds)
        return self._now

    def set(self, at: datetime) -> None:
        if at < self._now:
            raise ValueError("clock may not move backwards")
        self._now = at


def format_rfc3339(at: datetime) -> str:
    """Render as `2025-01-01T00:00:00Z` (second precision, UTC)."""
    return at.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_rfc3339(text: str) -> datetime:
    at = datetime.strptime(text.strip(), "%Y-%m-%dT%H:%M:%SZ")
    return at.replace(tzinfo=timezone.utc)
