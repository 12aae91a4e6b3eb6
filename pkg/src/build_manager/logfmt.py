"""Build log file format: header, output section, trailer.

The compressed log is the one permanent record of a build; every field
of a Result must be recoverable from it. Layout (UTF-8, LF endings):

    === build_manager log v1
    name: nightly/17
    kind: nightly
    component.<name>: <revision-hash-or-"synced">
    started: 2025-01-01T00:00:00Z
    === output
    <raw merged process output>
    === end
    status: ok | failed | cancelled | timed_out | aborted
    finished: 2025-01-01T01:23:45Z

Finished logs are gzip-compressed at `<log_dir>/<kind>/<serial>.log.gz`;
while a build runs its log grows at `<kind>/<serial>.log.partial`.
"""

from __future__ import annotations

import gzip
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Mapping

from .clock import format_rfc3339, parse_rfc3339
from .core_model import (
    BuildConfig,
    JobName,
    ModelError,
    RepoRev,
    Result,
    ResultStatus,
    SyncedCopy,
)

MAGIC = "=== build_manager log v1"
OUTPUT_MARK = "=== output"
END_MARK = "=== end"

SYNCED_TOKEN = "synced"
COMPRESSED_SUFFIX = ".log.gz"
PARTIAL_SUFFIX = ".log.partial"


class MalformedHeader(ValueError):
    """The data does not start with a well-formed log header."""


def log_rel_path(name: JobName) -> str:
    return f"{name.kind_str}/{name.serial}{COMPRESSED_SUFFIX}"


def partial_rel_path(name: JobName) -> str:
    return f"{name.kind_str}/{name.serial}{PARTIAL_SUFFIX}"


def config_revision_tokens(config: BuildConfig) -> dict[str, str]:
    """Component revisions as they appear in the log: hash or "synced"."""
    tokens = {}
    for component, rev in config.components.items():
        if isinstance(rev, RepoRev):
            tokens[component] = rev.hash
        elif isinstance(rev, SyncedCopy):
            tokens[component] = SYNCED_TOKEN
        else:
            raise ModelError(f"component {component!r} has no concrete revision")
    return tokens


def render_header(name: JobName, component_revisions: Mapping[str, str],
                  started: datetime) -> str:
    lines = [MAGIC, f"name: {name}", f"kind: {name.kind_str}"]
    for component in sorted(component_revisions):
        lines.append(f"component.{component}: {component_revisions[component]}")
    lines.append(f"started: {format_rfc3339(started)}")
    lines.append(OUTPUT_MARK)
    return "\n".join(lines) + "\n"


def render_trailer(status: ResultStatus, finished: datetime) -> str:
    return f"{END_MARK}\nstatus: {status.value}\nfinished: {format_rfc3339(finished)}\n"


@dataclass(frozen=True)
class LogMeta:
    """Result-constituent metadata extracted from a log file."""

    name: JobName
    status: ResultStatus
    component_revisions: Mapping[str, str]
    started_at: datetime
    finished_at: datetime

    def to_result(self, log_ref: str) -> Result:
        return Result(
            name=self.name,
            status=self.status,
            component_revisions=dict(self.component_revisions),
            started_at=self.started_at,
            finished_at=self.finished_at,
            log_ref=log_ref,
        )


def _header_field(line: str, key: str) -> str:
    prefix = f"{key}: "
    if not line.startswith(prefix):
        raise MalformedHeader(f"expected {key!r} line, got {line!r}")
    return line[len(prefix):]


def parse_log_meta(data: bytes) -> LogMeta:
    """Extract build metadata from raw (uncompressed) log bytes.

    Tolerates arbitrary output between the header and the trailer. A log
    without a trailer (process crashed, service died) parses as aborted,
    with the start time standing in for the missing finish time.
    """
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedHeader(f"log is not UTF-8: {exc}") from None
    lines = text.split("\n")
    if not lines or lines[0] != MAGIC:
        raise MalformedHeader("missing log header magic")

    try:
        name = JobName.parse(_header_field(lines[1], "name"))
        kind = _header_field(lines[2], "kind")
    except (IndexError, ModelError) as exc:
        raise MalformedHeader(str(exc)) from None
    if kind != name.kind_str:
        raise MalformedHeader(f"kind {kind!r} does not match name {name}")

    component_revisions: dict[str, str] = {}
    index = 3
    while index < len(lines) and lines[index].startswith("component."):
        key, sep, value = lines[index].partition(": ")
        if not sep:
            raise MalformedHeader(f"bad component line: {lines[index]!r}")
        component_revisions[key[len("component."):]] = value
        index += 1
    if index >= len(lines):
        raise MalformedHeader("truncated header")
    try:
        started_at = parse_rfc3339(_header_field(lines[index], "started"))
    except ValueError as exc:
        raise MalformedHeader(str(exc)) from None
    index += 1
    if index >= len(lines) or lines[index] != OUTPUT_MARK:
        raise MalformedHeader("missing output marker")

    trailer = _parse_trailer(lines)
    if trailer is None:
        status, finished_at = ResultStatus.ABORTED, started_at
    else:
        status, finished_at = trailer
    return LogMeta(
        name=name,
        status=status,
        component_revisions=component_revisions,
        started_at=started_at,
        finished_at=finished_at,
    )


def _parse_trailer(lines: list[str]) -> tuple[ResultStatus, datetime] | None:
    # The trailer is strictly the last three lines (modulo a trailing
    # newline); output lines that merely look like markers cannot clash.
    tail = lines[:-1] if lines and lines[-1] == "" else lines
    if len(tail) < 3 or tail[-3] != END_MARK:
        return None
    try:
        status = ResultStatus(_header_field(tail[-2], "status"))
        finished = parse_rfc3339(_header_field(tail[-1], "finished"))
    except (ValueError, MalformedHeader):
        return None
    return status, finished


def compress_log(partial_path: Path, final_path: Path) -> None:
    """Turn a finished partial log into its permanent compressed form."""
    final_path.parent.mkdir(parents=True, exist_ok=True)
    with open(partial_path, "rb") as src, gzip.open(final_path, "wb") as dst:
        while chunk := src.read(1 << 16):
            dst.write(chunk)
    partial_path.unlink()


def read_compressed(path: Path) -> bytes:
    with gzip.open(path, "rb") as fh:
        return fh.read()
