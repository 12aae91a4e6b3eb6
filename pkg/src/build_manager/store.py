"""Transactional shared state for all service loops and external CLI clients.

Backed by SQLite (WAL mode) so several OS processes can share one database
file; every public operation runs as a single IMMEDIATE transaction, which
serializes writers and gives the claim/serial operations the single-writer
discipline they need. The database holds only metadata: the compressed
build logs are the real durable record, and `rebuild_from_logs` can
reconstruct every Result row from them alone.
"""

from __future__ import annotations

import fcntl
import json
import sqlite3
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

from . import logfmt
from .clock import Clock, SystemClock, format_rfc3339, parse_rfc3339
from .core_model import (
    BuildConfig,
    Cluster,
    Job,
    JobName,
    JobStatus,
    Result,
    ResultStatus,
    SingleMachine,
    Task,
    task_from_dict,
    task_to_dict,
)

SCHEMA_VERSION = 1

_SCHEMA = """
CREATE TABLE IF NOT EXISTS meta (
    key   TEXT PRIMARY KEY,
    value TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS tasks (
    uuid         TEXT PRIMARY KEY,
    submitted_at TEXT NOT NULL,
    data         TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS jobs (
    kind               TEXT NOT NULL,
    serial             INTEGER NOT NULL,
    task_uuid          TEXT NOT NULL UNIQUE,
    config             TEXT NOT NULL,
    hosts              TEXT NOT NULL,
    started_at         TEXT NOT NULL,
    status             TEXT NOT NULL,
    interrupting_since TEXT,
    cancel_requested   INTEGER NOT NULL DEFAULT 0,
    PRIMARY KEY (kind, serial)
);
CREATE TABLE IF NOT EXISTS serials (
    kind       TEXT PRIMARY KEY,
    max_serial INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS results (
    kind                TEXT NOT NULL,
    serial              INTEGER NOT NULL,
    status              TEXT NOT NULL,
    component_revisions TEXT NOT NULL,
    started_at          TEXT NOT NULL,
    finished_at         TEXT NOT NULL,
    log_ref             TEXT NOT NULL,
    PRIMARY KEY (kind, serial)
);
CREATE TABLE IF NOT EXISTS seen_revisions (
    component TEXT PRIMARY KEY,
    revision  TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS schedule_state (
    job        TEXT PRIMARY KEY,
    last_fired TEXT NOT NULL
);
"""


class StoreError(Exception):
    """Base class for store failures."""


class ConnectionFailed(StoreError):
    """Backend unreachable; retryable."""


class SchemaMismatch(StoreError):
    """Incompatible schema version; discard and rebuild from logs."""


class DuplicateUuid(StoreError):
    pass


class AlreadyClaimed(StoreError):
    """The task is gone from the queue (claimed by someone else or unknown)."""


class StaleSerial(StoreError):
    """Another job took this serial; re-read the max serial and retry."""


class AlreadyFinalized(StoreError):
    pass


class MissingLog(StoreError):
    """Refusing to finalize: the compressed log is not on disk."""


class LogDirMissing(StoreError):
    pass


class LockHeld(StoreError):
    """Another process holds the service lock on this store."""


class CancelOutcome(Enum):
    DEQUEUED = "dequeued"
    CANCEL_REQUESTED = "cancel_requested"
    NOT_FOUND = "not_found"


@dataclass(frozen=True)
class StoreConfig:
    database: Path
    log_dir: Path
    sync_dir: Path


@dataclass(frozen=True)
class RebuildReport:
    results_recovered: int
    files_skipped: int


@dataclass(frozen=True)
class SystemState:
    """Consistent point-in-time view of everything the pages render."""

    queue: list[Task]
    running: list[Job]
    results: list[Result]
    seen: dict[str, str]
    occupancy: dict[str, int] = field(default_factory=dict)
    cluster_job: Optional[JobName] = None


class ServiceLock:
    """Advisory cross-process lock; held by a running service.

    Prevents `rebuild-db` from discarding a live schema. flock-based, so
    it disappears with the process even after a crash.
    """

    def __init__(self, database: Path):
        self.path = Path(f"{database}.lock")
        self._fh = None

    def acquire(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fh = open(self.path, "w")
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError:
            fh.close()
            raise LockHeld(f"service lock is held: {self.path}") from None
        self._fh = fh

    def release(self) -> None:
        if self._fh is not None:
            fcntl.flock(self._fh, fcntl.LOCK_UN)
            self._fh.close()
            self._fh = None

    def __enter__(self) -> "ServiceLock":
        self.acquire()
        return self

    def __exit__(self, *exc) -> None:
        self.release()


class Store:
    """Handle over the shared database. Safe to share across threads;
    open one handle per process (or per thread under heavy contention).
    """

    def __init__(self, config: StoreConfig, clock: Clock | None = None):
        self.config = config
        self.clock = clock or SystemClock()
        self._lock = threading.RLock()
        self._conn = self._connect()
        self._init_schema()

    # -- connection and transactions ------------------------------------

    def _connect(self) -> sqlite3.Connection:
        database = Path(self.config.database)
        try:
            database.parent.mkdir(parents=True, exist_ok=True)
            for directory in (self.config.log_dir, self.config.sync_dir):
                Path(directory).mkdir(parents=True, exist_ok=True)
            conn = sqlite3.connect(
                database, timeout=30.0, check_same_thread=False,
                isolation_level=None,
            )
            conn.execute("PRAGMA journal_mode=WAL")
            conn.execute("PRAGMA foreign_keys=ON")
            return conn
        except (OSError, sqlite3.Error) as exc:
            raise ConnectionFailed(f"cannot open store at {database}: {exc}") from exc

    def _init_schema(self) -> None:
        # executescript() would commit the enclosing transaction, so the
        # statements run one by one inside a single IMMEDIATE transaction
        # (concurrent opens must serialize on the version row).
        with self._transaction() as cur:
            for statement in _SCHEMA.split(";"):
                if statement.strip():
                    cur.execute(statement)
            cur.execute(
                "INSERT OR IGNORE INTO meta (key, value)"
                " VALUES ('schema_version', ?)",
                (str(SCHEMA_VERSION),),
            )
            row = cur.execute(
                "SELECT value FROM meta WHERE key = 'schema_version'"
            ).fetchone()
            if int(row[0]) != SCHEMA_VERSION:
                raise SchemaMismatch(
                    f"store has schema v{row[0]}, this build expects v{SCHEMA_VERSION}; "
                    f"discard the database and run `build-manager rebuild-db`"
                )

    @contextmanager
    def _transaction(self) -> Iterator[sqlite3.Cursor]:
        with self._lock:
            cur = self._conn.cursor()
            cur.execute("BEGIN IMMEDIATE")
            try:
                yield cur
            except BaseException:
                self._conn.rollback()
                raise
            else:
                self._conn.commit()
            finally:
                cur.close()

    @classmethod
    def open(cls, config: StoreConfig, clock: Clock | None = None) -> "Store":
        return cls(config, clock)

    def close(self) -> None:
        with self._lock:
            self._conn.close()

    def reset_schema(self) -> None:
        """Discard everything; the log archive stays untouched on disk."""
        with self._transaction() as cur:
            for table in ("meta", "tasks", "jobs", "serials", "results",
                          "seen_revisions", "schedule_state"):
                cur.execute(f"DROP TABLE IF EXISTS {table}")
        self._init_schema()

    # -- task queue ------------------------------------------------------

    def enqueue_task(self, task: Task) -> None:
        with self._transaction() as cur:
            self._insert_task(cur, task)

    def _insert_task(self, cur: sqlite3.Cursor, task: Task) -> None:
        try:
            cur.execute(
                "INSERT INTO tasks (uuid, submitted_at, data) VALUES (?, ?, ?)",
                (task.uuid, format_rfc3339(task.submitted_at),
                 json.dumps(task_to_dict(task))),
            )
        except sqlite3.IntegrityError:
            raise DuplicateUuid(f"task {task.uuid} already enqueued") from None

    def list_queue(self) -> list[Task]:
        with self._transaction() as cur:
            return self._queue(cur)

    def _queue(self, cur: sqlite3.Cursor) -> list[Task]:
        rows = cur.execute(
            "SELECT data FROM tasks ORDER BY submitted_at, uuid"
        ).fetchall()
        return [task_from_dict(json.loads(row[0])) for row in rows]

    def get_task(self, uuid: str) -> Optional[Task]:
        with self._transaction() as cur:
            row = cur.execute(
                "SELECT data FROM tasks WHERE uuid = ?", (uuid,)
            ).fetchone()
        return task_from_dict(json.loads(row[0])) if row else None

    # -- jobs --------------------------------------------------------------

    def max_serial(self, kind_str: str) -> int:
        with self._transaction() as cur:
            return self._max_serial(cur, kind_str)

    def _max_serial(self, cur: sqlite3.Cursor, kind_str: str) -> int:
        row = cur.execute(
            "SELECT max_serial FROM serials WHERE kind = ?", (kind_str,)
        ).fetchone()
        return row[0] if row else 0

    def claim_task(self, task_uuid: str, name: JobName,
                   hosts: Sequence[str]) -> Job:
        """Atomically turn a queued task into a running job.

        Exactly one of several racing claimers succeeds; the serial must
        still be the next free one for the kind, so names stay gap-free.
        """
        started_at = self.clock.now()
        with self._transaction() as cur:
            row = cur.execute(
                "SELECT data FROM tasks WHERE uuid = ?", (task_uuid,)
            ).fetchone()
            if row is None:
                raise AlreadyClaimed(f"task {task_uuid} is not queued")
            if name.serial != self._max_serial(cur, name.kind_str) + 1:
                raise StaleSerial(f"serial {name.serial} is stale for {name.kind_str}")
            task = task_from_dict(json.loads(row[0]))
            job = Job(
                name=name,
                task_uuid=task_uuid,
                config=task.config,
                hosts=tuple(hosts),
                started_at=started_at,
            )
            cur.execute("DELETE FROM tasks WHERE uuid = ?", (task_uuid,))
            cur.execute(
                "INSERT INTO jobs (kind, serial, task_uuid, config, hosts,"
                " started_at, status, cancel_requested)"
                " VALUES (?, ?, ?, ?, ?, ?, ?, 0)",
                (name.kind_str, name.serial, task_uuid,
                 json.dumps(task.config.to_dict()), json.dumps(list(hosts)),
                 format_rfc3339(started_at), JobStatus.RUNNING.value),
            )
            cur.execute(
                "INSERT INTO serials (kind, max_serial) VALUES (?, ?)"
                " ON CONFLICT(kind) DO UPDATE SET max_serial = excluded.max_serial",
                (name.kind_str, name.serial),
            )
        return job

    def _job_from_row(self, row: tuple) -> Job:
        (kind, serial, task_uuid, config, hosts, started_at, status,
         interrupting_since, cancel_requested) = row
        return Job(
            name=JobName(kind, serial),
            task_uuid=task_uuid,
            config=BuildConfig.from_dict(json.loads(config)),
            hosts=tuple(json.loads(hosts)),
            started_at=parse_rfc3339(started_at),
            status=JobStatus(status),
            interrupting_since=(
                parse_rfc3339(interrupting_since) if interrupting_since else None
            ),
            cancel_requested=bool(cancel_requested),
        )

    _JOB_COLS = ("kind, serial, task_uuid, config, hosts, started_at, status,"
                 " interrupting_since, cancel_requested")

    def running_jobs(self) -> list[Job]:
        with self._transaction() as cur:
            return self._running(cur)

    def _running(self, cur: sqlite3.Cursor) -> list[Job]:
        rows = cur.execute(
            f"SELECT {self._JOB_COLS} FROM jobs WHERE status != ?"
            " ORDER BY started_at, kind, serial",
            (JobStatus.FINISHED.value,),
        ).fetchall()
        return [self._job_from_row(row) for row in rows]

    def get_job(self, name: JobName) -> Optional[Job]:
        with self._transaction() as cur:
            row = cur.execute(
                f"SELECT {self._JOB_COLS} FROM jobs WHERE kind = ? AND serial = ?",
                (name.kind_str, name.serial),
            ).fetchone()
        return self._job_from_row(row) if row else None

    def mark_interrupting(self, name: JobName, since: datetime) -> None:
        with self._transaction() as cur:
            cur.execute(
                "UPDATE jobs SET status = ?, interrupting_since = ?"
                " WHERE kind = ? AND serial = ? AND status = ?",
                (JobStatus.INTERRUPTING.value, format_rfc3339(since),
                 name.kind_str, name.serial, JobStatus.RUNNING.value),
            )

    def request_cancel(self, uuid: str) -> CancelOutcome:
        """Dequeue a task, or flag a running job for cancellation."""
        with self._transaction() as cur:
            deleted = cur.execute(
                "DELETE FROM tasks WHERE uuid = ?", (uuid,)
            ).rowcount
            if deleted:
                return CancelOutcome.DEQUEUED
            updated = cur.execute(
                "UPDATE jobs SET cancel_requested = 1"
                " WHERE task_uuid = ? AND status != ?",
                (uuid, JobStatus.FINISHED.value),
            ).rowcount
            if updated:
                return CancelOutcome.CANCEL_REQUESTED
            return CancelOutcome.NOT_FOUND

    # -- results -----------------------------------------------------------

    def finalize(self, name: JobName, result: Result) -> None:
        """Persist a finished build. The compressed log must already exist,
        otherwise results would no longer be reconstructible."""
        log_path = Path(self.config.log_dir) / result.log_ref
        if not log_path.is_file():
            raise MissingLog(f"no log at {log_path}")
        with self._transaction() as cur:
            row = cur.execute(
                "SELECT status FROM jobs WHERE kind = ? AND serial = ?",
                (name.kind_str, name.serial),
            ).fetchone()
            if row is None:
                raise StoreError(f"no job named {name}")
            if row[0] == JobStatus.FINISHED.value:
                raise AlreadyFinalized(f"{name} is already finalized")
            cur.execute(
                "UPDATE jobs SET status = ? WHERE kind = ? AND serial = ?",
                (JobStatus.FINISHED.value, name.kind_str, name.serial),
            )
            self._insert_result(cur, result)

    def _insert_result(self, cur: sqlite3.Cursor, result: Result) -> None:
        cur.execute(
            "INSERT OR REPLACE INTO results (kind, serial, status,"
            " component_revisions, started_at, finished_at, log_ref)"
            " VALUES (?, ?, ?, ?, ?, ?, ?)",
            (result.name.kind_str, result.name.serial, result.status.value,
             json.dumps(dict(sorted(result.component_revisions.items()))),
             format_rfc3339(result.started_at), format_rfc3339(result.finished_at),
             result.log_ref),
        )

    @staticmethod
    def _result_from_row(row: tuple) -> Result:
        kind, serial, status, revisions, started_at, finished_at, log_ref = row
        return Result(
            name=JobName(kind, serial),
            status=ResultStatus(status),
            component_revisions=json.loads(revisions),
            started_at=parse_rfc3339(started_at),
            finished_at=parse_rfc3339(finished_at),
            log_ref=log_ref,
        )

    _RESULT_COLS = ("kind, serial, status, component_revisions, started_at,"
                    " finished_at, log_ref")

    def get_result(self, name: JobName) -> Optional[Result]:
        with self._transaction() as cur:
            row = cur.execute(
                f"SELECT {self._RESULT_COLS} FROM results WHERE kind = ? AND serial = ?",
                (name.kind_str, name.serial),
            ).fetchone()
        return self._result_from_row(row) if row else None

    def list_results(self, kind_str: str | None = None) -> list[Result]:
        """All results, newest finish first."""
        with self._transaction() as cur:
            return self._results(cur, kind_str)

    def _results(self, cur: sqlite3.Cursor, kind_str: str | None = None) -> list[Result]:
        query = f"SELECT {self._RESULT_COLS} FROM results"
        args: tuple = ()
        if kind_str is not None:
            query += " WHERE kind = ?"
            args = (kind_str,)
        query += " ORDER BY finished_at DESC, kind, serial DESC"
        return [self._result_from_row(row) for row in cur.execute(query, args)]

    # -- private-URL lookup --------------------------------------------------

    def find_by_uuid(self, uuid: str) -> Union[Task, Job, Result, None]:
        """Resolve a task uuid to whatever it currently names.

        Queued -> Task, started -> Job, finished -> Result. After the
        database is rebuilt from logs the mapping is gone by design.
        """
        with self._transaction() as cur:
            row = cur.execute(
                "SELECT data FROM tasks WHERE uuid = ?", (uuid,)
            ).fetchone()
            if row:
                return task_from_dict(json.loads(row[0]))
            row = cur.execute(
                f"SELECT {self._JOB_COLS} FROM jobs WHERE task_uuid = ?", (uuid,)
            ).fetchone()
            if row is None:
                return None
            job = self._job_from_row(row)
            if job.status is not JobStatus.FINISHED:
                return job
            result_row = cur.execute(
                f"SELECT {self._RESULT_COLS} FROM results WHERE kind = ? AND serial = ?",
                (job.name.kind_str, job.name.serial),
            ).fetchone()
            return self._result_from_row(result_row) if result_row else job

    # -- poller / timer bookkeeping -------------------------------------------

    def seen_revisions(self) -> dict[str, str]:
        with self._transaction() as cur:
            rows = cur.execute("SELECT component, revision FROM seen_revisions")
            return dict(rows.fetchall())

    def record_poll(self, component: str, revision: str,
                    new_tasks: Sequence[Task],
                    repins: Sequence[Task] = ()) -> None:
        """Enqueue poll-triggered tasks and advance the seen revision, as
        one transaction: a failed enqueue must not lose the trigger."""
        with self._transaction() as cur:
            for task in new_tasks:
                self._insert_task(cur, task)
            for task in repins:
                cur.execute(
                    "UPDATE tasks SET data = ? WHERE uuid = ?",
                    (json.dumps(task_to_dict(task)), task.uuid),
                )
            cur.execute(
                "INSERT INTO seen_revisions (component, revision) VALUES (?, ?)"
                " ON CONFLICT(component) DO UPDATE SET revision = excluded.revision",
                (component, revision),
            )

    def schedule_state(self) -> dict[str, datetime]:
        with self._transaction() as cur:
            rows = cur.execute("SELECT job, last_fired FROM schedule_state")
            return {job: parse_rfc3339(at) for job, at in rows.fetchall()}

    def record_fire(self, job: str, instant: datetime, task: Task) -> None:
        """Enqueue a scheduled task and advance last_fired atomically.
        last_fired never decreases."""
        with self._transaction() as cur:
            self._insert_task(cur, task)
            fired = format_rfc3339(instant)
            cur.execute(
                "INSERT INTO schedule_state (job, last_fired) VALUES (?, ?)"
                " ON CONFLICT(job) DO UPDATE SET last_fired = excluded.last_fired"
                " WHERE excluded.last_fired > schedule_state.last_fired",
                (job, fired),
            )

    # -- snapshot and rebuild ---------------------------------------------------

    def snapshot(self) -> SystemState:
        with self._transaction() as cur:
            queue = self._queue(cur)
            running = self._running(cur)
            results = self._results(cur)
            seen = dict(cur.execute(
                "SELECT component, revision FROM seen_revisions"
            ).fetchall())
        occupancy: dict[str, int] = {}
        cluster_job = None
        for job in running:
            if isinstance(job.config.host_spec, SingleMachine):
                occupancy[job.hosts[0]] = occupancy.get(job.hosts[0], 0) + 1
            elif isinstance(job.config.host_spec, Cluster):
                cluster_job = job.name
        return SystemState(
            queue=queue, running=running, results=results, seen=seen,
            occupancy=occupancy, cluster_job=cluster_job,
        )

    def rebuild_from_logs(self, log_dir: Path | None = None) -> RebuildReport:
        """Reconstruct every Result from the compressed log archive.

        Unparseable files are skipped with a count, not fatal; partial
        logs of unfinished builds are ignored. Per-kind max serials are
        restored so future job names continue gap-free.
        """
        log_dir = Path(log_dir or self.config.log_dir)
        if not log_dir.is_dir():
            raise LogDirMissing(f"log directory missing: {log_dir}")
        recovered = 0
        skipped = 0
        max_serials: dict[str, int] = {}
        with self._transaction() as cur:
            for path in sorted(log_dir.rglob(f"*{logfmt.COMPRESSED_SUFFIX}")):
                try:
                    meta = logfmt.parse_log_meta(logfmt.read_compressed(path))
                except (OSError, EOFError, logfmt.MalformedHeader):
                    skipped += 1
                    continue
                log_ref = path.relative_to(log_dir).as_posix()
                self._insert_result(cur, meta.to_result(log_ref))
                kind = meta.name.kind_str
                max_serials[kind] = max(max_serials.get(kind, 0), meta.name.serial)
                recovered += 1
            for kind, serial in max_serials.items():
                cur.execute(
                    "INSERT INTO serials (kind, max_serial) VALUES (?, ?)"
                    " ON CONFLICT(kind) DO UPDATE SET max_serial = excluded.max_serial"
                    " WHERE excluded.max_serial > serials.max_serial",
                    (kind, serial),
                )
        return RebuildReport(results_recovered=recovered, files_skipped=skipped)
