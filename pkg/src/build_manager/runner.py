"""Job lifecycle orchestration.

Each runner cycle finalizes exited builds, escalates cancellation and
timeouts (interrupt, then kill after the grace period), and starts every
queued task whose host selection is feasible, walking it through the
pipeline: prepare sources, provision the host, spawn the supervised
build process with its log stream.

Failures confine themselves to the affected job (finalized as aborted,
admin notified); a cycle never aborts as a whole.
"""

from __future__ import annotations

import logging
import shlex
import shutil
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Mapping, Optional, Protocol, Sequence

from . import core_model, logfmt
from .clock import Clock, format_rfc3339
from .core_model import (
    BuildConfig,
    Cluster,
    Host,
    Job,
    JobName,
    JobStatus,
    Result,
    ResultStatus,
    Task,
    TimeoutStatus,
    kind_token,
)
from .executor import EnvRef, Executor, ExitOutcome, ProcessHandle, prepare_tree
from .logfmt import LogMeta, MalformedHeader, parse_log_meta  # noqa: F401  (public API)
from .poller import VcsAdapter
from .store import AlreadyClaimed, StaleSerial, Store

log = logging.getLogger(__name__)

DEFAULT_GRACE_PERIOD = 30.0


class Notifier(Protocol):
    """Admin notification hook, invoked on failed and aborted builds."""

    def notify(self, subject: str, body: str) -> None: ...


class FileNotifier:
    """Default hook: append notifications to a file."""

    def __init__(self, path: Path):
        self.path = Path(path)

    def notify(self, subject: str, body: str) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(f"=== {subject}\n{body.rstrip()}\n")


class CommandNotifier:
    """Run an external command per notification (subject as argument,
    body on stdin). Failures are logged, never fatal."""

    def __init__(self, command: str):
        self.command = command

    def notify(self, subject: str, body: str) -> None:
        try:
            subprocess.run(
                [*shlex.split(self.command), subject],
                input=body.encode(), capture_output=True, timeout=60,
            )
        except (OSError, subprocess.TimeoutExpired) as exc:
            log.warning("notification command failed: %s", exc)


@dataclass
class CycleReport:
    started: int = 0
    interrupted: int = 0
    killed: int = 0
    finalized: int = 0


def assemble_command(build_command: str, config: BuildConfig) -> list[str]:
    """The build invocation, run from the provisioned tree's root."""
    argv = shlex.split(build_command)
    for option in config.options:
        argv += ["-o", option]
    for excluded in config.exclude_sessions:
        argv += ["-x", excluded]
    argv += list(config.sessions)
    return argv


@dataclass
class _ActiveJob:
    job: Job
    env: Optional[EnvRef]
    handle: ProcessHandle
    sink: BinaryIO
    partial_path: Path
    escalation: Optional[ResultStatus] = None
    killed: bool = False


class Runner:
    """Drives all running jobs; one instance owns the lifecycle state."""

    def __init__(self, store: Store, hosts: Sequence[Host],
                 executors: Mapping[str, Executor], adapter: VcsAdapter,
                 clock: Clock, *, build_command: str, base_component: str,
                 work_dir: Path, notifier: Notifier,
                 grace_period: float = DEFAULT_GRACE_PERIOD):
        self.store = store
        self.hosts = list(hosts)
        self.executors = dict(executors)
        self.adapter = adapter
        self.clock = clock
        self.build_command = build_command
        self.base_component = base_component
        self.work_dir = Path(work_dir)
        self.notifier = notifier
        self.grace_period = grace_period
        self._active: dict[JobName, _ActiveJob] = {}

    # -- the cycle ---------------------------------------------------------

    def cycle(self) -> CycleReport:
        report = CycleReport()
        self._finalize_exited(report)
        self._escalate(report)
        self._start_feasible(report)
        return report

    def _finalize_exited(self, report: CycleReport) -> None:
        for active in list(self._active.values()):
            outcome = active.handle.poll()
            if outcome is None:
                continue
            try:
                self.finalize_job(active, outcome)
                report.finalized += 1
            except Exception as exc:
                # leave the job un-finalized for operator attention
                log.exception("finalize of %s failed", active.job.name)
                self._notify(f"build {active.job.name} finalize failed", str(exc))
                self._active.pop(active.job.name, None)

    def _escalate(self, report: CycleReport) -> None:
        now = self.clock.now()
        rows = {job.name: job for job in self.store.running_jobs()}
        for name, active in self._active.items():
            row = rows.get(name)
            if row is None:
                continue
            if row.status is JobStatus.RUNNING:
                cause = None
                if row.cancel_requested:
                    cause = ResultStatus.CANCELLED
                elif core_model.timeout_status(row, now) is TimeoutStatus.TIMED_OUT:
                    cause = ResultStatus.TIMED_OUT
                if cause is not None:
                    active.escalation = cause
                    active.handle.interrupt()
                    self.store.mark_interrupting(name, now)
                    report.interrupted += 1
            elif row.status is JobStatus.INTERRUPTING and not active.killed:
                since = row.interrupting_since or row.started_at
                if (now - since).total_seconds() > self.grace_period:
                    active.handle.kill()
                    active.killed = True
                    report.killed += 1

    def _start_feasible(self, report: CycleReport) -> None:
        while True:
            queue = self.store.list_queue()
            running = self.store.running_jobs()
            task = core_model.select_next(queue, self.hosts, running)
            if task is None:
                return
            kind = kind_token(task.config.kind)
            name = core_model.assign_name(
                task.config.kind, self.store.max_serial(kind))
            hosts = self._pick_hosts(task.config, running)
            try:
                job = self.store.claim_task(task.uuid, name, hosts)
            except StaleSerial:
                continue  # someone took the serial; re-read and retry
            except AlreadyClaimed:
                continue  # task vanished (cancelled or claimed elsewhere)
            try:
                self.start_pipeline(task, job)
                report.started += 1
            except Exception as exc:
                log.exception("pipeline for %s failed", job.name)
                try:
                    self._abort_job(job, f"pipeline failed: {exc}")
                except Exception as abort_exc:
                    # leave the job for operator attention; the cycle goes on
                    log.exception("could not abort %s", job.name)
                    self._notify(f"build {job.name} abort failed", str(abort_exc))

    def _pick_hosts(self, config: BuildConfig, running: Sequence[Job]) -> list[str]:
        if isinstance(config.host_spec, Cluster):
            return [h.name for h in self.hosts if h.cluster_member]
        free = core_model.free_single_hosts(config.host_spec, self.hosts, running)
        return [free[0].name]

    # -- pipeline ------------------------------------------------------------

    def _partial_path(self, name: JobName) -> Path:
        return Path(self.store.config.log_dir) / logfmt.partial_rel_path(name)

    def start_pipeline(self, task: Task, job: Job) -> Job:
        """Prepare, provision and spawn; registers the live job."""
        name = job.name
        tree_dest = self.work_dir / name.kind_str / str(name.serial)
        env: Optional[EnvRef] = None
        sink: Optional[BinaryIO] = None
        try:
            tree = prepare_tree(
                self.adapter, job.config, self.base_component,
                Path(self.store.config.sync_dir), tree_dest,
                description=task.description or None,
            )
            executor = self.executors[job.hosts[0]]
            env = executor.provision(tree, name)

            partial = self._partial_path(name)
            partial.parent.mkdir(parents=True, exist_ok=True)
            sink = open(partial, "wb")
            header = logfmt.render_header(
                name, logfmt.config_revision_tokens(job.config), job.started_at)
            sink.write(header.encode())
            if task.description:
                sink.write(task.description.encode() + b"\n")
            sink.flush()

            command = assemble_command(self.build_command, job.config)
            handle = executor.spawn(env, command, sink)
        except Exception:
            if sink is not None:
                sink.close()
            if env is not None:
                self._teardown(env)
            raise
        finally:
            shutil.rmtree(tree_dest, ignore_errors=True)
        self._active[name] = _ActiveJob(
            job=job, env=env, handle=handle, sink=sink,
            partial_path=self._partial_path(name),
        )
        return job

    def finalize_job(self, active: _ActiveJob, outcome: ExitOutcome) -> Result:
        """Close out a build whose process exited.

        The escalation cause (cancelled / timed out) takes precedence over
        the exit code; a clean exit is ok, anything else failed."""
        job = active.job
        if active.escalation is not None:
            status = active.escalation
        elif outcome.code == 0:
            status = ResultStatus.OK
        else:
            status = ResultStatus.FAILED
        finished_at = max(self.clock.now(), job.started_at)

        active.sink.write(logfmt.render_trailer(status, finished_at).encode())
        active.sink.close()
        result = self._persist(job, status, finished_at, active.partial_path)
        if active.env is not None:
            self._teardown(active.env)
        self._active.pop(job.name, None)
        if status in (ResultStatus.FAILED, ResultStatus.ABORTED):
            self._notify_result(result)
        return result

    def _abort_job(self, job: Job, error_text: str) -> Result:
        """Finalize a job whose pipeline failed before or at spawn."""
        finished_at = max(self.clock.now(), job.started_at)
        partial = self._partial_path(job.name)
        partial.parent.mkdir(parents=True, exist_ok=True)
        with open(partial, "wb") as fh:
            header = logfmt.render_header(
                job.name, logfmt.config_revision_tokens(job.config), job.started_at)
            fh.write(header.encode())
            fh.write(error_text.rstrip().encode() + b"\n")
            fh.write(logfmt.render_trailer(ResultStatus.ABORTED, finished_at).encode())
        result = self._persist(job, ResultStatus.ABORTED, finished_at, partial)
        self._active.pop(job.name, None)
        self._notify_result(result)
        return result

    def _persist(self, job: Job, status: ResultStatus, finished_at,
                 partial: Path) -> Result:
        log_ref = logfmt.log_rel_path(job.name)
        final_path = Path(self.store.config.log_dir) / log_ref
        logfmt.compress_log(partial, final_path)
        result = Result(
            name=job.name,
            status=status,
            component_revisions=logfmt.config_revision_tokens(job.config),
            started_at=job.started_at,
            finished_at=finished_at,
            log_ref=log_ref,
        )
        self.store.finalize(job.name, result)
        return result

    def _teardown(self, env: EnvRef) -> None:
        try:
            self.executors[env.host_name].teardown(env)
        except Exception as exc:
            log.warning("teardown of %s failed: %s", env.root, exc)

    def _notify_result(self, result: Result) -> None:
        body = (f"status: {result.status.value}\n"
                f"started: {format_rfc3339(result.started_at)}\n"
                f"finished: {format_rfc3339(result.finished_at)}\n"
                f"log: {result.log_ref}")
        self._notify(f"build {result.name} {result.status.value}", body)

    def _notify(self, subject: str, body: str) -> None:
        try:
            self.notifier.notify(subject, body)
        except Exception as exc:
            log.warning("notification failed: %s", exc)
