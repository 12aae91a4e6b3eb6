"""Pure domain types and decision logic shared by every other module.

Everything in here is immutable data plus side-effect-free functions:
feasibility of a build against the host pool, picking the next task,
assigning public job names, and timeout checks. All coordination and
I/O live elsewhere (mainly in `store`).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from datetime import datetime
from enum import Enum, IntEnum
from fnmatch import fnmatchcase
from typing import Mapping, Optional, Sequence, Union

from .clock import format_rfc3339, parse_rfc3339

NAME_RE = re.compile(r"^[A-Za-z0-9_.-]+$")
HEX_REV_RE = re.compile(r"^[0-9a-f]{12,40}$")

#: Kind token reserved for user-submitted builds; CI jobs may not use it.
USER_KIND = "user"


class ModelError(ValueError):
    """Invalid domain value (bad identifier, inconsistent config, ...)."""


def check_identifier(value: str, what: str) -> str:
    if not value or not NAME_RE.match(value):
        raise ModelError(f"{what} must match [A-Za-z0-9_.-]+, got {value!r}")
    return value


# ---------------------------------------------------------------------------
# Revisions

@dataclass(frozen=True)
class RepoRev:
    """A pinned repository revision (12-40 lowercase hex chars)."""

    hash: str

    def __post_init__(self) -> None:
        if not HEX_REV_RE.match(self.hash):
            raise ModelError(f"not a revision hash: {self.hash!r}")


@dataclass(frozen=True)
class SyncedCopy:
    """An already-uploaded working tree under the shared sync root."""

    copy_id: str

    def __post_init__(self) -> None:
        check_identifier(self.copy_id, "synced copy id")


@dataclass(frozen=True)
class Tip:
    """Symbolic "current tip"; only valid inside CI job templates.

    Resolved to a concrete RepoRev when a task is instantiated; a config
    carrying a Tip must never reach the executor.
    """


Revision = Union[RepoRev, SyncedCopy, Tip]


def revision_to_token(rev: Revision) -> str:
    if isinstance(rev, RepoRev):
        return f"rev:{rev.hash}"
    if isinstance(rev, SyncedCopy):
        return f"synced:{rev.copy_id}"
    return "tip"


def revision_from_token(token: str) -> Revision:
    if token == "tip":
        return Tip()
    scheme, _, rest = token.partition(":")
    if scheme == "rev":
        return RepoRev(rest)
    if scheme == "synced":
        return SyncedCopy(rest)
    raise ModelError(f"unknown revision token: {token!r}")


# ---------------------------------------------------------------------------
# Build kinds and job names

@dataclass(frozen=True)
class UserBuild:
    """Kind of user-submitted builds."""


@dataclass(frozen=True)
class CiJob:
    """Kind of builds produced by the named CI job."""

    name: str

    def __post_init__(self) -> None:
        check_identifier(self.name, "CI job name")
        if self.name == USER_KIND:
            raise ModelError(f"CI job name {USER_KIND!r} is reserved")


BuildKind = Union[UserBuild, CiJob]


def kind_token(kind: BuildKind) -> str:
    """The kind's textual form, as used in job names, URLs and logs."""
    return USER_KIND if isinstance(kind, UserBuild) else kind.name


def kind_from_token(token: str) -> BuildKind:
    if token == USER_KIND:
        return UserBuild()
    return CiJob(token)


@dataclass(frozen=True, order=True)
class JobName:
    """Public build name `<kind>/<serial>`; assigned when the job starts."""

    kind_str: str
    serial: int

    def __post_init__(self) -> None:
        check_identifier(self.kind_str, "job kind")
        if self.serial < 1:
            raise ModelError(f"serial must be positive, got {self.serial}")

    @property
    def kind(self) -> BuildKind:
        return kind_from_token(self.kind_str)

    def __str__(self) -> str:
        return f"{self.kind_str}/{self.serial}"

    @classmethod
    def parse(cls, text: str) -> "JobName":
        kind_str, sep, serial = text.partition("/")
        if not sep or not serial.isdigit():
            raise ModelError(f"not a job name: {text!r}")
        return cls(kind_str, int(serial))


# ---------------------------------------------------------------------------
# Host selection

@dataclass(frozen=True)
class SingleMachine:
    """Run on one host; `host_filter` is an optional glob on host names."""

    host_filter: Optional[str] = None


@dataclass(frozen=True)
class Cluster:
    """Run across all cluster-capable hosts; at most one at a time."""


HostSpec = Union[SingleMachine, Cluster]


class Priority(IntEnum):
    LOW = 0
    NORMAL = 1
    HIGH = 2

    @classmethod
    def parse(cls, text: str) -> "Priority":
        try:
            return cls[text.upper()]
        except KeyError:
            raise ModelError(f"unknown priority: {text!r}") from None

    @property
    def token(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class Host:
    """A configured build machine.

    `single_slots` bounds parallel single-machine builds on the host; a
    host with no slots and no cluster membership can never be selected.
    """

    name: str
    cluster_member: bool = False
    single_slots: int = 1
    address: str = ""

    def __post_init__(self) -> None:
        check_identifier(self.name, "host name")
        if self.single_slots < 0:
            raise ModelError("single_slots must be >= 0")


# ---------------------------------------------------------------------------
# Build configuration, tasks, jobs, results

@dataclass(frozen=True)
class BuildConfig:
    """Everything needed to run one build."""

    kind: BuildKind
    components: Mapping[str, Revision]
    sessions: tuple[str, ...] = ()
    exclude_sessions: tuple[str, ...] = ()
    options: tuple[str, ...] = ()
    host_spec: HostSpec = field(default_factory=SingleMachine)
    priority: Priority = Priority.NORMAL
    timeout: float = 3600.0

    def __post_init__(self) -> None:
        if not self.components:
            raise ModelError("config needs at least one component")
        for name in self.components:
            check_identifier(name, "component name")
        if self.timeout <= 0:
            raise ModelError("timeout must be > 0")
        overlap = set(self.sessions) & set(self.exclude_sessions)
        if overlap:
            raise ModelError(f"sessions both selected and excluded: {sorted(overlap)}")

    def require_base(self, base_component: str) -> None:
        if base_component not in self.components:
            raise ModelError(f"config lacks the base component {base_component!r}")

    def to_dict(self) -> dict:
        spec = self.host_spec
        return {
            "kind": kind_token(self.kind),
            "components": {n: revision_to_token(r) for n, r in sorted(self.components.items())},
            "sessions": list(self.sessions),
            "exclude_sessions": list(self.exclude_sessions),
            "options": list(self.options),
            "host_spec": (
                {"mode": "cluster"}
                if isinstance(spec, Cluster)
                else {"mode": "single", "host_filter": spec.host_filter}
            ),
            "priority": self.priority.token,
            "timeout": self.timeout,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "BuildConfig":
        spec_data = data["host_spec"]
        host_spec: HostSpec
        if spec_data["mode"] == "cluster":
            host_spec = Cluster()
        else:
            host_spec = SingleMachine(spec_data.get("host_filter"))
        return cls(
            kind=kind_from_token(data["kind"]),
            components={n: revision_from_token(t) for n, t in data["components"].items()},
            sessions=tuple(data.get("sessions", ())),
            exclude_sessions=tuple(data.get("exclude_sessions", ())),
            options=tuple(data.get("options", ())),
            host_spec=host_spec,
            priority=Priority.parse(data.get("priority", "normal")),
            timeout=float(data["timeout"]),
        )


def instantiate_template(template: BuildConfig, tips: Mapping[str, str]) -> BuildConfig:
    """Pin every symbolic Tip revision to the given concrete tips."""
    pinned = {}
    for name, rev in template.components.items():
        if isinstance(rev, Tip):
            if name not in tips:
                raise ModelError(f"no tip known for component {name!r}")
            rev = RepoRev(tips[name])
        pinned[name] = rev
    return replace(template, components=pinned)


@dataclass(frozen=True)
class Task:
    """A queued build request. Tasks have a private UUID but no public name.

    `submitter` and `description` are temporary: they never survive into
    a Result (results are rebuilt from logs, which omit them).
    """

    uuid: str
    config: BuildConfig
    submitted_at: datetime
    submitter: Optional[str] = None
    description: str = ""


class JobStatus(Enum):
    RUNNING = "running"
    INTERRUPTING = "interrupting"
    FINISHED = "finished"


@dataclass(frozen=True)
class Job:
    """A started build: public name, assigned hosts, live status."""

    name: JobName
    task_uuid: str
    config: BuildConfig
    hosts: tuple[str, ...]
    started_at: datetime
    status: JobStatus = JobStatus.RUNNING
    interrupting_since: Optional[datetime] = None
    cancel_requested: bool = False

    def __post_init__(self) -> None:
        if not self.hosts:
            raise ModelError("job needs at least one host")
        if isinstance(self.config.host_spec, SingleMachine) and len(self.hosts) != 1:
            raise ModelError("single-machine job must run on exactly one host")


class ResultStatus(Enum):
    OK = "ok"
    FAILED = "failed"
    CANCELLED = "cancelled"
    TIMED_OUT = "timed_out"
    ABORTED = "aborted"


@dataclass(frozen=True)
class Result:
    """Durable record of a finished build; derivable from its log alone."""

    name: JobName
    status: ResultStatus
    component_revisions: Mapping[str, str]
    started_at: datetime
    finished_at: datetime
    log_ref: str

    def __post_init__(self) -> None:
        if self.finished_at < self.started_at:
            raise ModelError("finished_at must be >= started_at")


# ---------------------------------------------------------------------------
# CI job specifications

@dataclass(frozen=True)
class OnCommit:
    """Trigger whenever one of the listed components advances."""

    components: frozenset[str]

    def __post_init__(self) -> None:
        if not self.components:
            raise ModelError("on-commit trigger needs at least one component")


@dataclass(frozen=True)
class Scheduled:
    """Trigger at a fixed UTC time of day on the given weekdays (0=Monday)."""

    time_of_day: tuple[int, int]
    days: frozenset[int] = frozenset(range(7))

    def __post_init__(self) -> None:
        hour, minute = self.time_of_day
        if not (0 <= hour < 24 and 0 <= minute < 60):
            raise ModelError(f"bad time of day: {self.time_of_day}")
        if not self.days or not all(0 <= d < 7 for d in self.days):
            raise ModelError(f"bad weekday set: {sorted(self.days)}")


Trigger = Union[OnCommit, Scheduled]


@dataclass(frozen=True)
class CiJobSpec:
    name: str
    trigger: Trigger
    config_template: BuildConfig

    def __post_init__(self) -> None:
        check_identifier(self.name, "CI job name")
        kind = self.config_template.kind
        if not isinstance(kind, CiJob) or kind.name != self.name:
            raise ModelError(f"template of CI job {self.name!r} must carry its own kind")


# ---------------------------------------------------------------------------
# Scheduling decisions

def active_jobs(running: Sequence[Job]) -> list[Job]:
    return [job for job in running if job.status is not JobStatus.FINISHED]


def single_occupancy(running: Sequence[Job]) -> dict[str, int]:
    """Single-machine jobs currently occupying each host's slots."""
    occupancy: dict[str, int] = {}
    for job in active_jobs(running):
        if isinstance(job.config.host_spec, SingleMachine):
            host = job.hosts[0]
            occupancy[host] = occupancy.get(host, 0) + 1
    return occupancy


def matching_hosts(spec: SingleMachine, hosts: Sequence[Host]) -> list[Host]:
    return [
        h for h in hosts
        if h.single_slots > 0
        and (spec.host_filter is None or fnmatchcase(h.name, spec.host_filter))
    ]


def free_single_hosts(spec: SingleMachine, hosts: Sequence[Host],
                      running: Sequence[Job]) -> list[Host]:
    occupancy = single_occupancy(running)
    return [h for h in matching_hosts(spec, hosts)
            if occupancy.get(h.name, 0) < h.single_slots]


def is_feasible(config: BuildConfig, hosts: Sequence[Host],
                running: Sequence[Job]) -> bool:
    """Whether the config's host selection can be satisfied right now.

    Cluster builds: at most one at a time, and blocked while any
    single-machine job occupies a cluster-member host. Single-machine
    builds: some matching host must have a free slot; cluster builds do
    not consume single slots.
    """
    live = active_jobs(running)
    if isinstance(config.host_spec, Cluster):
        cluster_hosts = [h for h in hosts if h.cluster_member]
        if not cluster_hosts:
            return False
        if any(isinstance(job.config.host_spec, Cluster) for job in live):
            return False
        occupancy = single_occupancy(live)
        return all(occupancy.get(h.name, 0) == 0 for h in cluster_hosts)
    return bool(free_single_hosts(config.host_spec, hosts, live))


def select_next(queue: Sequence[Task], hosts: Sequence[Host],
                running: Sequence[Job]) -> Optional[Task]:
    """The feasible task to start next, if any.

    Highest priority wins; ties go to the earliest submission, then to
    the smallest uuid so the choice is a pure function of the queue's
    contents regardless of its order.
    """
    feasible = [t for t in queue if is_feasible(t.config, hosts, running)]
    if not feasible:
        return None
    return min(feasible, key=lambda t: (-t.config.priority, t.submitted_at, t.uuid))


def assign_name(kind: BuildKind, max_serial_so_far: int) -> JobName:
    """Next consecutive name for the kind (serials are gap-free per kind)."""
    if max_serial_so_far < 0:
        raise ModelError("max serial must be >= 0")
    return JobName(kind_token(kind), max_serial_so_far + 1)


class TimeoutStatus(Enum):
    FINE = "fine"
    TIMED_OUT = "timed_out"


def timeout_status(job: Job, now: datetime) -> TimeoutStatus:
    """Timed out once the run time strictly exceeds the configured budget."""
    elapsed = (now - job.started_at).total_seconds()
    if elapsed > job.config.timeout:
        return TimeoutStatus.TIMED_OUT
    return TimeoutStatus.FINE


# ---------------------------------------------------------------------------
# Task (de)serialization, shared by the store and the CLI

def task_to_dict(task: Task) -> dict:
    return {
        "uuid": task.uuid,
        "config": task.config.to_dict(),
        "submitted_at": format_rfc3339(task.submitted_at),
        "submitter": task.submitter,
        "description": task.description,
    }


def task_from_dict(data: Mapping) -> Task:
    return Task(
        uuid=data["uuid"],
        config=BuildConfig.from_dict(data["config"]),
        submitted_at=parse_rfc3339(data["submitted_at"]),
        submitter=data.get("submitter"),
        description=data.get("description", ""),
    )
