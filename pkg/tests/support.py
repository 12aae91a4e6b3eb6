"""Shared builders for test data."""

from __future__ import annotations

import gzip
import uuid as uuidlib
from datetime import datetime, timedelta, timezone
from pathlib import Path

from build_manager import logfmt
from build_manager.core_model import (
    BuildConfig,
    CiJob,
    Cluster,
    Host,
    Job,
    JobName,
    JobStatus,
    Priority,
    RepoRev,
    Result,
    ResultStatus,
    SingleMachine,
    Task,
    UserBuild,
)

REV_A = "aaaaaaaaaaaa"
REV_B = "bbbbbbbbbbbb"
T0 = datetime(2025, 1, 1, tzinfo=timezone.utc)


def at(seconds: int) -> datetime:
    return T0 + timedelta(seconds=seconds)


def write_log(store, name: JobName, revisions=None, status=ResultStatus.OK,
              started=T0, finished=None, output="hello\n") -> Result:
    """Produce a compressed log the way the runner would, returning the
    Result the runner would persist."""
    revisions = revisions or {"main": REV_A}
    finished = finished or started + timedelta(seconds=60)
    log_ref = logfmt.log_rel_path(name)
    path = Path(store.config.log_dir) / log_ref
    path.parent.mkdir(parents=True, exist_ok=True)
    text = logfmt.render_header(name, revisions, started) + output \
        + logfmt.render_trailer(status, finished)
    with gzip.open(path, "wb") as fh:
        fh.write(text.encode())
    return Result(name=name, status=status, component_revisions=revisions,
                  started_at=started, finished_at=finished, log_ref=log_ref)


def write_service_config(root: Path, *, components: list[str] | None = None,
                         ci_jobs: list[dict] | None = None,
                         hosts: list[dict] | None = None,
                         port: int = 0, **extras) -> Path:
    """Write a minimal service config file under `root` and return its path."""
    import yaml

    components = components or ["main"]
    data = {
        "store": {"database": "state.db", "log_dir": "logs", "sync_dir": "sync"},
        "base_component": components[0],
        "components": [{"name": c, "repository": f"repos/{c}"} for c in components],
        "hosts": hosts or [
            {"name": "alpha", "address": "local:envs/alpha", "single_slots": 2}],
        "build_command": "sh build.sh",
        "web": {"bind": f"127.0.0.1:{port}", "base_url": "http://build.test"},
        "grace_period": 2,
        "runner_interval": 0.1,
        "poll_interval": 0.2,
        "timer_interval": 0.2,
    }
    if ci_jobs:
        data["ci_jobs"] = ci_jobs
    data.update(extras)
    root.mkdir(parents=True, exist_ok=True)
    path = root / "service.yaml"
    path.write_text(yaml.safe_dump(data, sort_keys=False))
    return path


def make_host(name: str = "alpha", cluster_member: bool = False,
              single_slots: int = 1, address: str = "") -> Host:
    return Host(name=name, cluster_member=cluster_member,
                single_slots=single_slots, address=address or f"local:/tmp/{name}")


def make_config(kind: str = "user", *, components: dict | None = None,
                cluster: bool = False, host_filter: str | None = None,
                priority: Priority = Priority.NORMAL, timeout: float = 3600.0,
                sessions: tuple = (), exclude_sessions: tuple = (),
                options: tuple = ()) -> BuildConfig:
    return BuildConfig(
        kind=UserBuild() if kind == "user" else CiJob(kind),
        components=components or {"main": RepoRev(REV_A)},
        sessions=sessions,
        exclude_sessions=exclude_sessions,
        options=options,
        host_spec=Cluster() if cluster else SingleMachine(host_filter),
        priority=priority,
        timeout=timeout,
    )


def make_task(config: BuildConfig | None = None, *, uuid: str | None = None,
              submitted_at: datetime | None = None, **config_kwargs) -> Task:
    return Task(
        uuid=uuid or str(uuidlib.uuid4()),
        config=config or make_config(**config_kwargs),
        submitted_at=submitted_at or T0,
    )


def make_job(name: str = "user/1", *, config: BuildConfig | None = None,
             hosts: tuple = ("alpha",), task_uuid: str | None = None,
             started_at: datetime | None = None,
             status: JobStatus = JobStatus.RUNNING, **config_kwargs) -> Job:
    return Job(
        name=JobName.parse(name),
        task_uuid=task_uuid or str(uuidlib.uuid4()),
        config=config or make_config(**config_kwargs),
        hosts=hosts,
        started_at=started_at or T0,
        status=status,
    )
