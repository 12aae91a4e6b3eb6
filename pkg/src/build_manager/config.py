"""Service configuration: one YAML file describes the whole deployment.

Relative paths are resolved against the config file's directory, so a
deployment (or a test fixture) is self-contained. The store connection
can be overridden per process with $BUILD_MANAGER_DATABASE (e.g. a CLI
client reaching the database over a tunnelled mount). See README.md for
the documented schema.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import yaml

from .core_model import (
    BuildConfig,
    CiJob,
    CiJobSpec,
    Cluster,
    Host,
    ModelError,
    OnCommit,
    Priority,
    Scheduled,
    SingleMachine,
    Tip,
    USER_KIND,
    check_identifier,
)
from .store import StoreConfig

WEEKDAYS = {"mon": 0, "tue": 1, "wed": 2, "thu": 3, "fri": 4, "sat": 5, "sun": 6}


class ConfigError(Exception):
    """The config file cannot be used; the message lists what is wrong."""


@dataclass(frozen=True)
class ComponentConfig:
    name: str
    repository: str


@dataclass(frozen=True)
class WebSettings:
    bind_host: str = "127.0.0.1"
    bind_port: int = 8080
    base_url: str = "http://127.0.0.1:8080"
    cache_ttl: float = 60.0
    max_log_bytes: int = 4 * 1024 * 1024


@dataclass(frozen=True)
class ServiceConfig:
    store: StoreConfig
    base_component: str
    components: tuple[ComponentConfig, ...]
    hosts: tuple[Host, ...]
    ci_jobs: tuple[CiJobSpec, ...]
    web: WebSettings
    build_command: str
    work_dir: Path
    grace_period: float = 30.0
    poll_interval: float = 60.0
    timer_interval: float = 30.0
    runner_interval: float = 5.0
    default_timeout: float = 3600.0
    notify_command: Optional[str] = None
    notifications_file: Path = Path("notifications.log")

    def component_names(self) -> list[str]:
        return [c.name for c in self.components]

    def repositories(self) -> dict[str, str]:
        return {c.name: c.repository for c in self.components}


def _require(data: dict, key: str, context: str):
    if key not in data:
        raise ConfigError(f"{context}: missing required key {key!r}")
    return data[key]


def _parse_trigger(data: dict, job_name: str, components: set[str]):
    if "on_commit" in data and "schedule" in data:
        raise ConfigError(f"ci job {job_name!r}: choose either on_commit or schedule")
    if "on_commit" in data:
        names = data["on_commit"]
        if not isinstance(names, list) or not names:
            raise ConfigError(f"ci job {job_name!r}: on_commit needs a non-empty list")
        unknown = set(names) - components
        if unknown:
            raise ConfigError(
                f"ci job {job_name!r}: on_commit references unknown components"
                f" {sorted(unknown)}")
        return OnCommit(frozenset(names))
    if "schedule" in data:
        text = str(data["schedule"])
        try:
            hour, minute = (int(part) for part in text.split(":"))
        except ValueError:
            raise ConfigError(
                f"ci job {job_name!r}: schedule must be HH:MM, got {text!r}") from None
        days = data.get("days")
        if days is None:
            day_set = frozenset(range(7))
        else:
            try:
                day_set = frozenset(
                    WEEKDAYS[d] if isinstance(d, str) else int(d) for d in days)
            except (KeyError, ValueError):
                raise ConfigError(
                    f"ci job {job_name!r}: days must be mon..sun, got {days!r}"
                ) from None
        try:
            return Scheduled((hour, minute), day_set)
        except ModelError as exc:
            raise ConfigError(f"ci job {job_name!r}: {exc}") from None
    raise ConfigError(f"ci job {job_name!r}: needs an on_commit or schedule trigger")


def _parse_ci_job(data: dict, all_components: list[str], base: str,
                  default_timeout: float) -> CiJobSpec:
    name = str(_require(data, "name", "ci job"))
    if name == USER_KIND:
        raise ConfigError(f"ci job name {USER_KIND!r} is reserved for user builds")
    trigger = _parse_trigger(data.get("trigger", data), name, set(all_components))
    members = data.get("components", all_components)
    unknown = set(members) - set(all_components)
    if unknown:
        raise ConfigError(f"ci job {name!r}: unknown components {sorted(unknown)}")
    if base not in members:
        raise ConfigError(f"ci job {name!r}: components must include the base {base!r}")
    try:
        template = BuildConfig(
            kind=CiJob(name),
            components={member: Tip() for member in members},
            sessions=tuple(data.get("sessions", ())),
            exclude_sessions=tuple(data.get("exclude_sessions", ())),
            options=tuple(data.get("options", ())),
            host_spec=Cluster() if data.get("cluster") else SingleMachine(
                data.get("host_filter")),
            priority=Priority.parse(str(data.get("priority", "normal"))),
            timeout=float(data.get("timeout", default_timeout)),
        )
        return CiJobSpec(name=name, trigger=trigger, config_template=template)
    except ModelError as exc:
        raise ConfigError(f"ci job {name!r}: {exc}") from None


def load_config(path: Path | str) -> ServiceConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    root = path.resolve().parent

    def resolve(value: str) -> Path:
        candidate = Path(value)
        return candidate if candidate.is_absolute() else root / candidate

    store_data = _require(data, "store", "config")
    database = os.environ.get("BUILD_MANAGER_DATABASE") \
        or str(_require(store_data, "database", "store"))
    store = StoreConfig(
        database=resolve(database),
        log_dir=resolve(str(_require(store_data, "log_dir", "store"))),
        sync_dir=resolve(str(_require(store_data, "sync_dir", "store"))),
    )

    components = []
    for entry in _require(data, "components", "config"):
        name = check_identifier(str(_require(entry, "name", "component")), "component name")
        components.append(ComponentConfig(
            name=name, repository=str(entry.get("repository", ""))))
    if not components:
        raise ConfigError("config: at least one component is required")
    names = [c.name for c in components]
    if len(set(names)) != len(names):
        raise ConfigError("config: component names must be unique")

    base = str(data.get("base_component", names[0]))
    if base not in names:
        raise ConfigError(f"config: base_component {base!r} is not declared")

    hosts = []
    for entry in _require(data, "hosts", "config"):
        address = str(_require(entry, "address", "host"))
        if address.startswith("local:"):
            # keep configs self-contained: local base dirs follow the
            # same relative-to-config-file rule as every other path
            address = f"local:{resolve(address[len('local:'):])}"
        try:
            hosts.append(Host(
                name=str(_require(entry, "name", "host")),
                cluster_member=bool(entry.get("cluster_member", False)),
                single_slots=int(entry.get("single_slots", 1)),
                address=address,
            ))
        except ModelError as exc:
            raise ConfigError(f"host: {exc}") from None
    if not hosts:
        raise ConfigError("config: at least one host is required")
    host_names = [h.name for h in hosts]
    if len(set(host_names)) != len(host_names):
        raise ConfigError("config: host names must be unique")

    default_timeout = float(data.get("default_timeout", 3600.0))
    ci_jobs = tuple(
        _parse_ci_job(entry, names, base, default_timeout)
        for entry in data.get("ci_jobs", ()))
    job_names = [j.name for j in ci_jobs]
    if len(set(job_names)) != len(job_names):
        raise ConfigError("config: ci job names must be unique")

    web_data = data.get("web", {})
    bind = str(web_data.get("bind", "127.0.0.1:8080"))
    bind_host, _, bind_port = bind.rpartition(":")
    if not bind_host or not bind_port.isdigit():
        raise ConfigError(f"web.bind must be host:port, got {bind!r}")
    web = WebSettings(
        bind_host=bind_host,
        bind_port=int(bind_port),
        base_url=str(web_data.get("base_url", f"http://{bind}")).rstrip("/"),
        cache_ttl=float(web_data.get("cache_ttl", 60.0)),
        max_log_bytes=int(web_data.get("max_log_bytes", 4 * 1024 * 1024)),
    )

    work_dir = resolve(str(data.get("work_dir", ""))) if data.get("work_dir") \
        else Path(store.database).parent / "work"
    notifications = resolve(str(data.get(
        "notifications_file", Path(store.database).parent / "notifications.log")))

    return ServiceConfig(
        store=store,
        base_component=base,
        components=tuple(components),
        hosts=tuple(hosts),
        ci_jobs=ci_jobs,
        web=web,
        build_command=str(_require(data, "build_command", "config")),
        work_dir=work_dir,
        grace_period=float(data.get("grace_period", 30.0)),
        poll_interval=float(data.get("poll_interval", 60.0)),
        timer_interval=float(data.get("timer_interval", 30.0)),
        runner_interval=float(data.get("runner_interval", 5.0)),
        default_timeout=default_timeout,
        notify_command=data.get("notify_command"),
        notifications_file=notifications,
    )
