"""Command-line entry points.

    build-manager serve CONFIG          run the service
    build-manager submit [...]          queue a user build, print its private URL
    build-manager rebuild-db CONFIG     reconstruct the database from the log archive

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import getpass
import logging
import os
import signal
import sys
import uuid as uuidlib
from pathlib import Path
from typing import Optional, Sequence

from .clock import SystemClock
from .config import ConfigError, load_config
from .core_model import (
    BuildConfig,
    Cluster,
    HEX_REV_RE,
    ModelError,
    Priority,
    RepoRev,
    Revision,
    SingleMachine,
    SyncedCopy,
    Task,
    UserBuild,
)
from .poller import MercurialVcs, VcsAdapter, VcsError, copy_without_vcs
from .service import Service
from .store import LockHeld, ServiceLock, Store, StoreError

log = logging.getLogger(__name__)

CONFIG_ENV_VAR = "BUILD_MANAGER_CONFIG"


class UsageError(Exception):
    pass


class SyncFailed(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # usage problems are exit code 1, not argparse's default 2
    def error(self, message: str):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="build-manager", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run the build manager service")
    serve.add_argument("config", help="path to the service config file")

    submit = sub.add_parser(
        "submit", help="queue a user build of the current workspace")
    submit.add_argument("sessions", nargs="*", metavar="SESSIONS",
                        help="sessions to build (empty = all)")
    submit.add_argument("-x", dest="exclude_sessions", action="append",
                        default=[], metavar="SESSION",
                        help="exclude a session (repeatable)")
    submit.add_argument("-o", dest="options", action="append", default=[],
                        metavar="NAME=VALUE",
                        help="build option passed through (repeatable)")
    submit.add_argument("--component", dest="components", action="append",
                        default=[], metavar="NAME[=REV]",
                        help="pin a component to REV, or sync the local copy"
                             " when no revision is given (repeatable)")
    submit.add_argument("--cluster", action="store_true",
                        help="request a cluster build")
    submit.add_argument("--priority", choices=["low", "normal", "high"],
                        default="normal")
    submit.add_argument("--timeout", type=float, default=None, metavar="SECONDS")
    submit.add_argument("--server", default=None, metavar="URL",
                        help="base URL used for the printed private link")
    submit.add_argument("--config", default=None,
                        help=f"service config path (default ${CONFIG_ENV_VAR})")

    rebuild = sub.add_parser(
        "rebuild-db", help="discard the database and rebuild it from logs")
    rebuild.add_argument("config", help="path to the service config file")
    return parser


# ---------------------------------------------------------------------------
# serve

def cmd_serve(config_path: str, service_factory=Service) -> int:
    try:
        config = load_config(config_path)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        service = service_factory(config)
    except StoreError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    def _on_signal(signum, frame):
        service.request_stop()

    signal.signal(signal.SIGTERM, _on_signal)
    signal.signal(signal.SIGINT, _on_signal)
    try:
        service.start()
    except LockHeld as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        service.wait()
    finally:
        service.stop()
    return 0


# ---------------------------------------------------------------------------
# submit

def _parse_component_flags(flags: Sequence[str]) -> tuple[set[str], dict[str, str]]:
    """Split --component values into {sync-local names} and {name: rev}."""
    sync_local: set[str] = set()
    pinned: dict[str, str] = {}
    for flag in flags:
        name, sep, rev = flag.partition("=")
        if not name:
            raise UsageError(f"bad --component value: {flag!r}")
        if sep:
            pinned[name] = rev
        else:
            sync_local.add(name)
    return sync_local, pinned


def _local_copy_path(component: str, base_component: str, workspace: Path) -> Path:
    """Where a component's local working copy lives: the workspace itself
    for the base component, a sibling directory named after it otherwise."""
    if component == base_component:
        return workspace
    return workspace.parent / component


def _sync_workspace(component: str, source: Path, sync_dir: Path,
                    task_uuid: str) -> SyncedCopy:
    if not source.is_dir() or not os.access(source, os.R_OK):
        raise SyncFailed(f"workspace for {component!r} not readable: {source}")
    copy_id = f"{task_uuid}-{component}"
    try:
        copy_without_vcs(source, Path(sync_dir) / copy_id)
    except OSError as exc:
        raise SyncFailed(f"sync of {component!r} failed: {exc}") from exc
    return SyncedCopy(copy_id)


def _resolve_pin(component: str, rev: str, adapter: VcsAdapter) -> RepoRev:
    if rev == "tip":
        return RepoRev(adapter.tip(component))
    if HEX_REV_RE.match(rev):
        return RepoRev(rev)
    raise UsageError(f"--component {component}: revision must be hex or 'tip',"
                     f" got {rev!r}")


def cmd_submit(args: argparse.Namespace,
               adapter: Optional[VcsAdapter] = None,
               workspace: Optional[Path] = None) -> int:
    config_path = args.config or os.environ.get(CONFIG_ENV_VAR)
    if not config_path:
        raise UsageError(f"--config or ${CONFIG_ENV_VAR} is required")
    config = load_config(config_path)
    adapter = adapter or MercurialVcs(config.repositories())
    workspace = Path(workspace or Path.cwd())

    sync_local, pinned = _parse_component_flags(args.components)
    configured = set(config.component_names())
    unknown = (sync_local | set(pinned)) - configured
    if unknown:
        raise UsageError(f"unknown components: {sorted(unknown)}")
    # by default the base component is synced from the local workspace
    sync_local.add(config.base_component)

    task_uuid = str(uuidlib.uuid4())
    clock = SystemClock()
    components: dict[str, Revision] = {}
    try:
        for name in config.component_names():
            if name in pinned:
                components[name] = _resolve_pin(name, pinned[name], adapter)
            elif name in sync_local:
                source = _local_copy_path(name, config.base_component, workspace)
                components[name] = _sync_workspace(
                    name, source, config.store.sync_dir, task_uuid)
            else:
                components[name] = RepoRev(adapter.tip(name))
    except VcsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SyncFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    try:
        build_config = BuildConfig(
            kind=UserBuild(),
            components=components,
            sessions=tuple(args.sessions),
            exclude_sessions=tuple(args.exclude_sessions),
            options=tuple(args.options),
            host_spec=Cluster() if args.cluster else SingleMachine(),
            priority=Priority.parse(args.priority),
            timeout=args.timeout if args.timeout is not None else config.default_timeout,
        )
    except ModelError as exc:
        raise UsageError(str(exc)) from None

    task = Task(
        uuid=task_uuid,
        config=build_config,
        submitted_at=clock.now(),
        submitter=getpass.getuser(),
    )
    try:
        store = Store.open(config.store, clock)
        try:
            store.enqueue_task(task)
        finally:
            store.close()
    except StoreError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    base_url = (args.server or config.web.base_url).rstrip("/")
    print(f"{base_url}/private/{task_uuid}")
    return 0


# ---------------------------------------------------------------------------
# rebuild-db

def cmd_rebuild_db(config_path: str) -> int:
    try:
        config = load_config(config_path)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    lock = ServiceLock(config.store.database)
    try:
        lock.acquire()
    except LockHeld as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        store = Store.open(config.store)
        try:
            store.reset_schema()
            report = store.rebuild_from_logs()
        finally:
            store.close()
    except StoreError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    finally:
        lock.release()
    print(f"results_recovered: {report.results_recovered}")
    print(f"files_skipped: {report.files_skipped}")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(
        level=os.environ.get("BUILD_MANAGER_LOG", "INFO"),
        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "serve":
            return cmd_serve(args.config)
        if args.command == "submit":
            return cmd_submit(args)
        if args.command == "rebuild-db":
            return cmd_rebuild_db(args.config)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
