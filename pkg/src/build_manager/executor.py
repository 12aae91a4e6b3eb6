"""Build execution: self-contained source trees, per-job environments on a
host, and supervised shell processes with streamed output.

Two interchangeable executors exist: `LocalExecutor` spawns on this
machine, `RemoteExecutor` spawns over SSH. Both stream merged
stdout/stderr lines into an append-only log sink, and both support the
interrupt -> grace -> kill escalation, delivered to the whole process
group of the build.
"""

from __future__ import annotations

import logging
import os
import shlex
import shutil
import signal
import subprocess
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Optional, Protocol, Sequence

from .core_model import BuildConfig, Host, JobName, RepoRev, SyncedCopy
from .poller import UnknownRevision, VcsAdapter, copy_without_vcs

log = logging.getLogger(__name__)

#: Directory inside every provisioned environment holding job bookkeeping.
ENV_META_DIR = ".build_env"

#: Seconds within which an exit outcome must surface after kill().
KILL_TIMEOUT = 10.0


class ExecutorError(Exception):
    pass


class MissingSyncedCopy(ExecutorError):
    pass


class HostUnreachable(ExecutorError):
    pass


class TransferFailed(ExecutorError):
    pass


class SpawnFailed(ExecutorError):
    pass


@dataclass(frozen=True)
class PreparedTree:
    """A self-contained source copy: base tree at the root, every extra
    component materialized under `components/<name>`."""

    root: Path
    description: Optional[str] = None


@dataclass(frozen=True)
class EnvRef:
    """A provisioned per-job directory on some host."""

    host_name: str
    job_name: JobName
    root: str


@dataclass(frozen=True)
class ExitOutcome:
    """How a build process ended: an exit code, or death by signal."""

    code: Optional[int]
    signalled: bool = False


def prepare_tree(adapter: VcsAdapter, config: BuildConfig, base_component: str,
                 sync_dir: Path, dest: Path,
                 description: Optional[str] = None) -> PreparedTree:
    """Materialize the build's sources at pinned revisions under `dest`.

    Repository revisions are exported via the adapter; synced copies are
    taken verbatim from the sync root. The layout is deterministic and
    carries no VCS metadata.
    """
    config.require_base(base_component)
    dest.mkdir(parents=True, exist_ok=True)
    ordered = [base_component] + sorted(n for n in config.components
                                        if n != base_component)
    for name in ordered:
        rev = config.components[name]
        target = dest if name == base_component else dest / "components" / name
        if isinstance(rev, RepoRev):
            adapter.export(name, rev.hash, target)
        elif isinstance(rev, SyncedCopy):
            src = Path(sync_dir) / rev.copy_id
            if not src.is_dir():
                raise MissingSyncedCopy(f"no synced copy {rev.copy_id!r} under {sync_dir}")
            copy_without_vcs(src, target)
        else:
            raise UnknownRevision(f"component {name!r} has an unresolved tip revision")
    return PreparedTree(root=dest, description=description)


class ProcessHandle(Protocol):
    """Handle on a running (or finished) build process."""

    def poll(self) -> Optional[ExitOutcome]: ...

    def wait(self, timeout: Optional[float] = None) -> ExitOutcome: ...

    def interrupt(self) -> None: ...

    def kill(self) -> None: ...


class Executor(Protocol):
    """Per-host build execution backend."""

    def provision(self, tree: PreparedTree, job_name: JobName) -> EnvRef: ...

    def spawn(self, env: EnvRef, command_line: Sequence[str],
              log_sink: BinaryIO) -> ProcessHandle: ...

    def teardown(self, env: EnvRef) -> None: ...


class _PopenHandle:
    """Common supervision over a local subprocess.Popen.

    A pump thread copies output lines into the sink, flushing each one,
    so watchers see lines within the 1 s contract. An exit outcome is
    only reported once the output is fully drained (log completeness)."""

    def __init__(self, proc: subprocess.Popen, sink: BinaryIO):
        self._proc = proc
        self._sink = sink
        self._drained = threading.Event()
        self._pump = threading.Thread(target=self._pump_output, daemon=True)
        self._pump.start()

    def _pump_output(self) -> None:
        stdout = self._proc.stdout
        assert stdout is not None
        try:
            for line in iter(stdout.readline, b""):
                self._sink.write(line)
                self._sink.flush()
        finally:
            stdout.close()
            self._drained.set()

    def _decode(self, returncode: int) -> ExitOutcome:
        if returncode < 0:
            return ExitOutcome(code=None, signalled=True)
        return ExitOutcome(code=returncode)

    def poll(self) -> Optional[ExitOutcome]:
        returncode = self._proc.poll()
        if returncode is None or not self._drained.is_set():
            return None
        return self._decode(returncode)

    def wait(self, timeout: Optional[float] = None) -> ExitOutcome:
        deadline = None if timeout is None else time.monotonic() + timeout
        try:
            self._proc.wait(timeout)
        except subprocess.TimeoutExpired:
            raise TimeoutError(f"process still running after {timeout} s") from None
        remaining = None if deadline is None else max(0.0, deadline - time.monotonic())
        if not self._drained.wait(remaining):
            raise TimeoutError("process exited but output pump has not drained")
        return self._decode(self._proc.returncode)

    def _signal_group(self, signum: int) -> None:
        try:
            os.killpg(self._proc.pid, signum)
        except (ProcessLookupError, PermissionError):
            pass  # already exited

    def interrupt(self) -> None:
        if self._proc.poll() is None:
            self._signal_group(signal.SIGTERM)

    def kill(self) -> None:
        if self._proc.poll() is None:
            self._signal_group(signal.SIGKILL)


class LocalExecutor:
    """Runs builds as ordinary OS processes under a base directory."""

    def __init__(self, host: Host, base_dir: Path):
        self.host = host
        self.base_dir = Path(base_dir)

    def _env_root(self, job_name: JobName) -> Path:
        return self.base_dir / job_name.kind_str / str(job_name.serial)

    def provision(self, tree: PreparedTree, job_name: JobName) -> EnvRef:
        root = self._env_root(job_name)
        env = EnvRef(self.host.name, job_name, str(root))
        marker = root / ENV_META_DIR / "job"
        if marker.is_file() and marker.read_text().strip() == str(job_name):
            return env
        shutil.copytree(tree.root, root, dirs_exist_ok=True)
        _write_env_meta(root, tree, job_name)
        return env

    def spawn(self, env: EnvRef, command_line: Sequence[str],
              log_sink: BinaryIO) -> ProcessHandle:
        try:
            proc = subprocess.Popen(
                list(command_line), cwd=env.root,
                stdout=subprocess.PIPE, stderr=subprocess.STDOUT,
                stdin=subprocess.DEVNULL, start_new_session=True,
            )
        except OSError as exc:
            raise SpawnFailed(f"cannot spawn {command_line!r}: {exc}") from exc
        return _PopenHandle(proc, log_sink)

    def teardown(self, env: EnvRef) -> None:
        try:
            shutil.rmtree(env.root)
        except FileNotFoundError:
            pass
        except OSError as exc:
            log.warning("teardown of %s left debris: %s", env.root, exc)


def _write_env_meta(root: Path, tree: PreparedTree, job_name: JobName) -> None:
    meta = root / ENV_META_DIR
    meta.mkdir(parents=True, exist_ok=True)
    (meta / "job").write_text(f"{job_name}\n")
    components_dir = tree.root / "components"
    names = sorted(p.name for p in components_dir.iterdir()) \
        if components_dir.is_dir() else []
    (meta / "components").write_text(
        "".join(f"components/{name}\n" for name in names))


class _RemoteHandle(_PopenHandle):
    """Supervises the local ssh client; signals travel out of band to the
    remote process group recorded in the environment's pgid file."""

    def __init__(self, proc: subprocess.Popen, sink: BinaryIO,
                 executor: "RemoteExecutor", env: EnvRef):
        super().__init__(proc, sink)
        self._executor = executor
        self._env = env

    def _decode(self, returncode: int) -> ExitOutcome:
        # ssh reports remote signal death via the shell's 128+N convention
        # (and 255 for lost connections); map those to "signalled".
        if returncode < 0 or returncode >= 129:
            return ExitOutcome(code=None, signalled=True)
        return ExitOutcome(code=returncode)

    def _signal_group(self, signum: int) -> None:
        pgid_path = f"{self._env.root}/{ENV_META_DIR}/pgid"
        # `kill -s NAME -- -pgid` is the form every POSIX sh accepts
        sig_name = signal.Signals(signum).name.removeprefix("SIG")
        snippet = (f"pg=$(cat {shlex.quote(pgid_path)})"
                   f" && kill -s {sig_name} -- -$pg")
        # The pgid file appears within moments of the spawn; retry briefly.
        for _ in range(5):
            proc = self._executor._ssh(snippet)
            if proc.returncode == 0 or self._proc.poll() is not None:
                return
            time.sleep(0.2)


class RemoteExecutor:
    """Runs builds on another machine over SSH (command execution plus a
    tar pipe for tree transfer). The ssh command line is configurable, so
    tests can substitute a local stand-in for the real client."""

    def __init__(self, host: Host, destination: str, base_dir: str,
                 ssh_command: Sequence[str] = ("ssh", "-o", "BatchMode=yes")):
        self.host = host
        self.destination = destination
        self.base_dir = base_dir.rstrip("/")
        self.ssh_command = list(ssh_command)

    def _ssh(self, remote_command: str,
             stdin: Optional[bytes] = None) -> subprocess.CompletedProcess:
        cmd = [*self.ssh_command, self.destination, remote_command]
        try:
            if stdin is None:
                return subprocess.run(cmd, stdin=subprocess.DEVNULL,
                                      capture_output=True, timeout=300)
            return subprocess.run(cmd, input=stdin, capture_output=True, timeout=300)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise HostUnreachable(f"ssh to {self.destination} failed: {exc}") from exc

    def _ssh_checked(self, remote_command: str, stdin: Optional[bytes] = None,
                     retries: int = 1) -> subprocess.CompletedProcess:
        last: subprocess.CompletedProcess | None = None
        for _ in range(retries + 1):
            proc = self._ssh(remote_command, stdin)
            if proc.returncode == 0:
                return proc
            last = proc
        assert last is not None
        stderr = last.stderr.decode(errors="replace").strip()
        if last.returncode == 255:
            raise HostUnreachable(f"{self.destination}: {stderr or 'connection failed'}")
        raise TransferFailed(f"remote command exited {last.returncode}: {stderr}")

    def _env_root(self, job_name: JobName) -> str:
        return f"{self.base_dir}/{job_name.kind_str}/{job_name.serial}"

    def provision(self, tree: PreparedTree, job_name: JobName) -> EnvRef:
        root = self._env_root(job_name)
        env = EnvRef(self.host.name, job_name, root)
        marker = f"{root}/{ENV_META_DIR}/job"
        probe = self._ssh(f"cat {shlex.quote(marker)} 2>/dev/null")
        if probe.returncode == 0 and probe.stdout.decode().strip() == str(job_name):
            return env
        self._ssh_checked(f"mkdir -p {shlex.quote(root)}")
        tar = subprocess.run(
            ["tar", "-C", str(tree.root), "-cf", "-", "."],
            capture_output=True,
        )
        if tar.returncode != 0:
            raise TransferFailed(f"tar failed: {tar.stderr.decode(errors='replace')}")
        self._ssh_checked(
            f"tar -xf - -C {shlex.quote(root)}", stdin=tar.stdout,
        )
        meta = f"{root}/{ENV_META_DIR}"
        names = sorted(p.name for p in (tree.root / "components").iterdir()) \
            if (tree.root / "components").is_dir() else []
        listing = "".join(f"components/{name}\n" for name in names)
        self._ssh_checked(
            f"mkdir -p {shlex.quote(meta)}"
            f" && printf '%s\\n' {shlex.quote(str(job_name))} > {shlex.quote(meta + '/job')}"
            f" && printf '%s' {shlex.quote(listing)} > {shlex.quote(meta + '/components')}"
        )
        return env

    def spawn(self, env: EnvRef, command_line: Sequence[str],
              log_sink: BinaryIO) -> ProcessHandle:
        # The inner shell becomes its own session leader and records its
        # process-group id before exec'ing the build, so interrupt/kill can
        # target the whole group from a separate ssh invocation.
        inner = (f"echo $$ > {ENV_META_DIR}/pgid; "
                 f"exec {shlex.join(command_line)}")
        remote = (f"cd {shlex.quote(env.root)}"
                  f" && setsid -w sh -c {shlex.quote(inner)}")
        cmd = [*self.ssh_command, self.destination, remote]
        try:
            proc = subprocess.Popen(
                cmd, stdout=subprocess.PIPE, stderr=subprocess.STDOUT,
                stdin=subprocess.DEVNULL,
            )
        except OSError as exc:
            raise SpawnFailed(f"cannot run ssh: {exc}") from exc
        return _RemoteHandle(proc, log_sink, self, env)

    def teardown(self, env: EnvRef) -> None:
        proc = self._ssh(f"rm -rf {shlex.quote(env.root)}")
        if proc.returncode != 0:
            log.warning("remote teardown of %s failed: %s", env.root,
                        proc.stderr.decode(errors="replace").strip())


def executor_for(host: Host,
                 ssh_command: Sequence[str] | None = None) -> Executor:
    """Build the executor described by the host's address.

    Address forms: `local:<base_dir>` or `ssh:<destination>:<base_dir>`
    (destination as accepted by the ssh client, e.g. `builder@alpha`).
    """
    scheme, _, rest = host.address.partition(":")
    if scheme == "local" and rest:
        return LocalExecutor(host, Path(rest))
    if scheme == "ssh" and rest:
        destination, sep, base_dir = rest.partition(":")
        if sep and destination and base_dir:
            if ssh_command is not None:
                return RemoteExecutor(host, destination, base_dir, ssh_command)
            return RemoteExecutor(host, destination, base_dir)
    raise ExecutorError(f"host {host.name!r} has an unusable address: {host.address!r}")
