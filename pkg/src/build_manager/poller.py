"""Repository watching: VCS adapters and the commit-triggered task source.

`poll_once` compares each component's tip against the last revision the
service processed; on a change it enqueues one task per on-commit CI job
that requires the component, pinning every component of the job template
to its current tip and attaching a summary of the new commits.
"""

from __future__ import annotations

import logging
import shutil
import subprocess
import uuid as uuidlib
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol, Sequence

from .clock import Clock
from .core_model import (
    CiJob,
    CiJobSpec,
    OnCommit,
    Task,
    instantiate_template,
    kind_token,
)
from .store import Store

log = logging.getLogger(__name__)

VCS_METADATA = (".hg", ".git", ".svn", ".hg_archival.txt")


class VcsError(Exception):
    pass


class VcsUnavailable(VcsError):
    """Repository not reachable right now; retry next cycle."""


class UnknownRevision(VcsError):
    pass


@dataclass(frozen=True)
class CommitInfo:
    hash: str
    author: str
    date: str
    summary: str

    def line(self) -> str:
        return f"{self.hash[:12]} {self.date} {self.author}: {self.summary}"


class VcsAdapter(Protocol):
    """Read access to component repositories.

    `tip` is deterministic between repository changes; `export` writes a
    working tree free of VCS metadata.
    """

    def tip(self, component: str) -> str: ...

    def log_between(self, component: str, old: str, new: str) -> list[CommitInfo]: ...

    def export(self, component: str, revision: str, dest_dir: Path) -> None: ...


@dataclass(frozen=True)
class ChangeSummary:
    """Commit history between two revisions, one formatted line each."""

    component: str
    old_rev: str
    new_rev: str
    entries: tuple[str, ...] = ()

    def text(self) -> str:
        if not self.entries:
            return f"{self.component}: {self.new_rev[:12]}"
        header = f"{self.component}: {self.old_rev[:12]} -> {self.new_rev[:12]}"
        return "\n".join([header, *self.entries])


def describe_changes(adapter: VcsAdapter, component: str,
                     old_rev: str, new_rev: str) -> ChangeSummary:
    """Chronological commit lines from old (exclusive) to new (inclusive)."""
    if old_rev == new_rev:
        return ChangeSummary(component, old_rev, new_rev)
    commits = adapter.log_between(component, old_rev, new_rev)
    return ChangeSummary(
        component, old_rev, new_rev,
        entries=tuple(commit.line() for commit in commits),
    )


def poll_once(adapter: VcsAdapter, components: Sequence[str], store: Store,
              ci_jobs: Sequence[CiJobSpec], clock: Clock) -> list[Task]:
    """One polling pass; returns the newly enqueued tasks.

    Per changed component, enqueue and seen-revision advance happen in a
    single store transaction, so a failure loses no trigger. A CI job
    that still has a queued task is re-pinned to the newest tips instead
    of being enqueued again (no queue flooding on commit bursts).
    """
    seen = store.seen_revisions()
    tips: dict[str, str] = {}
    for component in components:
        try:
            tips[component] = adapter.tip(component)
        except VcsUnavailable as exc:
            log.warning("repository for %s unavailable: %s", component, exc)

    changed = [c for c in components
               if c in tips and seen.get(c) != tips[c]]
    new_tasks: list[Task] = []
    handled_jobs: set[str] = set()

    for component in changed:
        old_rev = seen.get(component, tips[component])
        try:
            summary = describe_changes(adapter, component, old_rev, tips[component])
        except VcsError as exc:
            log.warning("cannot summarize changes for %s: %s", component, exc)
            continue
        created: list[Task] = []
        repinned: list[Task] = []
        queued = {
            kind_token(task.config.kind): task
            for task in store.list_queue()
            if isinstance(task.config.kind, CiJob)
        }
        for spec in ci_jobs:
            if not isinstance(spec.trigger, OnCommit):
                continue
            if component not in spec.trigger.components:
                continue
            if spec.name in handled_jobs:
                continue  # already pinned to these tips earlier this pass
            config = instantiate_template(spec.config_template, tips)
            if spec.name in queued:
                previous = queued[spec.name]
                description = (previous.description + "\n\n" + summary.text()).strip()
                repinned.append(Task(
                    uuid=previous.uuid,
                    config=config,
                    submitted_at=previous.submitted_at,
                    description=description,
                ))
            else:
                created.append(Task(
                    uuid=str(uuidlib.uuid4()),
                    config=config,
                    submitted_at=clock.now(),
                    description=summary.text(),
                ))
            handled_jobs.add(spec.name)
        store.record_poll(component, tips[component], created, repinned)
        new_tasks.extend(created)
    return new_tasks


class PollerLoop:
    """The service's polling sub-process: one `poll_once` per interval."""

    def __init__(self, adapter: VcsAdapter, components: Sequence[str],
                 store: Store, ci_jobs: Sequence[CiJobSpec], clock: Clock):
        self.adapter = adapter
        self.components = list(components)
        self.store = store
        self.ci_jobs = list(ci_jobs)
        self.clock = clock

    def step(self) -> list[Task]:
        try:
            return poll_once(self.adapter, self.components, self.store,
                             self.ci_jobs, self.clock)
        except Exception:
            log.exception("poll cycle failed")
            return []


# ---------------------------------------------------------------------------
# Adapters

class InMemoryVcs:
    """Pure in-memory repositories for tests and desk-scale runs.

    Each commit snapshots the full file tree, so exports need no replay.
    """

    @dataclass
    class _Commit:
        hash: str
        author: str
        date: str
        summary: str
        files: dict[str, str]

    def __init__(self) -> None:
        self._repos: dict[str, list[InMemoryVcs._Commit]] = {}
        self.available = True

    def add_component(self, component: str) -> None:
        self._repos.setdefault(component, [])

    def commit(self, component: str, files: Mapping[str, str], summary: str,
               author: str = "dev", date: str = "2025-01-01") -> str:
        history = self._repos.setdefault(component, [])
        state = dict(history[-1].files) if history else {}
        state.update(files)
        rev = uuidlib.uuid4().hex[:16]
        history.append(self._Commit(rev, author, date, summary, state))
        return rev

    def _history(self, component: str) -> list["InMemoryVcs._Commit"]:
        if not self.available:
            raise VcsUnavailable("mock repository offline")
        if component not in self._repos:
            raise VcsUnavailable(f"no repository for component {component!r}")
        return self._repos[component]

    def tip(self, component: str) -> str:
        history = self._history(component)
        if not history:
            raise UnknownRevision(f"component {component!r} has no commits")
        return history[-1].hash

    def _index(self, component: str, rev: str) -> int:
        for i, commit in enumerate(self._history(component)):
            if commit.hash == rev:
                return i
        raise UnknownRevision(f"unknown revision {rev!r} for {component!r}")

    def log_between(self, component: str, old: str, new: str) -> list[CommitInfo]:
        lo = self._index(component, old)
        hi = self._index(component, new)
        if lo > hi:
            raise UnknownRevision(f"{old!r} is not an ancestor of {new!r}")
        return [
            CommitInfo(c.hash, c.author, c.date, c.summary)
            for c in self._history(component)[lo + 1:hi + 1]
        ]

    def export(self, component: str, revision: str, dest_dir: Path) -> None:
        commit = self._history(component)[self._index(component, revision)]
        dest_dir.mkdir(parents=True, exist_ok=True)
        for rel, content in sorted(commit.files.items()):
            path = dest_dir / rel
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(content)


class MercurialVcs:
    """Adapter over the `hg` command line; one repository per component."""

    def __init__(self, repositories: Mapping[str, str], hg_command: str = "hg"):
        self.repositories = dict(repositories)
        self.hg_command = hg_command

    def _repo(self, component: str) -> str:
        try:
            return self.repositories[component]
        except KeyError:
            raise VcsUnavailable(f"no repository configured for {component!r}") from None

    def _run(self, component: str, *args: str) -> str:
        cmd = [self.hg_command, "--repository", self._repo(component), *args]
        try:
            proc = subprocess.run(cmd, capture_output=True, text=True, timeout=120)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise VcsUnavailable(f"hg failed: {exc}") from exc
        if proc.returncode != 0:
            stderr = proc.stderr.strip()
            if "unknown revision" in stderr or "abort: " in stderr and "revision" in stderr:
                raise UnknownRevision(stderr)
            raise VcsUnavailable(f"hg exited {proc.returncode}: {stderr}")
        return proc.stdout

    def tip(self, component: str) -> str:
        return self._run(component, "log", "-r", "tip", "--template", "{node}").strip()

    def log_between(self, component: str, old: str, new: str) -> list[CommitInfo]:
        template = "{node}\\x1f{author|person}\\x1f{date|shortdate}\\x1f{desc|firstline}\\x1e"
        output = self._run(
            component, "log", "-r", f"{old}::{new} - {old}", "--template", template,
        )
        commits = []
        for record in output.split("\x1e"):
            if not record.strip():
                continue
            node, author, date, summary = record.split("\x1f")
            commits.append(CommitInfo(node, author, date, summary))
        return commits

    def export(self, component: str, revision: str, dest_dir: Path) -> None:
        self._run(component, "archive", "-r", revision, str(dest_dir))
        # hg archive drops a provenance file; the exported tree must be clean
        marker = dest_dir / ".hg_archival.txt"
        if marker.exists():
            marker.unlink()


def copy_without_vcs(src: Path, dest: Path) -> None:
    """Recursive copy that strips VCS metadata directories and files."""
    shutil.copytree(
        src, dest, dirs_exist_ok=True,
        ignore=shutil.ignore_patterns(*VCS_METADATA),
    )
