"""Server-rendered HTML over plain HTTP.

Pages are statically rendered from a store snapshot; interaction happens
through HTML forms (POST), so everything works without client scripts.
Every content response carries a strong ETag over the exact body bytes,
which the browser client polls with HEAD requests to detect changes.
TLS is left to an external reverse proxy.

Renderers are pure: equal inputs give byte-identical pages.
"""

from __future__ import annotations

import hashlib
import html
import logging
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence, Union
from urllib.parse import parse_qs, urlsplit

from . import logfmt
from .clock import Clock, format_rfc3339
from .core_model import (
    Cluster,
    Host,
    Job,
    JobName,
    JobStatus,
    ModelError,
    NAME_RE,
    Result,
    Task,
    kind_token,
)
from .store import CancelOutcome, Store, SystemState

log = logging.getLogger(__name__)

ASSETS_DIR = Path(__file__).parent / "assets"

DEFAULT_CACHE_TTL = 60.0
DEFAULT_MAX_LOG_BYTES = 4 * 1024 * 1024
TRUNCATION_MARK = "\n[log truncated for display]\n"


@dataclass(frozen=True)
class WebConfig:
    cache_ttl: float = DEFAULT_CACHE_TTL
    max_log_bytes: int = DEFAULT_MAX_LOG_BYTES


@dataclass
class Response:
    status: int
    headers: dict[str, str]
    body: bytes


class LogCache:
    """Finished-build logs, decoded once and kept while requested.

    Entries idle for longer than the ttl are evicted; running builds
    bypass the cache entirely (their log grows on disk).
    """

    def __init__(self, ttl: float):
        self.ttl = ttl
        self._lock = threading.Lock()
        self._entries: dict[str, tuple[str, float]] = {}
        self.loads = 0  # number of cache-miss loads, observable in tests

    def get(self, key: str, loader: Callable[[], str], now: float) -> str:
        with self._lock:
            self._evict(now)
            hit = self._entries.get(key)
            if hit is not None:
                self._entries[key] = (hit[0], now)
                return hit[0]
            content = loader()
            self.loads += 1
            self._entries[key] = (content, now)
            return content

    def _evict(self, now: float) -> None:
        stale = [key for key, (_, last) in self._entries.items()
                 if now - last > self.ttl]
        for key in stale:
            del self._entries[key]

    def __len__(self) -> int:
        return len(self._entries)


# ---------------------------------------------------------------------------
# Rendering

def _page(title: str, body: str) -> bytes:
    doc = (
        "<!DOCTYPE html>\n"
        '<html lang="en">\n<head>\n'
        '<meta charset="utf-8">\n'
        f"<title>{html.escape(title)}</title>\n"
        '<link rel="stylesheet" href="/assets/style.css">\n'
        "</head>\n<body>\n"
        f"{body}\n"
        "</body>\n</html>\n"
    )
    return doc.encode("utf-8")


def _link(href: str, text: str) -> str:
    return f'<a href="{html.escape(href, quote=True)}">{html.escape(text)}</a>'


def _build_url(name: JobName) -> str:
    return f"/build/{name.kind_str}/{name.serial}"


def _job_row(job: Job) -> str:
    status = job.status.value
    return (f"<tr><td>{_link(_build_url(job.name), str(job.name))}</td>"
            f"<td>{html.escape(status)}</td>"
            f"<td>{format_rfc3339(job.started_at)}</td></tr>")


def _result_row(result: Result) -> str:
    return (f"<tr><td>{_link(_build_url(result.name), str(result.name))}</td>"
            f"<td>{html.escape(result.status.value)}</td>"
            f"<td>{format_rfc3339(result.finished_at)}</td></tr>")


def render_dashboard(state: SystemState, hosts: Sequence[Host]) -> bytes:
    """The landing page: system statistics, host utilization, and a
    summary of the most recent build of every kind."""
    parts = ["<h1>Build manager</h1>"]

    parts.append("<h2>System</h2><table><tbody>")
    parts.append(f"<tr><td>queued tasks</td><td>{len(state.queue)}</td></tr>")
    parts.append(f"<tr><td>running builds</td><td>{len(state.running)}</td></tr>")
    parts.append(f"<tr><td>finished builds</td><td>{len(state.results)}</td></tr>")
    parts.append("</tbody></table>")

    parts.append("<h2>Hosts</h2>")
    parts.append("<table><thead><tr><th>host</th><th>slots used</th>"
                 "<th>cluster</th></tr></thead><tbody>")
    cluster_note = str(state.cluster_job) if state.cluster_job else ""
    for host in hosts:
        used = state.occupancy.get(host.name, 0)
        cluster = ""
        if host.cluster_member:
            cluster = f"member {html.escape(cluster_note)}".strip()
        parts.append(f"<tr><td>{html.escape(host.name)}</td>"
                     f"<td>{used}/{host.single_slots}</td>"
                     f"<td>{cluster}</td></tr>")
    parts.append("</tbody></table>")

    kinds = sorted(
        {r.name.kind_str for r in state.results}
        | {j.name.kind_str for j in state.running}
        | {kind_token(t.config.kind) for t in state.queue}
    )
    for kind in kinds:
        parts.append(f"<h2>{_link(f'/kind/{kind}', kind)}</h2>")
        latest = next((r for r in state.results if r.name.kind_str == kind), None)
        running = [j for j in state.running if j.name.kind_str == kind]
        queued = [t for t in state.queue if kind_token(t.config.kind) == kind]
        items = []
        if latest is not None:
            items.append(
                f"<li>latest: {_link(_build_url(latest.name), str(latest.name))}"
                f" {html.escape(latest.status.value)}"
                f" at {format_rfc3339(latest.finished_at)}</li>")
        for job in running:
            items.append(
                f"<li>running: {_link(_build_url(job.name), str(job.name))}"
                f" since {format_rfc3339(job.started_at)}</li>")
        if queued:
            items.append(f"<li>queued: {len(queued)}</li>")
        if not items:
            items.append("<li>no builds yet</li>")
        parts.append("<ul>" + "".join(items) + "</ul>")
    return _page("Build manager", "\n".join(parts))


def render_overview(kind: str, results: Sequence[Result],
                    running: Sequence[Job], queue: Sequence[Task]) -> bytes:
    """All builds of one kind, newest first; queued entries are unnamed
    because names only exist once a build starts."""
    parts = [f"<h1>Builds of kind {html.escape(kind)}</h1>"]

    parts.append("<h2>Queued</h2>")
    if queue:
        parts.append("<table><tbody>")
        for task in sorted(queue, key=lambda t: (t.submitted_at, t.uuid), reverse=True):
            parts.append(
                f"<tr><td>submitted {format_rfc3339(task.submitted_at)}</td>"
                f"<td>priority {html.escape(task.config.priority.token)}</td></tr>")
        parts.append("</tbody></table>")
    else:
        parts.append("<p>none</p>")

    parts.append("<h2>Running</h2>")
    if running:
        parts.append("<table><tbody>")
        for job in sorted(running, key=lambda j: j.name.serial, reverse=True):
            parts.append(_job_row(job))
        parts.append("</tbody></table>")
    else:
        parts.append("<p>none</p>")

    parts.append("<h2>Finished</h2>")
    if results:
        parts.append("<table><tbody>")
        for result in sorted(results, key=lambda r: r.name.serial, reverse=True):
            parts.append(_result_row(result))
        parts.append("</tbody></table>")
    else:
        parts.append("<p>none</p>")
    return _page(f"{kind} builds", "\n".join(parts))


def _meta_rows(pairs: Sequence[tuple[str, str]]) -> str:
    rows = "".join(
        f"<tr><td>{html.escape(key)}</td><td>{html.escape(value)}</td></tr>"
        for key, value in pairs)
    return f"<table><tbody>{rows}</tbody></table>"


def _config_pairs(task_or_job: Union[Task, Job]) -> list[tuple[str, str]]:
    config = task_or_job.config
    tokens = logfmt.config_revision_tokens(config)
    pairs = []
    for component in sorted(config.components):
        pairs.append((f"component {component}", tokens[component]))
    if config.sessions:
        pairs.append(("sessions", " ".join(config.sessions)))
    if config.exclude_sessions:
        pairs.append(("excluded", " ".join(config.exclude_sessions)))
    if config.options:
        pairs.append(("options", " ".join(config.options)))
    pairs.append(("hosts", "cluster" if isinstance(config.host_spec, Cluster)
                  else (config.host_spec.host_filter or "any single machine")))
    pairs.append(("priority", config.priority.token))
    pairs.append(("timeout", f"{config.timeout:.0f} s"))
    return pairs


def render_build(target: Union[Task, Job, Result], log_text: Optional[str],
                 private: bool, cancel_action: Optional[str] = None,
                 notice: Optional[str] = None) -> bytes:
    """One build: metadata, the log, and (on private pages of cancellable
    builds) the cancel control."""
    parts = []
    cancellable = False
    if isinstance(target, Task):
        parts.append("<h1>Queued build</h1>")
        pairs = [("status", "queued"),
                 ("submitted", format_rfc3339(target.submitted_at))]
        pairs += _config_pairs(target)
        cancellable = True
        title = "queued build"
    elif isinstance(target, Job):
        parts.append(f"<h1>Build {html.escape(str(target.name))}</h1>")
        pairs = [("status", target.status.value),
                 ("started", format_rfc3339(target.started_at)),
                 ("hosts", " ".join(target.hosts))]
        pairs += _config_pairs(target)
        cancellable = target.status is not JobStatus.FINISHED
        title = str(target.name)
    else:
        parts.append(f"<h1>Build {html.escape(str(target.name))}</h1>")
        pairs = [("status", target.status.value),
                 ("started", format_rfc3339(target.started_at)),
                 ("finished", format_rfc3339(target.finished_at))]
        pairs += [(f"component {c}", rev)
                  for c, rev in sorted(target.component_revisions.items())]
        title = str(target.name)
    parts.append(_meta_rows(pairs))

    if notice:
        parts.append(f"<p><strong>{html.escape(notice)}</strong></p>")
    if private and cancellable and cancel_action:
        parts.append(
            f'<form method="post" action="{html.escape(cancel_action, quote=True)}">'
            '<button type="submit">Cancel build</button></form>')

    if isinstance(target, Task):
        parts.append("<p>The build log will appear once the build starts.</p>")
    elif log_text is None:
        parts.append("<p>log unavailable</p>")
    else:
        parts.append("<h2>Log</h2>")
        parts.append(f"<pre>{html.escape(log_text)}</pre>")
    return _page(title, "\n".join(parts))


def render_shell(inner_url: str) -> bytes:
    """Outer page embedding a content page in an iframe; the client
    script keeps the frame sized and fresh."""
    src = html.escape(inner_url, quote=True)
    body = (
        "<h1>Build manager</h1>\n"
        f'<iframe id="content" src="{src}" style="width: 100%; border: none;"'
        ' title="build manager content"></iframe>\n'
        '<script src="/assets/client.js" defer></script>'
    )
    return _page("Build manager", body)


def checksum(body: bytes) -> str:
    return hashlib.sha256(body).hexdigest()


# ---------------------------------------------------------------------------
# Request handling

class WebApp:
    """Routes requests to renderers over live store state.

    Holds no session state: any request sequence produces the same pages
    on a freshly restarted server. The log cache is the only mutable
    server-local state.
    """

    def __init__(self, store: Store, hosts: Sequence[Host], clock: Clock,
                 config: WebConfig = WebConfig()):
        self.store = store
        self.hosts = list(hosts)
        self.clock = clock
        self.config = config
        self.cache = LogCache(config.cache_ttl)

    # -- log access -------------------------------------------------------

    def _now_seconds(self) -> float:
        return self.clock.now().timestamp()

    def log_for(self, name: JobName) -> Optional[str]:
        """Log text for a build: live tail from disk while it runs,
        cached decompressed content once finished."""
        partial = Path(self.store.config.log_dir) / logfmt.partial_rel_path(name)
        if partial.is_file():
            return partial.read_bytes().decode("utf-8", errors="replace")
        result = self.store.get_result(name)
        if result is None:
            return None
        path = Path(self.store.config.log_dir) / result.log_ref
        if not path.is_file():
            return None

        def loader() -> str:
            return logfmt.read_compressed(path).decode("utf-8", errors="replace")

        try:
            return self.cache.get(str(name), loader, self._now_seconds())
        except OSError:
            return None

    def _display_log(self, text: Optional[str]) -> Optional[str]:
        if text is not None and len(text) > self.config.max_log_bytes:
            return text[: self.config.max_log_bytes] + TRUNCATION_MARK
        return text

    # -- routing -----------------------------------------------------------

    def handle_request(self, method: str, path: str,
                       form: Mapping[str, str] | None = None) -> Response:
        method = method.upper()
        if method not in ("GET", "HEAD", "POST"):
            return self._error(405, "method not allowed")
        path = urlsplit(path).path
        segments = [s for s in path.split("/") if s]

        if method == "POST":
            if len(segments) == 3 and segments[0] == "private" and segments[2] == "cancel":
                return self._post_cancel(segments[1])
            if self._route_page(segments) is not None:
                return self._error(405, "method not allowed")
            return self._error(404, "not found")

        render = self._route_page(segments)
        if render is None:
            return self._error(404, "not found")
        response = render()
        if method == "HEAD":
            response = Response(response.status, dict(response.headers), b"")
        return response

    def _route_page(self, segments: list[str]) -> Optional[Callable[[], Response]]:
        if not segments:
            return self._get_dashboard
        if segments[0] == "ui":
            inner = "/" + "/".join(segments[1:])
            return lambda: self._ok(render_shell(inner))
        if segments[0] == "kind" and len(segments) == 2 and NAME_RE.match(segments[1]):
            return lambda: self._get_overview(segments[1])
        if segments[0] == "build" and len(segments) == 3 and segments[2].isdigit():
            try:
                name = JobName(segments[1], int(segments[2]))
            except ModelError:
                return None
            return lambda: self._get_build(name)
        if segments[0] == "private" and len(segments) == 2:
            return lambda: self._get_private(segments[1])
        if segments[0] == "assets" and len(segments) == 2:
            return lambda: self._get_asset(segments[1])
        return None

    # -- handlers -----------------------------------------------------------

    def _ok(self, body: bytes, content_type: str = "text/html; charset=utf-8") -> Response:
        return Response(200, {
            "Content-Type": content_type,
            "ETag": f'"{checksum(body)}"',
            "Content-Length": str(len(body)),
        }, body)

    def _error(self, status: int, message: str) -> Response:
        body = _page(f"{status}", f"<h1>{status}</h1><p>{html.escape(message)}</p>")
        return Response(status, {
            "Content-Type": "text/html; charset=utf-8",
            "Content-Length": str(len(body)),
        }, body)

    def _get_dashboard(self) -> Response:
        return self._ok(render_dashboard(self.store.snapshot(), self.hosts))

    def _get_overview(self, kind: str) -> Response:
        state = self.store.snapshot()
        results = [r for r in state.results if r.name.kind_str == kind]
        running = [j for j in state.running if j.name.kind_str == kind]
        queue = [t for t in state.queue if kind_token(t.config.kind) == kind]
        return self._ok(render_overview(kind, results, running, queue))

    def _get_build(self, name: JobName) -> Response:
        target: Union[Job, Result, None] = self.store.get_result(name)
        if target is None:
            job = self.store.get_job(name)
            if job is not None and job.status is not JobStatus.FINISHED:
                target = job
        if target is None:
            return self._error(404, "no such build")
        log_text = self._display_log(self.log_for(name))
        return self._ok(render_build(target, log_text, private=False))

    def _get_private(self, uuid: str, notice: str | None = None) -> Response:
        target = self.store.find_by_uuid(uuid)
        if target is None:
            return self._error(404, "unknown build")
        log_text = None
        if isinstance(target, (Job, Result)):
            log_text = self._display_log(self.log_for(target.name))
        body = render_build(
            target, log_text, private=True,
            cancel_action=f"/private/{uuid}/cancel", notice=notice)
        return self._ok(body)

    def _post_cancel(self, uuid: str) -> Response:
        outcome = self.store.request_cancel(uuid)
        if outcome is CancelOutcome.DEQUEUED:
            body = _page("cancelled", "<h1>Build cancelled</h1>"
                         "<p>The queued task was removed before it started.</p>")
            return self._ok(body)
        if outcome is CancelOutcome.CANCEL_REQUESTED:
            return self._get_private(uuid, notice="cancellation requested")
        if self.store.find_by_uuid(uuid) is not None:
            return self._get_private(uuid, notice="build already finished")
        return self._error(404, "unknown build")

    def _get_asset(self, filename: str) -> Response:
        if "/" in filename or filename.startswith("."):
            return self._error(404, "not found")
        path = ASSETS_DIR / filename
        if not path.is_file():
            return self._error(404, "not found")
        content_types = {".css": "text/css; charset=utf-8",
                         ".js": "text/javascript; charset=utf-8"}
        content_type = content_types.get(path.suffix, "application/octet-stream")
        return self._ok(path.read_bytes(), content_type)


# ---------------------------------------------------------------------------
# HTTP adapter

class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    app: WebApp  # set by serve()

    def _dispatch(self, method: str) -> None:
        form: dict[str, str] = {}
        length = int(self.headers.get("Content-Length") or 0)
        if length:
            raw = self.rfile.read(length).decode("utf-8", errors="replace")
            form = {k: v[0] for k, v in parse_qs(raw).items()}
        try:
            response = self.app.handle_request(method, self.path, form)
        except Exception:
            log.exception("request %s %s failed", method, self.path)
            body = b"internal error"
            self.send_response(500)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)
            return
        self.send_response(response.status)
        for key, value in response.headers.items():
            self.send_header(key, value)
        if "Content-Length" not in response.headers:
            self.send_header("Content-Length", str(len(response.body)))
        self.end_headers()
        if response.body:
            self.wfile.write(response.body)

    def do_GET(self) -> None:
        self._dispatch("GET")

    def do_HEAD(self) -> None:
        self._dispatch("HEAD")

    def do_POST(self) -> None:
        self._dispatch("POST")

    def log_message(self, fmt: str, *args) -> None:
        log.debug("web: " + fmt, *args)


class WebServer:
    """Threaded HTTP server around a WebApp."""

    def __init__(self, app: WebApp, bind: tuple[str, int]):
        handler = type("BoundHandler", (_Handler,), {"app": app})
        self._server = ThreadingHTTPServer(bind, handler)
        self._thread: Optional[threading.Thread] = None

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    def start(self) -> None:
        self._thread = threading.Thread(
            target=self._server.serve_forever, kwargs={"poll_interval": 0.1},
            daemon=True, name="web-server")
        self._thread.start()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=10)
