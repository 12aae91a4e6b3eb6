"""Web layer: routing, checksums, cancellation authority, the log cache."""

from __future__ import annotations

from html.parser import HTMLParser
from pathlib import Path

import pytest

from build_manager import logfmt
from build_manager.core_model import JobName, ResultStatus
from build_manager.web_server import (
    WebApp,
    WebConfig,
    checksum,
    render_build,
    render_dashboard,
    render_overview,
)
from support import at, make_config, make_task, write_log

VOID_ELEMENTS = {"meta", "link", "br", "hr", "img", "input", "wbr", "source"}


class _WellFormedness(HTMLParser):
    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.stack: list[str] = []
        self.errors: list[str] = []

    def handle_starttag(self, tag, attrs):
        if tag not in VOID_ELEMENTS:
            self.stack.append(tag)

    def handle_endtag(self, tag):
        if not self.stack or self.stack[-1] != tag:
            self.errors.append(f"unexpected </{tag}> (stack: {self.stack})")
        else:
            self.stack.pop()


def assert_valid_html(body: bytes) -> None:
    text = body.decode("utf-8")
    assert text.startswith("<!DOCTYPE html>")
    parser = _WellFormedness()
    parser.feed(text)
    parser.close()
    assert parser.errors == []
    assert parser.stack == []


@pytest.fixture
def app(store, sim_clock):
    hosts = [__import__("support").make_host("alpha", single_slots=2)]
    return WebApp(store, hosts, sim_clock, WebConfig(cache_ttl=60.0))


def finished_build(store, name="nightly/1", status=ResultStatus.FAILED):
    name = JobName.parse(name)
    task = make_task(make_config(name.kind_str if name.kind_str != "user" else "user"))
    store.enqueue_task(task)
    store.claim_task(task.uuid, name, ["alpha"])
    result = write_log(store, name, status=status, output="compile error\n")
    store.finalize(name, result)
    return task, result


def running_build(store, name="user/1"):
    name = JobName.parse(name)
    task = make_task()
    store.enqueue_task(task)
    job = store.claim_task(task.uuid, name, ["alpha"])
    partial = Path(store.config.log_dir) / logfmt.partial_rel_path(name)
    partial.parent.mkdir(parents=True, exist_ok=True)
    header = logfmt.render_header(
        name, logfmt.config_revision_tokens(job.config), job.started_at)
    partial.write_text(header + "working...\n")
    return task, job


class TestRendering:
    def test_dashboard_of_empty_state(self, store, app):
        body = render_dashboard(store.snapshot(), app.hosts)
        assert_valid_html(body)
        text = body.decode()
        assert "queued tasks" in text and ">0<" in text

    def test_renderers_are_deterministic(self, store, app):
        finished_build(store)
        running_build(store)
        state = store.snapshot()
        assert render_dashboard(state, app.hosts) == render_dashboard(state, app.hosts)

    def test_dashboard_summarizes_kinds(self, store, app):
        finished_build(store, "nightly/1", status=ResultStatus.FAILED)
        running_build(store, "user/1")
        body = render_dashboard(store.snapshot(), app.hosts).decode()
        assert '<a href="/kind/nightly">nightly</a>' in body
        assert '<a href="/build/nightly/1">nightly/1</a>' in body
        assert "failed" in body
        assert '<a href="/build/user/1">user/1</a>' in body

    def test_overview_lists_newest_first(self, store, app):
        for serial in (1, 2, 3):
            name = JobName("nightly", serial)
            task = make_task(make_config("nightly"))
            store.enqueue_task(task)
            store.claim_task(task.uuid, name, ["alpha"])
            store.finalize(name, write_log(store, name, started=at(serial * 100),
                                           finished=at(serial * 100 + 60)))
        state = store.snapshot()
        body = render_overview("nightly", state.results, [], []).decode()
        assert body.index("nightly/3") < body.index("nightly/2") < body.index("nightly/1")

    def test_overview_queued_entries_have_no_name(self, store, app):
        task = make_task(make_config("nightly"))
        store.enqueue_task(task)
        response = app.handle_request("GET", "/kind/nightly")
        assert "nightly/" not in response.body.decode().replace("kind/nightly", "")
        assert "submitted" in response.body.decode()

    def test_build_page_private_variants(self, store):
        task, job = running_build(store)
        log_text = "working..."
        public = render_build(job, log_text, private=False).decode()
        assert "Cancel" not in public
        private = render_build(job, log_text, private=True,
                               cancel_action=f"/private/{task.uuid}/cancel").decode()
        assert "<form" in private and "Cancel build" in private

    def test_finished_build_not_cancellable_even_privately(self, store):
        task, result = finished_build(store)
        body = render_build(result, "log", private=True,
                            cancel_action=f"/private/{task.uuid}/cancel").decode()
        assert "<form" not in body


class TestRouting:
    def test_dashboard_checksum_stable_and_head_matches_get(self, store, app):
        get = app.handle_request("GET", "/")
        head = app.handle_request("HEAD", "/")
        assert get.status == head.status == 200
        assert get.headers["ETag"] == head.headers["ETag"]
        assert head.body == b""
        again = app.handle_request("GET", "/")
        assert again.headers["ETag"] == get.headers["ETag"]

    def test_checksum_changes_on_state_change(self, store, app):
        before = app.handle_request("HEAD", "/").headers["ETag"]
        store.enqueue_task(make_task())
        after = app.handle_request("HEAD", "/").headers["ETag"]
        assert before != after

    def test_unknown_paths_404(self, app):
        for path in ("/nope", "/build/x", "/build/user/notanumber",
                     "/kind/bad!name", "/private"):
            assert app.handle_request("GET", path).status == 404

    def test_wrong_method_405(self, store, app):
        assert app.handle_request("POST", "/").status == 405
        assert app.handle_request("PUT", "/").status == 405

    def test_build_page_for_result_and_running(self, store, app):
        finished_build(store, "nightly/1")
        running_build(store, "user/1")
        done = app.handle_request("GET", "/build/nightly/1")
        assert done.status == 200
        assert "compile error" in done.body.decode()
        live = app.handle_request("GET", "/build/user/1")
        assert live.status == 200
        assert "working..." in live.body.decode()
        assert app.handle_request("GET", "/build/user/99").status == 404

    def test_unknown_kind_is_empty_page_not_error(self, app):
        response = app.handle_request("GET", "/kind/ghosts")
        assert response.status == 200
        assert "none" in response.body.decode()

    def test_all_pages_well_formed(self, store, app):
        finished_build(store, "nightly/1")
        task, _ = running_build(store, "user/1")
        queued = make_task(make_config("nightly"))
        store.enqueue_task(queued)
        paths = ["/", "/kind/nightly", "/kind/user", "/build/nightly/1",
                 "/build/user/1", f"/private/{task.uuid}",
                 f"/private/{queued.uuid}", "/ui/kind/nightly"]
        for path in paths:
            response = app.handle_request("GET", path)
            assert response.status == 200, path
            assert_valid_html(response.body)

    def test_shell_embeds_inner_page(self, app):
        body = app.handle_request("GET", "/ui/kind/user").body.decode()
        assert '<iframe id="content" src="/kind/user"' in body
        assert "/assets/client.js" in body

    def test_asset_serving(self, app):
        css = app.handle_request("GET", "/assets/style.css")
        assert css.status == 200
        assert css.headers["Content-Type"].startswith("text/css")
        script = app.handle_request("GET", "/assets/client.js")
        assert script.status == 200
        assert script.headers["Content-Type"].startswith("text/javascript")
        assert app.handle_request("GET", "/assets/missing.css").status == 404
        assert app.handle_request("GET", "/assets/../cli.py").status == 404


class TestCancellation:
    def test_private_page_and_cancel_of_running_job(self, store, app):
        task, _ = running_build(store)
        page = app.handle_request("GET", f"/private/{task.uuid}")
        assert page.status == 200
        assert "Cancel build" in page.body.decode()
        response = app.handle_request(
            "POST", f"/private/{task.uuid}/cancel", {})
        assert response.status == 200
        assert "cancellation requested" in response.body.decode()
        assert store.running_jobs()[0].cancel_requested is True

    def test_cancel_queued_task_dequeues(self, store, app):
        task = make_task()
        store.enqueue_task(task)
        response = app.handle_request("POST", f"/private/{task.uuid}/cancel", {})
        assert response.status == 200
        assert "removed" in response.body.decode()
        assert store.list_queue() == []

    def test_cancel_finished_build_shows_notice(self, store, app):
        task, _ = finished_build(store)
        response = app.handle_request("POST", f"/private/{task.uuid}/cancel", {})
        assert response.status == 200
        assert "already finished" in response.body.decode()

    def test_wrong_uuid_is_404(self, store, app):
        running_build(store)
        assert app.handle_request("POST", "/private/deadbeef/cancel", {}).status == 404
        assert app.handle_request("GET", "/private/deadbeef").status == 404

    def test_public_pages_carry_no_mutating_forms(self, store, app):
        task, _ = running_build(store)
        finished_build(store, "nightly/1")
        for path in ("/", "/kind/user", "/build/user/1", "/build/nightly/1"):
            body = app.handle_request("GET", path).body.decode()
            assert "<form" not in body
            assert task.uuid not in body


class TestLogCache:
    def test_repeated_access_within_ttl_loads_once(self, store, app, sim_clock):
        finished_build(store, "nightly/1")
        for _ in range(5):
            app.handle_request("GET", "/build/nightly/1")
            sim_clock.advance(5)
        assert app.cache.loads == 1

    def test_idle_past_ttl_evicts_and_reloads(self, store, app, sim_clock):
        finished_build(store, "nightly/1")
        app.handle_request("GET", "/build/nightly/1")
        sim_clock.advance(61)
        app.handle_request("GET", "/build/nightly/1")
        assert app.cache.loads == 2
        assert len(app.cache) == 1

    def test_running_build_reads_disk_every_time(self, store, app):
        task, job = running_build(store)
        first = app.handle_request("GET", "/build/user/1").body.decode()
        partial = Path(store.config.log_dir) / logfmt.partial_rel_path(job.name)
        with open(partial, "a") as fh:
            fh.write("more output\n")
        second = app.handle_request("GET", "/build/user/1").body.decode()
        assert "more output" not in first
        assert "more output" in second
        assert app.cache.loads == 0

    def test_log_truncated_at_display_limit(self, store, sim_clock):
        small = WebApp(store, [], sim_clock,
                       WebConfig(cache_ttl=60.0, max_log_bytes=64))
        finished_build(store, "nightly/1")
        body = small.handle_request("GET", "/build/nightly/1").body.decode()
        assert "[log truncated for display]" in body

    def test_missing_log_shows_notice(self, store, app):
        task, result = finished_build(store, "nightly/1")
        (Path(store.config.log_dir) / result.log_ref).unlink()
        body = app.handle_request("GET", "/build/nightly/1").body.decode()
        assert "log unavailable" in body


def test_checksum_is_sha256_of_body():
    assert checksum(b"abc") == \
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"


def test_fresh_server_observes_identical_pages(store, sim_clock):
    # no server-held session state: a restarted server renders the same bytes
    hosts = [__import__("support").make_host("alpha", single_slots=2)]
    finished_build(store, "nightly/1")
    task, _ = running_build(store, "user/1")
    paths = ["/", "/kind/nightly", "/build/nightly/1", f"/private/{task.uuid}"]
    first = WebApp(store, hosts, sim_clock, WebConfig())
    before = {p: first.handle_request("GET", p).body for p in paths}
    restarted = WebApp(store, hosts, sim_clock, WebConfig())
    for path in paths:
        assert restarted.handle_request("GET", path).body == before[path]
