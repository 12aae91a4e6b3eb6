"""Acceptance suite: one test per exit criterion, each printing a
PASS line. Run with `pytest tests/test_acceptance.py -s` to see them.
"""

from __future__ import annotations

import random
import time
import urllib.error
import urllib.parse
import urllib.request
from dataclasses import dataclass, field
from datetime import timedelta, timezone, datetime
from fnmatch import fnmatchcase
from pathlib import Path

import pytest

from build_manager import logfmt
from build_manager.cli import _build_parser, cmd_rebuild_db, cmd_submit
from build_manager.clock import SimClock, SystemClock
from build_manager.config import load_config
from build_manager.core_model import (
    BuildConfig,
    CiJob,
    CiJobSpec,
    Cluster,
    Host,
    Job,
    JobName,
    JobStatus,
    OnCommit,
    Priority,
    RepoRev,
    ResultStatus,
    Scheduled,
    SingleMachine,
    Task,
    Tip,
    UserBuild,
    assign_name,
    free_single_hosts,
    kind_token,
    select_next,
)
from build_manager.executor import LocalExecutor
from build_manager.poller import InMemoryVcs, PollerLoop
from build_manager.runner import Runner
from build_manager.store import Store
from build_manager.timer import TimerLoop
from build_manager.web_server import WebApp, WebConfig, WebServer
from support import (
    REV_A,
    at,
    make_config,
    make_host,
    make_task,
    write_log,
    write_service_config,
)
from test_web_server import assert_valid_html

FIXTURES = Path(__file__).parent / "fixtures"


def report(criterion: str) -> None:
    print(f"ACCEPTANCE {criterion}: PASS")


# ---------------------------------------------------------------------------
# 1. Scheduler invariant suite


def oracle_feasible(config, hosts, running) -> bool:
    live = [j for j in running if j.status is not JobStatus.FINISHED]
    if isinstance(config.host_spec, Cluster):
        cluster_hosts = [h for h in hosts if h.cluster_member]
        if not cluster_hosts:
            return False
        if any(isinstance(j.config.host_spec, Cluster) for j in live):
            return False
        busy = {j.hosts[0] for j in live
                if isinstance(j.config.host_spec, SingleMachine)}
        return not any(h.name in busy for h in cluster_hosts)
    for host in hosts:
        if host.single_slots == 0:
            continue
        if config.host_spec.host_filter is not None and \
                not fnmatchcase(host.name, config.host_spec.host_filter):
            continue
        used = sum(1 for j in live
                   if isinstance(j.config.host_spec, SingleMachine)
                   and j.hosts[0] == host.name)
        if used < host.single_slots:
            return True
    return False


def oracle_pick(queue, hosts, running):
    feasible = [t for t in queue if oracle_feasible(t.config, hosts, running)]
    if not feasible:
        return None
    return min(feasible,
               key=lambda t: (-t.config.priority, t.submitted_at, t.uuid))


@dataclass
class SchedulerSim:
    """Replays the runner's decision logic over in-memory state."""

    hosts: list[Host]
    queue: list[Task] = field(default_factory=list)
    running: list[Job] = field(default_factory=list)
    max_serials: dict[str, int] = field(default_factory=dict)
    claimed_serials: dict[str, list[int]] = field(default_factory=dict)

    def enqueue(self, task: Task) -> None:
        self.queue.append(task)
        self.queue.sort(key=lambda t: (t.submitted_at, t.uuid))

    def claim(self) -> Job | None:
        task = select_next(self.queue, self.hosts, self.running)
        oracle = oracle_pick(self.queue, self.hosts, self.running)
        assert (task is None) == (oracle is None)
        if task is None:
            return None
        assert task.uuid == oracle.uuid, "selection deviates from oracle"
        kind = kind_token(task.config.kind)
        name = assign_name(task.config.kind, self.max_serials.get(kind, 0))
        if isinstance(task.config.host_spec, Cluster):
            job_hosts = tuple(h.name for h in self.hosts if h.cluster_member)
        else:
            job_hosts = (free_single_hosts(
                task.config.host_spec, self.hosts, self.running)[0].name,)
        job = Job(name=name, task_uuid=task.uuid, config=task.config,
                  hosts=job_hosts, started_at=task.submitted_at)
        self.queue.remove(task)
        self.running.append(job)
        self.max_serials[kind] = name.serial
        self.claimed_serials.setdefault(kind, []).append(name.serial)
        return job

    def finalize(self, rng: random.Random) -> None:
        if self.running:
            self.running.remove(rng.choice(self.running))

    def check_invariants(self) -> None:
        clusters = [j for j in self.running
                    if isinstance(j.config.host_spec, Cluster)]
        assert len(clusters) <= 1, "more than one cluster build running"
        occupancy: dict[str, int] = {}
        for job in self.running:
            if isinstance(job.config.host_spec, SingleMachine):
                occupancy[job.hosts[0]] = occupancy.get(job.hosts[0], 0) + 1
        for host in self.hosts:
            assert occupancy.get(host.name, 0) <= host.single_slots, \
                f"slot bound violated on {host.name}"
        for kind, serials in self.claimed_serials.items():
            assert serials == list(range(1, len(serials) + 1)), \
                f"serials for {kind} not gap-free: {serials}"


def test_acceptance_scheduler_invariants():
    rng = random.Random(20250101)
    started = time.monotonic()
    for sequence in range(10_000):
        host_count = rng.randint(1, 5)
        hosts = [Host(name=f"h{i}",
                      cluster_member=rng.random() < 0.4,
                      single_slots=rng.randint(0, 3),
                      address=f"local:/tmp/h{i}")
                 for i in range(host_count)]
        sim = SchedulerSim(hosts)
        ticks = 0
        for _ in range(rng.randint(3, 18)):
            op = rng.random()
            if op < 0.45:
                ticks += 1
                sim.enqueue(Task(
                    uuid=f"{rng.getrandbits(64):016x}",
                    config=make_config(
                        kind=rng.choice(["user", "nightly", "merge"]),
                        cluster=rng.random() < 0.3,
                        host_filter=rng.choice([None, None, "h1", "h*"]),
                        priority=rng.choice(list(Priority)),
                    ),
                    submitted_at=at(ticks),
                ))
            elif op < 0.8:
                sim.claim()
            else:
                sim.finalize(rng)
            sim.check_invariants()
    elapsed = time.monotonic() - started
    assert elapsed < 60, f"invariant suite too slow: {elapsed:.1f} s"
    report("scheduler-invariants (10,000 sequences, "
           f"{elapsed:.1f} s)")


# ---------------------------------------------------------------------------
# 2. Log round-trip through rebuild-db


def test_acceptance_log_round_trip(tmp_path):
    config_path = write_service_config(tmp_path)
    config = load_config(config_path)
    store = Store.open(config.store)
    rng = random.Random(42)
    statuses = list(ResultStatus)
    kinds = ["user", "nightly", "test-board"]
    serials = {kind: 0 for kind in kinds}
    originals = []
    for _ in range(500):
        kind = rng.choice(kinds)
        serials[kind] += 1
        name = JobName(kind, serials[kind])
        revisions = {"main": f"{rng.getrandbits(48):012x}"}
        if rng.random() < 0.5:
            revisions["extra"] = "synced"
        start = at(rng.randint(0, 10_000_000))
        task = make_task(make_config(kind, components={"main": RepoRev(REV_A)}))
        store.enqueue_task(task)
        store.claim_task(task.uuid, name, ["alpha"])
        result = write_log(
            store, name, revisions=revisions,
            status=rng.choice(statuses), started=start,
            finished=start + timedelta(seconds=rng.randint(0, 500_000)),
            output=f"line {rng.random()}\n" * rng.randint(0, 5),
        )
        store.finalize(name, result)
        originals.append(result)
    store.close()

    assert cmd_rebuild_db(str(config_path)) == 0

    store = Store.open(config.store)
    rebuilt = store.list_results()
    store.close()
    key = lambda r: (r.name.kind_str, r.name.serial)
    mismatches = [
        (a, b) for a, b in zip(sorted(originals, key=key), sorted(rebuilt, key=key))
        if a != b
    ]
    assert len(rebuilt) == 500
    assert mismatches == []
    report("log-round-trip (500 builds, 0 mismatches)")


# ---------------------------------------------------------------------------
# 3. Cancellation lifecycle


GRACE = 2.0


def lifecycle_runner(tmp_path, store, script: str):
    vcs = InMemoryVcs()
    vcs.commit("main", {"build.sh": (FIXTURES / script).read_text()}, "seed")
    host = make_host("alpha", address=f"local:{tmp_path}/envs/alpha")
    runner = Runner(
        store, [host], {"alpha": LocalExecutor(host, tmp_path / "envs/alpha")},
        vcs, SystemClock(), build_command="sh build.sh", base_component="main",
        work_dir=tmp_path / "work", notifier=type(
            "N", (), {"notify": staticmethod(lambda s, b: None)})(),
        grace_period=GRACE)
    config = BuildConfig(kind=UserBuild(),
                         components={"main": RepoRev(vcs.tip("main"))},
                         timeout=1.0 if script == "slow.sh" else 3600.0)
    task = Task(uuid=f"{random.getrandbits(64):016x}", config=config,
                submitted_at=SystemClock().now())
    store.enqueue_task(task)
    return runner, task


def run_to_result(runner, store, name, timeout):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        runner.cycle()
        result = store.get_result(name)
        if result is not None:
            return result
        time.sleep(0.05)
    raise AssertionError(f"no result for {name} within {timeout} s")


@pytest.mark.parametrize("script", ["trap_term.sh", "trap_delay.sh",
                                    "ignore_term.sh"])
def test_acceptance_cancellation(tmp_path, store_config, script):
    store = Store.open(store_config, SystemClock())
    try:
        runner, task = lifecycle_runner(tmp_path, store, script)
        runner.cycle()
        assert store.running_jobs(), "job did not start"
        asked = time.monotonic()
        store.request_cancel(task.uuid)
        result = run_to_result(runner, store, JobName("user", 1), GRACE + 5)
        elapsed = time.monotonic() - asked
        assert result.status is ResultStatus.CANCELLED
        assert elapsed <= GRACE + 5
        report(f"cancellation ({script} -> cancelled in {elapsed:.1f} s)")
    finally:
        store.close()


def test_acceptance_timeout(tmp_path, store_config):
    store = Store.open(store_config, SystemClock())
    try:
        runner, task = lifecycle_runner(tmp_path, store, "slow.sh")
        runner.cycle()
        time.sleep(1.1)  # exceed the 1 s budget
        result = run_to_result(runner, store, JobName("user", 1), GRACE + 5)
        assert result.status is ResultStatus.TIMED_OUT
        report("timeout (slow build -> timed_out)")
    finally:
        store.close()


# ---------------------------------------------------------------------------
# 4. End-to-end desk run


def test_acceptance_end_to_end(tmp_path, capsys):
    started_wall = time.monotonic()
    config_path = write_service_config(tmp_path, components=["main", "extra"])
    config = load_config(config_path)
    clock = SimClock(datetime(2025, 6, 9, 12, 0, tzinfo=timezone.utc))
    store = Store.open(config.store, clock)

    vcs = InMemoryVcs()
    vcs.commit("main", {"build.sh": "echo ci run; cat marker.txt 2>/dev/null; true\n"},
               "seed main")
    vcs.commit("extra", {"data.txt": "extra\n"}, "seed extra")

    ci_jobs = [
        CiJobSpec(
            name="on-push",
            trigger=OnCommit(frozenset({"main", "extra"})),
            config_template=BuildConfig(
                kind=CiJob("on-push"),
                components={"main": Tip(), "extra": Tip()}, timeout=300),
        ),
        CiJobSpec(
            name="nightly",
            trigger=Scheduled((0, 0)),
            config_template=BuildConfig(
                kind=CiJob("nightly"),
                components={"main": Tip(), "extra": Tip()}, timeout=300),
        ),
    ]
    poller = PollerLoop(vcs, ["main", "extra"], store, ci_jobs, clock)
    timer = TimerLoop(ci_jobs, store, vcs, clock)
    host = make_host("alpha", address=f"local:{tmp_path}/envs/alpha")
    runner = Runner(
        store, [host], {"alpha": LocalExecutor(host, tmp_path / "envs/alpha")},
        vcs, clock, build_command="sh build.sh", base_component="main",
        work_dir=tmp_path / "work",
        notifier=type("N", (), {"notify": staticmethod(lambda s, b: None)})(),
        grace_period=2.0)

    # prime: first sighting of repositories and schedule state fires each
    # CI job once (the fresh-install baseline build); drain those tasks
    primed = poller.step()
    assert len(primed) == 1
    primed += timer.step()
    assert len(primed) == 2
    for task in list(store.list_queue()):
        store.request_cancel(task.uuid)

    # a commit triggers exactly one CI task
    vcs.commit("main", {"src.txt": "change\n"}, "feature work")
    tasks = poller.step()
    assert len(tasks) == 1
    assert kind_token(tasks[0].config.kind) == "on-push"
    assert poller.step() == []

    # a simulated midnight triggers exactly one scheduled task
    assert timer.step() == []  # today's slot already fired, nothing due
    clock.set(datetime(2025, 6, 10, 0, 0, 30, tzinfo=timezone.utc))
    fired = timer.step()
    assert len(fired) == 1
    assert kind_token(fired[0].config.kind) == "nightly"
    assert timer.step() == []

    # a submitted workspace build carries the marker through to its log
    workspace = tmp_path / "checkout" / "main"
    workspace.mkdir(parents=True)
    (workspace / "build.sh").write_text("echo user build; cat marker.txt\n")
    (workspace / "marker.txt").write_text("marker-content-7391\n")
    args = _build_parser().parse_args(
        ["submit", "--config", str(config_path), "--timeout", "300"])
    assert cmd_submit(args, adapter=vcs, workspace=workspace) == 0
    url = capsys.readouterr().out.strip()
    task_uuid = url.rsplit("/", 1)[-1]
    assert url == f"http://build.test/private/{task_uuid}"

    deadline = time.monotonic() + 25
    while time.monotonic() < deadline and len(store.list_results()) < 3:
        runner.cycle()
        time.sleep(0.05)
    results = store.list_results()
    assert len(results) == 3
    assert {r.name.kind_str for r in results} == {"on-push", "nightly", "user"}
    assert all(r.status is ResultStatus.OK for r in results)

    user_result = next(r for r in results if r.name.kind_str == "user")
    log_text = logfmt.read_compressed(
        Path(store.config.log_dir) / user_result.log_ref).decode()
    assert "marker-content-7391" in log_text

    store.close()
    elapsed = time.monotonic() - started_wall
    assert elapsed < 30, f"desk run took {elapsed:.1f} s"
    report(f"end-to-end desk run ({elapsed:.1f} s)")


# ---------------------------------------------------------------------------
# 5. Web protocol over real HTTP


def http(method: str, url: str, data: dict | None = None):
    body = urllib.parse.urlencode(data).encode() if data is not None else None
    request = urllib.request.Request(url, data=body, method=method)
    try:
        response = urllib.request.urlopen(request, timeout=5)
        return response.status, dict(response.headers), response.read()
    except urllib.error.HTTPError as error:
        return error.code, dict(error.headers), error.read()


def test_acceptance_web_protocol(tmp_path, store_config):
    clock = SystemClock()
    store = Store.open(store_config, clock)
    vcs = InMemoryVcs()
    vcs.commit("main", {"build.sh": (FIXTURES / "trap_term.sh").read_text()}, "seed")
    host = make_host("alpha", address=f"local:{tmp_path}/envs/alpha")
    runner = Runner(
        store, [host], {"alpha": LocalExecutor(host, tmp_path / "envs/alpha")},
        vcs, clock, build_command="sh build.sh", base_component="main",
        work_dir=tmp_path / "work",
        notifier=type("N", (), {"notify": staticmethod(lambda s, b: None)})(),
        grace_period=2.0)
    app = WebApp(store, [host], clock, WebConfig())
    server = WebServer(app, ("127.0.0.1", 0))
    server.start()
    base = f"http://127.0.0.1:{server.port}"
    try:
        # checksum equality on static state, HEAD vs GET
        status, head_headers, body = http("HEAD", f"{base}/")
        assert status == 200 and body == b""
        status, get_headers, page = http("GET", f"{base}/")
        assert head_headers["ETag"] == get_headers["ETag"]

        # mutation changes the checksum
        config = BuildConfig(kind=UserBuild(),
                             components={"main": RepoRev(vcs.tip("main"))},
                             timeout=300)
        task = Task(uuid=f"{random.getrandbits(64):016x}", config=config,
                    submitted_at=clock.now())
        store.enqueue_task(task)
        _, changed_headers, _ = http("HEAD", f"{base}/")
        assert changed_headers["ETag"] != head_headers["ETag"]

        # start the build, then cancel it through the private URL
        runner.cycle()
        assert store.running_jobs()
        status, _, page = http("GET", f"{base}/private/{task.uuid}")
        assert status == 200
        assert b"Cancel build" in page
        status, _, page = http("POST", f"{base}/private/{task.uuid}/cancel", {})
        assert status == 200
        deadline = time.monotonic() + 10
        while time.monotonic() < deadline and not store.get_result(JobName("user", 1)):
            runner.cycle()
            time.sleep(0.05)
        result = store.get_result(JobName("user", 1))
        assert result is not None and result.status is ResultStatus.CANCELLED

        # wrong uuid has no power
        status, _, _ = http("POST", f"{base}/private/{'0' * 32}/cancel", {})
        assert status == 404
        status, _, _ = http("GET", f"{base}/private/{'0' * 32}")
        assert status == 404

        # every page is valid HTML and carries the checksum header
        for path in ("/", "/kind/user", "/build/user/1",
                     f"/private/{task.uuid}", "/ui/kind/user"):
            status, headers, page = http("GET", f"{base}{path}")
            assert status == 200, path
            assert headers["ETag"]
            assert_valid_html(page)
    finally:
        server.stop()
        store.close()
    report("web protocol (checksums, private cancel, 404s, valid HTML)")


# ---------------------------------------------------------------------------
# 6. Log cache


def test_acceptance_log_cache(store, sim_clock):
    task = make_task(make_config("nightly"))
    store.enqueue_task(task)
    name = JobName("nightly", 1)
    store.claim_task(task.uuid, name, ["alpha"])
    store.finalize(name, write_log(store, name))
    app = WebApp(store, [make_host("alpha")], sim_clock,
                 WebConfig(cache_ttl=60.0))
    for _ in range(7):
        assert app.handle_request("GET", "/build/nightly/1").status == 200
        sim_clock.advance(1)
    assert app.cache.loads == 1
    sim_clock.advance(61)
    assert app.handle_request("GET", "/build/nightly/1").status == 200
    assert app.cache.loads == 2
    report("log cache (k hits within ttl -> 1 load; idle past ttl -> 2)")
