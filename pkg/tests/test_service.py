"""The assembled service: all four loops over one store, in process."""

from __future__ import annotations

import time
import urllib.request

import pytest

from build_manager.config import load_config
from build_manager.core_model import ResultStatus
from build_manager.poller import InMemoryVcs
from build_manager.service import Service
from build_manager.store import LockHeld, ServiceLock, Store
from support import write_service_config


@pytest.fixture
def running_service(tmp_path):
    config_path = write_service_config(
        tmp_path,
        ci_jobs=[{"name": "on-push", "on_commit": ["main"], "timeout": 300}],
        hosts=[{"name": "alpha", "address": "local:envs/alpha",
                "single_slots": 2}],
    )
    config = load_config(config_path)
    vcs = InMemoryVcs()
    vcs.commit("main", {"build.sh": "echo service build done\n"}, "seed")
    service = Service(config, adapter=vcs)
    service.start()
    try:
        yield service, config, vcs
    finally:
        service.stop()


def wait_for(predicate, timeout=15.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(0.05)
    return False


class TestService:
    def test_commit_triggered_build_runs_to_completion(self, running_service):
        service, config, vcs = running_service
        # the first poll sights the repository and fires the on-commit job
        assert wait_for(lambda: service.store.list_results()), \
            "no result from the initial CI build"
        (result,) = service.store.list_results()
        assert result.name.kind_str == "on-push"
        assert result.status is ResultStatus.OK

        # dashboard reflects it over real HTTP
        port = service.web_server.port
        with urllib.request.urlopen(f"http://127.0.0.1:{port}/", timeout=5) as rsp:
            body = rsp.read().decode()
        assert "on-push" in body

    def test_service_holds_the_advisory_lock(self, running_service):
        service, config, _ = running_service
        with pytest.raises(LockHeld):
            ServiceLock(config.store.database).acquire()

    def test_state_survives_shutdown(self, tmp_path):
        config_path = write_service_config(
            tmp_path,
            ci_jobs=[{"name": "on-push", "on_commit": ["main"], "timeout": 300}],
        )
        config = load_config(config_path)
        vcs = InMemoryVcs()
        vcs.commit("main", {"build.sh": "echo ok\n"}, "seed")
        service = Service(config, adapter=vcs)
        service.start()
        try:
            assert wait_for(lambda: service.store.list_results())
        finally:
            service.stop()
        reopened = Store.open(config.store)
        try:
            (result,) = reopened.list_results()
            assert result.status is ResultStatus.OK
            assert reopened.running_jobs() == []
        finally:
            reopened.close()

    def test_local_addresses_resolve_against_config_dir(self, running_service):
        service, config, _ = running_service
        base = config.hosts[0].address.removeprefix("local:")
        assert base.startswith(str(config.store.database.parent))
