from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from build_manager.clock import SimClock
from build_manager.store import Store, StoreConfig


@pytest.fixture
def sim_clock():
    return SimClock()


@pytest.fixture
def store_config(tmp_path) -> StoreConfig:
    return StoreConfig(
        database=tmp_path / "state.db",
        log_dir=tmp_path / "logs",
        sync_dir=tmp_path / "sync",
    )


@pytest.fixture
def store(store_config, sim_clock):
    handle = Store.open(store_config, sim_clock)
    yield handle
    handle.close()
