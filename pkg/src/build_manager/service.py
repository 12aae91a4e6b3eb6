"""The long-running service: poller, timer, runner and web server as
concurrent sub-processes (threads) over one shared store."""

from __future__ import annotations

import logging
import threading
from typing import Callable, Optional

from .clock import Clock, SystemClock
from .config import ServiceConfig
from .executor import Executor, executor_for
from .poller import MercurialVcs, PollerLoop, VcsAdapter
from .runner import CommandNotifier, FileNotifier, Notifier, Runner
from .store import ServiceLock, Store
from .timer import TimerLoop
from .web_server import WebApp, WebConfig, WebServer

log = logging.getLogger(__name__)


class Service:
    """Owns all sub-process loops; start() brings the system up, stop()
    shuts it down without corrupting the store."""

    def __init__(self, config: ServiceConfig,
                 adapter: Optional[VcsAdapter] = None,
                 clock: Optional[Clock] = None,
                 executors: Optional[dict[str, Executor]] = None,
                 notifier: Optional[Notifier] = None):
        self.config = config
        self.clock = clock or SystemClock()
        self.lock = ServiceLock(config.store.database)
        self.store = Store.open(config.store, self.clock)
        self.adapter = adapter or MercurialVcs(config.repositories())
        self.executors = executors or {
            host.name: executor_for(host) for host in config.hosts
        }
        if notifier is None:
            notifier = (CommandNotifier(config.notify_command)
                        if config.notify_command
                        else FileNotifier(config.notifications_file))
        self.notifier = notifier

        self.runner = Runner(
            self.store, config.hosts, self.executors, self.adapter, self.clock,
            build_command=config.build_command,
            base_component=config.base_component,
            work_dir=config.work_dir,
            notifier=self.notifier,
            grace_period=config.grace_period,
        )
        self.poller = PollerLoop(
            self.adapter, config.component_names(), self.store,
            config.ci_jobs, self.clock)
        self.timer = TimerLoop(config.ci_jobs, self.store, self.adapter, self.clock)
        self.webapp = WebApp(
            self.store, config.hosts, self.clock,
            WebConfig(cache_ttl=config.web.cache_ttl,
                      max_log_bytes=config.web.max_log_bytes))
        self.web_server = WebServer(
            self.webapp, (config.web.bind_host, config.web.bind_port))

        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    def _loop(self, name: str, interval: float, step: Callable[[], object]) -> None:
        while not self._stop.is_set():
            try:
                step()
            except Exception:
                log.exception("%s step failed", name)
            if self._stop.wait(interval):
                return

    def start(self) -> None:
        self.lock.acquire()
        self.web_server.start()
        for name, interval, step in (
            ("poller", self.config.poll_interval, self.poller.step),
            ("timer", self.config.timer_interval, self.timer.step),
            ("runner", self.config.runner_interval, self.runner.cycle),
        ):
            thread = threading.Thread(
                target=self._loop, args=(name, interval, step),
                daemon=True, name=name)
            thread.start()
            self._threads.append(thread)
        log.info("service up: web on %s:%s",
                 self.config.web.bind_host, self.web_server.port)

    def request_stop(self) -> None:
        self._stop.set()

    def stop(self) -> None:
        self._stop.set()
        for thread in self._threads:
            thread.join(timeout=30)
        self.web_server.stop()
        self.store.close()
        self.lock.release()

    def wait(self) -> None:
        """Block until request_stop() is called (e.g. from a signal handler)."""
        self._stop.wait()
