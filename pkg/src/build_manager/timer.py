"""Time-triggered CI tasks: fire each scheduled job once per slot.

Schedule arithmetic is all UTC. Slots missed while the service was down
collapse into a single firing of the latest slot; a slot never fires
twice (last_fired records the slot instant, not the firing time).
"""

from __future__ import annotations

import logging
import uuid as uuidlib
from dataclasses import dataclass, field
from datetime import datetime, time, timedelta, timezone
from typing import Optional, Sequence

from .clock import Clock
from .core_model import CiJobSpec, Scheduled, Task, instantiate_template
from .poller import VcsAdapter, VcsError
from .store import Store

log = logging.getLogger(__name__)


@dataclass
class ScheduleState:
    """Last-fired slot per CI job; persisted in the store."""

    last_fired: dict[str, datetime] = field(default_factory=dict)


def latest_slot(trigger: Scheduled, now: datetime) -> Optional[datetime]:
    """The most recent scheduled instant at or before `now`."""
    hour, minute = trigger.time_of_day
    for days_back in range(8):
        day = (now - timedelta(days=days_back)).date()
        if day.weekday() not in trigger.days:
            continue
        candidate = datetime.combine(day, time(hour, minute), tzinfo=timezone.utc)
        if candidate <= now:
            return candidate
    return None


def due_jobs(specs: Sequence[CiJobSpec], state: ScheduleState,
             now: datetime) -> list[CiJobSpec]:
    """Scheduled specs whose latest slot has not fired yet."""
    due = []
    for spec in specs:
        if not isinstance(spec.trigger, Scheduled):
            continue
        slot = latest_slot(spec.trigger, now)
        if slot is None:
            continue
        fired = state.last_fired.get(spec.name)
        if fired is None or slot > fired:
            due.append(spec)
    return due


def fire(spec: CiJobSpec, now: datetime, adapter: VcsAdapter,
         clock: Clock) -> tuple[Task, datetime]:
    """Instantiate the job's template at current tips.

    Returns the task and the slot instant to record as last_fired.
    Raises VcsError when tips cannot be resolved; the job stays due.
    """
    assert isinstance(spec.trigger, Scheduled)
    slot = latest_slot(spec.trigger, now)
    if slot is None:
        raise ValueError(f"job {spec.name} has no due slot at {now}")
    tips = {
        component: adapter.tip(component)
        for component in spec.config_template.components
    }
    task = Task(
        uuid=str(uuidlib.uuid4()),
        config=instantiate_template(spec.config_template, tips),
        submitted_at=clock.now(),
        description=f"scheduled run for slot {slot:%Y-%m-%dT%H:%MZ}",
    )
    return task, slot


class TimerLoop:
    """The service's timer sub-process; wakes every interval and fires
    whatever is due, recording each firing atomically with the enqueue."""

    def __init__(self, specs: Sequence[CiJobSpec], store: Store,
                 adapter: VcsAdapter, clock: Clock):
        self.specs = [s for s in specs if isinstance(s.trigger, Scheduled)]
        self.store = store
        self.adapter = adapter
        self.clock = clock

    def step(self) -> list[Task]:
        now = self.clock.now()
        state = ScheduleState(self.store.schedule_state())
        fired: list[Task] = []
        for spec in due_jobs(self.specs, state, now):
            try:
                task, slot = fire(spec, now, self.adapter, self.clock)
            except VcsError as exc:
                log.warning("cannot fire %s, repositories unavailable: %s",
                            spec.name, exc)
                continue
            self.store.record_fire(spec.name, slot, task)
            fired.append(task)
        return fired
