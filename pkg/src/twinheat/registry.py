"""In-memory thing registry: registration, liveness, queries, event log.

An entry is live while now - last_seen <= ttl_seconds. Every read path
(get/query/heartbeat) treats overdue entries as absent so behaviour does not
depend on sweep cadence; liveness_sweep materializes the removal and appends
the expired event. The event log is append-only with strictly increasing,
gap-free sequence numbers.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Optional

from .clock import SystemClock
from .things import TdQuery, ThingDescription, matches, serialize_td


class UnknownThing(KeyError):
    pass


class ConflictingId(ValueError):
    pass


@dataclass(frozen=True)
class Event:
    seq: int
    kind: str  # joined | left | expired
    thing_id: str
    ts: float

    def to_dict(self) -> dict:
        return {"seq": self.seq, "kind": self.kind, "thingId": self.thing_id, "ts": self.ts}


@dataclass
class _Entry:
    td: ThingDescription
    canonical: str
    last_seen: float
    reg_seq: int  # seq of the joined event, fixes query ordering


class Registry:
    def __init__(self, clock=None):
        self._clock = clock if clock is not None else SystemClock()
        self._entries: dict[str, _Entry] = {}
        self._events: list[Event] = []
        self._seq = 0
        self._lock = threading.RLock()

    def _emit(self, kind: str, thing_id: str, now: float) -> Event:
        self._seq += 1
        ev = Event(self._seq, kind, thing_id, now)
        self._events.append(ev)
        return ev

    def _is_stale(self, entry: _Entry, now: float) -> bool:
        return now - entry.last_seen > entry.td.ttl_seconds

    def _drop_if_stale(self, thing_id: str, now: float) -> Optional[_Entry]:
        """Return the live entry for thing_id, expiring a stale one in passing."""
        entry = self._entries.get(thing_id)
        if entry is None:
            return None
        if self._is_stale(entry, now):
            del self._entries[thing_id]
            self._emit("expired", thing_id, now)
            return None
        return entry

    def register(self, td: ThingDescription) -> bool:
        """Register or refresh a thing.

        Returns True when the thing newly joined (emits one joined event),
        False when an identical registration only refreshed last_seen.
        Raises ConflictingId when the id is live with a different body.
        """
        canonical = serialize_td(td)
        with self._lock:
            now = self._clock.now()
            entry = self._drop_if_stale(td.id, now)
            if entry is not None:
                if entry.canonical != canonical:
                    raise ConflictingId(td.id)
                entry.last_seen = now
                return False
            ev = self._emit("joined", td.id, now)
            self._entries[td.id] = _Entry(td, canonical, now, ev.seq)
            return True

    def get(self, thing_id: str) -> ThingDescription:
        with self._lock:
            entry = self._drop_if_stale(thing_id, self._clock.now())
            if entry is None:
                raise UnknownThing(thing_id)
            return entry.td

    def query(self, q: TdQuery) -> list[ThingDescription]:
        """Live things matching every set query field, in registration order."""
        with self._lock:
            now = self._clock.now()
            hits = []
            for thing_id in list(self._entries):
                entry = self._drop_if_stale(thing_id, now)
                if entry is not None and matches(entry.td, q):
                    hits.append(entry)
            hits.sort(key=lambda e: e.reg_seq)
            return [e.td for e in hits]

    def heartbeat(self, thing_id: str) -> None:
        with self._lock:
            entry = self._drop_if_stale(thing_id, self._clock.now())
            if entry is None:
                raise UnknownThing(thing_id)
            entry.last_seen = self._clock.now()

    def deregister(self, thing_id: str) -> None:
        with self._lock:
            now = self._clock.now()
            entry = self._drop_if_stale(thing_id, now)
            if entry is None:
                raise UnknownThing(thing_id)
            del self._entries[thing_id]
            self._emit("left", thing_id, now)

    def liveness_sweep(self) -> list[str]:
        """Expire every overdue entry; returns their ids (deterministic order)."""
        with self._lock:
            now = self._clock.now()
            expired = []
            for thing_id in sorted(self._entries):
                entry = self._entries[thing_id]
                if self._is_stale(entry, now):
                    del self._entries[thing_id]
                    self._emit("expired", thing_id, now)
                    expired.append(thing_id)
            return expired

    def events_since(self, cursor: int) -> list[Event]:
        """All events with seq > cursor, oldest first."""
        with self._lock:
            return [e for e in self._events if e.seq > cursor]

    def live_ids(self) -> list[str]:
        with self._lock:
            now = self._clock.now()
            return sorted(t for t in list(self._entries) if self._drop_if_stale(t, now))
