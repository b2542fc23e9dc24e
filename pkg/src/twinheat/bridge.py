"""Bridge between legacy CSV sensor exports and the thing registry.

Ingested rows land in an in-memory series store keyed by entity id. The first
time an entity appears it is wrapped in a ThingDescription and registered, so
legacy devices show up in queries like native things. Actuation goes the other
way: commands are appended to a JSONL log with strictly increasing offsets.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Optional

from .clock import SystemClock
from .registry import Registry
from .things import (
    HREF_SLUG,
    ActionDef,
    PropertyDef,
    ThingDescription,
    ThingType,
    ValueKind,
)

CSV_HEADER = ["ts", "entity_id", "domain", "value"]

# Legacy domain -> property value kind. Unknown domains fall back to a plain number.
DOMAIN_VALUE_KIND = {
    "climate": ValueKind.TEMPERATURE_CELSIUS,
    "weather": ValueKind.TEMPERATURE_CELSIUS,
    "humidity": ValueKind.HUMIDITY_PERCENT,
    "occupancy": ValueKind.OCCUPANCY_COUNT,
    "heater": ValueKind.POWER_FRACTION,
}
# Domains whose entities accept commands.
ACTUATOR_DOMAINS = {"heater"}

BRIDGED_TTL_SECONDS = 3600.0


class MalformedRow(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class UnparseableTimestamp(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class UnknownEntity(KeyError):
    pass


class InvalidPayload(ValueError):
    pass


@dataclass(frozen=True)
class SeriesPoint:
    ts: float  # unix seconds, UTC
    value: float


@dataclass(frozen=True)
class CommandRecord:
    offset: int
    ts: float
    topic: str
    payload: dict

    def to_dict(self) -> dict:
        return {"offset": self.offset, "ts": self.ts, "topic": self.topic,
                "payload": self.payload}


def parse_ts(text: str) -> float:
    """ISO-8601 UTC timestamp -> unix seconds."""
    raw = text.strip()
    if raw.endswith("Z"):
        raw = raw[:-1] + "+00:00"
    dt = datetime.fromisoformat(raw)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def format_ts(ts: float) -> str:
    return datetime.fromtimestamp(ts, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def entity_td(entity_id: str, domain: str) -> ThingDescription:
    """ThingDescription for a bridged legacy entity."""
    kind = DOMAIN_VALUE_KIND.get(domain, ValueKind.GENERIC_NUMBER)
    slug = HREF_SLUG[kind]
    is_actuator = domain in ACTUATOR_DOMAINS
    actions = ()
    if is_actuator:
        actions = (ActionDef("set_power", f"/bridge/{entity_id}/command"),)
    return ThingDescription(
        id=entity_id,
        title=entity_id,
        thing_type=ThingType.ACTUATOR if is_actuator else ThingType.SENSOR,
        domain_tag=domain,
        properties=(
            PropertyDef(slug, kind, readable=True, writable=is_actuator,
                        href=f"/properties/{slug}"),
        ),
        actions=actions,
        base_endpoint=f"/bridge/{entity_id}",
        ttl_seconds=BRIDGED_TTL_SECONDS,
    )


@dataclass
class IngestStats:
    rows: int = 0
    new_entities: list[str] = field(default_factory=list)


class LegacyBridge:
    def __init__(self, registry: Optional[Registry] = None, clock=None,
                 command_log_path: Optional[str | Path] = None):
        self.registry = registry
        self._clock = clock if clock is not None else SystemClock()
        # entity -> {ts: value}; duplicate (entity, ts) keeps the last row seen
        self._series: dict[str, dict[float, float]] = {}
        self._domains: dict[str, str] = {}
        self._sorted_cache: dict[str, list[SeriesPoint]] = {}
        self._commands: list[CommandRecord] = []
        self._command_log_path = Path(command_log_path) if command_log_path else None

    # -- ingest ------------------------------------------------------------

    def ingest_csv(self, source: str | Path | io.TextIOBase) -> IngestStats:
        """Ingest a legacy CSV export (header ts,entity_id,domain,value).

        Duplicate (entity, ts) pairs are resolved last-write-wins, so
        re-ingesting the same file is a no-op for store state.
        """
        if isinstance(source, (str, Path)):
            with open(source, newline="") as fh:
                return self._ingest(fh)
        return self._ingest(source)

    def _ingest(self, fh) -> IngestStats:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MalformedRow(1, "missing header")
        if [h.strip() for h in header] != CSV_HEADER:
            raise MalformedRow(1, f"expected header {','.join(CSV_HEADER)}")
        stats = IngestStats()
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise MalformedRow(line_no, f"expected 4 fields, got {len(row)}")
            raw_ts, entity_id, domain, raw_value = (f.strip() for f in row)
            if not entity_id:
                raise MalformedRow(line_no, "empty entity_id")
            try:
                ts = parse_ts(raw_ts)
            except ValueError as exc:
                raise UnparseableTimestamp(line_no, f"{raw_ts!r}: {exc}")
            try:
                value = float(raw_value)
            except ValueError:
                raise MalformedRow(line_no, f"bad value {raw_value!r}")
            if not math.isfinite(value):
                raise MalformedRow(line_no, f"non-finite value {raw_value!r}")
            self._store(entity_id, domain, ts, value, stats)
            stats.rows += 1
        return stats

    def _store(self, entity_id: str, domain: str, ts: float, value: float,
               stats: IngestStats) -> None:
        series = self._series.get(entity_id)
        if series is None:
            series = {}
            self._series[entity_id] = series
            self._domains[entity_id] = domain
            stats.new_entities.append(entity_id)
            if self.registry is not None:
                self.registry.register(entity_td(entity_id, domain))
        series[ts] = value
        self._sorted_cache.pop(entity_id, None)

    # -- reads ---------------------------------------------------------------

    def entities(self) -> list[str]:
        return sorted(self._series)

    def domain_of(self, entity_id: str) -> str:
        if entity_id not in self._domains:
            raise UnknownEntity(entity_id)
        return self._domains[entity_id]

    def _sorted(self, entity_id: str) -> list[SeriesPoint]:
        if entity_id not in self._series:
            raise UnknownEntity(entity_id)
        cached = self._sorted_cache.get(entity_id)
        if cached is None:
            cached = [SeriesPoint(ts, v) for ts, v in sorted(self._series[entity_id].items())]
            self._sorted_cache[entity_id] = cached
        return cached

    def read_series(self, entity_id: str, from_ts: float, to_ts: float,
                    resample_minutes: Optional[int] = None) -> list[SeriesPoint]:
        """Points with from_ts <= ts <= to_ts (inclusive both ends).

        With resample_minutes set, returns one point per bucket, stamped at
        the bucket start, valued at the mean of the raw points inside the
        bucket. Empty buckets forward-fill the previous bucket; a leading gap
        back-fills from the first populated bucket.
        """
        if from_ts > to_ts:
            raise ValueError("from_ts must be <= to_ts")
        pts = [p for p in self._sorted(entity_id) if from_ts <= p.ts <= to_ts]
        if resample_minutes is None:
            return pts
        if resample_minutes <= 0:
            raise ValueError("resample_minutes must be positive")
        width = resample_minutes * 60.0
        n_buckets = int((to_ts - from_ts) // width) + 1
        sums = [0.0] * n_buckets
        counts = [0] * n_buckets
        for p in pts:
            idx = int((p.ts - from_ts) // width)
            if idx >= n_buckets:
                idx = n_buckets - 1
            sums[idx] += p.value
            counts[idx] += 1
        means: list[Optional[float]] = [
            (sums[i] / counts[i]) if counts[i] else None for i in range(n_buckets)
        ]
        first = next((m for m in means if m is not None), None)
        if first is None:
            return []
        out = []
        last = first
        for i, m in enumerate(means):
            if m is not None:
                last = m
            out.append(SeriesPoint(from_ts + i * width, last))
        return out

    # -- commands ------------------------------------------------------------

    def publish_command(self, entity_id: str, payload: dict) -> CommandRecord:
        """Validate and append an actuation command; offsets strictly increase."""
        if not isinstance(payload, dict):
            raise InvalidPayload("payload must be an object")
        if "power_fraction" not in payload:
            raise InvalidPayload("missing power_fraction")
        power = payload["power_fraction"]
        if isinstance(power, bool) or not isinstance(power, (int, float)):
            raise InvalidPayload("power_fraction must be a number")
        if not (0.0 <= power <= 1.0):
            raise InvalidPayload(f"power_fraction {power!r} outside [0, 1]")
        if payload.get("entity_id", entity_id) != entity_id:
            raise InvalidPayload("payload entity_id does not match target")
        record = CommandRecord(
            offset=len(self._commands),
            ts=self._clock.now(),
            topic=f"cmd/{entity_id}",
            payload={"entity_id": entity_id, "power_fraction": float(power)},
        )
        self._commands.append(record)
        if self._command_log_path is not None:
            with open(self._command_log_path, "a") as fh:
                fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
        return record

    @property
    def commands(self) -> list[CommandRecord]:
        return list(self._commands)
