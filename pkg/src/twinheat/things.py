"""Thing descriptions: the registry's document format for sensors and actuators.

A ThingDescription is a pure value object. Serialization is canonical JSON
(sorted keys, no whitespace) so equal documents have equal bytes, which the
registry relies on for idempotent re-registration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Optional


class ThingType(str, Enum):
    SENSOR = "sensor"
    ACTUATOR = "actuator"
    SOFTWARE = "software"


class ValueKind(str, Enum):
    TEMPERATURE_CELSIUS = "temperature_celsius"
    HUMIDITY_PERCENT = "humidity_percent"
    OCCUPANCY_COUNT = "occupancy_count"
    POWER_FRACTION = "power_fraction"
    GENERIC_NUMBER = "generic_number"


# Short path segment used when a property href is derived from its value kind
# (the bridge names properties this way: /properties/temperature etc).
HREF_SLUG = {
    ValueKind.TEMPERATURE_CELSIUS: "temperature",
    ValueKind.HUMIDITY_PERCENT: "humidity",
    ValueKind.OCCUPANCY_COUNT: "occupancy",
    ValueKind.POWER_FRACTION: "power",
    ValueKind.GENERIC_NUMBER: "value",
}


class MalformedDocument(ValueError):
    """Input is not a JSON object at all."""


class InvariantViolation(ValueError):
    """Document parsed but violates a schema invariant.

    `field` names the offending field.
    """

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class PropertyDef:
    name: str
    value_kind: ValueKind
    readable: bool
    writable: bool
    href: str


@dataclass(frozen=True)
class ActionDef:
    name: str
    href: str


@dataclass(frozen=True)
class ThingDescription:
    id: str
    title: str
    thing_type: ThingType
    domain_tag: str
    properties: tuple[PropertyDef, ...]
    actions: tuple[ActionDef, ...] = ()
    base_endpoint: str = ""
    ttl_seconds: float = 300.0


@dataclass(frozen=True)
class TdQuery:
    """Registry query; at least one field must be set."""

    thing_type: Optional[ThingType] = None
    domain_tag: Optional[str] = None
    value_kind: Optional[ValueKind] = None

    def __post_init__(self):
        if self.thing_type is None and self.domain_tag is None and self.value_kind is None:
            raise InvariantViolation("query", "at least one field must be set")


def _check(td: ThingDescription) -> None:
    if not td.id:
        raise InvariantViolation("id", "must be a nonempty string")
    if not td.title:
        raise InvariantViolation("title", "must be a nonempty string")
    if not (td.ttl_seconds > 0):
        raise InvariantViolation("ttlSeconds", "must be > 0")
    seen = set()
    for p in td.properties:
        if not p.name:
            raise InvariantViolation("properties.name", "must be nonempty")
        if p.name in seen:
            raise InvariantViolation("properties.name", f"duplicate property {p.name!r}")
        seen.add(p.name)
        if not (p.readable or p.writable):
            raise InvariantViolation("properties", f"{p.name!r} is neither readable nor writable")
        if not p.href:
            raise InvariantViolation("properties.href", "must be nonempty")
    seen = set()
    for a in td.actions:
        if not a.name:
            raise InvariantViolation("actions.name", "must be nonempty")
        if a.name in seen:
            raise InvariantViolation("actions.name", f"duplicate action {a.name!r}")
        seen.add(a.name)
        if not a.href:
            raise InvariantViolation("actions.href", "must be nonempty")


def td_to_dict(td: ThingDescription) -> dict:
    return {
        "id": td.id,
        "title": td.title,
        "thingType": td.thing_type.value,
        "domainTag": td.domain_tag,
        "properties": [
            {
                "name": p.name,
                "valueKind": p.value_kind.value,
                "readable": p.readable,
                "writable": p.writable,
                "href": p.href,
            }
            for p in td.properties
        ],
        "actions": [{"name": a.name, "href": a.href} for a in td.actions],
        "baseEndpoint": td.base_endpoint,
        "ttlSeconds": float(td.ttl_seconds),
    }


def serialize_td(td: ThingDescription) -> str:
    """Render a TD as canonical JSON (sorted keys, compact separators)."""
    _check(td)
    return json.dumps(td_to_dict(td), sort_keys=True, separators=(",", ":"))


_TOP_KEYS = {
    "id",
    "title",
    "thingType",
    "domainTag",
    "properties",
    "actions",
    "baseEndpoint",
    "ttlSeconds",
}
_PROP_KEYS = {"name", "valueKind", "readable", "writable", "href"}
_ACTION_KEYS = {"name", "href"}


def _str_field(doc: dict, key: str) -> str:
    v = doc.get(key)
    if not isinstance(v, str):
        raise InvariantViolation(key, "must be a string")
    return v


def td_from_dict(doc: dict) -> ThingDescription:
    if not isinstance(doc, dict):
        raise MalformedDocument("document is not a JSON object")
    extra = set(doc) - _TOP_KEYS
    if extra:
        raise InvariantViolation(sorted(extra)[0], "unknown field")
    missing = _TOP_KEYS - set(doc)
    if missing:
        raise InvariantViolation(sorted(missing)[0], "missing field")

    try:
        thing_type = ThingType(_str_field(doc, "thingType"))
    except ValueError:
        raise InvariantViolation("thingType", f"unknown value {doc.get('thingType')!r}")

    props = doc["properties"]
    if not isinstance(props, list):
        raise InvariantViolation("properties", "must be an array")
    parsed_props = []
    for raw in props:
        if not isinstance(raw, dict) or set(raw) != _PROP_KEYS:
            raise InvariantViolation("properties", "each property needs exactly "
                                     f"{sorted(_PROP_KEYS)}")
        try:
            kind = ValueKind(raw["valueKind"])
        except ValueError:
            raise InvariantViolation("properties.valueKind",
                                     f"unknown value {raw['valueKind']!r}")
        if not isinstance(raw["readable"], bool) or not isinstance(raw["writable"], bool):
            raise InvariantViolation("properties", "readable/writable must be booleans")
        if not isinstance(raw["name"], str) or not isinstance(raw["href"], str):
            raise InvariantViolation("properties", "name/href must be strings")
        parsed_props.append(PropertyDef(raw["name"], kind, raw["readable"],
                                        raw["writable"], raw["href"]))

    actions = doc["actions"]
    if not isinstance(actions, list):
        raise InvariantViolation("actions", "must be an array")
    parsed_actions = []
    for raw in actions:
        if not isinstance(raw, dict) or set(raw) != _ACTION_KEYS:
            raise InvariantViolation("actions", f"each action needs exactly {sorted(_ACTION_KEYS)}")
        if not isinstance(raw["name"], str) or not isinstance(raw["href"], str):
            raise InvariantViolation("actions", "name/href must be strings")
        parsed_actions.append(ActionDef(raw["name"], raw["href"]))

    ttl = doc["ttlSeconds"]
    if isinstance(ttl, bool) or not isinstance(ttl, (int, float)):
        raise InvariantViolation("ttlSeconds", "must be a number")

    td = ThingDescription(
        id=_str_field(doc, "id"),
        title=_str_field(doc, "title"),
        thing_type=thing_type,
        domain_tag=_str_field(doc, "domainTag"),
        properties=tuple(parsed_props),
        actions=tuple(parsed_actions),
        base_endpoint=_str_field(doc, "baseEndpoint"),
        ttl_seconds=float(ttl),
    )
    _check(td)
    return td


def parse_td(text: str | bytes) -> ThingDescription:
    """Parse and validate a TD document.

    Raises MalformedDocument for non-JSON input and InvariantViolation
    (naming the field) for schema violations.
    """
    try:
        doc = json.loads(text)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedDocument(str(exc))
    if not isinstance(doc, dict):
        raise MalformedDocument("document is not a JSON object")
    return td_from_dict(doc)


def matches(td: ThingDescription, query: TdQuery) -> bool:
    """True when the TD satisfies every field the query sets.

    A value_kind constraint is satisfied by any one property.
    """
    if query.thing_type is not None and td.thing_type != query.thing_type:
        return False
    if query.domain_tag is not None and td.domain_tag != query.domain_tag:
        return False
    if query.value_kind is not None:
        if not any(p.value_kind == query.value_kind for p in td.properties):
            return False
    return True
