"""HTTP facade over the thing registry and the legacy bridge.

One threading server exposes both surfaces: `/things` for registration,
discovery, heartbeats, and membership events; `/bridge` for historical
series reads and actuation commands. A background sweeper expires stale
things on a fixed interval. Everything is stdlib; handlers serialize
through the registry's own lock, so concurrent requests are safe.
"""

from __future__ import annotations

import json
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional
from urllib.parse import parse_qs, urlparse

from .bridge import (
    InvalidPayload,
    LegacyBridge,
    UnknownEntity,
    format_ts,
    parse_ts,
)
from .registry import ConflictingId, Registry, UnknownThing
from .things import (
    InvariantViolation,
    MalformedDocument,
    TdQuery,
    ThingType,
    ValueKind,
    parse_td,
    td_to_dict,
)

DEFAULT_SWEEP_SECONDS = 1.0

_THING = re.compile(r"^/things/([^/]+)$")
_HEARTBEAT = re.compile(r"^/things/([^/]+)/heartbeat$")
_SERIES = re.compile(r"^/bridge/([^/]+)/series$")
_COMMAND = re.compile(r"^/bridge/([^/]+)/command$")


def _make_handler(registry: Registry, bridge: Optional[LegacyBridge]):

    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):  # quiet by default
            pass

        # -- plumbing ------------------------------------------------------

        def _send(self, status: int, payload=None) -> None:
            body = b""
            if payload is not None:
                body = (json.dumps(payload, sort_keys=True) + "\n").encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            if body:
                self.wfile.write(body)

        def _error(self, status: int, message: str) -> None:
            self._send(status, {"error": message})

        def _body(self) -> bytes:
            length = int(self.headers.get("Content-Length", "0"))
            return self.rfile.read(length) if length else b""

        # -- registry routes -----------------------------------------------

        def _post_thing(self) -> None:
            try:
                td = parse_td(self._body())
            except (MalformedDocument, InvariantViolation) as exc:
                return self._error(400, str(exc))
            try:
                created = registry.register(td)
            except ConflictingId as exc:
                return self._error(409, f"conflicting registration for {exc}")
            self._send(201 if created else 200, {"id": td.id})

        def _get_things(self, params: dict) -> None:
            fields = {}
            try:
                if "thingType" in params:
                    fields["thing_type"] = ThingType(params["thingType"][0])
                if "valueKind" in params:
                    fields["value_kind"] = ValueKind(params["valueKind"][0])
                if "domainTag" in params:
                    fields["domain_tag"] = params["domainTag"][0]
                query = TdQuery(**fields)
            except (ValueError, InvariantViolation) as exc:
                return self._error(400, str(exc))
            self._send(200, [td_to_dict(td) for td in registry.query(query)])

        def _get_events(self, params: dict) -> None:
            try:
                cursor = int(params.get("since", ["0"])[0])
            except ValueError:
                return self._error(400, "since must be an integer")
            if cursor < 0:
                return self._error(400, "since must be >= 0")
            self._send(200, [ev.to_dict() for ev in registry.events_since(cursor)])

        # -- bridge routes --------------------------------------------------

        def _get_series(self, entity_id: str, params: dict) -> None:
            if bridge is None:
                return self._error(404, "bridge not mounted")
            try:
                from_ts = parse_ts(params["from"][0])
                to_ts = parse_ts(params["to"][0])
            except KeyError as exc:
                return self._error(400, f"missing query param {exc.args[0]}")
            except ValueError as exc:
                return self._error(400, f"bad timestamp: {exc}")
            resample = None
            if "resample" in params:
                try:
                    resample = int(params["resample"][0])
                except ValueError:
                    return self._error(400, "resample must be an integer")
            try:
                points = bridge.read_series(entity_id, from_ts, to_ts, resample)
            except UnknownEntity:
                return self._error(404, f"unknown entity {entity_id}")
            except ValueError as exc:
                return self._error(400, str(exc))
            self._send(200, [{"ts": format_ts(p.ts), "value": p.value}
                             for p in points])

        def _put_command(self, entity_id: str) -> None:
            if bridge is None:
                return self._error(404, "bridge not mounted")
            try:
                payload = json.loads(self._body() or b"null")
            except json.JSONDecodeError:
                return self._error(400, "body is not valid JSON")
            try:
                record = bridge.publish_command(entity_id, payload)
            except InvalidPayload as exc:
                return self._error(400, str(exc))
            self._send(200, record.to_dict())

        # -- method dispatch -------------------------------------------------

        def do_GET(self) -> None:
            url = urlparse(self.path)
            params = parse_qs(url.query)
            if url.path == "/things":
                return self._get_things(params)
            if url.path == "/events":
                return self._get_events(params)
            m = _THING.match(url.path)
            if m:
                try:
                    td = registry.get(m.group(1))
                except UnknownThing:
                    return self._error(404, f"unknown thing {m.group(1)}")
                return self._send(200, td_to_dict(td))
            m = _SERIES.match(url.path)
            if m:
                return self._get_series(m.group(1), params)
            self._error(404, "no such route")

        def do_POST(self) -> None:
            url = urlparse(self.path)
            if url.path == "/things":
                return self._post_thing()
            m = _HEARTBEAT.match(url.path)
            if m:
                try:
                    registry.heartbeat(m.group(1))
                except UnknownThing:
                    return self._error(404, f"unknown thing {m.group(1)}")
                return self._send(204)
            self._error(404, "no such route")

        def do_DELETE(self) -> None:
            url = urlparse(self.path)
            m = _THING.match(url.path)
            if m:
                try:
                    registry.deregister(m.group(1))
                except UnknownThing:
                    return self._error(404, f"unknown thing {m.group(1)}")
                return self._send(204)
            self._error(404, "no such route")

        def do_PUT(self) -> None:
            url = urlparse(self.path)
            m = _COMMAND.match(url.path)
            if m:
                return self._put_command(m.group(1))
            self._error(404, "no such route")

    return Handler


class TwinService:
    """Threaded HTTP server plus the liveness sweeper, with clean shutdown."""

    def __init__(self, registry: Registry, bridge: Optional[LegacyBridge] = None,
                 host: str = "127.0.0.1", port: int = 0,
                 sweep_interval: float = DEFAULT_SWEEP_SECONDS):
        if sweep_interval <= 0:
            raise ValueError("sweep_interval must be positive")
        self.registry = registry
        self.bridge = bridge
        self._server = ThreadingHTTPServer(
            (host, port), _make_handler(registry, bridge))
        self._server.daemon_threads = True
        self._sweep_interval = sweep_interval
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    @property
    def base_url(self) -> str:
        host, port = self.address
        return f"http://{host}:{port}"

    def _sweep_loop(self) -> None:
        while not self._stop.wait(self._sweep_interval):
            self.registry.liveness_sweep()

    def start(self) -> "TwinService":
        serve = threading.Thread(target=self._server.serve_forever,
                                 name="twinheat-http", daemon=True)
        sweep = threading.Thread(target=self._sweep_loop,
                                 name="twinheat-sweeper", daemon=True)
        self._threads = [serve, sweep]
        serve.start()
        sweep.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        self._server.shutdown()
        self._server.server_close()
        for thread in self._threads:
            thread.join(timeout=5.0)
        self._threads = []

    def __enter__(self) -> "TwinService":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
