"""REST gateway over a signal registry.

Routes::

    GET  /v1/{namespace}/signals          list descriptors
    GET  /v1/{namespace}/signals/{name}   latest sample (204 if never written)
    PUT  /v1/{namespace}/signals/{name}   write; echoes the applied sample
    GET  /v1/{namespace}/status           ok | degraded | offline + staleness

A cloud node additionally serves ``POST /v1/replication/merge`` and
``POST /v1/replication/fetch`` so RIs in other processes can replicate over
the same wire. Payloads are JSON; floats use the shortest repr that round-trips.
"""

from __future__ import annotations

import errno
import http.client
import json
import logging
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable
from urllib.parse import unquote, urlsplit

from .signals import (
    NonFinite,
    Quality,
    SignalDescriptor,
    SignalRegistry,
    SignalSample,
    Superseded,
    UnknownSignal,
    signal_key,
)

log = logging.getLogger(__name__)

JSON = "application/json"


class PortInUse(OSError):
    pass


class EndpointUnreachable(ConnectionError):
    pass


class UapiError(Exception):
    def __init__(self, status: int, body: Any):
        super().__init__(f"HTTP {status}: {body}")
        self.status = status
        self.body = body


@dataclass
class Response:
    status: int
    body: Any = None


def descriptor_to_dict(d: SignalDescriptor) -> dict:
    return {
        "namespace": d.namespace, "name": d.name, "unit": d.unit,
        "min": d.min, "max": d.max, "kind": d.kind.value,
    }


def sample_to_dict(s: SignalSample) -> dict:
    return {
        "namespace": s.descriptor.namespace,
        "name": s.descriptor.name,
        "value": s.value,
        "unit": s.descriptor.unit,
        "timestamp_ms": s.timestamp,
        "quality": s.quality.value,
        "origin": s.origin,
    }


def sample_from_dict(registry: SignalRegistry, body: dict) -> SignalSample:
    d = registry.descriptor(signal_key(body["namespace"], body["name"]))
    return SignalSample(d, float(body["value"]), int(body["timestamp_ms"]),
                        str(body["origin"]), Quality(body["quality"]))


def _error(status: int, code: str, detail: str = "") -> Response:
    return Response(status, {"error": code, "detail": detail})


class UapiService:
    """Transport-free request handlers for one registry.

    ``clock`` returns the current time in ms on the same scale as sample
    timestamps; simulated runs pass the scenario clock.
    """

    def __init__(
        self,
        registry: SignalRegistry,
        namespaces=None,
        node_id: str = "uapi",
        clock: Callable[[], int] | None = None,
        horizon_ms: int = 2000,
        subscriptions: dict[str, set[str]] | None = None,
    ):
        self.registry = registry
        self.namespaces = set(namespaces) if namespaces is not None else registry.namespaces()
        self.node_id = node_id
        self.clock = clock or (lambda: int(time.time() * 1000))
        self.horizon_ms = horizon_ms
        self._subscriptions = subscriptions
        self.started_ms = self.clock()
        self.offline = False
        self.routes: dict[tuple[str, str], Callable[[Any], Response]] = {}

    # -- handlers ------------------------------------------------------------

    def handle_list(self, namespace: str) -> Response:
        if namespace not in self.namespaces:
            return _error(404, "not-found", f"unknown namespace {namespace}")
        return Response(200, {
            "namespace": namespace,
            "signals": [descriptor_to_dict(d) for d in self.registry.descriptors(namespace)],
        })

    def handle_get(self, namespace: str, name: str) -> Response:
        key = signal_key(namespace, name)
        if namespace not in self.namespaces or key not in self.registry:
            return _error(404, "not-found", key)
        sample = self.registry.read(key)
        if sample is None:
            return Response(204)
        return Response(200, sample_to_dict(sample))

    def handle_set(self, namespace: str, name: str, body: Any) -> Response:
        key = signal_key(namespace, name)
        if namespace not in self.namespaces or key not in self.registry:
            return _error(404, "not-found", key)
        if isinstance(body, dict):
            raw = body.get("value")
            ts = body.get("timestamp_ms")
            origin = body.get("origin") or self.node_id
        else:
            raw, ts, origin = body, None, self.node_id
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            return _error(422, "unprocessable", "value must be a number")
        if ts is None:
            ts = self.clock()
        elif isinstance(ts, bool) or not isinstance(ts, int):
            return _error(422, "unprocessable", "timestamp_ms must be an integer")
        try:
            sample = self.registry.write(key, raw, ts, str(origin))
        except NonFinite as exc:
            return _error(422, "unprocessable", str(exc))
        except Superseded as exc:
            return _error(409, "superseded", str(exc))
        return Response(200, sample_to_dict(sample))

    def subscribed(self, namespace: str) -> list[str]:
        if self._subscriptions is not None and namespace in self._subscriptions:
            return sorted(self._subscriptions[namespace])
        return [d.key for d in self.registry.descriptors(namespace)]

    def handle_status(self, namespace: str) -> Response:
        if namespace not in self.namespaces:
            return _error(404, "not-found", f"unknown namespace {namespace}")
        now = self.clock()
        signals = {}
        for key in self.subscribed(namespace):
            sample = self.registry.read(key)
            signals[key] = {
                "stale": self.registry.is_stale(key, now, self.horizon_ms),
                "age_ms": None if sample is None else now - sample.timestamp,
            }
        if self.offline:
            status = "offline"
        elif any(v["stale"] for v in signals.values()):
            status = "degraded"
        else:
            status = "ok"
        return Response(200, {
            "namespace": namespace,
            "status": status,
            "uptime_ms": now - self.started_ms,
            "signals": signals,
        })

    # -- routing -------------------------------------------------------------

    def add_route(self, method: str, path: str, handler: Callable[[Any], Response]) -> None:
        self.routes[method, path] = handler

    def dispatch(self, method: str, path: str, body: bytes = b"") -> Response:
        parts = [unquote(p) for p in urlsplit(path).path.strip("/").split("/")]
        try:
            payload = json.loads(body) if body else None
        except (ValueError, UnicodeDecodeError):
            if method == "GET":
                payload = None
            else:
                return _error(422, "unprocessable", "body is not valid JSON")
        route = self.routes.get((method, "/" + "/".join(parts)))
        if route is not None:
            return route(payload)
        if len(parts) >= 3 and parts[0] == "v1":
            ns = parts[1]
            if parts[2:] == ["signals"] and method == "GET":
                return self.handle_list(ns)
            if parts[2:] == ["status"] and method == "GET":
                return self.handle_status(ns)
            if len(parts) == 4 and parts[2] == "signals":
                if method == "GET":
                    return self.handle_get(ns, parts[3])
                if method == "PUT":
                    return self.handle_set(ns, parts[3], payload)
                return _error(405, "method-not-allowed", method)
        return _error(404, "not-found", path)


class CloudService(UapiService):
    """uAPI for the cloud node, with batch replication routes."""

    def __init__(self, registry: SignalRegistry, **kwargs):
        kwargs.setdefault("node_id", "cloud")
        super().__init__(registry, **kwargs)
        self.add_route("POST", "/v1/replication/merge", self._merge)
        self.add_route("POST", "/v1/replication/fetch", self._fetch)

    def _merge(self, payload) -> Response:
        try:
            samples = [sample_from_dict(self.registry, s) for s in payload["samples"]]
        except UnknownSignal as exc:
            return _error(404, "not-found", str(exc))
        except (KeyError, TypeError, ValueError) as exc:
            return _error(422, "unprocessable", str(exc))
        return Response(200, {"applied": [self.registry.merge(s) for s in samples]})

    def _fetch(self, payload) -> Response:
        try:
            keys = [str(k) for k in payload["keys"]]
        except (KeyError, TypeError) as exc:
            return _error(422, "unprocessable", str(exc))
        out = {}
        for k in keys:
            if k not in self.registry:
                return _error(404, "not-found", k)
            s = self.registry.read(k)
            out[k] = None if s is None else sample_to_dict(s)
        return Response(200, {"samples": out})


# -- HTTP binding --------------------------------------------------------------


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    # Headers and body go out in separate writes; without this, delayed ACKs
    # add ~40 ms to every keep-alive round trip.
    disable_nagle_algorithm = True
    service: UapiService  # set on the per-server subclass

    def _handle(self):
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length) if length else b""
        try:
            resp = self.service.dispatch(self.command, self.path, body)
        except Exception as exc:  # keep serving; report as 500
            log.exception("handler failed")
            resp = _error(500, "internal", repr(exc))
        data = b"" if resp.body is None else json.dumps(resp.body, allow_nan=False).encode()
        self.send_response(resp.status)
        if resp.status != 204:
            self.send_header("Content-Type", JSON)
            self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        if resp.status != 204:
            self.wfile.write(data)

    do_GET = do_PUT = do_POST = do_DELETE = _handle

    def log_message(self, format, *args):
        log.debug("%s - %s", self.address_string(), format % args)


class UapiServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = False


def make_server(service: UapiService, host: str = "127.0.0.1", port: int = 0) -> UapiServer:
    handler = type("BoundHandler", (_Handler,), {"service": service})
    try:
        return UapiServer((host, port), handler)
    except OSError as exc:
        if exc.errno == errno.EADDRINUSE:
            raise PortInUse(errno.EADDRINUSE, f"port {port} in use") from exc
        raise


def start_server(service: UapiService, host: str = "127.0.0.1", port: int = 0):
    """Serve in a daemon thread. Returns the server; ``server.server_address`` has the port."""
    server = make_server(service, host, port)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    return server


class UapiClient:
    """Keep-alive JSON client; one connection per calling thread."""

    def __init__(self, base_url: str, timeout: float = 10.0):
        parts = urlsplit(base_url if "://" in base_url else f"http://{base_url}")
        self.host = parts.hostname or "127.0.0.1"
        self.port = parts.port or 80
        self.timeout = timeout
        self._local = threading.local()

    @property
    def base_url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def _conn(self) -> http.client.HTTPConnection:
        conn = getattr(self._local, "conn", None)
        if conn is None:
            conn = http.client.HTTPConnection(self.host, self.port, timeout=self.timeout)
            self._local.conn = conn
        return conn

    def close(self) -> None:
        conn = getattr(self._local, "conn", None)
        if conn is not None:
            conn.close()
            self._local.conn = None

    def request(self, method: str, path: str, body: Any = None, raw: bytes | None = None,
                idempotent: bool = True):
        data = raw if raw is not None else (None if body is None else json.dumps(body, allow_nan=False).encode())
        headers = {"Content-Type": JSON} if data is not None else {}
        for attempt in (0, 1):
            conn = self._conn()
            try:
                conn.request(method, path, body=data, headers=headers)
                resp = conn.getresponse()
                payload = resp.read()
                break
            except (ConnectionError, http.client.HTTPException, OSError) as exc:
                self.close()
                if attempt or not idempotent:
                    raise EndpointUnreachable(f"{self.base_url}{path}: {exc}") from exc
        if resp.status == 204:
            return None
        parsed = json.loads(payload) if payload else None
        if resp.status >= 400:
            raise UapiError(resp.status, parsed)
        return parsed

    def list(self, namespace: str) -> list[dict]:
        return self.request("GET", f"/v1/{namespace}/signals")["signals"]

    def get(self, namespace: str, name: str) -> dict | None:
        return self.request("GET", f"/v1/{namespace}/signals/{name}")

    def set(self, namespace: str, name: str, value: float, timestamp_ms: int | None = None,
            origin: str | None = None) -> dict:
        body: dict[str, Any] = {"value": value}
        if timestamp_ms is not None:
            body["timestamp_ms"] = timestamp_ms
        if origin is not None:
            body["origin"] = origin
        return self.request("PUT", f"/v1/{namespace}/signals/{name}", body)

    def status(self, namespace: str) -> dict:
        return self.request("GET", f"/v1/{namespace}/status")

    def wait_ready(self, namespace: str, timeout: float = 15.0) -> None:
        deadline = time.monotonic() + timeout
        while True:
            try:
                self.status(namespace)
                return
            except (EndpointUnreachable, UapiError):
                if time.monotonic() > deadline:
                    raise EndpointUnreachable(f"{self.base_url} not ready after {timeout}s")
                time.sleep(0.05)


class RemoteCloud:
    """Cloud side of the star reached over the wire (see CloudService)."""

    def __init__(self, client: UapiClient, registry: SignalRegistry):
        self.client = client
        self.registry = registry  # local catalog used to rebuild samples

    def merge_many(self, samples: list[SignalSample]) -> list[bool]:
        resp = self.client.request("POST", "/v1/replication/merge",
                                   {"samples": [sample_to_dict(s) for s in samples]})
        return resp["applied"]

    def fetch(self, keys: list[str]) -> dict[str, SignalSample | None]:
        try:
            resp = self.client.request("POST", "/v1/replication/fetch", {"keys": keys})
        except UapiError as exc:
            if exc.status == 404:
                raise UnknownSignal(exc.body.get("detail") if exc.body else "") from exc
            raise
        return {
            k: None if v is None else sample_from_dict(self.registry, v)
            for k, v in resp["samples"].items()
        }

