"""Simulated Memento archives and desk-scale topology scenarios.

A mock archive is a tiny threaded HTTP server exposing
``GET /timemap/link/{uri-r}`` over a fixed holdings table, with injectable
latency and failure behavior and exact per-URI-R hit counters. A scenario file
boots a whole topology (archives plus real aggregator instances) on ephemeral
ports, wiring source templates to the resolved addresses, so chained, cyclic,
and overlapping configurations can be reproduced and asserted on locally.
"""

from __future__ import annotations

import errno
import hashlib
import json
import socket
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import httpx
import uvicorn
from fastapi import FastAPI

from .engine import AggregationPolicy, sort_mementos
from .errors import PortInUse, ScenarioError, SourceConfigError, UnparseableUri
from .linkfmt import (
    MEDIA_TYPE_LINK,
    AbsoluteUri,
    Memento,
    Timestamp14,
    TimeMapDocument,
    serialize_link_timemap,
    timestamp14_to_datetime,
)
from .service import create_app
from .sources import SourceConfig, SourceRegistry, normalize_uri_r
from .trace import TRACE_HEADER


@dataclass(frozen=True)
class BehaviorSpec:
    """Response shaping for a mock: fixed latency plus at most one failure mode."""

    latency_ms: int = 0
    fail_http: int | None = None
    fail_hang_ms: int | None = None
    fail_malformed: bool = False

    def __post_init__(self):
        active = sum(
            1 for flag in (self.fail_http, self.fail_hang_ms) if flag is not None
        ) + (1 if self.fail_malformed else 0)
        if active > 1:
            raise ValueError("at most one failure mode may be active")


def _normalize_holdings(holdings: dict[str, list[str]]) -> dict[str, list[Timestamp14]]:
    table: dict[str, list[Timestamp14]] = {}
    for uri, stamps in holdings.items():
        key = str(normalize_uri_r(uri))
        parsed = [Timestamp14(s) for s in stamps]
        if len(set(parsed)) != len(parsed):
            raise ValueError(f"duplicate timestamps for {uri!r}")
        table[key] = sorted(parsed)
    return table


class MockArchive:
    """One simulated archive; start() binds immediately so the port is known."""

    def __init__(
        self,
        holdings: dict[str, list[str]],
        behavior: BehaviorSpec | None = None,
        port: int = 0,
        host: str = "127.0.0.1",
        opaque_uri_m: bool = False,
    ):
        self.holdings = _normalize_holdings(holdings)
        self.behavior = behavior or BehaviorSpec()
        self.opaque_uri_m = opaque_uri_m
        self._hits: dict[str, int] = {}
        self._lock = threading.Lock()
        self.requests: list[dict] = []
        outer = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, *args):  # keep test output quiet
                pass

            def do_GET(self):
                outer._handle(self)

        try:
            self._server = ThreadingHTTPServer((host, port), Handler)
        except OSError as exc:
            if exc.errno == errno.EADDRINUSE:
                raise PortInUse(f"port {port} already bound") from exc
            raise
        self._server.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    @property
    def base_url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    @property
    def timemap_template(self) -> str:
        return f"{self.base_url}/timemap/link/"

    def start(self) -> "MockArchive":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        if self._thread is None:
            return
        self._server.shutdown()
        self._server.server_close()
        self._thread = None

    def hit_count(self, uri_r: str) -> int:
        key = str(normalize_uri_r(uri_r))
        with self._lock:
            return self._hits.get(key, 0)

    def reset_hits(self) -> None:
        with self._lock:
            self._hits.clear()
            self.requests.clear()

    def _uri_m(self, uri_r: str, stamp: Timestamp14) -> AbsoluteUri:
        if self.opaque_uri_m:
            code = hashlib.sha1(f"{uri_r}|{stamp}".encode()).hexdigest()[:8]
            return AbsoluteUri(f"{self.base_url}/cap/{code}")
        return AbsoluteUri(f"{self.base_url}/web/{stamp}/{uri_r}")

    def _document(self, uri_r: str) -> TimeMapDocument:
        mementos = sort_mementos(
            [
                Memento(self._uri_m(uri_r, stamp), timestamp14_to_datetime(stamp))
                for stamp in self.holdings[uri_r]
            ]
        )
        return TimeMapDocument(
            AbsoluteUri(uri_r),
            self_links=[(AbsoluteUri(f"{self.timemap_template}{uri_r}"), MEDIA_TYPE_LINK)],
            mementos=mementos,
            sorted_by_datetime=True,
        )

    def _handle(self, handler: BaseHTTPRequestHandler) -> None:
        prefix = "/timemap/link/"
        if not handler.path.startswith(prefix):
            self._respond(handler, 404, b"unknown path")
            return
        raw = handler.path[len(prefix):]
        try:
            uri_r = str(normalize_uri_r(raw))
        except UnparseableUri:
            self._respond(handler, 400, b"bad uri-r")
            return
        with self._lock:
            self._hits[uri_r] = self._hits.get(uri_r, 0) + 1
            self.requests.append(
                {
                    "uri_r": uri_r,
                    "trace": handler.headers.get(TRACE_HEADER),
                    "accept": handler.headers.get("Accept"),
                }
            )

        b = self.behavior
        if b.latency_ms:
            time.sleep(b.latency_ms / 1000)
        if b.fail_hang_ms is not None:
            time.sleep(b.fail_hang_ms / 1000)
        if b.fail_http is not None:
            self._respond(handler, b.fail_http, b"injected failure")
            return
        if b.fail_malformed:
            self._respond(handler, 200, b"<<< this is not a timemap >>>", MEDIA_TYPE_LINK)
            return
        if uri_r not in self.holdings:
            self._respond(handler, 404, b"no captures")
            return
        body = serialize_link_timemap(self._document(uri_r)).encode()
        self._respond(handler, 200, body, MEDIA_TYPE_LINK)

    @staticmethod
    def _respond(
        handler: BaseHTTPRequestHandler, status: int, body: bytes, content_type: str = "text/plain"
    ) -> None:
        try:
            handler.send_response(status)
            handler.send_header("Content-Type", content_type)
            handler.send_header("Content-Length", str(len(body)))
            handler.end_headers()
            handler.wfile.write(body)
        except (BrokenPipeError, ConnectionResetError):
            pass  # client gave up (expected under hang behavior)


def start_mock(
    holdings: dict[str, list[str]],
    behavior: BehaviorSpec | None = None,
    port: int = 0,
    **kwargs,
) -> MockArchive:
    return MockArchive(holdings, behavior, port, **kwargs).start()


# --- running real aggregator instances ------------------------------------------

class ServerHandle:
    """A uvicorn server running in a daemon thread on a pre-bound socket."""

    def __init__(self, app: FastAPI, sock: socket.socket):
        self.app = app
        self._sock = sock
        self.port = sock.getsockname()[1]
        self.base_url = f"http://127.0.0.1:{self.port}"
        config = uvicorn.Config(app, log_level="error", access_log=False)
        self._server = uvicorn.Server(config)
        self._thread = threading.Thread(
            target=self._server.run, kwargs={"sockets": [sock]}, daemon=True
        )

    def start(self) -> "ServerHandle":
        self._thread.start()
        for _ in range(500):
            if self._server.started:
                return self
            time.sleep(0.01)
        raise ScenarioError(f"server on port {self.port} failed to start")

    def stop(self) -> None:
        if not self._thread.is_alive():
            return
        self._server.should_exit = True
        self._thread.join(timeout=5)


def _bind_socket(host: str = "127.0.0.1", port: int = 0) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        sock.bind((host, port))
    except OSError as exc:
        sock.close()
        if exc.errno == errno.EADDRINUSE:
            raise PortInUse(f"port {port} already bound") from exc
        raise
    sock.listen(128)
    return sock


def serve_app(app: FastAPI, port: int = 0) -> ServerHandle:
    return ServerHandle(app, _bind_socket(port=port)).start()


# --- scenarios -------------------------------------------------------------------

@dataclass
class NodeHandle:
    id: str
    kind: str
    base_url: str
    port: int
    archive: MockArchive | None = None
    server: ServerHandle | None = None

    def hit_count(self, uri_r: str) -> int:
        if self.archive is not None:
            return self.archive.hit_count(uri_r)
        return self.server.app.state.stats.by_uri.get(str(normalize_uri_r(uri_r)), 0)

    def traced_hit_count(self, uri_r: str) -> int:
        if self.archive is not None:
            raise ValueError("archives do not distinguish traced hits")
        return self.server.app.state.stats.traced_by_uri.get(str(normalize_uri_r(uri_r)), 0)


@dataclass
class Scenario:
    nodes: dict[str, NodeHandle]
    order: list[str] = field(default_factory=list)

    @property
    def entry(self) -> NodeHandle:
        for node_id in self.order:
            if self.nodes[node_id].kind == "aggregator":
                return self.nodes[node_id]
        raise ScenarioError("scenario has no aggregator node")

    def timemap_url(self, uri_r: str, node_id: str | None = None, fmt: str = "link") -> str:
        node = self.nodes[node_id] if node_id else self.entry
        return f"{node.base_url}/timemap/{fmt}/{uri_r}"

    def hit_counts(self, uri_r: str) -> dict[str, int]:
        return {node_id: self.nodes[node_id].hit_count(uri_r) for node_id in self.order}

    def teardown(self) -> None:
        for node in self.nodes.values():
            if node.archive is not None:
                node.archive.stop()
            if node.server is not None:
                node.server.stop()

    def __enter__(self) -> "Scenario":
        return self

    def __exit__(self, *exc) -> None:
        self.teardown()


def _behavior_from_obj(obj: dict) -> BehaviorSpec:
    failure = obj.get("failure") or {}
    try:
        return BehaviorSpec(
            latency_ms=int(obj.get("latency_ms", 0)),
            fail_http=failure.get("http"),
            fail_hang_ms=failure.get("hang_ms"),
            fail_malformed=bool(failure.get("malformed_body", False)),
        )
    except ValueError as exc:
        raise ScenarioError(str(exc)) from exc


def _policy_from_obj(obj: dict) -> AggregationPolicy:
    try:
        return AggregationPolicy(
            dedup_mode=obj.get("dedup", "exact"),
            sort_final=bool(obj.get("sort_final", True)),
            per_source_timeout_ms=int(obj.get("per_source_timeout_ms", 5000)),
            overall_deadline_ms=int(obj.get("deadline_ms", 10000)),
        )
    except ValueError as exc:
        raise ScenarioError(str(exc)) from exc


def boot_scenario(nodes: list[dict]) -> Scenario:
    """Boot every node on an OS-assigned port, then wire aggregator registries to
    the resolved addresses. Cyclic topologies are legal and intended."""
    if not isinstance(nodes, list) or not nodes:
        raise ScenarioError("scenario must be a non-empty list of nodes")
    by_id: dict[str, dict] = {}
    order: list[str] = []
    for obj in nodes:
        if not isinstance(obj, dict) or "id" not in obj or "kind" not in obj:
            raise ScenarioError(f"node needs id and kind: {obj!r}")
        node_id, kind = obj["id"], obj["kind"]
        if kind not in ("archive", "aggregator"):
            raise ScenarioError(f"unknown node kind {kind!r}")
        if node_id in by_id:
            raise ScenarioError(f"duplicate node id {node_id!r}")
        by_id[node_id] = obj
        order.append(node_id)

    # Pass 1: bind everything so every address is known before wiring.
    archives: dict[str, MockArchive] = {}
    agg_sockets: dict[str, socket.socket] = {}
    ports: dict[str, int] = {}
    try:
        for node_id, obj in by_id.items():
            if obj["kind"] == "archive":
                try:
                    archive = MockArchive(
                        obj.get("holdings", {}),
                        _behavior_from_obj(obj.get("behavior", {})),
                        opaque_uri_m=bool(obj.get("opaque", False)),
                    )
                except (ValueError, UnparseableUri) as exc:
                    raise ScenarioError(f"node {node_id}: {exc}") from exc
                archives[node_id] = archive
                ports[node_id] = archive.port
            else:
                sock = _bind_socket()
                agg_sockets[node_id] = sock
                ports[node_id] = sock.getsockname()[1]

        # Pass 2: build aggregator registries against resolved ports.
        apps: dict[str, FastAPI] = {}
        for node_id, obj in by_id.items():
            if obj["kind"] != "aggregator":
                continue
            refs = obj.get("sources", [])
            if not refs:
                raise ScenarioError(f"aggregator {node_id} lists no sources")
            configs = []
            for ref in refs:
                ref_obj = {"ref": ref} if isinstance(ref, str) else dict(ref)
                target = ref_obj.get("ref")
                if target not in by_id:
                    raise ScenarioError(f"aggregator {node_id} references unknown node {target!r}")
                try:
                    configs.append(
                        SourceConfig(
                            id=target,
                            name=target,
                            timemap_template=f"http://127.0.0.1:{ports[target]}/timemap/link/",
                            timeout_ms=int(ref_obj.get("timeout_ms", 5000)),
                            priority=int(ref_obj.get("priority", 0)),
                        )
                    )
                except SourceConfigError as exc:
                    raise ScenarioError(f"aggregator {node_id}: {exc}") from exc
            apps[node_id] = create_app(
                SourceRegistry(tuple(configs)),
                _policy_from_obj(obj.get("policy", {})),
                trace_enabled=bool(obj.get("trace_enabled", True)),
            )

        # Pass 3: start everything.
        handles: dict[str, NodeHandle] = {}
        for node_id, obj in by_id.items():
            if obj["kind"] == "archive":
                archive = archives[node_id].start()
                handles[node_id] = NodeHandle(
                    node_id, "archive", archive.base_url, archive.port, archive=archive
                )
            else:
                server = ServerHandle(apps[node_id], agg_sockets.pop(node_id)).start()
                handles[node_id] = NodeHandle(
                    node_id, "aggregator", server.base_url, server.port, server=server
                )
        scenario = Scenario(handles, order)
    except Exception:
        for archive in archives.values():
            archive.stop()
        for sock in agg_sockets.values():
            sock.close()
        raise

    # Readiness probe so a scenario is usable the moment it returns.
    for node in scenario.nodes.values():
        if node.kind == "aggregator":
            try:
                httpx.get(f"{node.base_url}/health", timeout=5)
            except httpx.HTTPError as exc:
                scenario.teardown()
                raise ScenarioError(f"node {node.id} not reachable: {exc}") from exc
    return scenario


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        nodes = json.loads(path.read_text())
    except OSError as exc:
        raise ScenarioError(f"{path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}:{exc.lineno}: {exc.msg}") from exc
    return boot_scenario(nodes)
