"""Service-discovery registry with TTL health and blocking catalog queries.

The :class:`Registry` is the state machine; :class:`RegistryServer` exposes it
over newline-delimited JSON on TCP and drives the periodic expiry sweep;
:class:`RegistryClient` is the matching client used by agents, the renderer,
the launcher and the CLI.
"""

from __future__ import annotations

import collections
import ipaddress
import logging
import socketserver
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Any, Callable

from . import protocol

log = logging.getLogger(__name__)

DEFAULT_ADDR = "127.0.0.1:8500"
DEFAULT_TICK_S = 1.0
MAX_WAIT_MS = 60_000
PASSING = "passing"
CRITICAL = "critical"


class InvalidInstance(ValueError):
    """A registration carried a malformed address, slots < 1 or ttl_s < 1."""


class UnknownInstance(KeyError):
    """No instance is registered under the given (node, service) key."""


class RegistryUnreachable(ConnectionError):
    pass


def address_key(address: str) -> int:
    """Numeric sort key of a dotted-quad address (octet-wise comparison)."""
    return int(ipaddress.IPv4Address(address))


def _valid_ipv4(address: Any) -> bool:
    if not isinstance(address, str) or address.count(".") != 3:
        return False
    try:
        ipaddress.IPv4Address(address)
    except ValueError:
        return False
    return True


def _positive_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool) and value >= 1


@dataclass
class ServiceInstance:
    node_id: str
    service_name: str
    address: str
    endpoint: str
    slots: int
    ttl_s: int = 15
    health: str = PASSING
    last_heartbeat: float | None = None
    registered_at: float | None = None

    @property
    def key(self) -> tuple[str, str]:
        return (self.node_id, self.service_name)

    def validate(self) -> None:
        if not isinstance(self.node_id, str) or not self.node_id:
            raise InvalidInstance("node must be a non-empty string")
        if not isinstance(self.service_name, str) or not self.service_name:
            raise InvalidInstance("service must be a non-empty string")
        if not _valid_ipv4(self.address):
            raise InvalidInstance(f"address {self.address!r} is not a dotted-quad IPv4 address")
        if not isinstance(self.endpoint, str):
            raise InvalidInstance("endpoint must be a host:port string")
        if not _positive_int(self.slots):
            raise InvalidInstance(f"slots must be an integer >= 1, got {self.slots!r}")
        if not _positive_int(self.ttl_s):
            raise InvalidInstance(f"ttl_s must be an integer >= 1, got {self.ttl_s!r}")

    def to_wire(self) -> dict[str, Any]:
        return {
            "node": self.node_id,
            "address": self.address,
            "endpoint": self.endpoint,
            "slots": self.slots,
            "health": self.health,
        }

    @classmethod
    def from_wire(cls, obj: dict[str, Any], service_name: str) -> "ServiceInstance":
        return cls(
            node_id=obj["node"],
            service_name=service_name,
            address=obj["address"],
            endpoint=obj["endpoint"],
            slots=obj["slots"],
            health=obj["health"],
        )


@dataclass
class CatalogSnapshot:
    index: int
    service_name: str
    instances: list[ServiceInstance] = field(default_factory=list)

    def passing(self) -> list[ServiceInstance]:
        return [i for i in self.instances if i.health == PASSING]

    def to_json(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "service": self.service_name,
            "instances": [i.to_wire() for i in self.instances],
        }

    @classmethod
    def from_json(cls, obj: dict[str, Any], service_name: str | None = None) -> "CatalogSnapshot":
        service = service_name if service_name is not None else obj["service"]
        return cls(
            index=obj["index"],
            service_name=service,
            instances=[ServiceInstance.from_wire(i, service) for i in obj["instances"]],
        )


class ManualClock:
    """A monotonic clock that only moves when told to. Used for mock-clock mode."""

    def __init__(self, start: float = 0.0):
        self._now = float(start)
        self._lock = threading.Lock()

    def __call__(self) -> float:
        with self._lock:
            return self._now

    def advance(self, seconds: float) -> float:
        if seconds < 0:
            raise ValueError("clock cannot go backwards")
        with self._lock:
            self._now += seconds
            return self._now


class Registry:
    """The catalog state machine.

    All mutations serialize through one condition variable; blocked catalog
    queries park on it and are woken by any index bump.
    """

    def __init__(self, clock: Callable[[], float] = time.monotonic, history: int = 10_000):
        self.clock = clock
        self._cond = threading.Condition()
        self._instances: dict[tuple[str, str], ServiceInstance] = {}
        self._index = 0
        self._closed = False
        # (index, op, node, service) for every index bump
        self.history: collections.deque[tuple[int, str, str, str]] = collections.deque(maxlen=history)

    @property
    def index(self) -> int:
        with self._cond:
            return self._index

    def _bump(self, op: str, node: str, service: str) -> int:
        self._index += 1
        self.history.append((self._index, op, node, service))
        self._cond.notify_all()
        return self._index

    def register(self, instance: ServiceInstance) -> tuple[int, str]:
        instance.validate()
        with self._cond:
            now = self.clock()
            stored = replace(instance, health=PASSING, last_heartbeat=now, registered_at=now)
            self._instances[stored.key] = stored
            return self._bump("register", stored.node_id, stored.service_name), PASSING

    def heartbeat(self, node_id: str, service_name: str) -> str:
        with self._cond:
            inst = self._instances.get((node_id, service_name))
            if inst is None:
                raise UnknownInstance((node_id, service_name))
            inst.last_heartbeat = self.clock()
            if inst.health != PASSING:
                inst.health = PASSING
                self._bump("heartbeat", node_id, service_name)
            return inst.health

    def deregister(self, node_id: str, service_name: str) -> int:
        with self._cond:
            if self._instances.pop((node_id, service_name), None) is None:
                raise UnknownInstance((node_id, service_name))
            return self._bump("deregister", node_id, service_name)

    def sweep_expired(self, now: float | None = None) -> list[tuple[str, str]]:
        """Mark every passing instance whose TTL has lapsed as critical.

        The whole batch shares a single index bump.
        """
        with self._cond:
            if now is None:
                now = self.clock()
            expired = []
            for inst in self._instances.values():
                if inst.health == PASSING and now - inst.last_heartbeat > inst.ttl_s:
                    inst.health = CRITICAL
                    expired.append(inst.key)
            if expired:
                expired.sort()
                self._bump("sweep", *expired[0])
            return expired

    def _snapshot(self, service_name: str, passing_only: bool) -> CatalogSnapshot:
        chosen = [
            replace(inst)
            for inst in self._instances.values()
            if inst.service_name == service_name and (inst.health == PASSING or not passing_only)
        ]
        chosen.sort(key=lambda i: (address_key(i.address), i.node_id))
        return CatalogSnapshot(self._index, service_name, chosen)

    def catalog(
        self,
        service_name: str,
        passing_only: bool = True,
        min_index: int = 0,
        wait_ms: int = 0,
    ) -> CatalogSnapshot:
        """Return the service's instances, blocking while ``index <= min_index``.

        Blocks for at most ``wait_ms`` (capped at 60 s). Returns the current
        snapshot on timeout, which may carry an unchanged index.
        """
        wait_s = min(max(int(wait_ms), 0), MAX_WAIT_MS) / 1000.0
        with self._cond:
            if self._index <= min_index and wait_s > 0:
                self._cond.wait_for(lambda: self._index > min_index or self._closed, timeout=wait_s)
            return self._snapshot(service_name, passing_only)

    def instances(self) -> list[ServiceInstance]:
        with self._cond:
            return [replace(i) for i in self._instances.values()]

    def close(self) -> None:
        """Release every parked catalog query."""
        with self._cond:
            self._closed = True
            self._cond.notify_all()


def _bad_request(msg: str | None = None) -> dict[str, Any]:
    resp: dict[str, Any] = {"ok": False, "error": "bad_request"}
    if msg:
        resp["msg"] = msg
    return resp


def handle_request(registry: Registry, req: Any, clock: ManualClock | None = None) -> dict[str, Any]:
    """Dispatch one decoded wire request against ``registry``."""
    if not isinstance(req, dict):
        return _bad_request("request must be a JSON object")
    op = req.get("op")
    try:
        if op == "register":
            inst = ServiceInstance(
                node_id=req.get("node"),
                service_name=req.get("service"),
                address=req.get("address"),
                endpoint=req.get("endpoint"),
                slots=req.get("slots"),
                ttl_s=req.get("ttl_s"),
            )
            try:
                index, health = registry.register(inst)
            except InvalidInstance as exc:
                return {"ok": False, "error": "invalid_instance", "msg": str(exc)}
            return {"ok": True, "index": index, "health": health}
        if op == "heartbeat":
            try:
                health = registry.heartbeat(req["node"], req["service"])
            except UnknownInstance:
                return {"ok": False, "error": "unknown_instance"}
            return {"ok": True, "health": health}
        if op == "deregister":
            try:
                index = registry.deregister(req["node"], req["service"])
            except UnknownInstance:
                return {"ok": False, "error": "unknown_instance"}
            return {"ok": True, "index": index}
        if op == "catalog":
            snap = registry.catalog(
                req["service"],
                passing_only=bool(req.get("passing_only", True)),
                min_index=int(req.get("min_index", 0)),
                wait_ms=int(req.get("wait_ms", 0)),
            )
            return {"ok": True, "index": snap.index, "instances": [i.to_wire() for i in snap.instances]}
        if op == "clock":
            return {"ok": True, "now": registry.clock(), "mock": clock is not None}
        if op == "advance" and clock is not None:
            now = clock.advance(float(req["seconds"]))
            expired = registry.sweep_expired(now)
            return {"ok": True, "now": now, "index": registry.index, "expired": [list(k) for k in expired]}
    except (KeyError, TypeError, ValueError) as exc:
        return _bad_request(f"{type(exc).__name__}: {exc}")
    return _bad_request(f"unknown op {op!r}")


class _Handler(socketserver.StreamRequestHandler):
    server: "RegistryServer"

    def handle(self) -> None:
        for line in self.rfile:
            if not line.strip():
                continue
            try:
                req = protocol.decode(line)
            except protocol.ProtocolError:
                resp = _bad_request("malformed JSON")
            else:
                resp = handle_request(self.server.registry, req, self.server.manual_clock)
            try:
                self.wfile.write(protocol.encode(resp))
            except OSError:
                return


class RegistryServer(socketserver.ThreadingTCPServer):
    """TCP front end of a :class:`Registry` plus its expiry sweeper.

    With ``mock_clock=True`` the registry runs on a :class:`ManualClock` and
    no sweeper thread is started; time moves (and sweeps run) only through
    the ``advance`` op.
    """

    allow_reuse_address = True
    daemon_threads = True
    request_queue_size = 1024

    def __init__(
        self,
        listen: str | tuple[str, int] = "0.0.0.0:8500",
        tick_s: float = DEFAULT_TICK_S,
        mock_clock: bool = False,
        clock: Callable[[], float] | None = None,
    ):
        self.manual_clock = ManualClock() if mock_clock else None
        self.registry = Registry(clock=self.manual_clock or clock or time.monotonic)
        self.tick_s = tick_s
        self._stop = threading.Event()
        self._workers: list[threading.Thread] = []
        super().__init__(protocol.parse_addr(listen), _Handler)

    @property
    def addr(self) -> str:
        host, port = self.server_address[:2]
        if host == "0.0.0.0":
            host = "127.0.0.1"
        return f"{host}:{port}"

    def _sweep_loop(self) -> None:
        while not self._stop.wait(self.tick_s):
            expired = self.registry.sweep_expired()
            if expired:
                log.info("expired to critical: %s", expired)

    def start(self) -> "RegistryServer":
        """Serve in background threads; returns ``self``."""
        serve = threading.Thread(target=self.serve_forever, name="registry-serve", daemon=True)
        self._workers.append(serve)
        if self.manual_clock is None:
            self._workers.append(threading.Thread(target=self._sweep_loop, name="registry-sweep", daemon=True))
        for t in self._workers:
            t.start()
        return self

    def serve(self) -> None:
        """Serve in the calling thread until :meth:`stop` is called."""
        if self.manual_clock is None:
            t = threading.Thread(target=self._sweep_loop, name="registry-sweep", daemon=True)
            self._workers.append(t)
            t.start()
        self.serve_forever()

    def stop(self) -> None:
        self._stop.set()
        self.registry.close()
        self.shutdown()
        self.server_close()


class RegistryClient:
    """Thin client for the registry wire protocol.

    Each call opens a fresh connection, so one client may be shared between
    threads.
    """

    def __init__(self, addr: str = DEFAULT_ADDR, timeout: float = protocol.DEFAULT_TIMEOUT):
        self.addr = addr
        self.timeout = timeout

    def _call(self, req: dict[str, Any], timeout: float | None = None) -> dict[str, Any]:
        try:
            resp = protocol.request(self.addr, req, timeout=timeout or self.timeout)
        except (OSError, protocol.ProtocolError) as exc:
            raise RegistryUnreachable(f"registry {self.addr}: {exc}") from exc
        if not resp.get("ok"):
            err = resp.get("error")
            if err == "invalid_instance":
                raise InvalidInstance(resp.get("msg", ""))
            if err == "unknown_instance":
                raise UnknownInstance((req.get("node"), req.get("service")))
            raise ValueError(f"registry rejected {req.get('op')}: {resp}")
        return resp

    def register(
        self, node: str, service: str, address: str, endpoint: str, slots: int, ttl_s: int
    ) -> dict[str, Any]:
        return self._call(
            {"op": "register", "node": node, "service": service, "address": address,
             "endpoint": endpoint, "slots": slots, "ttl_s": ttl_s}
        )

    def heartbeat(self, node: str, service: str) -> str:
        return self._call({"op": "heartbeat", "node": node, "service": service})["health"]

    def deregister(self, node: str, service: str) -> int:
        return self._call({"op": "deregister", "node": node, "service": service})["index"]

    def catalog(
        self, service: str, passing_only: bool = True, min_index: int = 0, wait_ms: int = 0
    ) -> CatalogSnapshot:
        resp = self._call(
            {"op": "catalog", "service": service, "passing_only": passing_only,
             "min_index": min_index, "wait_ms": wait_ms},
            timeout=self.timeout + min(wait_ms, MAX_WAIT_MS) / 1000.0,
        )
        return CatalogSnapshot.from_json(resp, service)

    def clock(self) -> dict[str, Any]:
        return self._call({"op": "clock"})

    def advance(self, seconds: float) -> dict[str, Any]:
        return self._call({"op": "advance", "seconds": seconds})


def serve(listen: str, tick_s: float = DEFAULT_TICK_S, mock_clock: bool = False) -> None:
    server = RegistryServer(listen, tick_s=tick_s, mock_clock=mock_clock)
    log.info("registry listening on %s (mock_clock=%s)", server.addr, mock_clock)
    try:
        server.serve()
    except KeyboardInterrupt:
        pass
    finally:
        server.registry.close()
        server.server_close()

