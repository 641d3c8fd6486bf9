"""Per-node agent: self-registration, TTL heartbeats and the remote-exec listener.

A node is described by a flat ``key = value`` NodeSpec file::

    # compute node
    node_id = node02
    slots = 12
    logical_address = 10.2.0.1
    registry_addr = 127.0.0.1:8500
    listen_addr = 127.0.0.1:7102
    exec_allow = /bin/, /usr/bin/
"""

from __future__ import annotations

import logging
import os
import select
import signal
import socket
import socketserver
import subprocess
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable

from . import protocol
from .registry import (
    InvalidInstance,
    RegistryClient,
    RegistryUnreachable,
    ServiceInstance,
    UnknownInstance,
)

log = logging.getLogger(__name__)

TIMEOUT_EXIT = -1
RETRY_ATTEMPTS = 10
BACKOFF_BASE_S = 0.1
BACKOFF_CAP_S = 5.0


class SpecParseError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


class SpecInvalid(ValueError):
    def __init__(self, field_name: str, msg: str = ""):
        self.field = field_name
        super().__init__(f"{field_name}: {msg}" if msg else field_name)


class BindError(OSError):
    pass


class ExecDenied(PermissionError):
    pass


class SpawnError(OSError):
    pass


@dataclass
class NodeSpec:
    node_id: str
    slots: int
    logical_address: str
    exec_allow: list[str]
    service_name: str = "hpc"
    ttl_s: int = 15
    heartbeat_interval_s: float | None = None
    registry_addr: str = "127.0.0.1:8500"
    listen_addr: str = "127.0.0.1:0"

    def __post_init__(self) -> None:
        if self.heartbeat_interval_s is None and isinstance(self.ttl_s, int):
            self.heartbeat_interval_s = self.ttl_s / 3
        self.validate()

    def validate(self) -> None:
        if not self.node_id:
            raise SpecInvalid("node_id", "required")
        if not self.service_name:
            raise SpecInvalid("service_name", "must be non-empty")
        if not isinstance(self.slots, int) or self.slots < 1:
            raise SpecInvalid("slots", "must be an integer >= 1")
        if not isinstance(self.ttl_s, int) or self.ttl_s < 1:
            raise SpecInvalid("ttl_s", "must be an integer >= 1")
        if self.heartbeat_interval_s is None or self.heartbeat_interval_s <= 0:
            raise SpecInvalid("heartbeat_interval_s", "must be positive")
        if self.heartbeat_interval_s >= self.ttl_s:
            raise SpecInvalid("heartbeat_interval_s", f"must be less than ttl_s ({self.ttl_s})")
        probe = ServiceInstance(self.node_id, self.service_name, self.logical_address, "", 1, 1)
        try:
            probe.validate()
        except InvalidInstance as exc:
            raise SpecInvalid("logical_address", str(exc)) from exc
        if not self.exec_allow:
            raise SpecInvalid("exec_allow", "must list at least one path prefix")
        for name in ("registry_addr", "listen_addr"):
            try:
                protocol.parse_addr(getattr(self, name))
            except ValueError as exc:
                raise SpecInvalid(name, str(exc)) from exc


_INT_FIELDS = {"slots", "ttl_s"}
_FLOAT_FIELDS = {"heartbeat_interval_s"}
_LIST_FIELDS = {"exec_allow"}
_STR_FIELDS = {"node_id", "service_name", "registry_addr", "listen_addr", "logical_address"}
_REQUIRED = ("node_id", "slots", "logical_address", "exec_allow")


def load_nodespec(source: bytes | str) -> NodeSpec:
    """Parse a NodeSpec file, apply defaults and validate it."""
    if isinstance(source, bytes):
        try:
            source = source.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise SpecParseError(f"not UTF-8: {exc}") from exc
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(source.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise SpecParseError(f"expected 'key = value', got {raw!r}", lineno)
        if key in values:
            raise SpecParseError(f"duplicate key {key!r}", lineno)
        if key in _INT_FIELDS:
            try:
                values[key] = int(value)
            except ValueError:
                raise SpecInvalid(key, f"not an integer: {value!r}") from None
        elif key in _FLOAT_FIELDS:
            try:
                values[key] = float(value)
            except ValueError:
                raise SpecInvalid(key, f"not a number: {value!r}") from None
        elif key in _LIST_FIELDS:
            values[key] = [v.strip() for v in value.split(",") if v.strip()]
        elif key in _STR_FIELDS:
            values[key] = value
        else:
            raise SpecInvalid(key, "unknown key")
    for key in _REQUIRED:
        if key not in values:
            raise SpecInvalid(key, "required")
    return NodeSpec(**values)


def dump_nodespec(spec: NodeSpec) -> str:
    lines = [
        f"node_id = {spec.node_id}",
        f"service_name = {spec.service_name}",
        f"slots = {spec.slots}",
        f"ttl_s = {spec.ttl_s}",
        f"heartbeat_interval_s = {spec.heartbeat_interval_s}",
        f"registry_addr = {spec.registry_addr}",
        f"listen_addr = {spec.listen_addr}",
        f"logical_address = {spec.logical_address}",
        f"exec_allow = {', '.join(spec.exec_allow)}",
    ]
    return "\n".join(lines) + "\n"


@dataclass
class ExecRequest:
    cmd: str
    args: list[str] = field(default_factory=list)
    env: dict[str, str] = field(default_factory=dict)
    timeout_s: int = 300

    def to_wire(self) -> dict[str, Any]:
        return {"op": "exec", "cmd": self.cmd, "args": list(self.args), "env": dict(self.env),
                "timeout_s": self.timeout_s}

    @classmethod
    def from_wire(cls, obj: dict[str, Any]) -> "ExecRequest":
        cmd, args, env = obj.get("cmd"), obj.get("args", []), obj.get("env", {})
        timeout_s = obj.get("timeout_s", 300)
        if not isinstance(cmd, str) or not cmd:
            raise ValueError("cmd must be a non-empty string")
        if not isinstance(args, list) or not all(isinstance(a, str) for a in args):
            raise ValueError("args must be a list of strings")
        if not isinstance(env, dict) or not all(
            isinstance(k, str) and isinstance(v, str) and k and "=" not in k for k, v in env.items()
        ):
            raise ValueError("env keys must be non-empty and free of '='; values must be strings")
        if not isinstance(timeout_s, (int, float)) or isinstance(timeout_s, bool) or timeout_s <= 0:
            raise ValueError("timeout_s must be positive")
        return cls(cmd, args, env, timeout_s)


@dataclass
class ExecResult:
    exit_code: int
    stdout_lines: list[str] = field(default_factory=list)
    stderr_lines: list[str] = field(default_factory=list)
    duration_ms: int = 0


def is_allowed(cmd: str, allow: list[str], cwd: str | None = None) -> bool:
    """True if the normalized absolute ``cmd`` starts with one of ``allow``."""
    path = os.path.normpath(os.path.join(cwd or os.getcwd(), cmd))
    for prefix in allow:
        norm = os.path.normpath(os.path.join(cwd or os.getcwd(), prefix))
        if prefix.endswith("/"):
            if path.startswith(norm.rstrip("/") + "/"):
                return True
        elif path == norm or path.startswith(norm):
            return True
    return False


def minimal_env() -> dict[str, str]:
    env = {"PATH": os.environ.get("PATH", "/usr/local/bin:/usr/bin:/bin"), "LANG": "C.UTF-8"}
    if "HOME" in os.environ:
        env["HOME"] = os.environ["HOME"]
    return env


def kill_tree(proc: subprocess.Popen) -> None:
    """SIGKILL the child's whole process group (it leads its own session)."""
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        proc.kill()


def _decode_line(raw: bytes) -> str:
    if raw.endswith(b"\n"):
        raw = raw[:-1]
    return raw.decode("utf-8", errors="replace")


class _ExecHandler(socketserver.StreamRequestHandler):
    server: "_ExecServer"

    def handle(self) -> None:
        self._wlock = threading.Lock()
        for line in self.rfile:
            if not line.strip():
                continue
            try:
                req = protocol.decode(line)
                if not isinstance(req, dict) or req.get("op") != "exec":
                    raise ValueError("unknown op")
                exec_req = ExecRequest.from_wire(req)
            except (protocol.ProtocolError, ValueError) as exc:
                if not self._send({"ok": False, "error": "bad_request", "msg": str(exc)}):
                    return
                continue
            if not self._run(exec_req):
                return

    def _send(self, obj: Any) -> bool:
        with self._wlock:
            try:
                self.wfile.write(protocol.encode(obj))
                self.wfile.flush()
                return True
            except OSError:
                return False

    def _peer_gone(self) -> bool:
        try:
            readable, _, _ = select.select([self.connection], [], [], 0)
            if not readable:
                return False
            return self.connection.recv(1, socket.MSG_PEEK) == b""
        except OSError:
            return True

    def _run(self, req: ExecRequest) -> bool:
        agent = self.server.agent
        if not is_allowed(req.cmd, agent.spec.exec_allow):
            log.warning("exec denied: %s", req.cmd)
            return self._send({"ok": False, "error": "exec_denied", "msg": req.cmd})
        env = minimal_env()
        env.update(req.env)
        start = time.monotonic()
        try:
            proc = agent.spawn(
                [req.cmd, *req.args],
                env=env,
                stdin=subprocess.DEVNULL,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                start_new_session=True,
            )
        except OSError as exc:
            return self._send({"ok": False, "error": "spawn_error", "msg": str(exc)})
        agent._track(proc)
        alive = True

        def pump(pipe, stream: str) -> None:
            nonlocal alive
            for raw in pipe:
                if alive and not self._send({"stream": stream, "line": _decode_line(raw)}):
                    alive = False
                    kill_tree(proc)
            pipe.close()

        pumps = [
            threading.Thread(target=pump, args=(proc.stdout, "stdout"), daemon=True),
            threading.Thread(target=pump, args=(proc.stderr, "stderr"), daemon=True),
        ]
        for t in pumps:
            t.start()
        deadline = start + req.timeout_s
        timed_out = False
        while True:
            try:
                proc.wait(timeout=0.05)
                break
            except subprocess.TimeoutExpired:
                pass
            if time.monotonic() >= deadline:
                timed_out = True
                kill_tree(proc)
            elif self._peer_gone():
                alive = False
                kill_tree(proc)
        for t in pumps:
            # background grandchildren may still hold the pipes open
            t.join(max(0.0, deadline - time.monotonic()))
            if t.is_alive():
                timed_out = True
                kill_tree(proc)
                t.join()
        agent._untrack(proc)
        code = TIMEOUT_EXIT if timed_out or proc.returncode < 0 else proc.returncode
        duration_ms = int((time.monotonic() - start) * 1000)
        return alive and self._send({"exit": code, "duration_ms": duration_ms})


class _ExecServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True
    request_queue_size = 1024

    def __init__(self, addr: tuple[str, int], agent: "Agent"):
        self.agent = agent
        super().__init__(addr, _ExecHandler)


class Agent:
    """A running node agent. Create with :func:`run` or ``Agent(spec).start()``."""

    def __init__(
        self,
        spec: NodeSpec,
        spawn: Callable[..., subprocess.Popen] = subprocess.Popen,
        retry_attempts: int = RETRY_ATTEMPTS,
        backoff_cap_s: float = BACKOFF_CAP_S,
    ):
        self.spec = spec
        self.spawn = spawn
        self.retry_attempts = retry_attempts
        self.backoff_cap_s = backoff_cap_s
        self.registry = RegistryClient(spec.registry_addr, timeout=max(1.0, spec.heartbeat_interval_s))
        self.registered = False
        self.registrations = 0
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._server: _ExecServer | None = None
        self._workers: list[threading.Thread] = []
        self._children: set[subprocess.Popen] = set()
        self._stopped = False

    @property
    def endpoint(self) -> str:
        if self._server is None:
            return self.spec.listen_addr
        host, port = self._server.server_address[:2]
        return f"{host}:{port}"

    def _track(self, proc: subprocess.Popen) -> None:
        with self._lock:
            self._children.add(proc)

    def _untrack(self, proc: subprocess.Popen) -> None:
        with self._lock:
            self._children.discard(proc)

    def register(self) -> None:
        self.registry.register(
            self.spec.node_id, self.spec.service_name, self.spec.logical_address,
            self.endpoint, self.spec.slots, self.spec.ttl_s,
        )
        with self._lock:
            self.registered = True
            self.registrations += 1

    def _register_with_retry(self) -> None:
        for attempt in range(self.retry_attempts):
            if self._stop.is_set():
                return
            try:
                self.register()
                return
            except RegistryUnreachable as exc:
                delay = min(BACKOFF_BASE_S * 2 ** attempt, self.backoff_cap_s)
                log.warning("register attempt %d failed (%s); retrying in %.1fs", attempt + 1, exc, delay)
                if attempt + 1 < self.retry_attempts:
                    self._stop.wait(delay)
        raise RegistryUnreachable(f"registry {self.spec.registry_addr} unreachable after {self.retry_attempts} attempts")

    def _heartbeat_loop(self) -> None:
        while not self._stop.wait(self.spec.heartbeat_interval_s):
            try:
                self.registry.heartbeat(self.spec.node_id, self.spec.service_name)
            except UnknownInstance:
                log.info("registry forgot %s; re-registering", self.spec.node_id)
                try:
                    self.register()
                except (RegistryUnreachable, InvalidInstance) as exc:
                    log.warning("re-register failed: %s", exc)
            except RegistryUnreachable as exc:
                log.warning("heartbeat failed: %s", exc)

    def start(self) -> "Agent":
        try:
            self._server = _ExecServer(protocol.parse_addr(self.spec.listen_addr), self)
        except OSError as exc:
            raise BindError(f"cannot bind {self.spec.listen_addr}: {exc}") from exc
        serve = threading.Thread(target=self._server.serve_forever, name="agent-exec", daemon=True)
        serve.start()
        self._workers.append(serve)
        try:
            self._register_with_retry()
        except Exception:
            self._close_listener()
            raise
        hb = threading.Thread(target=self._heartbeat_loop, name="agent-heartbeat", daemon=True)
        hb.start()
        self._workers.append(hb)
        log.info("%s registered as %s at %s", self.spec.node_id, self.spec.logical_address, self.endpoint)
        return self

    def _close_listener(self) -> None:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()

    def shutdown(self, graceful: bool = True) -> None:
        with self._lock:
            if self._stopped:
                return
            self._stopped = True
            children = list(self._children)
        self._stop.set()
        if graceful and self.registered:
            try:
                self.registry.deregister(self.spec.node_id, self.spec.service_name)
            except (RegistryUnreachable, UnknownInstance) as exc:
                log.warning("deregister failed: %s", exc)
        for proc in children:
            kill_tree(proc)
        self._close_listener()

    def wait(self) -> None:
        self._stop.wait()


def run(spec: NodeSpec, **kwargs: Any) -> Agent:
    """Bind the exec listener, register and start heartbeating."""
    return Agent(spec, **kwargs).start()


def serve(spec: NodeSpec) -> None:
    """Run an agent in the foreground; SIGTERM/SIGINT shut it down gracefully."""
    done = threading.Event()

    def on_signal(signum, frame):
        done.set()

    # installed before registering so an early SIGTERM still deregisters
    signal.signal(signal.SIGTERM, on_signal)
    signal.signal(signal.SIGINT, on_signal)
    agent = run(spec)
    while not done.wait(0.5):
        pass
    agent.shutdown(graceful=True)


def remote_exec(
    endpoint: str,
    req: ExecRequest,
    on_line: Callable[[str, str], None] | None = None,
    connect_timeout: float = protocol.DEFAULT_TIMEOUT,
    on_connect: Callable[[protocol.Connection], None] | None = None,
) -> ExecResult:
    """Run ``req`` on the agent at ``endpoint`` and collect its streamed output.

    ``on_connect`` receives the open connection, so a caller can abort the
    session from another thread by closing it; the agent then kills the child.
    """
    result = ExecResult(exit_code=TIMEOUT_EXIT)
    with protocol.Connection(endpoint, timeout=connect_timeout) as conn:
        if on_connect is not None:
            on_connect(conn)
        conn.sock.settimeout(req.timeout_s + connect_timeout)
        conn.send(req.to_wire())
        for msg in conn.messages():
            if "stream" in msg:
                (result.stdout_lines if msg["stream"] == "stdout" else result.stderr_lines).append(msg["line"])
                if on_line is not None:
                    on_line(msg["stream"], msg["line"])
            elif "exit" in msg:
                result.exit_code = msg["exit"]
                result.duration_ms = msg["duration_ms"]
                return result
            elif msg.get("error") == "exec_denied":
                raise ExecDenied(msg.get("msg", req.cmd))
            elif msg.get("error") == "spawn_error":
                raise SpawnError(msg.get("msg", req.cmd))
            else:
                raise protocol.ProtocolError(f"unexpected message from agent: {msg}")
    return result
