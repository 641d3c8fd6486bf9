"""Newline-delimited JSON framing shared by the registry and the agents.

Every message is one compact UTF-8 JSON object followed by ``\\n``.
"""

from __future__ import annotations

import json
import socket
from typing import Any, Iterator

DEFAULT_TIMEOUT = 10.0


class ProtocolError(Exception):
    """The peer sent something that is not a JSON-lines message."""


class ConnectionFailed(OSError):
    """Could not reach a peer, or it hung up mid-exchange."""


def encode(obj: Any) -> bytes:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False).encode("utf-8") + b"\n"


def decode(line: bytes) -> Any:
    try:
        return json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise ProtocolError(str(exc)) from exc


def parse_addr(addr: str | tuple[str, int]) -> tuple[str, int]:
    """Split ``"host:port"`` into a ``(host, port)`` tuple."""
    if isinstance(addr, tuple):
        return addr
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"expected host:port, got {addr!r}")
    return host or "0.0.0.0", int(port)


def format_addr(addr: tuple[str, int]) -> str:
    return f"{addr[0]}:{addr[1]}"


class Connection:
    """A client connection that exchanges JSON lines with a server."""

    def __init__(self, addr: str | tuple[str, int], timeout: float | None = DEFAULT_TIMEOUT):
        self.addr = parse_addr(addr)
        try:
            self.sock = socket.create_connection(self.addr, timeout=timeout)
        except OSError as exc:
            raise ConnectionFailed(f"cannot connect to {format_addr(self.addr)}: {exc}") from exc
        self._rfile = self.sock.makefile("rb")

    def send(self, obj: Any) -> None:
        try:
            self.sock.sendall(encode(obj))
        except OSError as exc:
            raise ConnectionFailed(str(exc)) from exc

    def recv(self) -> Any:
        try:
            line = self._rfile.readline()
        except OSError as exc:
            raise ConnectionFailed(str(exc)) from exc
        if not line:
            raise ConnectionFailed(f"{format_addr(self.addr)} closed the connection")
        return decode(line)

    def messages(self) -> Iterator[Any]:
        while True:
            yield self.recv()

    def request(self, obj: Any, timeout: float | None = None) -> Any:
        if timeout is not None:
            self.sock.settimeout(timeout)
        self.send(obj)
        return self.recv()

    def close(self) -> None:
        try:
            self._rfile.close()
        finally:
            self.sock.close()

    def __enter__(self) -> "Connection":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def request(addr: str | tuple[str, int], obj: Any, timeout: float | None = DEFAULT_TIMEOUT) -> Any:
    """One-shot request/response over a fresh connection."""
    with Connection(addr, timeout=timeout) as conn:
        return conn.request(obj)
