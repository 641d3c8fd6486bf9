"""SPMD job launcher: hostfile parsing, rank placement and fan-out over agents."""

from __future__ import annotations

import logging
import socket
import threading
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

from . import protocol
from .agent import TIMEOUT_EXIT, ExecDenied, ExecRequest, ExecResult, SpawnError, remote_exec
from .registry import RegistryClient, ServiceInstance, _valid_ipv4

log = logging.getLogger(__name__)

MAP_BY = ("slot", "node")
DEFAULT_MAX_INFLIGHT = 256
DENIED_EXIT = 126
NOT_FOUND_EXIT = 127


class HostfileParseError(ValueError):
    def __init__(self, msg: str, line: int):
        self.line = line
        super().__init__(f"line {line}: {msg}")


class Oversubscription(ValueError):
    pass


class UnknownHost(LookupError):
    pass


class AgentUnreachable(ConnectionError):
    def __init__(self, address: str, partial: "JobResult | None" = None):
        self.address = address
        self.partial = partial
        super().__init__(f"agent for {address} unreachable")


@dataclass
class HostEntry:
    address: str
    slots: int = 1
    explicit: bool = False


@dataclass
class Hostfile:
    entries: list[HostEntry] = field(default_factory=list)

    @property
    def addresses(self) -> list[str]:
        return [e.address for e in self.entries]

    @property
    def capacity(self) -> int:
        return sum(e.slots for e in self.entries)


def parse_hostfile(data: bytes | str) -> Hostfile:
    """Parse ``ADDRESS [slots=N]`` lines; bare addresses get one slot."""
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    hostfile = Hostfile()
    seen: set[str] = set()
    for lineno, raw in enumerate(data.splitlines(), 1):
        words = raw.split("#", 1)[0].split()
        if not words:
            continue
        address, rest = words[0], words[1:]
        if not _valid_ipv4(address):
            raise HostfileParseError(f"bad address {address!r}", lineno)
        if address in seen:
            raise HostfileParseError(f"duplicate address {address}", lineno)
        entry = HostEntry(address)
        for word in rest:
            key, _, value = word.partition("=")
            if key != "slots" or not value.isdigit():
                raise HostfileParseError(f"unexpected {word!r}", lineno)
            if int(value) < 1:
                raise HostfileParseError("slots must be >= 1", lineno)
            entry.slots, entry.explicit = int(value), True
        seen.add(address)
        hostfile.entries.append(entry)
    return hostfile


@dataclass
class JobSpec:
    np: int
    cmd: str
    args: list[str] = field(default_factory=list)
    map_by: str = "slot"
    oversubscribe: bool = False
    timeout_s: int = 300

    def __post_init__(self) -> None:
        if self.np < 1:
            raise ValueError("np must be >= 1")
        if self.map_by not in MAP_BY:
            raise ValueError(f"map_by must be one of {MAP_BY}")


@dataclass
class Placement:
    rank: int
    address: str
    local_index: int
    node_id: str | None = None


@dataclass
class RankAssignment:
    placements: list[Placement]

    def counts(self) -> dict[str, int]:
        return dict(Counter(p.address for p in self.placements))

    def hosts_of(self) -> list[str]:
        return [p.address for p in self.placements]


def map_ranks(np: int, hostfile: Hostfile, map_by: str = "slot", oversubscribe: bool = False) -> RankAssignment:
    """Place ranks ``0..np-1`` onto hostfile entries.

    ``slot`` fills each host's slots in hostfile order before moving on;
    ``node`` deals ranks round-robin, skipping hosts that are full. With
    ``oversubscribe`` the capacity bound is lifted: ``slot`` repeats the
    fill cyclically and ``node`` becomes plain round-robin.
    """
    if np < 1:
        raise ValueError("np must be >= 1")
    if not hostfile.entries:
        raise ValueError("hostfile is empty")
    if map_by not in MAP_BY:
        raise ValueError(f"map_by must be one of {MAP_BY}")
    entries = hostfile.entries
    if np > hostfile.capacity and not oversubscribe:
        raise Oversubscription(f"{np} ranks requested but only {hostfile.capacity} slots available")

    order: list[int] = []
    if map_by == "slot":
        cycle = [h for h, e in enumerate(entries) for _ in range(e.slots)]
        order = [cycle[r % len(cycle)] for r in range(np)]
    elif oversubscribe:
        order = [r % len(entries) for r in range(np)]
    else:
        free = [e.slots for e in entries]
        h = 0
        for _ in range(np):
            while free[h] == 0:
                h = (h + 1) % len(entries)
            order.append(h)
            free[h] -= 1
            h = (h + 1) % len(entries)

    used = [0] * len(entries)
    placements = []
    for rank, h in enumerate(order):
        placements.append(Placement(rank, entries[h].address, used[h]))
        used[h] += 1
    return RankAssignment(placements)


@dataclass
class JobResult:
    per_rank: list[ExecResult]
    job_exit: int
    assignment: RankAssignment | None = None


def aggregate_exit(results: list[ExecResult]) -> int:
    """0 if every rank succeeded, -1 if any timed out, else the first nonzero by rank."""
    codes = [r.exit_code for r in results]
    if TIMEOUT_EXIT in codes:
        return TIMEOUT_EXIT
    return next((c for c in codes if c != 0), 0)


def resolve_hosts(
    hostfile: Hostfile, instances: list[ServiceInstance], slots_from_registry: bool = False
) -> tuple[Hostfile, dict[str, ServiceInstance]]:
    """Match hostfile addresses to passing catalog instances.

    Returns the effective hostfile (bare entries take their catalog slot
    count when ``slots_from_registry``) and an address -> instance map.
    """
    by_addr = {i.address: i for i in instances}
    missing = [a for a in hostfile.addresses if a not in by_addr]
    if missing:
        raise UnknownHost(f"not in catalog: {', '.join(missing)}")
    entries = []
    for e in hostfile.entries:
        slots = by_addr[e.address].slots if slots_from_registry and not e.explicit else e.slots
        entries.append(HostEntry(e.address, slots, e.explicit))
    return Hostfile(entries), by_addr


ExecFn = Callable[..., ExecResult]


def run_job(
    spec: JobSpec,
    hostfile: Hostfile,
    registry_addr: str,
    service: str = "hpc",
    slots_from_registry: bool = False,
    max_inflight: int = DEFAULT_MAX_INFLIGHT,
    exec_fn: ExecFn = remote_exec,
) -> JobResult:
    """Map ranks, dispatch one exec per rank concurrently and collect results by rank."""
    snapshot = RegistryClient(registry_addr).catalog(service, passing_only=True)
    effective, by_addr = resolve_hosts(hostfile, snapshot.instances, slots_from_registry)
    assignment = map_ranks(spec.np, effective, spec.map_by, spec.oversubscribe)
    hostlist = ",".join(effective.addresses)
    for p in assignment.placements:
        p.node_id = by_addr[p.address].node_id

    results: list[ExecResult | None] = [None] * spec.np
    abort = threading.Event()
    conns: set[protocol.Connection] = set()
    conns_lock = threading.Lock()
    failed: list[str] = []

    def hangup(conn: protocol.Connection) -> None:
        # shutdown, not close: the connection's reader still holds the fd open
        try:
            conn.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass

    def track(conn: protocol.Connection) -> None:
        with conns_lock:
            conns.add(conn)
            if abort.is_set():
                hangup(conn)

    def dispatch(p: Placement) -> None:
        if abort.is_set():
            results[p.rank] = ExecResult(TIMEOUT_EXIT)
            return
        req = ExecRequest(
            spec.cmd,
            list(spec.args),
            {
                "HPC_RANK": str(p.rank),
                "HPC_SIZE": str(spec.np),
                "HPC_NODE": p.node_id,
                "HPC_LOCAL": str(p.local_index),
                "HPC_HOSTLIST": hostlist,
            },
            spec.timeout_s,
        )
        try:
            results[p.rank] = exec_fn(by_addr[p.address].endpoint, req, on_connect=track)
        except ExecDenied as exc:
            results[p.rank] = ExecResult(DENIED_EXIT, stderr_lines=[f"exec denied: {exc}"])
        except SpawnError as exc:
            results[p.rank] = ExecResult(NOT_FOUND_EXIT, stderr_lines=[f"spawn failed: {exc}"])
        except (OSError, protocol.ProtocolError) as exc:
            results[p.rank] = ExecResult(TIMEOUT_EXIT, stderr_lines=[str(exc)])
            if not abort.is_set():
                log.error("rank %d: agent %s unreachable: %s", p.rank, p.address, exc)
                with conns_lock:
                    failed.append(p.address)
                    abort.set()
                    for c in conns:
                        hangup(c)

    with ThreadPoolExecutor(max_workers=max(1, min(max_inflight, spec.np))) as pool:
        list(pool.map(dispatch, assignment.placements))

    per_rank = [r if r is not None else ExecResult(TIMEOUT_EXIT) for r in results]
    result = JobResult(per_rank, aggregate_exit(per_rank), assignment)
    if failed:
        raise AgentUnreachable(failed[0], partial=result)
    return result


def transcript(result: JobResult, stream: str = "stdout") -> list[str]:
    """Rank-ordered output lines, each prefixed ``[rank]``."""
    lines = []
    for rank, r in enumerate(result.per_rank):
        for line in (r.stdout_lines if stream == "stdout" else r.stderr_lines):
            lines.append(f"[{rank}] {line}")
    return lines
