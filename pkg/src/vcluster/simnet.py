"""Desk-scale virtual cluster: address allocation, process spawning and scenarios.

Logical addresses (``10.<host>.0.<n>``) are what the catalog and hostfiles
carry; the sockets actually listen on loopback ports. Host 1 is the head
(registry + renderer), compute agents occupy hosts 2 and up.
"""

from __future__ import annotations

import heapq
import ipaddress
import json
import logging
import os
import random
import shutil
import signal
import socket
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field
from typing import Any

from .agent import NodeSpec, dump_nodespec
from .launcher import HostEntry, Hostfile, JobResult, JobSpec, parse_hostfile, run_job
from .registry import CatalogSnapshot, RegistryClient
from .renderer import Watcher, parse_template, render, default_template_source

log = logging.getLogger(__name__)

HEAD_HOST = 1
MAX_LIVE = 65534
STARTUP_TIMEOUT_S = 10.0


class SubnetExhausted(RuntimeError):
    pass


class PortExhausted(RuntimeError):
    pass


class StartupTimeout(TimeoutError):
    pass


class NothingToRemove(ValueError):
    pass


class UnknownNode(KeyError):
    pass


class ScenarioParseError(ValueError):
    pass


class HostModel:
    """One physical host's slice of the flat network, ``10.<host_id>.0.0/16``."""

    def __init__(self, host_id: int):
        if not 1 <= host_id <= 255:
            raise ValueError("host_id must be in 1..255")
        self.host_id = host_id
        self.subnet = ipaddress.IPv4Network(f"10.{host_id}.0.0/16")
        self.next_octet = 1
        self._freed: list[int] = []
        self._live: set[int] = set()

    def allocate(self) -> str:
        """Return the lowest free host number's address and mark it live."""
        if len(self._live) >= MAX_LIVE:
            raise SubnetExhausted(f"no free addresses in {self.subnet}")
        if self._freed:
            n = heapq.heappop(self._freed)
        else:
            n = self.next_octet
            self.next_octet += 1
        self._live.add(n)
        return str(self.subnet.network_address + n)

    def release(self, address: str) -> None:
        n = int(ipaddress.IPv4Address(address)) - int(self.subnet.network_address)
        if n not in self._live:
            raise ValueError(f"{address} is not allocated on host {self.host_id}")
        self._live.remove(n)
        heapq.heappush(self._freed, n)

    @property
    def live(self) -> list[str]:
        return [str(self.subnet.network_address + n) for n in sorted(self._live)]


def allocate_address(host: HostModel) -> str:
    return host.allocate()


def _port_free(port: int) -> bool:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            s.bind(("127.0.0.1", port))
        except OSError:
            return False
    return True


def _wait_connectable(addr: tuple[str, int], timeout: float) -> bool:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        try:
            socket.create_connection(addr, timeout=0.5).close()
            return True
        except OSError:
            time.sleep(0.02)
    return False


_PKG_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def _clusterctl(*args: str) -> list[str]:
    # -S skips site-packages hooks; startup cost dominates when spawning 100 agents
    return [sys.executable, "-S", "-m", "vcluster.cli", *args]


def _child_env() -> dict[str, str]:
    env = dict(os.environ)
    env["PYTHONPATH"] = os.pathsep.join(p for p in (_PKG_ROOT, env.get("PYTHONPATH")) if p)
    return env


@dataclass
class SimAgent:
    node_id: str
    host_id: int
    address: str
    spec: NodeSpec
    proc: subprocess.Popen


@dataclass
class SimCluster:
    """A registry plus compute agents running as local child processes."""

    base_port: int = 7100
    slots: int = 12
    agents_per_host: int = 1
    ttl_s: int = 15
    heartbeat_interval_s: float | None = None
    tick_s: float = 1.0
    mock_clock: bool = False
    seed: int = 0
    service: str = "hpc"
    exec_allow: list[str] | None = None
    workdir: str | None = None
    hosts: dict[int, HostModel] = field(default_factory=dict)
    agents: dict[str, SimAgent] = field(default_factory=dict)
    registry_addr: str = ""

    def __post_init__(self) -> None:
        self.rng = random.Random(self.seed)
        self._own_workdir = self.workdir is None
        self.workdir = self.workdir or tempfile.mkdtemp(prefix="vcluster-")
        if self.exec_allow is None:
            self.exec_allow = ["/bin/", "/usr/bin/", "/usr/local/bin/", self.workdir + "/"]
        self._registry_proc: subprocess.Popen | None = None
        self._next_node = 2
        self._next_port = self.base_port + 1
        self._placement: list[int] = []  # host id of each agent, in spawn order
        self.watcher: Watcher | None = None
        self.hosts.setdefault(HEAD_HOST, HostModel(HEAD_HOST))

    # -- processes ---------------------------------------------------------

    def _log_file(self, name: str):
        return open(os.path.join(self.workdir, f"{name}.log"), "ab")

    def start_registry(self) -> None:
        if not _port_free(self.base_port):
            raise PortExhausted(f"registry port {self.base_port} is in use")
        self.registry_addr = f"127.0.0.1:{self.base_port}"
        args = ["registry", "--listen", self.registry_addr, "--tick", str(self.tick_s)]
        if self.mock_clock:
            args.append("--mock-clock")
        with self._log_file("registry") as logf:
            self._registry_proc = subprocess.Popen(_clusterctl(*args), stdout=logf, stderr=logf, env=_child_env())
        if not _wait_connectable(("127.0.0.1", self.base_port), STARTUP_TIMEOUT_S):
            raise StartupTimeout("registry did not come up")

    def restart_registry(self) -> None:
        """Kill the registry process and start a fresh, empty one on the same port."""
        if self._registry_proc is not None:
            self._registry_proc.kill()
            self._registry_proc.wait()
        deadline = time.monotonic() + 5
        while not _port_free(self.base_port) and time.monotonic() < deadline:
            time.sleep(0.05)
        self.start_registry()

    def _take_port(self) -> int:
        port = self._next_port
        while port <= 65535 and not _port_free(port):
            port += 1
        if port > 65535:
            raise PortExhausted(f"no free port at or above {self._next_port}")
        self._next_port = port + 1
        return port

    def _next_host(self) -> HostModel:
        if self._placement:
            last = self._placement[-1]
            if self._placement.count(last) < self.agents_per_host and last in self.hosts:
                return self.hosts[last]
        host_id = max(self.hosts) + 1
        self.hosts[host_id] = HostModel(host_id)
        return self.hosts[host_id]

    def _launch(self, host: HostModel) -> SimAgent:
        node_id = f"node{self._next_node:02d}"
        self._next_node += 1
        address = host.allocate()
        spec = NodeSpec(
            node_id=node_id,
            service_name=self.service,
            slots=self.slots,
            ttl_s=self.ttl_s,
            heartbeat_interval_s=self.heartbeat_interval_s,
            registry_addr=self.registry_addr,
            listen_addr=f"127.0.0.1:{self._take_port()}",
            logical_address=address,
            exec_allow=list(self.exec_allow),
        )
        path = os.path.join(self.workdir, f"{node_id}.spec")
        with open(path, "w") as f:
            f.write(dump_nodespec(spec))
        with self._log_file(node_id) as logf:
            proc = subprocess.Popen(_clusterctl("agent", "--spec", path), stdout=logf, stderr=logf,
                                    env=_child_env())
        agent = SimAgent(node_id, host.host_id, address, spec, proc)
        self.agents[node_id] = agent
        self._placement.append(host.host_id)
        return agent

    def wait_registered(self, node_ids: list[str], timeout: float = STARTUP_TIMEOUT_S) -> CatalogSnapshot:
        want = set(node_ids)
        client = RegistryClient(self.registry_addr)
        deadline = time.monotonic() + timeout
        index = 0
        while True:
            snap = client.catalog(self.service, passing_only=True)
            if want <= {i.node_id for i in snap.instances}:
                return snap
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                missing = sorted(want - {i.node_id for i in snap.instances})
                raise StartupTimeout(f"agents absent from catalog: {', '.join(missing)}")
            index = snap.index
            client.catalog(self.service, min_index=index, wait_ms=int(min(remaining, 0.5) * 1000))

    def add_agents(self, count: int) -> list[str]:
        started = [self._launch(self._next_host()).node_id for _ in range(count)]
        if started:
            self.wait_registered(started)
        return started

    # -- operations --------------------------------------------------------

    def scale(self, delta: int) -> list[str]:
        """Add ``delta`` agents, or gracefully remove the ``-delta`` newest."""
        if delta == 0:
            raise ValueError("delta must be nonzero")
        if delta > 0:
            return self.add_agents(delta)
        if -delta > len(self.agents):
            raise NothingToRemove(f"cannot remove {-delta} of {len(self.agents)} agents")
        newest = list(self.agents)[delta:][::-1]
        for node_id in newest:
            self.kill_agent(node_id, graceful=True)
        return newest

    def kill_agent(self, node_id: str, graceful: bool = True) -> None:
        agent = self.agents.pop(node_id, None)
        if agent is None:
            raise UnknownNode(node_id)
        idx = len(self._placement) - 1 - self._placement[::-1].index(agent.host_id)
        del self._placement[idx]
        if graceful:
            agent.proc.send_signal(signal.SIGTERM)
            try:
                agent.proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                agent.proc.kill()
                agent.proc.wait()
            self.hosts[agent.host_id].release(agent.address)
        else:
            # the dead container keeps its address until the catalog forgets it
            agent.proc.kill()
            agent.proc.wait()

    def advance_clock(self, seconds: float, pause_s: float | None = None) -> list[tuple[str, str]]:
        """Move the registry's mock clock forward one sweep tick at a time.

        Between ticks the harness pauses ``pause_s`` of real time so live
        agents get their heartbeats in.
        """
        if not self.mock_clock:
            raise RuntimeError("advance_clock needs a mock-clock cluster")
        if pause_s is None:
            pause_s = 1.5 * (self.heartbeat_interval_s or self.ttl_s / 3)
        client = RegistryClient(self.registry_addr)
        expired: list[tuple[str, str]] = []
        remaining = seconds
        while remaining > 1e-9:
            step = min(self.tick_s, remaining)
            time.sleep(pause_s)
            resp = client.advance(step)
            expired.extend(tuple(k) for k in resp["expired"])
            remaining -= step
        return expired

    def clock(self) -> float:
        return RegistryClient(self.registry_addr).clock()["now"]

    def catalog(self, passing_only: bool = False) -> CatalogSnapshot:
        return RegistryClient(self.registry_addr).catalog(self.service, passing_only=passing_only)

    @property
    def hostfile_path(self) -> str:
        return os.path.join(self.workdir, "hostfile")

    def start_renderer(
        self, template: str | None = None, wait_ms: int = 500, trigger: str | None = None,
        output_path: str | None = None,
    ) -> Watcher:
        if self.watcher is not None:
            self.watcher.stop()
        tmpl = parse_template(template if template is not None else default_template_source())
        self.watcher = Watcher(tmpl, self.registry_addr, self.service, output_path or self.hostfile_path,
                               trigger=trigger, wait_ms=wait_ms).start()
        return self.watcher

    def hostfile(self) -> Hostfile:
        """The rendered hostfile if a renderer runs, else one built from the catalog."""
        if self.watcher is not None and os.path.exists(self.watcher.output_path):
            with open(self.watcher.output_path, "rb") as f:
                return parse_hostfile(f.read())
        snap = self.catalog(passing_only=True)
        return Hostfile([HostEntry(i.address) for i in snap.instances])

    def run_job(self, spec: JobSpec, hostfile: Hostfile | None = None, slots_from_registry: bool = True) -> JobResult:
        return run_job(spec, hostfile or self.hostfile(), self.registry_addr, self.service,
                       slots_from_registry=slots_from_registry)

    def live_addresses(self) -> list[str]:
        return [a.address for a in self.agents.values()]

    def check_invariants(self) -> list[str]:
        """Address uniqueness and containment violations, if any."""
        problems = []
        addrs = self.live_addresses()
        if len(addrs) != len(set(addrs)):
            problems.append("duplicate logical address among live agents")
        for a in self.agents.values():
            if ipaddress.IPv4Address(a.address) not in self.hosts[a.host_id].subnet:
                problems.append(f"{a.node_id} address {a.address} outside host {a.host_id}")
        return problems

    def close(self) -> None:
        if self.watcher is not None:
            self.watcher.stop(timeout=2)
            self.watcher = None
        for agent in self.agents.values():
            agent.proc.kill()
        for agent in self.agents.values():
            agent.proc.wait()
        self.agents.clear()
        if self._registry_proc is not None:
            self._registry_proc.kill()
            self._registry_proc.wait()
            self._registry_proc = None
        if self._own_workdir:
            shutil.rmtree(self.workdir, ignore_errors=True)

    def __enter__(self) -> "SimCluster":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def spawn_cluster(
    n_hosts: int, agents_per_host: int, slots: int, base_port: int = 7100, **kwargs: Any
) -> SimCluster:
    """Start a registry and ``n_hosts * agents_per_host`` registered agents."""
    if n_hosts < 1 or agents_per_host < 0:
        raise ValueError("need n_hosts >= 1 and agents_per_host >= 0")
    sim = SimCluster(base_port=base_port, slots=slots, agents_per_host=max(agents_per_host, 1), **kwargs)
    try:
        sim.start_registry()
        started = []
        for h in range(n_hosts if agents_per_host else 0):
            host = HostModel(HEAD_HOST + 1 + h)
            sim.hosts[host.host_id] = host
            started += [sim._launch(host).node_id for _ in range(agents_per_host)]
        if started:
            sim.wait_registered(started)
    except BaseException:
        sim.close()
        raise
    return sim


# -- scenarios -------------------------------------------------------------

STEP_FIELDS: dict[str, set[str]] = {
    "spawn": {"n_hosts", "agents_per_host", "slots", "base_port", "ttl_s", "heartbeat_interval_s", "tick_s"},
    "render": {"template", "wait_ms", "trigger"},
    "scale": {"delta"},
    "kill": {"node", "graceful"},
    "run_job": {"np", "cmd", "args", "map_by", "oversubscribe", "slots_from_registry", "timeout_s",
                "expect_exit", "expect_counts", "expect_lines"},
    "assert_hostfile": {"lines", "count", "within_ms"},
    "assert_catalog": {"count", "passing", "critical", "absent", "within_ms"},
    "assert_triggers": {"count", "within_ms"},
    "advance_clock": {"seconds", "pause_ms"},
    "restart_registry": set(),
    "sleep": {"ms"},
}
REQUIRED_FIELDS = {
    "spawn": {"n_hosts", "agents_per_host", "slots"},
    "scale": {"delta"},
    "kill": {"node"},
    "run_job": {"np", "cmd"},
    "advance_clock": {"seconds"},
    "sleep": {"ms"},
}


@dataclass
class ScenarioReport:
    events: list[dict[str, Any]] = field(default_factory=list)
    assertions: list[dict[str, Any]] = field(default_factory=list)
    wall_time_s: float = 0.0

    @property
    def passed(self) -> int:
        return sum(1 for a in self.assertions if a["passed"])

    @property
    def failed(self) -> int:
        return sum(1 for a in self.assertions if not a["passed"])

    @property
    def ok(self) -> bool:
        return self.failed == 0

    def to_json(self, include_wall_time: bool = True) -> dict[str, Any]:
        out: dict[str, Any] = {
            "events": self.events,
            "assertions": self.assertions,
            "passed": self.passed,
            "failed": self.failed,
        }
        if include_wall_time:
            out["wall_time_s"] = round(self.wall_time_s, 3)
        return out


def parse_scenario(script: Any, mock_clock: bool = True) -> list[dict[str, Any]]:
    """Validate a scenario (JSON text or a list of step dicts)."""
    if isinstance(script, (str, bytes)):
        try:
            script = json.loads(script)
        except ValueError as exc:
            raise ScenarioParseError(f"invalid JSON: {exc}") from exc
    if not isinstance(script, list):
        raise ScenarioParseError("scenario must be a JSON list of steps")
    steps = []
    spawned = False
    for i, step in enumerate(script):
        if not isinstance(step, dict):
            raise ScenarioParseError(f"step {i}: must be an object")
        op = step.get("op")
        if op not in STEP_FIELDS:
            raise ScenarioParseError(f"step {i}: unknown op {op!r}")
        extra = set(step) - STEP_FIELDS[op] - {"op", "at_ms"}
        if extra:
            raise ScenarioParseError(f"step {i} ({op}): unknown fields {sorted(extra)}")
        missing = REQUIRED_FIELDS.get(op, set()) - set(step)
        if missing:
            raise ScenarioParseError(f"step {i} ({op}): missing fields {sorted(missing)}")
        at_ms = step.get("at_ms", 0)
        if not isinstance(at_ms, (int, float)) or at_ms < 0:
            raise ScenarioParseError(f"step {i}: at_ms must be a non-negative number")
        if op == "advance_clock" and not mock_clock:
            raise ScenarioParseError(f"step {i}: advance_clock needs mock-clock mode")
        if op == "spawn":
            if spawned:
                raise ScenarioParseError(f"step {i}: only one spawn per scenario")
            spawned = True
        elif not spawned and op != "sleep":
            raise ScenarioParseError(f"step {i} ({op}): needs a cluster; spawn first")
        steps.append(step)
    return steps


def _poll(check, within_ms: float, interval: float = 0.05):
    """Re-evaluate ``check`` until it passes or ``within_ms`` elapses."""
    deadline = time.monotonic() + within_ms / 1000.0
    while True:
        ok, detail = check()
        if ok or time.monotonic() >= deadline:
            return ok, detail
        time.sleep(interval)


class ScenarioRunner:
    def __init__(self, seed: int = 0, mock_clock: bool = False, workdir: str | None = None):
        self.seed = seed
        self.mock_clock = mock_clock
        self.workdir = workdir
        self.rng = random.Random(seed)
        self.sim: SimCluster | None = None
        self.report = ScenarioReport()

    def _assert(self, step: int, name: str, passed: bool, detail: Any = None) -> None:
        entry = {"step": step, "name": name, "passed": bool(passed)}
        if detail is not None:
            entry["detail"] = detail
        self.report.assertions.append(entry)

    def _hostfile_lines(self) -> list[str] | None:
        try:
            with open(self.sim.hostfile_path, "rb") as f:
                return f.read().decode("utf-8").splitlines()
        except FileNotFoundError:
            return None

    def run(self, script: Any) -> ScenarioReport:
        steps = parse_scenario(script, mock_clock=self.mock_clock)
        start = time.monotonic()
        try:
            for i, step in enumerate(steps):
                delay = start + step.get("at_ms", 0) / 1000.0 - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
                event = {"step": i, "op": step["op"]}
                try:
                    event.update(getattr(self, "_op_" + step["op"])(i, step) or {})
                except Exception as exc:
                    event["error"] = f"{type(exc).__name__}: {exc}"
                    self._assert(i, f"{step['op']} completed", False, event["error"])
                self.report.events.append(event)
                if self.sim is not None:
                    for problem in self.sim.check_invariants():
                        self._assert(i, "invariant", False, problem)
        finally:
            if self.sim is not None:
                self.sim.close()
            self.report.wall_time_s = time.monotonic() - start
        return self.report

    # -- step handlers -----------------------------------------------------

    def _op_spawn(self, i: int, step: dict) -> dict:
        kwargs = {k: step[k] for k in ("ttl_s", "heartbeat_interval_s", "tick_s") if k in step}
        self.sim = spawn_cluster(
            step["n_hosts"], step["agents_per_host"], step["slots"], step.get("base_port", 7100),
            mock_clock=self.mock_clock, seed=self.seed, workdir=self.workdir, **kwargs,
        )
        return {"nodes": sorted(self.sim.agents), "addresses": self.sim.live_addresses()}

    def _op_render(self, i: int, step: dict) -> dict:
        self.sim.start_renderer(step.get("template"), step.get("wait_ms", 500), step.get("trigger"))
        _poll(lambda: (self._hostfile_lines() is not None, None), 5000)
        return {"hostfile": self._hostfile_lines()}

    def _op_scale(self, i: int, step: dict) -> dict:
        return {"affected": self.sim.scale(step["delta"])}

    def _op_kill(self, i: int, step: dict) -> dict:
        node = step["node"]
        if node == "random":
            node = self.rng.choice(sorted(self.sim.agents))
        self.sim.kill_agent(node, graceful=step.get("graceful", False))
        return {"node": node, "graceful": step.get("graceful", False)}

    def _op_advance_clock(self, i: int, step: dict) -> dict:
        pause = step["pause_ms"] / 1000.0 if "pause_ms" in step else None
        expired = self.sim.advance_clock(step["seconds"], pause_s=pause)
        return {"expired": [list(k) for k in expired]}

    def _op_restart_registry(self, i: int, step: dict) -> dict:
        self.sim.restart_registry()
        return {}

    def _op_sleep(self, i: int, step: dict) -> dict:
        time.sleep(step["ms"] / 1000.0)
        return {}

    def _op_run_job(self, i: int, step: dict) -> dict:
        spec = JobSpec(
            np=step["np"], cmd=step["cmd"], args=step.get("args", []), map_by=step.get("map_by", "slot"),
            oversubscribe=step.get("oversubscribe", False), timeout_s=step.get("timeout_s", 300),
        )
        result = self.sim.run_job(spec, slots_from_registry=step.get("slots_from_registry", True))
        counts: dict[str, int] = {}
        for p in result.assignment.placements:
            counts[p.node_id] = counts.get(p.node_id, 0) + 1
        lines = sum(len(r.stdout_lines) for r in result.per_rank)
        if "expect_exit" in step:
            self._assert(i, "job exit", result.job_exit == step["expect_exit"], result.job_exit)
        if "expect_counts" in step:
            self._assert(i, "rank placement", counts == step["expect_counts"], counts)
        if "expect_lines" in step:
            self._assert(i, "transcript lines", lines == step["expect_lines"], lines)
        return {"job_exit": result.job_exit, "counts": counts, "stdout_lines": lines}

    def _op_assert_hostfile(self, i: int, step: dict) -> dict:
        def check():
            lines = self._hostfile_lines()
            if lines is None:
                return False, None
            if "lines" in step and lines != step["lines"]:
                return False, lines
            if "count" in step and len(lines) != step["count"]:
                return False, lines
            return True, lines

        ok, lines = _poll(check, step.get("within_ms", 0))
        self._assert(i, "hostfile", ok, lines)
        return {}

    def _op_assert_catalog(self, i: int, step: dict) -> dict:
        def check():
            snap = self.sim.catalog(passing_only=False)
            health = {inst.node_id: inst.health for inst in snap.instances}
            ok = True
            if "count" in step and len(health) != step["count"]:
                ok = False
            for node in step.get("passing", []):
                ok = ok and health.get(node) == "passing"
            for node in step.get("critical", []):
                ok = ok and health.get(node) == "critical"
            for node in step.get("absent", []):
                ok = ok and node not in health
            return ok, dict(sorted(health.items()))

        ok, health = _poll(check, step.get("within_ms", 0))
        self._assert(i, "catalog", ok, health)
        return {}

    def _op_assert_triggers(self, i: int, step: dict) -> dict:
        def check():
            n = self.sim.watcher.triggers if self.sim.watcher else 0
            return n == step["count"], n

        ok, n = _poll(check, step.get("within_ms", 0))
        self._assert(i, "trigger count", ok, n)
        return {}


def run_scenario(script: Any, seed: int = 0, mock_clock: bool = False, workdir: str | None = None) -> ScenarioReport:
    """Execute a scenario script; assertions are recorded, never raised."""
    return ScenarioRunner(seed=seed, mock_clock=mock_clock, workdir=workdir).run(script)


def render_catalog(sim: SimCluster, template: str | None = None) -> bytes:
    """One-shot render of the cluster's current catalog."""
    tmpl = parse_template(template if template is not None else default_template_source())
    return render(tmpl, sim.catalog(passing_only=True)).content

