import ipaddress
import json
import os
import socket
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vcluster import simnet
from vcluster.launcher import JobSpec
from vcluster.simnet import (
    HostModel,
    NothingToRemove,
    ScenarioParseError,
    SubnetExhausted,
    UnknownNode,
    allocate_address,
    parse_scenario,
    render_catalog,
    run_scenario,
    spawn_cluster,
)

SCENARIOS = os.path.join(os.path.dirname(__file__), "..", "scenarios")


def load(name, base_port=None):
    with open(os.path.join(SCENARIOS, name)) as f:
        steps = json.load(f)
    if base_port is not None:
        steps[0]["base_port"] = base_port
    return steps


class TestHostModel:
    def test_first_allocations(self):
        assert allocate_address(HostModel(2)) == "10.2.0.1"
        assert allocate_address(HostModel(3)) == "10.3.0.1"

    def test_reuse_lowest_free(self):
        h = HostModel(2)
        a = h.allocate()
        h.release(a)
        assert h.allocate() == "10.2.0.1"

    def test_lowest_of_several_freed(self):
        h = HostModel(2)
        addrs = [h.allocate() for _ in range(5)]
        h.release(addrs[3])
        h.release(addrs[1])
        assert h.allocate() == "10.2.0.2"
        assert h.allocate() == "10.2.0.4"
        assert h.allocate() == "10.2.0.6"

    def test_crosses_octet_boundary(self):
        h = HostModel(7)
        addrs = [h.allocate() for _ in range(256)]
        assert addrs[254] == "10.7.0.255" and addrs[255] == "10.7.1.0"

    def test_exhaustion(self):
        h = HostModel(2)
        for _ in range(65534):
            last = h.allocate()
        assert last == "10.2.255.254"
        with pytest.raises(SubnetExhausted):
            h.allocate()

    def test_release_unknown(self):
        with pytest.raises(ValueError):
            HostModel(2).release("10.2.0.9")


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 255), st.lists(st.one_of(st.just(None), st.integers(0, 40)), max_size=80))
def test_allocator_matches_lowest_free_oracle(host_id, ops):
    h = HostModel(host_id)
    live: set[int] = set()
    for op in ops:
        if op is None or not live:
            expected = min(set(range(1, len(live) + 2)) - live)
            addr = h.allocate()
            assert addr == str(ipaddress.IPv4Address(f"10.{host_id}.0.0") + expected)
            live.add(expected)
        else:
            n = sorted(live)[op % len(live)]
            h.release(str(ipaddress.IPv4Address(f"10.{host_id}.0.0") + n))
            live.discard(n)
        net = ipaddress.IPv4Network(f"10.{host_id}.0.0/16")
        assert len(h.live) == len(set(h.live)) == len(live)
        assert all(ipaddress.IPv4Address(a) in net for a in h.live)


class TestCluster:
    def test_two_agents(self, base_port):
        with spawn_cluster(2, 1, 12, base_port) as sim:
            snap = sim.catalog()
            assert [(i.node_id, i.address, i.slots, i.health) for i in snap.instances] == [
                ("node02", "10.2.0.1", 12, "passing"),
                ("node03", "10.3.0.1", 12, "passing"),
            ]
            assert all(i.endpoint.startswith("127.0.0.1:") for i in snap.instances)
            assert render_catalog(sim) == b"10.2.0.1\n10.3.0.1\n"

    def test_registry_only(self, base_port):
        with spawn_cluster(1, 0, 12, base_port) as sim:
            assert sim.catalog().instances == []
            assert sim.agents == {}

    def test_scale_and_bounds(self, base_port):
        with spawn_cluster(2, 1, 12, base_port) as sim:
            assert sim.scale(+1) == ["node04"]
            assert [i.address for i in sim.catalog().instances] == ["10.2.0.1", "10.3.0.1", "10.4.0.1"]
            assert sim.scale(-1) == ["node04"]
            assert [i.node_id for i in sim.catalog().instances] == ["node02", "node03"]
            with pytest.raises(NothingToRemove):
                sim.scale(-5)
            with pytest.raises(ValueError):
                sim.scale(0)

    def test_several_agents_per_host(self, base_port):
        with spawn_cluster(2, 3, 4, base_port) as sim:
            assert sim.live_addresses() == [f"10.{h}.0.{n}" for h in (2, 3) for n in (1, 2, 3)]
            assert sim.scale(2) == ["node08", "node09"]
            assert sim.live_addresses()[-2:] == ["10.4.0.1", "10.4.0.2"]
            assert sim.check_invariants() == []

    def test_kill_graceful_and_twice(self, base_port):
        with spawn_cluster(2, 1, 12, base_port) as sim:
            sim.kill_agent("node03", graceful=True)
            assert [i.node_id for i in sim.catalog().instances] == ["node02"]
            with pytest.raises(UnknownNode):
                sim.kill_agent("node03", graceful=True)

    def test_abrupt_kill_mock_clock(self, base_port):
        with spawn_cluster(2, 1, 12, base_port, mock_clock=True, ttl_s=3, heartbeat_interval_s=0.2) as sim:
            sim.start_renderer(wait_ms=500)
            killed_at = sim.clock()
            sim.kill_agent("node03", graceful=False)
            became_critical = None
            for _ in range(6):
                sim.advance_clock(1, pause_s=0.3)
                health = {i.node_id: i.health for i in sim.catalog().instances}
                assert health["node02"] == "passing"
                if health["node03"] == "critical":
                    became_critical = sim.clock()
                    break
            assert became_critical is not None and became_critical - killed_at <= 3 + sim.tick_s
            deadline = time.monotonic() + 2
            while open(sim.hostfile_path, "rb").read() != b"10.2.0.1\n" and time.monotonic() < deadline:
                time.sleep(0.05)
            assert open(sim.hostfile_path, "rb").read() == b"10.2.0.1\n"

    def test_registry_restart_self_heals(self, base_port):
        with spawn_cluster(2, 1, 12, base_port, ttl_s=3, heartbeat_interval_s=0.3) as sim:
            sim.restart_registry()
            deadline = time.monotonic() + 2 * 0.3 + 0.5
            while len(sim.catalog().instances) < 2 and time.monotonic() < deadline:
                time.sleep(0.05)
            assert [i.node_id for i in sim.catalog().instances] == ["node02", "node03"]

    def test_job_over_rendered_hostfile(self, base_port):
        with spawn_cluster(2, 1, 12, base_port) as sim:
            sim.start_renderer(wait_ms=500)
            deadline = time.monotonic() + 2
            while not os.path.exists(sim.hostfile_path) and time.monotonic() < deadline:
                time.sleep(0.02)
            res = sim.run_job(JobSpec(16, "/bin/sh", ["-c", "echo $HPC_NODE"]))
            assert [r.stdout_lines[0] for r in res.per_rank] == ["node02"] * 12 + ["node03"] * 4


class TestScenario:
    def test_empty(self):
        report = run_scenario("[]")
        assert report.events == [] and report.assertions == [] and report.ok

    @pytest.mark.parametrize(
        "script",
        ["{", '{"op":"spawn"}', '[{"op":"teleport"}]', '[{"op":"spawn","n_hosts":1}]',
         '[{"op":"scale","delta":1}]', '[{"op":"sleep","ms":1,"colour":"red"}]',
         '[{"op":"spawn","n_hosts":1,"agents_per_host":0,"slots":1},{"op":"spawn","n_hosts":1,"agents_per_host":0,"slots":1}]',
         '[{"op":"spawn","n_hosts":1,"agents_per_host":0,"slots":1},{"op":"advance_clock","seconds":1}]'],
    )
    def test_parse_errors(self, script):
        with pytest.raises(ScenarioParseError):
            parse_scenario(script, mock_clock=False)

    def test_two_node_hello(self, base_port):
        report = run_scenario(load("two_node_hello.json", base_port))
        assert report.ok and report.passed == 5, report.to_json()
        job = [e for e in report.events if e["op"] == "run_job"][0]
        assert job["counts"] == {"node02": 12, "node03": 4} and job["stdout_lines"] == 16

    def test_scale_up(self, base_port):
        report = run_scenario(load("scale_up.json", base_port))
        assert report.ok, json.dumps(report.to_json(), indent=1)

    def test_failed_assertions_are_recorded_not_raised(self, base_port):
        script = [
            {"op": "spawn", "n_hosts": 1, "agents_per_host": 1, "slots": 2, "base_port": base_port},
            {"op": "assert_catalog", "count": 5},
            {"op": "kill", "node": "node99"},
            {"op": "assert_catalog", "count": 1},
        ]
        report = run_scenario(script)
        assert [a["passed"] for a in report.assertions] == [False, False, True]
        assert "UnknownNode" in report.events[2]["error"]

    def test_deterministic_under_seed(self, base_port):
        script = load("node_failure.json", base_port)
        script[3]["node"] = "random"
        a = run_scenario(script, seed=11, mock_clock=True)
        b = run_scenario(script, seed=11, mock_clock=True)
        assert a.to_json(include_wall_time=False) == b.to_json(include_wall_time=False)
        killed = a.events[3]["node"]
        assert killed in ("node02", "node03")


def test_startup_timeout(base_port):
    with spawn_cluster(1, 0, 1, base_port) as sim:
        t0 = time.monotonic()
        with pytest.raises(simnet.StartupTimeout):
            sim.wait_registered(["node77"], timeout=0.3)
        assert time.monotonic() - t0 < 2


def test_port_in_use(base_port):
    with socket.socket() as s:
        s.bind(("127.0.0.1", base_port))
        s.listen()
        with pytest.raises(simnet.PortExhausted):
            spawn_cluster(1, 0, 1, base_port)
