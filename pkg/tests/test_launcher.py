import random
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vcluster.agent import ExecResult, remote_exec, run
from vcluster.launcher import (
    AgentUnreachable,
    HostEntry,
    Hostfile,
    HostfileParseError,
    JobSpec,
    Oversubscription,
    UnknownHost,
    aggregate_exit,
    map_ranks,
    parse_hostfile,
    run_job,
    transcript,
)

from conftest import HELLO, free_port


def hf(*pairs):
    return Hostfile([HostEntry(a, s, True) for a, s in pairs])


# -- independent oracles ------------------------------------------------------


def oracle_slot(np, hosts):
    """Sequential fill: walk hosts in order and hand out each of their slots."""
    out = []
    for addr, slots in hosts:
        for _ in range(slots):
            if len(out) < np:
                out.append(addr)
    return out


def oracle_node(np, hosts):
    """Deal in rounds: round k gives one rank to every host with more than k slots."""
    out = []
    for k in range(max(s for _, s in hosts)):
        for addr, slots in hosts:
            if slots > k and len(out) < np:
                out.append(addr)
    return out


def oracle_slot_oversub(np, hosts):
    out = []
    while len(out) < np:
        out += oracle_slot(np - len(out), hosts)
    return out


class TestParseHostfile:
    def test_bare(self):
        h = parse_hostfile(b"10.2.0.1\n10.3.0.1\n")
        assert [(e.address, e.slots, e.explicit) for e in h.entries] == [("10.2.0.1", 1, False), ("10.3.0.1", 1, False)]

    def test_slots_suffix(self):
        h = parse_hostfile(b"10.2.0.1 slots=12\n10.3.0.1 slots=12\n")
        assert [(e.address, e.slots) for e in h.entries] == [("10.2.0.1", 12), ("10.3.0.1", 12)]

    def test_comments_and_blanks(self):
        h = parse_hostfile("# cluster\n\n10.2.0.1  # head-adjacent\n   \n10.3.0.1 slots=4\n")
        assert h.addresses == ["10.2.0.1", "10.3.0.1"] and h.capacity == 5

    @pytest.mark.parametrize(
        "text, line",
        [("10.2.0.1\n10.2.0.1\n", 2), ("10.2.0.1 slots=0\n", 1), ("node02\n", 1),
         ("10.2.0.1\n10.3.0.1 cpus=4\n", 2), ("10.2.0.1 slots=-1\n", 1)],
    )
    def test_errors(self, text, line):
        with pytest.raises(HostfileParseError) as exc:
            parse_hostfile(text)
        assert exc.value.line == line


class TestMapRanks:
    def test_sixteen_split_twelve_four(self):
        a = map_ranks(16, hf(("10.2.0.1", 12), ("10.3.0.1", 12)), "slot")
        assert a.hosts_of() == ["10.2.0.1"] * 12 + ["10.3.0.1"] * 4
        assert [p.local_index for p in a.placements] == list(range(12)) + list(range(4))

    def test_single_host(self):
        a = map_ranks(4, hf(("10.0.0.1", 12)))
        assert [(p.address, p.local_index) for p in a.placements] == [("10.0.0.1", i) for i in range(4)]

    def test_by_node(self):
        a = map_ranks(6, hf(("10.0.0.1", 12), ("10.0.0.2", 12)), "node")
        assert [p.rank for p in a.placements if p.address == "10.0.0.1"] == [0, 2, 4]
        assert [p.rank for p in a.placements if p.address == "10.0.0.2"] == [1, 3, 5]

    def test_by_node_skips_full(self):
        a = map_ranks(5, hf(("10.0.0.1", 1), ("10.0.0.2", 3), ("10.0.0.3", 1)), "node")
        assert a.hosts_of() == ["10.0.0.1", "10.0.0.2", "10.0.0.3", "10.0.0.2", "10.0.0.2"]

    def test_oversubscription(self):
        with pytest.raises(Oversubscription):
            map_ranks(25, hf(("10.0.0.1", 12), ("10.0.0.2", 12)))

    def test_oversubscribe_slot_repeats_fill(self):
        hosts = [("10.0.0.1", 2), ("10.0.0.2", 1)]
        a = map_ranks(7, hf(*hosts), "slot", oversubscribe=True)
        assert a.hosts_of() == oracle_slot_oversub(7, hosts)
        assert a.counts() == {"10.0.0.1": 5, "10.0.0.2": 2}

    def test_oversubscribe_node_round_robin(self):
        a = map_ranks(7, hf(("10.0.0.1", 1), ("10.0.0.2", 5)), "node", oversubscribe=True)
        assert a.hosts_of() == ["10.0.0.1", "10.0.0.2"] * 3 + ["10.0.0.1"]

    def test_thirty_over_three(self):
        hosts = hf(("10.2.0.1", 12), ("10.3.0.1", 12), ("10.4.0.1", 12))
        assert map_ranks(30, hosts).counts() == {"10.2.0.1": 12, "10.3.0.1": 12, "10.4.0.1": 6}

    def test_bad_args(self):
        with pytest.raises(ValueError):
            map_ranks(0, hf(("10.0.0.1", 1)))
        with pytest.raises(ValueError):
            map_ranks(1, Hostfile())
        with pytest.raises(ValueError):
            map_ranks(1, hf(("10.0.0.1", 1)), "core")


host_lists = st.lists(st.integers(1, 16), min_size=1, max_size=8).map(
    lambda slots: [(f"10.{i + 2}.0.1", s) for i, s in enumerate(slots)]
)


@settings(max_examples=300, deadline=None)
@given(host_lists, st.integers(1, 64), st.sampled_from(["slot", "node"]))
def test_matches_oracles(hosts, np, map_by):
    cap = sum(s for _, s in hosts)
    if np > cap:
        with pytest.raises(Oversubscription):
            map_ranks(np, hf(*hosts), map_by)
        return
    a = map_ranks(np, hf(*hosts), map_by)
    oracle = oracle_slot if map_by == "slot" else oracle_node
    assert a.hosts_of() == oracle(np, hosts)
    # bijection onto (host, local_index) and capacity bound
    pairs = {(p.address, p.local_index) for p in a.placements}
    assert len(pairs) == np and [p.rank for p in a.placements] == list(range(np))
    slots = dict(hosts)
    assert all(count <= slots[addr] for addr, count in a.counts().items())
    assert sum(a.counts().values()) == np


@settings(max_examples=100, deadline=None)
@given(host_lists, st.integers(1, 63))
def test_slot_prefix_stability(hosts, np):
    cap = sum(s for _, s in hosts)
    if np + 1 > cap:
        return
    small = map_ranks(np, hf(*hosts)).placements
    big = map_ranks(np + 1, hf(*hosts)).placements
    assert big[:np] == small


@pytest.mark.parametrize(
    "codes, expected", [([0, 0], 0), ([0, 2, 1], 2), ([0, 1, -1], -1), ([3], 3)]
)
def test_aggregate_exit(codes, expected):
    assert aggregate_exit([ExecResult(c) for c in codes]) == expected


# -- dispatch against real in-process agents ---------------------------------


@pytest.fixture
def two_nodes(make_spec):
    agents = [run(make_spec("node02", "10.2.0.1")), run(make_spec("node03", "10.3.0.1"))]
    yield agents
    for a in agents:
        a.shutdown(graceful=False)


def test_hello_sixteen(two_nodes, server, hello_script):
    hostfile = parse_hostfile(b"10.2.0.1\n10.3.0.1\n")
    res = run_job(JobSpec(16, hello_script), hostfile, server.addr, slots_from_registry=True)
    lines = [r.stdout_lines[0] for r in res.per_rank]
    assert lines == [f"Hello world! I am process number: {r} on host {'node02' if r < 12 else 'node03'}"
                     for r in range(16)]
    assert res.job_exit == 0
    assert transcript(res)[13] == "[13] Hello world! I am process number: 13 on host node03"


def test_env_contract(two_nodes, server):
    hostfile = parse_hostfile(b"10.2.0.1 slots=2\n10.3.0.1 slots=2\n")
    res = run_job(JobSpec(3, "/bin/sh", ["-c", "echo $HPC_RANK $HPC_SIZE $HPC_NODE $HPC_LOCAL $HPC_HOSTLIST"]),
                  hostfile, server.addr)
    assert [r.stdout_lines for r in res.per_rank] == [
        ["0 3 node02 0 10.2.0.1,10.3.0.1"],
        ["1 3 node02 1 10.2.0.1,10.3.0.1"],
        ["2 3 node03 0 10.2.0.1,10.3.0.1"],
    ]


def test_bare_hostfile_without_registry_slots_is_one_each(two_nodes, server):
    with pytest.raises(Oversubscription):
        run_job(JobSpec(3, "/bin/true"), parse_hostfile(b"10.2.0.1\n10.3.0.1\n"), server.addr)


def test_exit_propagation(two_nodes, server):
    res = run_job(JobSpec(1, "/bin/false"), parse_hostfile(b"10.2.0.1\n"), server.addr)
    assert res.job_exit == 1 and res.per_rank[0].exit_code == 1


def test_unknown_host_before_dispatch(two_nodes, server):
    calls = []
    with pytest.raises(UnknownHost):
        run_job(JobSpec(1, "/bin/true"), parse_hostfile(b"10.2.0.1\n10.9.0.1\n"), server.addr,
                exec_fn=lambda *a, **k: calls.append(a))
    assert calls == []


def test_denied_rank_fails_job(two_nodes, server):
    res = run_job(JobSpec(2, "/usr/sbin/nope"), parse_hostfile(b"10.2.0.1 slots=2\n"), server.addr)
    assert res.job_exit == 126 and "denied" in res.per_rank[0].stderr_lines[0]


def test_timeout_rank(two_nodes, server):
    res = run_job(JobSpec(2, "/bin/sh", ["-c", 'test "$HPC_RANK" = 1 && sleep 30; exit 0'], timeout_s=1),
                  parse_hostfile(b"10.2.0.1 slots=2\n"), server.addr)
    assert [r.exit_code for r in res.per_rank] == [0, -1]
    assert res.job_exit == -1


def test_order_independent_of_completion(two_nodes, server):
    rng = random.Random(7)
    delays = {r: rng.uniform(0, 0.2) for r in range(24)}

    def slow_exec(endpoint, req, **kw):
        time.sleep(delays[int(req.env["HPC_RANK"])])
        return remote_exec(endpoint, req, **kw)

    res = run_job(JobSpec(24, "/bin/sh", ["-c", "echo $HPC_RANK"]), parse_hostfile(b"10.2.0.1\n10.3.0.1\n"),
                  server.addr, slots_from_registry=True, exec_fn=slow_exec)
    assert [r.stdout_lines for r in res.per_rank] == [[str(r)] for r in range(24)]


def test_agent_unreachable(two_nodes, server, client):
    client.register("node09", "hpc", "10.9.0.1", f"127.0.0.1:{free_port()}", 4, 15)
    hostfile = parse_hostfile(b"10.2.0.1 slots=2\n10.9.0.1 slots=2\n")
    t0 = time.monotonic()
    with pytest.raises(AgentUnreachable) as exc:
        run_job(JobSpec(4, "/bin/sleep", ["20"]), hostfile, server.addr)
    assert time.monotonic() - t0 < 5
    assert exc.value.address == "10.9.0.1"
    assert [r.exit_code for r in exc.value.partial.per_rank] == [-1] * 4


def test_capped_inflight(two_nodes, server):
    res = run_job(JobSpec(8, "/bin/true"), parse_hostfile(b"10.2.0.1 slots=8\n"), server.addr, max_inflight=2)
    assert res.job_exit == 0 and len(res.per_rank) == 8
