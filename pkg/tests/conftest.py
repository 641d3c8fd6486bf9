import itertools
import os
import socket
import stat

import pytest

from vcluster.agent import NodeSpec
from vcluster.registry import Registry, RegistryClient, RegistryServer

HELLO = 'echo "Hello world! I am process number: $HPC_RANK on host $HPC_NODE"'

_ports = itertools.count(17100, 50)


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture
def base_port():
    """A block of 50 ports for a SimCluster, distinct per test."""
    return next(_ports)


class FakeClock:
    def __init__(self, now=1000.0):
        self.now = now

    def __call__(self):
        return self.now

    def advance(self, s):
        self.now += s
        return self.now


@pytest.fixture
def clock():
    return FakeClock()


@pytest.fixture
def registry(clock):
    return Registry(clock=clock)


@pytest.fixture
def server():
    srv = RegistryServer("127.0.0.1:0", tick_s=0.1).start()
    yield srv
    srv.stop()


@pytest.fixture
def client(server):
    return RegistryClient(server.addr)


@pytest.fixture
def make_spec(server, tmp_path):
    def make(node_id="node02", address="10.2.0.1", **kw):
        kw.setdefault("slots", 12)
        kw.setdefault("exec_allow", ["/bin/", "/usr/bin/", str(tmp_path) + "/"])
        kw.setdefault("registry_addr", server.addr)
        kw.setdefault("listen_addr", "127.0.0.1:0")
        return NodeSpec(node_id=node_id, logical_address=address, **kw)

    return make


@pytest.fixture
def hello_script(tmp_path):
    path = tmp_path / "hello.sh"
    path.write_text("#!/bin/sh\n" + HELLO + "\n")
    path.chmod(path.stat().st_mode | stat.S_IXUSR)
    return str(path)


def pytest_configure(config):
    os.environ.pop("VCLUSTER_REGISTRY", None)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)
