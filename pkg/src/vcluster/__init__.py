"""Virtual HPC cluster toolkit.

Compute-node agents register themselves with a TTL-checked service registry,
the head node renders a hostfile from the live catalog, and an mpirun-style
launcher places ranks by slot and fans them out to the agents.
"""

import importlib

__version__ = "0.1.0"

# Names are resolved lazily so agent processes only import what they use.
_EXPORTS = {
    "Agent": "agent", "ExecRequest": "agent", "ExecResult": "agent", "NodeSpec": "agent",
    "load_nodespec": "agent", "remote_exec": "agent",
    "Hostfile": "launcher", "JobResult": "launcher", "JobSpec": "launcher", "RankAssignment": "launcher",
    "map_ranks": "launcher", "parse_hostfile": "launcher", "run_job": "launcher",
    "CatalogSnapshot": "registry", "Registry": "registry", "RegistryClient": "registry",
    "RegistryServer": "registry", "ServiceInstance": "registry",
    "Template": "renderer", "Watcher": "renderer", "parse_template": "renderer", "render": "renderer",
    "SimCluster": "simnet", "spawn_cluster": "simnet", "run_scenario": "simnet",
}

__all__ = sorted(_EXPORTS)


def __getattr__(name):
    if name in _EXPORTS:
        return getattr(importlib.import_module(f".{_EXPORTS[name]}", __name__), name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
