"""``clusterctl``: one binary for the registry, agents, renderer, launcher, status and simulator.

Exit codes: 0 success, 1 runtime error, 2 usage error; ``run`` exits with the
job's aggregate exit code.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

ENV_REGISTRY = "VCLUSTER_REGISTRY"
DEFAULT_REGISTRY = "127.0.0.1:8500"

log = logging.getLogger("clusterctl")


def _registry_default() -> str:
    return os.environ.get(ENV_REGISTRY) or DEFAULT_REGISTRY


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clusterctl", description="Virtual HPC cluster control.",
                                     allow_abbrev=False)
    parser.add_argument("-v", "--verbose", action="store_true", help="log at debug level")
    sub = parser.add_subparsers(dest="command", metavar="{registry,agent,render,run,status,sim}")
    sub.required = True
    reg_help = f"registry host:port (default ${ENV_REGISTRY} or {DEFAULT_REGISTRY})"

    p = sub.add_parser("registry", help="run the service registry", allow_abbrev=False)
    p.add_argument("--listen", default="0.0.0.0:8500", help="listen address (default 0.0.0.0:8500)")
    p.add_argument("--tick", type=float, default=1.0, help="expiry sweep interval in seconds (default 1)")
    p.add_argument("--mock-clock", action="store_true",
                   help="run on a virtual clock advanced only by the 'advance' op")

    p = sub.add_parser("agent", help="run a node agent from a NodeSpec file", allow_abbrev=False)
    p.add_argument("--spec", required=True, metavar="FILE", help="NodeSpec file")

    p = sub.add_parser("render", help="render a template over the catalog", allow_abbrev=False)
    p.add_argument("--registry", default=None, metavar="ADDR", help=reg_help)
    p.add_argument("--service", default="hpc", metavar="NAME", help="service to render (default hpc)")
    p.add_argument("--template", default=None, metavar="FILE", help="template file (default: built-in hostfile.tmpl)")
    p.add_argument("--out", default=None, metavar="FILE", help="output file (default stdout; required with --watch)")
    p.add_argument("--watch", action="store_true", help="keep watching and re-render on change")
    p.add_argument("--wait-ms", type=int, default=5000, metavar="N", help="blocking query wait (default 5000)")
    p.add_argument("--exec", dest="trigger", default=None, metavar="CMD", help="shell command run after each write")

    p = sub.add_parser("run", help="launch an SPMD job over the hostfile", allow_abbrev=False,
                       usage="clusterctl run [--registry ADDR] --hostfile FILE -np N [--map-by slot|node] "
                             "[--oversubscribe] [--slots-from-registry] [--timeout S] -- CMD [ARGS...]")
    p.add_argument("--registry", default=None, metavar="ADDR", help=reg_help)
    p.add_argument("--service", default="hpc", metavar="NAME", help="service the hosts belong to (default hpc)")
    p.add_argument("--hostfile", required=True, metavar="FILE", help="hostfile to place ranks on")
    p.add_argument("-np", "--np", dest="np", type=int, required=True, metavar="N", help="number of ranks")
    p.add_argument("--map-by", choices=("slot", "node"), default="slot", help="placement policy (default slot)")
    p.add_argument("--oversubscribe", action="store_true", help="allow more ranks than slots")
    p.add_argument("--slots-from-registry", action="store_true",
                   help="take slot counts of bare hostfile entries from the catalog")
    p.add_argument("--timeout", type=int, default=300, metavar="S", help="per-rank timeout in seconds (default 300)")

    p = sub.add_parser("status", help="show registered instances", allow_abbrev=False)
    p.add_argument("--registry", default=None, metavar="ADDR", help=reg_help)
    p.add_argument("--service", default="hpc", metavar="NAME", help="service to show (default hpc)")
    p.add_argument("--json", action="store_true", help="emit the raw catalog snapshot as JSON")

    p = sub.add_parser("sim", help="run a simulation scenario", allow_abbrev=False)
    p.add_argument("--scenario", required=True, metavar="FILE", help="JSON scenario file")
    p.add_argument("--seed", type=int, default=0, metavar="N", help="rng seed (default 0)")
    p.add_argument("--mock-clock", action="store_true", help="run the registry on a virtual clock")
    return parser


def _read(path: str) -> bytes:
    with open(path, "rb") as f:
        return f.read()


def cmd_registry(args) -> int:
    from .registry import serve

    serve(args.listen, tick_s=args.tick, mock_clock=args.mock_clock)
    return 0


def cmd_agent(args) -> int:
    from .agent import load_nodespec, serve

    serve(load_nodespec(_read(args.spec)))
    return 0


def cmd_render(args) -> int:
    from .registry import RegistryClient
    from .renderer import Watcher, default_template_source, parse_template, render, write_atomic

    source = _read(args.template) if args.template else default_template_source()
    template = parse_template(source)
    registry = args.registry or _registry_default()
    if args.watch:
        if not args.out:
            print("clusterctl render: --watch requires --out", file=sys.stderr)
            return 2
        try:
            Watcher(template, registry, args.service, args.out, args.trigger, args.wait_ms).run()
        except KeyboardInterrupt:
            pass
        return 0
    out = render(template, RegistryClient(registry).catalog(args.service, passing_only=True))
    if args.out:
        write_atomic(args.out, out.content)
    else:
        sys.stdout.buffer.write(out.content)
        sys.stdout.flush()
    return 0


def cmd_run(args, job_argv: list[str]) -> int:
    from .launcher import AgentUnreachable, JobSpec, parse_hostfile, run_job, transcript

    if not job_argv:
        print("clusterctl run: missing '-- CMD [ARGS...]'", file=sys.stderr)
        return 2
    spec = JobSpec(np=args.np, cmd=job_argv[0], args=job_argv[1:], map_by=args.map_by,
                   oversubscribe=args.oversubscribe, timeout_s=args.timeout)
    hostfile = parse_hostfile(_read(args.hostfile))
    try:
        result = run_job(spec, hostfile, args.registry or _registry_default(), args.service,
                         slots_from_registry=args.slots_from_registry)
    except AgentUnreachable as exc:
        if exc.partial is not None:
            _print_transcript(exc.partial, transcript)
        raise
    _print_transcript(result, transcript)
    return result.job_exit


def _print_transcript(result, transcript) -> None:
    for line in transcript(result, "stdout"):
        print(line)
    for line in transcript(result, "stderr"):
        print(line, file=sys.stderr)
    sys.stdout.flush()


def format_status(snapshot) -> str:
    if not snapshot.instances:
        return "no instances"
    rows = [("NODE", "ADDRESS", "SLOTS", "HEALTH")]
    rows += [(i.node_id, i.address, str(i.slots), i.health) for i in snapshot.instances]
    widths = [max(len(r[c]) for r in rows) for c in range(4)]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows)


def cmd_status(args) -> int:
    from .registry import RegistryClient

    snap = RegistryClient(args.registry or _registry_default()).catalog(args.service, passing_only=False)
    if args.json:
        print(json.dumps(snap.to_json(), separators=(",", ":")))
    else:
        print(format_status(snap))
    return 0


def cmd_sim(args) -> int:
    from .simnet import run_scenario

    report = run_scenario(_read(args.scenario), seed=args.seed, mock_clock=args.mock_clock)
    print(json.dumps(report.to_json(), indent=2))
    return 0 if report.ok else 1


def split_job_argv(argv: list[str]) -> tuple[list[str], list[str]]:
    if "--" in argv:
        i = argv.index("--")
        return argv[:i], argv[i + 1:]
    return argv, []


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    own, job_argv = split_job_argv(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(own)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    if job_argv and args.command != "run":
        parser.print_usage(sys.stderr)
        print("clusterctl: '--' is only valid for 'run'", file=sys.stderr)
        return 2
    try:
        if args.command == "run":
            return cmd_run(args, job_argv)
        return globals()[f"cmd_{args.command}"](args)
    except KeyboardInterrupt:
        return 130
    except Exception as exc:
        print(f"clusterctl {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
