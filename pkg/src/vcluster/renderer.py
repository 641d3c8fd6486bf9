"""Hostfile rendering from registry catalog snapshots.

Templates use a tiny directive language::

    %{each hpc}%{address} slots=%{slots}
    %{end}

Text outside ``each`` blocks is copied verbatim; inside a block the body is
emitted once per passing instance of the named service, in catalog order.
"""

from __future__ import annotations

import logging
import os
import re
import subprocess
import tempfile
import threading
from dataclasses import dataclass, field
from importlib import resources
from typing import Union

from .registry import CatalogSnapshot, RegistryClient, RegistryUnreachable, ServiceInstance

log = logging.getLogger(__name__)

PLACEHOLDERS = ("address", "endpoint", "node", "slots")
CANONICAL_TEMPLATE = "%{each hpc}%{address}\n%{end}"

_DIRECTIVE = re.compile(r"%\{([^}]*)\}")


class TemplateSyntaxError(ValueError):
    def __init__(self, msg: str, line: int):
        self.line = line
        super().__init__(f"line {line}: {msg}")


@dataclass(frozen=True)
class Placeholder:
    name: str


@dataclass
class EachBlock:
    service_name: str
    body: list[Union[str, Placeholder]] = field(default_factory=list)


@dataclass
class Template:
    segments: list[Union[str, EachBlock]] = field(default_factory=list)

    @property
    def services(self) -> list[str]:
        return [s.service_name for s in self.segments if isinstance(s, EachBlock)]


@dataclass
class RenderOutput:
    content: bytes
    source_index: int


def default_template_source() -> str:
    return resources.files("vcluster").joinpath("data/hostfile.tmpl").read_text(encoding="utf-8")


def parse_template(source: bytes | str) -> Template:
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    template = Template()
    block: EachBlock | None = None
    block_line = 0
    pos = 0

    def literal(text: str) -> None:
        if not text:
            return
        target = block.body if block is not None else template.segments
        if target and isinstance(target[-1], str):
            target[-1] += text
        else:
            target.append(text)

    for m in _DIRECTIVE.finditer(source):
        line = source.count("\n", 0, m.start()) + 1
        literal(source[pos:m.start()])
        pos = m.end()
        words = m.group(1).split()
        if len(words) == 2 and words[0] == "each":
            if block is not None:
                raise TemplateSyntaxError("nested each block", line)
            block = EachBlock(words[1])
            block_line = line
        elif words == ["end"]:
            if block is None:
                raise TemplateSyntaxError("end without each", line)
            template.segments.append(block)
            block = None
        elif len(words) == 1 and words[0] in PLACEHOLDERS:
            if block is None:
                raise TemplateSyntaxError(f"placeholder {words[0]!r} outside an each block", line)
            block.body.append(Placeholder(words[0]))
        else:
            raise TemplateSyntaxError(f"unknown directive %{{{m.group(1)}}}", line)
    if block is not None:
        raise TemplateSyntaxError(f"unclosed each block for {block.service_name!r}", block_line)
    literal(source[pos:])
    return template


def _field(inst: ServiceInstance, name: str) -> str:
    if name == "node":
        return inst.node_id
    return str(getattr(inst, name))


def render(template: Template, snapshot: CatalogSnapshot) -> RenderOutput:
    """Render ``template`` over the passing instances of ``snapshot``.

    Blocks naming a service other than the snapshot's render empty.
    """
    out: list[str] = []
    live = snapshot.passing()
    for seg in template.segments:
        if isinstance(seg, str):
            out.append(seg)
            continue
        if seg.service_name != snapshot.service_name:
            continue
        for inst in live:
            for part in seg.body:
                out.append(part if isinstance(part, str) else _field(inst, part.name))
    return RenderOutput("".join(out).encode("utf-8"), snapshot.index)


def write_atomic(path: str, content: bytes) -> None:
    """Replace ``path`` with ``content`` via a temp file and rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(content)
            f.flush()
            os.fsync(f.fileno())
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


class Watcher:
    """Keep ``output_path`` equal to the render of the live catalog.

    Each cycle issues a blocking catalog query from the last seen index,
    renders, and rewrites the file only when the bytes differ from what is
    on disk. ``trigger`` (a shell command) runs after every write.
    """

    def __init__(
        self,
        template: Template,
        registry_addr: str,
        service: str,
        output_path: str,
        trigger: str | None = None,
        wait_ms: int = 5000,
        backoff_cap_s: float = 5.0,
    ):
        self.template = template
        self.client = RegistryClient(registry_addr)
        self.service = service
        self.output_path = output_path
        self.trigger = trigger
        self.wait_ms = wait_ms
        self.backoff_cap_s = backoff_cap_s
        self.last_index = 0
        self.wakeups = 0
        self.writes = 0
        self.triggers = 0
        self.trigger_failures = 0
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def _current_content(self) -> bytes | None:
        try:
            with open(self.output_path, "rb") as f:
                return f.read()
        except FileNotFoundError:
            return None

    def _run_trigger(self) -> None:
        self.triggers += 1
        try:
            proc = subprocess.run(self.trigger, shell=True)
        except OSError as exc:
            self.trigger_failures += 1
            log.error("trigger %r failed to start: %s", self.trigger, exc)
            return
        if proc.returncode != 0:
            self.trigger_failures += 1
            log.error("trigger %r exited %d", self.trigger, proc.returncode)

    def apply(self, snapshot: CatalogSnapshot) -> bool:
        """Render ``snapshot`` and write it if needed. Returns True on write."""
        self.wakeups += 1
        self.last_index = snapshot.index
        out = render(self.template, snapshot)
        if self.writes and out.content == self._current_content():
            return False
        write_atomic(self.output_path, out.content)
        self.writes += 1
        log.info("wrote %s (%d bytes, index %d)", self.output_path, len(out.content), out.source_index)
        if self.trigger:
            self._run_trigger()
        return True

    def step(self) -> bool:
        snap = self.client.catalog(self.service, passing_only=True, min_index=self.last_index,
                                   wait_ms=self.wait_ms if self.writes else 0)
        return self.apply(snap)

    def run(self) -> None:
        delay = 0.1
        while not self._stop.is_set():
            try:
                self.step()
                delay = 0.1
            except RegistryUnreachable as exc:
                log.warning("catalog query failed: %s; retrying in %.1fs", exc, delay)
                self._stop.wait(delay)
                delay = min(delay * 2, self.backoff_cap_s)

    def start(self) -> "Watcher":
        self._thread = threading.Thread(target=self.run, name="renderer-watch", daemon=True)
        self._thread.start()
        return self

    def stop(self, timeout: float | None = None) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout if timeout is not None else self.wait_ms / 1000 + 5)


def watch_and_render(
    template: Template,
    registry_addr: str,
    service: str,
    output_path: str,
    trigger: str | None = None,
    wait_ms: int = 5000,
) -> None:
    """Run the watch loop in the foreground until interrupted."""
    Watcher(template, registry_addr, service, output_path, trigger, wait_ms).run()
