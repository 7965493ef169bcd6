"""The bundled NF models and what their analysis is expected to yield."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from ..nf.model import NfModel, load_model
from ..nf.packet import Packet, Trace, ip
from ..parsim.traffic import TrafficSpec, gen_traffic

CORPUS_DIR = Path(__file__).parent


class CorpusError(RuntimeError):
    pass


@dataclass
class CorpusEntry:
    name: str
    path: Path
    verdict: str
    fields: dict[str, tuple[str, ...]] = field(default_factory=dict)
    rule: str | None = None
    workload: dict = field(default_factory=dict)
    heartbeats: dict | None = None

    def model(self) -> NfModel:
        return load_model(self.path)

    @property
    def abstractions(self):
        return self.model().abstractions

    def traffic_spec(self, **overrides) -> TrafficSpec:
        return TrafficSpec(**{**self.workload, **overrides})

    def trace(self, seed: int = 0, **overrides) -> Trace:
        """The entry's workload: generic flows with replies and unsolicited packets."""
        base = {"reply_ratio": 0.3, "unsolicited": 0.05}
        trace = gen_traffic(TrafficSpec(**{**base, **self.workload, **overrides}), seed)
        if self.heartbeats:
            trace = with_heartbeats(trace, **self.heartbeats)
        return trace


def load_corpus(directory: str | Path | None = None) -> list[CorpusEntry]:
    d = Path(directory) if directory is not None else CORPUS_DIR
    index = d / "index.yaml"
    if not d.is_dir():
        raise CorpusError(f"corpus directory {d} does not exist")
    if not index.exists():
        raise CorpusError(f"corpus directory {d} has no index.yaml")
    doc = yaml.safe_load(index.read_text()) or {}
    entries = []
    for e in doc.get("nfs") or []:
        entries.append(CorpusEntry(
            name=e["name"], path=d / e["model"], verdict=e["verdict"],
            fields={k: tuple(v) for k, v in (e.get("fields") or {}).items()},
            rule=e.get("rule"), workload=dict(e.get("workload") or {}), heartbeats=e.get("heartbeats"),
        ))
    if not entries:
        raise CorpusError(f"corpus index {index} lists no NFs")
    return entries


def corpus_entry(name: str, directory=None) -> CorpusEntry:
    for e in load_corpus(directory):
        if e.name == name:
            return e
    raise CorpusError(f"no corpus NF named {name!r}")


def with_heartbeats(trace: Trace, port: int, backends: int, every: int, iface: str = "wan") -> Trace:
    """Interleave backend heartbeats (one before the first packet, then every ``every`` packets)."""
    servers = [ip("10.200.0.0") + k + 1 for k in range(backends)]
    out: list[Packet] = []
    renum: dict[int, int] = {}
    k = 0

    def beat(t):
        nonlocal k
        src = servers[k % backends]
        out.append(Packet(len(out), t, iface, 0x020000c80000 + k % backends, 0x020000000001,
                          src, ip("10.0.0.1"), 6, port, port, 64))
        k += 1

    for n, p in enumerate(trace.packets):
        if n == 0:
            for _ in range(backends):
                beat(p.time)
        elif n % every == 0:
            beat(p.time)
        renum[p.id] = len(out)
        out.append(replace(p, id=len(out), reply_to=None if p.reply_to is None else renum[p.reply_to]))
    meta = dict(trace.meta, heartbeats=f"{backends}x{port}/{every}")
    return Trace(out, trace.interfaces, trace.tick_unit, meta)
