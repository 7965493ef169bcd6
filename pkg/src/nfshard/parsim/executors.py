"""Deterministic multicore executors.

Cores are simulated, not run: packets are dispatched in trace order and each
is executed to completion on the core RSS picks for it.  What differs between
the two executors is state ownership and the locking bookkeeping.
"""

from __future__ import annotations

import csv
import hashlib
import io
import random
from dataclasses import dataclass, field
from typing import Callable

from ..nf.execute import BehaviorLog, Restart, Runtime, resolve_headers
from ..nf.model import NfModel
from ..nf.packet import Packet, Trace
from ..nf.state import DChainState, build_state
from ..rss import FIELD_BITS, IndirectionTable, InterfaceConfig, RssConfigBundle, RssKey, default_profile

Steer = Callable[[str, Packet], int]


@dataclass
class SimConfig:
    cores: int = 1
    capacity_mode: str = "shard"  # "shard" | "replicate"
    seed: int = 0

    def __post_init__(self):
        if self.cores < 1:
            raise ValueError("core count must be at least 1")
        if self.capacity_mode not in ("shard", "replicate"):
            raise ValueError(f"unknown capacity mode {self.capacity_mode!r}")


@dataclass
class Metrics:
    cores: int
    per_core_packets: list[int] = field(default_factory=list)
    cross_core_accesses: int = 0
    read_locks: int = 0
    write_locks: int = 0
    restarts: int = 0
    expiry_write_locks: int = 0
    global_clears: int = 0
    resyncs: int = 0

    def __post_init__(self):
        if not self.per_core_packets:
            self.per_core_packets = [0] * self.cores

    @property
    def packets(self) -> int:
        return sum(self.per_core_packets)

    @property
    def max_mean(self) -> float:
        mean = self.packets / self.cores
        return max(self.per_core_packets) / mean if mean else 0.0

    def as_dict(self) -> dict:
        return {
            "cores": self.cores, "packets": self.packets,
            "per_core_packets": list(self.per_core_packets),
            "cross_core_accesses": self.cross_core_accesses,
            "read_locks": self.read_locks, "write_locks": self.write_locks,
            "restarts": self.restarts, "expiry_write_locks": self.expiry_write_locks,
            "global_clears": self.global_clears, "resyncs": self.resyncs,
            "max_mean": round(self.max_mean, 6),
        }

    def to_text(self) -> str:
        d = self.as_dict()
        return "\n".join(f"{k}: {v}" for k, v in d.items())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["core", "packets"])
        for c, n in enumerate(self.per_core_packets):
            w.writerow([c, n])
        return buf.getvalue()


def steer_with(bundle: RssConfigBundle) -> Steer:
    engine = bundle.engine()
    return engine.steer


def software_steer(keys: dict, cores: int, salt: int = 0) -> Steer:
    """Steering by a salted hash of the given per-interface key atoms.

    Interfaces without an entry hash their whole address/port tuple.  The
    hash sees only values, so packets whose keys agree across interfaces meet.
    """
    default = ("ipv4_src", "ipv4_dst", "sport", "dport")

    def parts(iface, p):
        atoms = keys.get(iface)
        if atoms is None:
            return ("any", iface) + tuple(getattr(p, f) for f in default)
        out = []
        for a in atoms:
            if isinstance(a, str):
                out.append(getattr(p, a))
            else:
                v = getattr(p, a.field) >> (FIELD_BITS[a.field] - a.start - a.bits)
                out.append(v & ((1 << a.bits) - 1))
        return tuple(out)

    def steer(iface, p):
        h = hashlib.blake2b(repr((salt,) + parts(iface, p)).encode(), digest_size=8).digest()
        return int.from_bytes(h, "big") % cores

    return steer


def lock_mode_bundle(model: NfModel, cores: int, seed: int, profile=None) -> RssConfigBundle:
    """Random key, widest fieldset: the configuration used when sharding is impossible."""
    profile = profile or default_profile()
    rng = random.Random(f"lock:{seed}")
    configs = {}
    for iface in model.interfaces:
        key = 0
        while key == 0:
            key = rng.getrandbits(profile.key_bits)
        configs[iface] = InterfaceConfig(RssKey(key, profile.key_bits), profile.widest(),
                                         IndirectionTable.round_robin(cores, profile.table_size))
    return RssConfigBundle(configs, {"mode": "locks", "seed": str(seed)})


def _tracked(model: NfModel) -> frozenset[str]:
    written = model.written_objects()
    return frozenset(n for n, d in model.state.items()
                     if d.kind in ("map", "sketch") and n in written and not d.read_only)


def exec_shared_nothing(model: NfModel, steering: RssConfigBundle | Steer, trace: Trace | list[Packet],
                        config: SimConfig) -> tuple[BehaviorLog, Metrics]:
    """Each core owns private state; packets go where the steering sends them.

    A keyed access (map or sketch key) seen on two different cores counts as a
    cross-core access: the sharding failed to keep that entry private.
    """
    steer = steer_with(steering) if isinstance(steering, RssConfigBundle) else steering
    written = model.written_objects()
    shard = written if config.capacity_mode == "shard" else frozenset()
    metrics = Metrics(config.cores)
    owner: dict = {}

    def tracker_for(core):
        def track(obj, key):
            prev = owner.setdefault((obj, key), core)
            if prev != core:
                metrics.cross_core_accesses += 1
        return track

    tracked = _tracked(model)
    runtimes = [Runtime(model, build_state(model, config.cores, 1, shard), 0, None, tracker_for(c), tracked)
                for c in range(config.cores)]
    log = BehaviorLog()
    for p in trace:
        hdr = resolve_headers(p, log)
        arriving = p if hdr == p.headers() else p.with_headers(hdr)
        core = steer(p.in_iface, arriving)
        metrics.per_core_packets[core] += 1
        log.add(p.id, runtimes[core].run(p, hdr))
    return log, metrics


class _Guard:
    def __init__(self):
        self.speculative = True

    def __call__(self, why: str):
        if self.speculative:
            raise Restart(why)


def exec_lock_based(model: NfModel, trace: Trace | list[Packet], config: SimConfig,
                    steering: RssConfigBundle | Steer | None = None) -> tuple[BehaviorLog, Metrics]:
    """Single shared state behind a per-core read / all-cores write lock.

    Every packet first runs holding only its core's read flag; the first write
    (or an expiry that this core's aging copy suggests) aborts the run, the
    packet takes all flags and re-executes from the start.  Dchains keep one
    aging copy per core, so rejuvenation never needs the write lock.
    """
    if steering is None:
        steering = lock_mode_bundle(model, config.cores, config.seed)
    steer = steer_with(steering) if isinstance(steering, RssConfigBundle) else steering
    state = build_state(model, copies=config.cores)
    guards = [_Guard() for _ in range(config.cores)]
    runtimes = [Runtime(model, state, c, guards[c]) for c in range(config.cores)]
    metrics = Metrics(config.cores)
    log = BehaviorLog()
    for p in trace:
        hdr = resolve_headers(p, log)
        arriving = p if hdr == p.headers() else p.with_headers(hdr)
        core = steer(p.in_iface, arriving)
        metrics.per_core_packets[core] += 1
        g = guards[core]
        g.speculative = True
        metrics.read_locks += 1
        try:
            rec = runtimes[core].run(p, hdr)
        except Restart as r:
            metrics.restarts += 1
            metrics.write_locks += 1
            if r.args and r.args[0] == "expiry":
                metrics.expiry_write_locks += 1
            g.speculative = False
            rec = runtimes[core].run(p, hdr)
            g.speculative = True
        log.add(p.id, rec)
    for obj in state.values():
        if isinstance(obj, DChainState):
            metrics.global_clears += obj.clears
            metrics.resyncs += obj.resyncs
    return log, metrics


def table_indices(bundle: RssConfigBundle, trace) -> list[tuple[str, int | None]]:
    """(interface, indirection-table slot) per packet; None for the default queue."""
    engine = bundle.engine()
    return [(p.in_iface, engine.entry(p.in_iface, p)) for p in trace]
