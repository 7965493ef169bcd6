"""Synthetic traffic: uniform and Zipf flow mixes, cyclic churn, replies."""

from __future__ import annotations

import bisect
import itertools
import random
from dataclasses import asdict, dataclass
from functools import lru_cache

from ..nf.packet import Packet, Trace, ip, swap_headers

# sources of unsolicited WAN traffic come from here and nowhere else
UNSOLICITED_NET = ip("198.18.0.0")
UNSOLICITED_MASK = 0xFFFE0000


@dataclass
class TrafficSpec:
    distribution: str = "uniform"  # "uniform" | "zipf"
    packets: int = 50_000
    flows: int = 1_000
    zipf_s: float | None = None  # None: calibrate so the top flows carry top_share
    top_flows: int = 48
    top_share: float = 0.80
    churn: float = 0.0  # flow replacements per 1000 packets
    size: int = 64
    size_max: int | None = None
    reply_ratio: float = 0.0  # chance a packet answers its flow's latest request
    unsolicited: float = 0.0  # chance of a packet from an unknown WAN source
    origin: str = "lan"
    reply_iface: str = "wan"
    gap: int = 1  # ticks between consecutive packets
    proto: int = 6
    src_pool: int | None = None  # draw sources from this many addresses
    dst_pool: int | None = None
    dport_pool: int | None = None
    interfaces: tuple[str, ...] = ("lan", "wan")

    def __post_init__(self):
        if self.distribution not in ("uniform", "zipf"):
            raise ValueError(f"unknown distribution {self.distribution!r}")
        if self.packets < 0 or self.flows < 1:
            raise ValueError("packets must be >= 0 and flows >= 1")
        for name in ("reply_ratio", "unsolicited"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be within [0, 1]")

    def describe(self) -> dict:
        d = asdict(self)
        if self.distribution == "zipf":
            d["zipf_s"] = self.exponent()
        return d

    def exponent(self) -> float:
        if self.zipf_s is not None:
            return self.zipf_s
        return calibrate_zipf(self.flows, self.top_flows, self.top_share)


def zipf_share(s: float, flows: int, top: int) -> float:
    w = [k ** -s for k in range(1, flows + 1)]
    return sum(w[:top]) / sum(w)


@lru_cache(maxsize=None)
def calibrate_zipf(flows: int = 1000, top: int = 48, share: float = 0.80) -> float:
    """Exponent for which the ``top`` most popular flows carry ``share`` of packets."""
    lo, hi = 0.0, 4.0
    for _ in range(60):
        mid = (lo + hi) / 2
        if zipf_share(mid, flows, top) < share:
            lo = mid
        else:
            hi = mid
    return round((lo + hi) / 2, 6)


def _addr(rng: random.Random) -> int:
    while True:
        a = rng.getrandbits(32)
        if (a & UNSOLICITED_MASK) != UNSOLICITED_NET and a >> 24 not in (0, 127, 192, 224, 255):
            return a


def _mac(rng: random.Random) -> int:
    return (rng.getrandbits(48) | (0x02 << 40)) & ~(0x01 << 40)


class _Flows:
    def __init__(self, spec: TrafficSpec, rng: random.Random):
        self.spec, self.rng = spec, rng
        pool = lambda n: [_addr(rng) for _ in range(n)] if n else None
        self.srcs, self.dsts = pool(spec.src_pool), pool(spec.dst_pool)
        self.dports = [rng.randrange(1, 65536) for _ in range(spec.dport_pool)] if spec.dport_pool else None
        self.seen: set = set()

    def new(self) -> tuple[int, ...]:
        rng = self.rng
        while True:
            f = (
                _mac(rng), _mac(rng),
                rng.choice(self.srcs) if self.srcs else _addr(rng),
                rng.choice(self.dsts) if self.dsts else _addr(rng),
                self.spec.proto,
                rng.randrange(1024, 65536),
                rng.choice(self.dports) if self.dports else rng.randrange(1, 65536),
            )
            ident = f[2:]
            if ident not in self.seen:
                self.seen.add(ident)
                return f


def churn_schedule(spec: TrafficSpec, rng: random.Random) -> list[tuple[int, int]]:
    """(packet position, slot) replacement events, evenly spread and cyclic.

    Every churned slot is replaced at least twice and its last replacement
    brings back the slot's original flow, so the flow set at the end of the
    trace equals the one at the start and looped replay has no seam.
    """
    n = round(spec.churn * spec.packets / 1000)
    if n == 0 or spec.packets == 0:
        return []
    n = max(n, 2)
    slots = min(spec.flows, n // 2)
    counts = [n // slots] * slots
    for k in range(n - sum(counts)):
        counts[k] += 1
    chosen = rng.sample(range(spec.flows), slots)
    order = []
    for r in range(max(counts)):
        order += [s for s, c in zip(chosen, counts) if c > r]
    return [(int((k + 0.5) * spec.packets / n), slot) for k, slot in enumerate(order)]


def gen_traffic(spec: TrafficSpec, seed: int = 0) -> Trace:
    rng = random.Random(f"traffic:{seed}")
    flows = _Flows(spec, rng)
    current = [flows.new() for _ in range(spec.flows)]
    original = list(current)
    events = churn_schedule(spec, rng)
    remaining = {}
    for _, slot in events:
        remaining[slot] = remaining.get(slot, 0) + 1

    if spec.distribution == "zipf":
        s = spec.exponent()
        weights = [k ** -s for k in range(1, spec.flows + 1)]
    else:
        weights = [1.0] * spec.flows
    cum = list(itertools.accumulate(weights))
    total = cum[-1]
    size_max = spec.size_max or spec.size

    last_request: dict[int, tuple[int, tuple]] = {}  # slot -> (packet id, headers)
    packets = []
    ev = 0
    for pid in range(spec.packets):
        while ev < len(events) and events[ev][0] <= pid:
            slot = events[ev][1]
            remaining[slot] -= 1
            current[slot] = original[slot] if remaining[slot] == 0 else flows.new()
            last_request.pop(slot, None)
            ev += 1
        t = pid * spec.gap
        size = spec.size if size_max == spec.size else rng.randint(spec.size, size_max)
        if spec.unsolicited and rng.random() < spec.unsolicited:
            src = UNSOLICITED_NET | rng.getrandbits(17)
            hdr = (_mac(rng), _mac(rng), src, _addr(rng), spec.proto,
                   rng.randrange(1, 65536), rng.randrange(1, 65536))
            packets.append(Packet(pid, t, spec.reply_iface, *hdr, size_bytes=size))
            continue
        slot = bisect.bisect_left(cum, rng.random() * total)
        slot = min(slot, spec.flows - 1)
        req = last_request.get(slot)
        if req is not None and spec.reply_ratio and rng.random() < spec.reply_ratio:
            packets.append(Packet(pid, t, spec.reply_iface, *swap_headers(req[1]), size_bytes=size,
                                  reply_to=req[0]))
            continue
        hdr = current[slot]
        packets.append(Packet(pid, t, spec.origin, *hdr, size_bytes=size))
        last_request[slot] = (pid, hdr)
    meta = {"generator": "nfshard", "seed": seed, "distribution": spec.distribution}
    if spec.distribution == "zipf":
        meta["zipf_s"] = spec.exponent()
    if spec.churn:
        meta["churn"] = spec.churn
    return Trace(packets, tuple(spec.interfaces), "tick", meta)


def flow_identity(p: Packet) -> tuple[int, ...]:
    """Direction-independent identity of a packet's flow."""
    a = (p.ipv4_src, p.ipv4_dst, p.proto, p.sport, p.dport)
    b = (p.ipv4_dst, p.ipv4_src, p.proto, p.dport, p.sport)
    return min(a, b)


def small_domain_trace(model, rng: random.Random, n: int = 160) -> Trace:
    """Short trace over tiny field domains, so keys collide often.

    Requests enter the first interface; the second gets replies to earlier
    requests and unsolicited packets from a disjoint address pool.
    """
    ifaces = model.interfaces
    origin = ifaces[0]
    back = ifaces[1] if len(ifaces) > 1 else None
    addrs = [ip(f"10.0.0.{k}") for k in range(1, 5)]
    servers = [ip(f"172.16.0.{k}") for k in range(1, 5)]
    ports = [1000, 1001, 2000, 2001]
    macs = [0x020000000001 + k for k in range(4)]
    packets: list[Packet] = []
    requests: list[Packet] = []
    for pid in range(n):
        r = rng.random()
        if back is not None and requests and r < 0.35:
            q = rng.choice(requests)
            packets.append(Packet(pid, pid, back, *swap_headers(q.headers()), size_bytes=64, reply_to=q.id))
        elif back is not None and r < 0.45:
            src = UNSOLICITED_NET | rng.randrange(4)
            packets.append(Packet(pid, pid, back, rng.choice(macs), rng.choice(macs), src, rng.choice(addrs),
                                  6, rng.choice(ports), rng.choice(ports), 64))
        else:
            q = Packet(pid, pid, origin, rng.choice(macs), rng.choice(macs), rng.choice(addrs),
                       rng.choice(servers), 6, rng.choice(ports), rng.choice(ports), 64)
            packets.append(q)
            requests.append(q)
    return Trace(packets, tuple(ifaces), "tick")
