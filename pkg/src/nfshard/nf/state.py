"""Stateful data structures the NF models are built from.

All of them are plain single-owner objects; the executors decide who owns which
instance. Time is logical (packet timestamps), and expiry is lazy: nothing
happens until an access looks at an index.
"""

from __future__ import annotations

import hashlib
import heapq
import random
from collections import namedtuple

from .model import NfModel, StateObjectDecl, _const_value, key_width


class ReadOnlyViolation(RuntimeError):
    pass


class MapState:
    """Exact-match table with a hard capacity; a full table refuses new keys."""

    def __init__(self, name: str, capacity: int, read_only: bool = False):
        self.name = name
        self.capacity = capacity
        self.read_only = read_only
        self.data: dict[int, int] = {}
        self.chain: DChainState | None = None
        self._owner: dict[int, int] = {}  # chain index -> key stored under it

    def get(self, key: int):
        return self.data.get(key)

    def put(self, key: int, value: int) -> bool:
        if self.read_only:
            raise ReadOnlyViolation(f"write to read-only map {self.name}")
        if key not in self.data and len(self.data) >= self.capacity:
            return False
        self.data[key] = value
        if self.chain is not None:
            self._owner[value] = key
        return True

    def forget_index(self, idx: int) -> None:
        key = self._owner.pop(idx, None)
        if key is not None and self.data.get(key) == idx:
            del self.data[key]

    def load(self, key: int, value: int) -> None:
        self.data[key] = value


class VectorState:
    def __init__(self, name: str, capacity: int, fields: tuple[str, ...], read_only: bool = False):
        self.name = name
        self.capacity = capacity
        self.read_only = read_only
        self.rec = namedtuple(f"{name}_record", fields)
        self.zero = self.rec(*([0] * len(fields)))
        self.items = [self.zero] * capacity

    def get(self, idx: int):
        if not 0 <= idx < self.capacity:
            raise IndexError(f"{self.name}[{idx}] out of range (capacity {self.capacity})")
        return self.items[idx]

    def put(self, idx: int, values: dict) -> None:
        if self.read_only:
            raise ReadOnlyViolation(f"write to read-only vector {self.name}")
        self.items[idx] = self.get(idx)._replace(**values)


class DChainState:
    """Index allocator with last-touch times and lazy expiry.

    ``copies`` > 1 keeps one aging timestamp array per core; allocation stamps
    all of them, rejuvenation only the caller's.  An index is expired for good
    only when every copy is older than the expiry window.
    """

    def __init__(self, name: str, capacity: int, expiry: int, copies: int = 1):
        self.name = name
        self.capacity = capacity
        self.expiry = expiry
        self.allocated = bytearray(capacity)
        self.last = [[0] * capacity for _ in range(copies)]
        self.free = list(range(capacity))
        self.maps: list[MapState] = []
        self.clears = 0
        self.resyncs = 0

    def newest(self, idx: int) -> int:
        return max(c[idx] for c in self.last)

    def is_allocated(self, idx: int) -> bool:
        return 0 <= idx < self.capacity and bool(self.allocated[idx])

    def expired(self, idx: int, now: int, copy: int | None = None) -> bool:
        stamp = self.newest(idx) if copy is None else self.last[copy][idx]
        return now > stamp + self.expiry

    def allocate(self, now: int):
        if not self.free:
            self.reclaim(now)
        if not self.free:
            return None
        idx = heapq.heappop(self.free)
        self.allocated[idx] = 1
        for c in self.last:
            c[idx] = now
        return idx

    def reclaim(self, now: int) -> None:
        for idx in range(self.capacity):
            if self.allocated[idx] and self.expired(idx, now):
                self.expire(idx)

    def expire(self, idx: int) -> None:
        self.allocated[idx] = 0
        heapq.heappush(self.free, idx)
        self.clears += 1
        for m in self.maps:
            m.forget_index(idx)

    def rejuvenate(self, idx: int, now: int, copy: int = 0) -> None:
        if self.is_allocated(idx):
            self.last[copy][idx] = now


_MERSENNE = (1 << 89) - 1


class SketchState:
    """Count-min sketch: ``depth`` rows of ``width`` counters."""

    def __init__(self, name: str, width: int, depth: int = 5, key_bits: int = 64, seed: int = 0):
        self.name = name
        self.width = width
        self.depth = depth
        self.key_bits = key_bits
        digest = hashlib.blake2b(f"{name}/{seed}".encode(), digest_size=16).digest()
        rng = random.Random(digest)
        self.params = [(rng.randrange(1, _MERSENNE), rng.randrange(_MERSENNE)) for _ in range(depth)]
        self.rows = [[0] * width for _ in range(depth)]
        self.read_only = False

    def _cols(self, key: int):
        chunks = []
        k = key
        for _ in range(max(1, (self.key_bits + 63) // 64)):
            chunks.append(k & 0xFFFFFFFFFFFFFFFF)
            k >>= 64
        for a, b in self.params:
            h = 0
            for c in chunks:
                h = (h * a + c) % _MERSENNE
            yield (h * a + b) % _MERSENNE % self.width

    def touch(self, key: int, amount: int = 1) -> None:
        for row, col in zip(self.rows, self._cols(key)):
            row[col] += amount

    def query(self, key: int) -> int:
        return min(row[col] for row, col in zip(self.rows, self._cols(key)))


def encode_key(values, widths) -> int:
    out = 0
    for v, w in zip(values, widths):
        out = (out << w) | (v & ((1 << w) - 1))
    return out


def build_state(model: NfModel, divide: int = 1, copies: int = 1,
                shard: frozenset[str] | set[str] = frozenset()) -> dict:
    """Fresh state instances for one owner.

    Objects named in ``shard`` get ``capacity // divide`` slots (at least one);
    ``copies`` is the number of per-core aging arrays on every dchain.
    """
    written = model.written_objects()
    out = {}
    for name, d in model.state.items():
        cap = max(1, d.capacity // divide) if name in shard else d.capacity
        ro = d.read_only or name not in written
        if d.kind == "map":
            obj = MapState(name, cap, read_only=False)
            for key, value in _map_init(d):
                obj.load(key, value)
            obj.read_only = d.read_only
        elif d.kind == "vector":
            obj = VectorState(name, cap, d.fields)
            for idx, rec in _vector_init(d):
                obj.items[idx] = obj.rec(**{f: int(rec.get(f, 0)) for f in d.fields})
            obj.read_only = d.read_only
        elif d.kind == "dchain":
            obj = DChainState(name, cap, d.expiry, copies)
        else:
            obj = SketchState(name, cap, d.depth, key_width(d.key_layout))
        obj.never_written = ro
        out[name] = obj
    for d in model.state.values():
        if d.kind == "dchain" and d.map:
            m = out[d.map]
            m.chain = out[d.name]
            out[d.name].maps.append(m)
    return out


def _map_init(d: StateObjectDecl):
    widths = [a.bits for a in d.key_layout]
    for item in d.init:
        key, value = item
        if isinstance(key, (list, tuple)):
            key = encode_key([_const_value(k) for k in key], widths)
        yield int(key), int(value)


def _vector_init(d: StateObjectDecl):
    items = d.init
    if isinstance(items, dict):
        items = sorted(items.items())
    else:
        items = list(enumerate(items))
    for idx, rec in items:
        if not isinstance(rec, dict):
            rec = dict(zip(d.fields, rec if isinstance(rec, (list, tuple)) else [rec]))
        yield int(idx), {k: _const_value(v) for k, v in rec.items()}
