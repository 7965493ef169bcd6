"""Software model of NIC receive-side scaling.

Toeplitz hashing, hash-input extraction, indirection-table steering and
static table rebalancing.  Bit strings are held as Python ints where bit 0
of the string is the most significant bit of the int.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import yaml

HASH_BITS = 32
DEFAULT_KEY_BITS = 416
DEFAULT_TABLE_SIZE = 512

FIELD_BITS: dict[str, int] = {
    "eth_src": 48,
    "eth_dst": 48,
    "ipv4_src": 32,
    "ipv4_dst": 32,
    "proto": 8,
    "sport": 16,
    "dport": 16,
}
CANONICAL_ORDER: tuple[str, ...] = tuple(FIELD_BITS)
L4_FIELDS = frozenset({"sport", "dport"})
L4_PROTOS = frozenset({6, 17})

_MASK32 = 0xFFFFFFFF


class FieldsetInapplicable(ValueError):
    """The packet lacks a field selected by the fieldset (e.g. ICMP with ports)."""


@dataclass(frozen=True)
class RssKey:
    value: int
    bits: int = DEFAULT_KEY_BITS

    def __post_init__(self):
        if self.bits <= 0 or self.bits % 8:
            raise ValueError(f"key length must be a positive multiple of 8, got {self.bits}")
        if self.value < 0 or self.value >> self.bits:
            raise ValueError("key value does not fit in the key length")

    @classmethod
    def from_hex(cls, text: str, bits: int | None = None) -> "RssKey":
        text = text.replace(":", "").replace(" ", "").strip()
        nbits = bits if bits is not None else 4 * len(text)
        if 4 * len(text) > nbits:
            raise ValueError("hex key longer than key length")
        # shorter hex strings are the key prefix; pad on the right
        return cls(int(text, 16) << (nbits - 4 * len(text)), nbits)

    @classmethod
    def from_bits(cls, bits: Sequence[int]) -> "RssKey":
        value = 0
        for b in bits:
            value = (value << 1) | (b & 1)
        return cls(value, len(bits))

    def hex(self) -> str:
        return format(self.value, f"0{self.bits // 4}x")

    def bit(self, i: int) -> int:
        return (self.value >> (self.bits - 1 - i)) & 1

    def to_bits(self) -> list[int]:
        return [self.bit(i) for i in range(self.bits)]

    def is_zero(self) -> bool:
        return self.value == 0

    def hamming_weight(self) -> int:
        return bin(self.value).count("1")


@dataclass(frozen=True)
class HashInput:
    value: int
    bits: int

    def bit(self, i: int) -> int:
        return (self.value >> (self.bits - 1 - i)) & 1

    def to_bytes(self) -> bytes:
        return (self.value << (-self.bits % 8)).to_bytes((self.bits + 7) // 8, "big")


@dataclass(frozen=True)
class FieldSet:
    id: str
    fields: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple(self.fields))
        unknown = [f for f in self.fields if f not in FIELD_BITS]
        if unknown:
            raise ValueError(f"fieldset {self.id!r}: unknown fields {unknown}")
        if not self.fields:
            raise ValueError(f"fieldset {self.id!r} is empty")
        order = [CANONICAL_ORDER.index(f) for f in self.fields]
        if order != sorted(set(order)):
            raise ValueError(f"fieldset {self.id!r} is not in canonical field order")

    @property
    def total_bits(self) -> int:
        return sum(FIELD_BITS[f] for f in self.fields)

    @property
    def needs_l4(self) -> bool:
        return any(f in L4_FIELDS for f in self.fields)

    def offset(self, name: str) -> int:
        """Bit offset of a field inside hash inputs built from this fieldset."""
        off = 0
        for f in self.fields:
            if f == name:
                return off
            off += FIELD_BITS[f]
        raise KeyError(name)


def toeplitz_hash(key: RssKey, data: HashInput) -> int:
    """32-bit Toeplitz hash of ``data`` under ``key``.

    Hash bit b (b=0 is the MSB) is the XOR over input positions x of
    data[x] AND key[x + b]; i.e. every set input bit XORs in the 32-bit key
    window starting at the same position.
    """
    if data.bits + HASH_BITS > key.bits:
        raise ValueError(f"{data.bits}-bit input too long for a {key.bits}-bit key")
    k, shift0 = key.value, key.bits - HASH_BITS
    h = 0
    v = data.value
    n = data.bits
    while v:
        top = v.bit_length() - 1
        x = n - 1 - top
        h ^= (k >> (shift0 - x)) & _MASK32
        v ^= 1 << top
    return h


class ToeplitzTable:
    """Byte-lookup compilation of one key for a fixed input length.

    ``table[p][v]`` is the hash contribution of byte value v at byte
    position p; a hash is the XOR of one entry per input byte.
    """

    def __init__(self, key: RssKey, nbits: int):
        if nbits % 8:
            raise ValueError("table hashing needs byte-aligned inputs")
        if nbits + HASH_BITS > key.bits:
            raise ValueError(f"{nbits}-bit input too long for a {key.bits}-bit key")
        self.nbytes = nbits // 8
        k, shift0 = key.value, key.bits - HASH_BITS
        rows = []
        for p in range(self.nbytes):
            windows = [(k >> (shift0 - (8 * p + i))) & _MASK32 for i in range(8)]
            row = [0] * 256
            for v in range(1, 256):
                low = v & -v
                i = 7 - (low.bit_length() - 1)
                row[v] = row[v ^ low] ^ windows[i]
            rows.append(row)
        self.rows = rows
        self.array = np.array(rows, dtype=np.uint32)

    def hash_bytes(self, data: bytes) -> int:
        h = 0
        for row, b in zip(self.rows, data):
            h ^= row[b]
        return h

    def hash_int(self, value: int) -> int:
        return self.hash_bytes(value.to_bytes(self.nbytes, "big"))

    def hash_batch(self, data: np.ndarray) -> np.ndarray:
        """Hash a (N, nbytes) uint8 array; returns uint32 hashes."""
        data = np.asarray(data, dtype=np.uint8)
        if data.ndim != 2 or data.shape[1] != self.nbytes:
            raise ValueError(f"expected shape (N, {self.nbytes}), got {data.shape}")
        out = np.zeros(data.shape[0], dtype=np.uint32)
        for p in range(self.nbytes):
            out ^= self.array[p][data[:, p]]
        return out


def packet_l4_ok(packet) -> bool:
    return getattr(packet, "proto", None) in L4_PROTOS


def extract_hash_input(packet, fieldset: FieldSet) -> HashInput:
    """Concatenate the fieldset's packet fields, canonical order, MSB first."""
    if fieldset.needs_l4 and not packet_l4_ok(packet):
        raise FieldsetInapplicable(f"packet has no L4 ports for fieldset {fieldset.id!r}")
    value = 0
    for f in fieldset.fields:
        v = getattr(packet, f)
        if v is None:
            raise FieldsetInapplicable(f"packet has no {f}")
        value = (value << FIELD_BITS[f]) | v
    return HashInput(value, fieldset.total_bits)


@dataclass(frozen=True)
class IndirectionTable:
    entries: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(int(e) for e in self.entries))
        n = len(self.entries)
        if n == 0 or n & (n - 1):
            raise ValueError(f"table size must be a power of two, got {n}")
        if min(self.entries) < 0:
            raise ValueError("negative core id in table")

    @classmethod
    def round_robin(cls, cores: int, size: int = DEFAULT_TABLE_SIZE) -> "IndirectionTable":
        if cores < 1:
            raise ValueError("need at least one core")
        return cls(tuple(i % cores for i in range(size)))

    @property
    def size(self) -> int:
        return len(self.entries)

    @property
    def cores(self) -> int:
        return max(self.entries) + 1

    def index(self, h: int) -> int:
        # low-order hash bits select the entry
        return h & (len(self.entries) - 1)

    def lookup(self, h: int) -> int:
        return self.entries[h & (len(self.entries) - 1)]

    def check_cores(self, cores: int) -> None:
        if max(self.entries) >= cores:
            raise ValueError(f"table references core {max(self.entries)} but only {cores} cores")


@dataclass(frozen=True)
class NicProfile:
    name: str
    fieldsets: tuple[FieldSet, ...]
    key_bits: int = DEFAULT_KEY_BITS
    table_size: int = DEFAULT_TABLE_SIZE

    def __post_init__(self):
        object.__setattr__(self, "fieldsets", tuple(self.fieldsets))
        if not self.fieldsets:
            raise ValueError(f"profile {self.name!r} supports no fieldsets")
        for fs in self.fieldsets:
            if fs.total_bits + HASH_BITS > self.key_bits:
                raise ValueError(f"fieldset {fs.id!r} too wide for {self.key_bits}-bit keys")

    @property
    def hashable_fields(self) -> frozenset[str]:
        return frozenset(f for fs in self.fieldsets for f in fs.fields)

    def fieldset(self, fid: str) -> FieldSet:
        for fs in self.fieldsets:
            if fs.id == fid:
                return fs
        raise KeyError(f"profile {self.name!r} has no fieldset {fid!r}")

    def widest(self) -> FieldSet:
        return max(self.fieldsets, key=lambda fs: (fs.total_bits, len(fs.fields), fs.id))


_PROFILE_DIR = Path(__file__).parent / "profiles"


def load_profile(source: str | Path | Mapping) -> NicProfile:
    """Load a NIC profile from a YAML path, a bundled profile name, or a mapping."""
    if isinstance(source, Mapping):
        doc = source
    else:
        path = Path(source)
        if not path.exists():
            path = _PROFILE_DIR / f"{source}.yaml"
        doc = yaml.safe_load(path.read_text())
    fieldsets = tuple(FieldSet(fid, tuple(fields)) for fid, fields in doc["fieldsets"].items())
    return NicProfile(
        name=doc["name"],
        fieldsets=fieldsets,
        key_bits=int(doc.get("key_bits", DEFAULT_KEY_BITS)),
        table_size=int(doc.get("table_size", DEFAULT_TABLE_SIZE)),
    )


def default_profile() -> NicProfile:
    return load_profile("e810")


@dataclass
class InterfaceConfig:
    key: RssKey
    fieldset: FieldSet
    table: IndirectionTable
    _compiled: ToeplitzTable | None = field(default=None, repr=False, compare=False)

    def compiled(self) -> ToeplitzTable:
        if self._compiled is None:
            self._compiled = ToeplitzTable(self.key, self.fieldset.total_bits)
        return self._compiled

    def hash_packet(self, packet) -> int:
        return self.compiled().hash_int(extract_hash_input(packet, self.fieldset).value)


DEFAULT_QUEUE = 0


class RssEngine:
    """Per-interface RSS configuration; steers packets to cores."""

    def __init__(self, configs: Mapping[str, InterfaceConfig]):
        for name, cfg in configs.items():
            if cfg.key.is_zero():
                raise ValueError(f"interface {name!r}: all-zero key")
        self.configs = dict(configs)

    def hash(self, iface: str, packet) -> int:
        return self.configs[iface].hash_packet(packet)

    def steer(self, iface: str, packet) -> int:
        cfg = self.configs.get(iface)
        if cfg is None:
            raise KeyError(f"interface {iface!r} not configured")
        try:
            h = cfg.hash_packet(packet)
        except FieldsetInapplicable:
            return DEFAULT_QUEUE
        return cfg.table.lookup(h)

    def entry(self, iface: str, packet) -> int | None:
        """Indirection-table slot used for the packet, None for the default queue."""
        cfg = self.configs[iface]
        try:
            return cfg.table.index(cfg.hash_packet(packet))
        except FieldsetInapplicable:
            return None


def steer(engine: RssEngine, iface: str, packet) -> int:
    return engine.steer(iface, packet)


def core_loads(table: IndirectionTable, per_entry_load: Sequence[float], cores: int) -> list[float]:
    loads = [0.0] * cores
    for core, load in zip(table.entries, per_entry_load):
        loads[core] += load
    return loads


def rebalance_table(table: IndirectionTable, per_entry_load: Sequence[float], cores: int) -> IndirectionTable:
    """Greedy static rebalance of an indirection table.

    Moves the heaviest movable entry from the most-loaded core to the
    least-loaded core while the move strictly lowers the larger of the two
    loads.  Entry loads are never altered, only their owners.
    """
    if len(per_entry_load) != table.size:
        raise ValueError("histogram needs one bucket per table entry")
    table.check_cores(cores)
    owner = list(table.entries)
    loads = core_loads(table, per_entry_load, cores)
    members: list[list[int]] = [[] for _ in range(cores)]
    for i, c in enumerate(owner):
        members[c].append(i)
    while True:
        hi = max(range(cores), key=lambda c: (loads[c], -c))
        lo = min(range(cores), key=lambda c: (loads[c], c))
        if hi == lo:
            break
        gap = loads[hi] - loads[lo]
        best = None
        for i in members[hi]:
            w = per_entry_load[i]
            if 0 < w < gap and (best is None or w > per_entry_load[best]):
                best = i
        if best is None:
            break
        w = per_entry_load[best]
        members[hi].remove(best)
        members[lo].append(best)
        owner[best] = lo
        loads[hi] -= w
        loads[lo] += w
    return IndirectionTable(tuple(owner))


# -- config file -------------------------------------------------------------

CONFIG_MAGIC = "# nfshard rss-config v1"
_CONFIG_HEADER = """\
# nfshard rss-config v1
# key: hex digits, first digit = most significant nibble of key byte 0;
#      key bit 0 (the first bit of the first hash window) is the MSB of byte 0.
# hash input: fieldset fields concatenated in canonical order, each in network
#      byte order, most significant bit first.
# table: core id per entry; entry index = hash & (size - 1) (low-order bits).
"""


@dataclass
class RssConfigBundle:
    """Deployable per-interface RSS configuration plus its provenance."""

    configs: dict[str, InterfaceConfig]
    provenance: dict[str, str] = field(default_factory=dict)

    def engine(self) -> RssEngine:
        return RssEngine(self.configs)

    def with_tables(self, table: IndirectionTable) -> "RssConfigBundle":
        configs = {n: InterfaceConfig(c.key, c.fieldset, table) for n, c in self.configs.items()}
        return RssConfigBundle(configs, dict(self.provenance))

    def to_text(self) -> str:
        lines = [_CONFIG_HEADER.rstrip("\n")]
        for k in sorted(self.provenance):
            lines.append(f"provenance.{k} = {self.provenance[k]}")
        for name, cfg in self.configs.items():
            lines.append("")
            lines.append(f"[interface {name}]")
            lines.append(f"fieldset = {cfg.fieldset.id}")
            lines.append(f"fields = {' '.join(cfg.fieldset.fields)}")
            lines.append(f"key_bits = {cfg.key.bits}")
            lines.append(f"key = {cfg.key.hex()}")
            lines.append(f"table = {' '.join(str(e) for e in cfg.table.entries)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RssConfigBundle":
        if not text.startswith(CONFIG_MAGIC):
            raise ValueError("not an rss-config v1 file")
        provenance: dict[str, str] = {}
        blocks: dict[str, dict[str, str]] = {}
        current = None
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            m = re.fullmatch(r"\[interface (\S+)\]", line)
            if m:
                current = blocks.setdefault(m.group(1), {})
                continue
            k, _, v = line.partition("=")
            k, v = k.strip(), v.strip()
            if current is None:
                if k.startswith("provenance."):
                    provenance[k[len("provenance."):]] = v
                continue
            current[k] = v
        configs = {}
        for name, b in blocks.items():
            fs = FieldSet(b["fieldset"], tuple(b["fields"].split()))
            nbits = int(b["key_bits"])
            if len(b["key"]) != nbits // 4:
                raise ValueError(f"interface {name}: key has {len(b['key'])} hex digits, expected {nbits // 4}")
            key = RssKey(int(b["key"], 16), nbits)
            table = IndirectionTable(tuple(int(x) for x in b["table"].split()))
            configs[name] = InterfaceConfig(key, fs, table)
        return cls(configs, provenance)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path) -> "RssConfigBundle":
        return cls.from_text(Path(path).read_text())


def fieldset_input_bytes(packets: Iterable, fieldset: FieldSet) -> np.ndarray:
    """Stack the hash inputs of many packets into a (N, nbytes) uint8 array."""
    nbytes = fieldset.total_bits // 8
    rows = [extract_hash_input(p, fieldset).value.to_bytes(nbytes, "big") for p in packets]
    return np.frombuffer(b"".join(rows), dtype=np.uint8).reshape(len(rows), nbytes)
