"""Packets, traces, and the trace file formats (text and binary)."""

from __future__ import annotations

import ipaddress
import json
import struct
from dataclasses import dataclass, field, fields as dc_fields, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

HEADER_FIELDS = ("eth_src", "eth_dst", "ipv4_src", "ipv4_dst", "proto", "sport", "dport")

TRACE_MAGIC = "# nfshard-trace v1"
BINARY_MAGIC = b"NFTRACE1"
COLUMNS = ("id", "time", "iface", "eth_src", "eth_dst", "ipv4_src", "ipv4_dst",
           "proto", "sport", "dport", "size", "reply_to")


def ip(value) -> int:
    if isinstance(value, int):
        return value
    return int(ipaddress.IPv4Address(value))


def ip_str(value: int) -> str:
    return str(ipaddress.IPv4Address(value))


@dataclass(slots=True)
class Packet:
    id: int
    time: int
    in_iface: str
    eth_src: int = 0
    eth_dst: int = 0
    ipv4_src: int = 0
    ipv4_dst: int = 0
    proto: int = 6
    sport: int = 0
    dport: int = 0
    size_bytes: int = 64
    # id of an earlier packet this one answers; its headers are then taken
    # from that packet's output in the run being simulated
    reply_to: int | None = None

    def headers(self) -> tuple[int, ...]:
        return (self.eth_src, self.eth_dst, self.ipv4_src, self.ipv4_dst, self.proto, self.sport, self.dport)

    def with_headers(self, hdr: Sequence[int]) -> "Packet":
        return replace(self, **dict(zip(HEADER_FIELDS, hdr)))


def swap_headers(hdr: Sequence[int]) -> tuple[int, ...]:
    eth_src, eth_dst, s, d, proto, sp, dp = hdr
    return (eth_dst, eth_src, d, s, proto, dp, sp)


@dataclass
class Trace:
    packets: list[Packet]
    interfaces: tuple[str, ...] = ("lan", "wan")
    tick_unit: str = "ns"
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.packets)

    def __iter__(self) -> Iterator[Packet]:
        return iter(self.packets)

    def validate(self) -> None:
        last_time = None
        seen = set()
        for p in self.packets:
            if p.id in seen:
                raise ValueError(f"duplicate packet id {p.id}")
            seen.add(p.id)
            if last_time is not None and p.time < last_time:
                raise ValueError(f"packet {p.id}: time decreases")
            last_time = p.time
            if p.in_iface not in self.interfaces:
                raise ValueError(f"packet {p.id}: unknown interface {p.in_iface!r}")
            if p.reply_to is not None and p.reply_to not in seen:
                raise ValueError(f"packet {p.id}: reply_to {p.reply_to} is not an earlier packet")

    # -- text form -------------------------------------------------------

    def to_text(self) -> str:
        out = [
            TRACE_MAGIC,
            f"# tick_unit: {self.tick_unit}",
            f"# interfaces: {' '.join(self.interfaces)}",
        ]
        for k in sorted(self.meta):
            out.append(f"# meta.{k}: {self.meta[k]}")
        out.append(f"# columns: {' '.join(COLUMNS)}")
        for p in self.packets:
            out.append(" ".join((
                str(p.id), str(p.time), p.in_iface,
                format(p.eth_src, "012x"), format(p.eth_dst, "012x"),
                ip_str(p.ipv4_src), ip_str(p.ipv4_dst),
                str(p.proto), str(p.sport), str(p.dport), str(p.size_bytes),
                "-" if p.reply_to is None else str(p.reply_to),
            )))
        return "\n".join(out) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Trace":
        lines = text.splitlines()
        if not lines or lines[0].strip() != TRACE_MAGIC:
            raise ValueError("not a nfshard-trace v1 text file")
        tick, ifaces, meta = "ns", ("lan", "wan"), {}
        packets = []
        for line in lines[1:]:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, val = line[1:].partition(":")
                key, val = key.strip(), val.strip()
                if key == "tick_unit":
                    tick = val
                elif key == "interfaces":
                    ifaces = tuple(val.split())
                elif key.startswith("meta."):
                    meta[key[5:]] = val
                elif key == "columns" and tuple(val.split()) != COLUMNS:
                    raise ValueError(f"unexpected column order: {val}")
                continue
            c = line.split()
            if len(c) != len(COLUMNS):
                raise ValueError(f"bad trace record: {line!r}")
            packets.append(Packet(
                id=int(c[0]), time=int(c[1]), in_iface=c[2],
                eth_src=int(c[3], 16), eth_dst=int(c[4], 16),
                ipv4_src=ip(c[5]), ipv4_dst=ip(c[6]),
                proto=int(c[7]), sport=int(c[8]), dport=int(c[9]), size_bytes=int(c[10]),
                reply_to=None if c[11] == "-" else int(c[11]),
            ))
        return cls(packets, ifaces, tick, meta)

    # -- binary form -----------------------------------------------------

    _DTYPE = np.dtype([
        ("id", "<u8"), ("time", "<u8"), ("iface", "<u1"), ("proto", "<u1"),
        ("eth_src", "<u8"), ("eth_dst", "<u8"), ("ipv4_src", "<u4"), ("ipv4_dst", "<u4"),
        ("sport", "<u2"), ("dport", "<u2"), ("size", "<u2"), ("reply_to", "<i8"),
    ])

    def to_bytes(self) -> bytes:
        header = json.dumps({"tick_unit": self.tick_unit, "interfaces": list(self.interfaces),
                             "meta": self.meta, "count": len(self.packets)}, sort_keys=True).encode()
        arr = np.zeros(len(self.packets), dtype=self._DTYPE)
        index = {n: i for i, n in enumerate(self.interfaces)}
        for i, p in enumerate(self.packets):
            arr[i] = (p.id, p.time, index[p.in_iface], p.proto, p.eth_src, p.eth_dst,
                      p.ipv4_src, p.ipv4_dst, p.sport, p.dport, p.size_bytes,
                      -1 if p.reply_to is None else p.reply_to)
        return BINARY_MAGIC + struct.pack("<I", len(header)) + header + arr.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Trace":
        if not data.startswith(BINARY_MAGIC):
            raise ValueError("not a nfshard binary trace")
        (hlen,) = struct.unpack_from("<I", data, len(BINARY_MAGIC))
        start = len(BINARY_MAGIC) + 4
        header = json.loads(data[start:start + hlen])
        arr = np.frombuffer(data[start + hlen:], dtype=cls._DTYPE, count=header["count"])
        ifaces = tuple(header["interfaces"])
        packets = [
            Packet(int(r["id"]), int(r["time"]), ifaces[r["iface"]], int(r["eth_src"]), int(r["eth_dst"]),
                   int(r["ipv4_src"]), int(r["ipv4_dst"]), int(r["proto"]), int(r["sport"]),
                   int(r["dport"]), int(r["size"]), None if r["reply_to"] < 0 else int(r["reply_to"]))
            for r in arr
        ]
        return cls(packets, ifaces, header["tick_unit"], header.get("meta", {}))

    def save(self, path: str | Path) -> None:
        path = Path(path)
        if path.suffix == ".bin":
            path.write_bytes(self.to_bytes())
        else:
            path.write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path) -> "Trace":
        data = Path(path).read_bytes()
        if data.startswith(BINARY_MAGIC):
            return cls.from_bytes(data)
        return cls.from_text(data.decode())


PACKET_FIELDS = tuple(f.name for f in dc_fields(Packet))
