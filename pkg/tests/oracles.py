"""Independent reference implementations used only by the tests."""

from __future__ import annotations

import itertools
from collections import deque


def toeplitz_reference(key_bits: list[int], data_bits: list[int]) -> int:
    """Bit-at-a-time Toeplitz hash with an explicitly rotated key register.

    For each input bit, the current leftmost 32 key bits are XORed into the
    result when the bit is set, then the key register rotates left by one.
    """
    reg = deque(key_bits)
    result = [0] * 32
    for d in data_bits:
        if d:
            result = [r ^ k for r, k in zip(result, itertools.islice(reg, 32))]
        reg.rotate(-1)
    out = 0
    for r in result:
        out = (out << 1) | r
    return out


def int_to_bits(value: int, n: int) -> list[int]:
    return [int(c) for c in format(value, f"0{n}b")] if n else []


def best_assignment_max_load(loads: list[float], cores: int) -> float:
    """Exhaustive minimum over all entry->core assignments of the max core load."""
    best = float("inf")
    for assign in itertools.product(range(cores), repeat=len(loads)):
        acc = [0.0] * cores
        for w, c in zip(loads, assign):
            acc[c] += w
        best = min(best, max(acc))
    return best


# -- GF(2) --------------------------------------------------------------------

def gf2_brute_force(rows: list[tuple[list[int], int]], nvars: int) -> list[int] | None:
    """All solutions of a small system by enumeration; rows are (coefficients, rhs)."""
    sols = []
    for x in range(1 << nvars):
        if all(sum(c & (x >> v) for v, c in enumerate(coef)) % 2 == rhs for coef, rhs in rows):
            sols.append(x)
    return sols


# -- NF references --------------------------------------------------------------
# Plain-Python restatements of two corpus NFs, with their own bookkeeping
# (flow dict plus last-seen time), used to check the model interpreter.

def fw_reference(packets, capacity: int = 65536, expiry: int = 1_000_000):
    """(action, out_iface) per packet for the stateful firewall."""
    flows: dict[tuple, int] = {}
    out = []
    for p in packets:
        t = p.time
        if p.in_iface == "lan":
            key = (p.ipv4_src, p.ipv4_dst, p.sport, p.dport)
        else:
            key = (p.ipv4_dst, p.ipv4_src, p.dport, p.sport)
        if key in flows and t > flows[key] + expiry:
            del flows[key]
        if key in flows:
            flows[key] = t
            out.append(("forward", "wan" if p.in_iface == "lan" else "lan"))
            continue
        if p.in_iface == "wan":
            out.append(("drop", None))
            continue
        if len(flows) >= capacity:
            for k in [k for k, last in flows.items() if t > last + expiry]:
                del flows[k]
        if len(flows) >= capacity:
            out.append(("drop", None))
            continue
        flows[key] = t
        out.append(("forward", "wan"))
    return out


def policer_reference(packets, rate: int = 1, burst: int = 3000, expiry: int = 1_000_000):
    users: dict[int, list[int]] = {}  # dst -> [tokens, last, last_touch]
    out = []
    for p in packets:
        if p.in_iface == "lan":
            out.append(("forward", "wan"))
            continue
        t, size = p.time, p.size_bytes
        u = users.get(p.ipv4_dst)
        if u is not None and t > u[2] + expiry:
            u = None
            del users[p.ipv4_dst]
        if u is None:
            if size <= burst:
                users[p.ipv4_dst] = [burst - size, t, t]
                out.append(("forward", "lan"))
            else:
                users[p.ipv4_dst] = [burst, t, t]
                out.append(("drop", None))
            continue
        avail = min(burst, u[0] + (t - u[1]) * rate)
        u[2] = t
        if avail >= size:
            u[0], u[1] = avail - size, t
            out.append(("forward", "lan"))
        else:
            u[0], u[1] = avail, t
            out.append(("drop", None))
    return out

