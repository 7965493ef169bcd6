"""Comparing behavior logs, and the differential check behind interchangeable keys."""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from ..nf.execute import BehaviorLog, Record, exec_sequential
from ..nf.model import Abstraction, NfModel
from ..nf.packet import HEADER_FIELDS
from .executors import SimConfig, exec_shared_nothing, software_steer
from .traffic import small_domain_trace

_POS = {f: i for i, f in enumerate(HEADER_FIELDS)}


@dataclass
class EquivalenceReport:
    equivalent: bool
    compared: int
    total_mismatches: int = 0
    mismatches: list[tuple[int, Record | None, Record | None, str]] = field(default_factory=list)
    renamings: int = 0

    def to_text(self) -> str:
        head = "equivalent" if self.equivalent else f"NOT equivalent: {self.total_mismatches} mismatches"
        lines = [f"{head} ({self.compared} packets compared, {self.renamings} renamed values)"]
        for pid, a, b, why in self.mismatches:
            lines.append(f"  packet {pid}: {why}")
            lines.append(f"    sequential: {a.text() if a else '-'}")
            lines.append(f"    parallel:   {b.text() if b else '-'}")
        return "\n".join(lines)


def check_equivalence(seq: BehaviorLog, par: BehaviorLog, abstractions=(), limit: int = 10) -> EquivalenceReport:
    """Compare two logs packet by packet.

    Fields named by an abstraction are compared up to a renaming that must be
    consistent (one sequential value always maps to the same parallel value)
    and injective, both within the abstraction's scope.
    """
    abstractions: tuple[Abstraction, ...] = tuple(abstractions)
    fwd: dict = {}
    rev: dict = {}
    report = EquivalenceReport(True, 0)

    def miss(pid, a, b, why):
        report.equivalent = False
        report.total_mismatches += 1
        if len(report.mismatches) < limit:
            report.mismatches.append((pid, a, b, why))

    ids = list(seq.records)
    extra = [pid for pid in par.records if pid not in seq.records]
    for pid in ids:
        a, b = seq.get(pid), par.get(pid)
        report.compared += 1
        if b is None:
            miss(pid, a, b, "missing from parallel log")
            continue
        if a.action != b.action or a.out_iface != b.out_iface:
            miss(pid, a, b, f"{a.action} {a.out_iface or ''} vs {b.action} {b.out_iface or ''}".strip())
            continue
        if a.headers == b.headers:
            continue
        loose = {ab.field: ab for ab in abstractions if ab.iface == a.out_iface}
        bad = [f for f in HEADER_FIELDS if f not in loose and a.headers[_POS[f]] != b.headers[_POS[f]]]
        if bad:
            miss(pid, a, b, f"header fields differ: {', '.join(bad)}")
            continue
        for f, ab in loose.items():
            va, vb = a.headers[_POS[f]], b.headers[_POS[f]]
            scope = (ab.iface, f) + tuple(a.headers[_POS[s]] for s in ab.scope)
            if fwd.setdefault(scope + (va,), vb) != vb:
                miss(pid, a, b, f"{f} renaming inconsistent ({va} was mapped to {fwd[scope + (va,)]})")
                break
            if rev.setdefault(scope + (vb,), va) != va:
                miss(pid, a, b, f"{f} renaming not injective ({vb} already stands for {rev[scope + (vb,)]})")
                break
    for pid in extra:
        miss(pid, None, par.get(pid), "not in sequential log")
    report.renamings = sum(1 for k, v in fwd.items() if k[-1] != v)
    return report


def check_interchangeable(model: NfModel, a: dict | None, b: dict | None, trials: int = 6,
                          cores=(2, 3, 4), seed: int = 0, packets: int = 160) -> bool:
    """Differential oracle for two candidate sharding keys.

    Each realizable candidate (per-interface key atoms; None when it cannot be
    realized) steers a shared-nothing run over randomized small-domain traces
    at several core counts.  True only if every run matches the sequential log.
    """
    if a is None and b is None:
        return False
    rng = random.Random(f"interchange:{seed}")
    for t in range(trials):
        trace = small_domain_trace(model, rng, packets)
        seq = exec_sequential(model, trace)
        for keys in (a, b):
            if keys is None:
                continue
            for c in cores:
                steer = software_steer(keys, c, salt=rng.getrandbits(32))
                par, _ = exec_shared_nothing(model, steer, trace, SimConfig(c, "replicate"))
                if not check_equivalence(seq, par, model.abstractions).equivalent:
                    return False
    return True
