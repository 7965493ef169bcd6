"""Reference interpreter for NF models and the sequential executor."""

from __future__ import annotations

import hashlib
from typing import Callable, Iterator, NamedTuple

from ..rss import FIELD_BITS
from .model import FUNCTIONS, Atom, NfModel, Step
from .packet import HEADER_FIELDS, Packet, Trace, swap_headers
from .state import ReadOnlyViolation, build_state


class Record(NamedTuple):
    action: str  # "forward" | "drop"
    out_iface: str | None
    headers: tuple[int, ...] | None

    def text(self) -> str:
        if self.action == "drop":
            return "drop"
        return f"forward {self.out_iface} " + " ".join(str(h) for h in self.headers)


DROP = Record("drop", None, None)


class BehaviorLog:
    """Per-packet externally visible outcome, in trace order."""

    def __init__(self, records: dict[int, Record] | None = None):
        self.records: dict[int, Record] = dict(records or {})

    def add(self, pid: int, rec: Record) -> None:
        self.records[pid] = rec

    def get(self, pid: int):
        return self.records.get(pid)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[tuple[int, Record]]:
        return iter(self.records.items())

    def __eq__(self, other) -> bool:
        return isinstance(other, BehaviorLog) and self.records == other.records

    def to_text(self) -> str:
        return "".join(f"{pid} {rec.text()}\n" for pid, rec in self.records.items())

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


class Restart(Exception):
    """Raised when a speculative read-only run reaches its first write."""


def sym(name: str, sid: int) -> str:
    """Name of the symbolic value a step result gets in the execution tree."""
    return f"{name}_{sid}"


def key_source(atoms: tuple[Atom, ...]) -> str:
    parts = []
    shift = sum(a.bits for a in atoms)
    for a in atoms:
        shift -= a.bits
        mask = (1 << a.bits) - 1
        if a.kind == "field":
            low = FIELD_BITS[a.field] - a.start - a.bits
            term = f"(({a.field} >> {low}) & {mask})" if low else f"({a.field} & {mask})"
        elif a.kind == "const":
            term = str(a.value)
        else:
            term = f"(({a.expr.source}) & {mask})"
        parts.append(f"({term} << {shift})" if shift else term)
    return " | ".join(parts) or "0"


def _compile_key(atoms) -> object:
    return compile(key_source(atoms), "<nf-key>", "eval")


class Runtime:
    """Executes packets against one set of state instances.

    ``copy`` selects the dchain aging copy this runtime stamps; ``guard`` is
    called before any write to shared state (the lock executor uses it to abort
    speculative read-only runs); ``tracker(obj, key)`` observes keyed accesses.
    """

    def __init__(self, model: NfModel, state: dict, copy: int = 0,
                 guard: Callable[[str], None] | None = None,
                 tracker: Callable[[str, int], None] | None = None,
                 tracked: frozenset[str] = frozenset()):
        self.model = model
        self.state = state
        self.copy = copy
        self.guard = guard
        self.tracker = tracker
        self.tracked = tracked
        self.globals = {"__builtins__": {}, **FUNCTIONS, **model.constants}
        self.now = 0
        self._keys = {}
        self._readonly = {n for n, d in model.state.items() if d.read_only}
        self._ops = {
            "let": self._let, "rewrite": self._rewrite, "if": self._if,
            "map_get": self._map_get, "map_put": self._map_put,
            "vector_get": self._vector_get, "vector_put": self._vector_put,
            "dchain_allocate": self._allocate, "dchain_rejuvenate": self._rejuvenate,
            "dchain_is_allocated": self._is_allocated,
            "sketch_touch": self._touch, "sketch_query": self._query,
        }
        for _, s in model.walk():
            if hasattr(s, "key"):
                self._keys[s.sid] = _compile_key(s.key)
        self.symbols: dict | None = None

    # -- driver ----------------------------------------------------------

    def run(self, packet: Packet, headers=None, symbols: dict | None = None) -> Record:
        env = dict(zip(HEADER_FIELDS, headers if headers is not None else packet.headers()))
        env["now"] = self.now = packet.time
        env["size"] = packet.size_bytes
        self.symbols = symbols
        if symbols is not None:
            symbols.update(env)
            symbols["__branches__"] = []
        block = self.model.pipelines[packet.in_iface]
        i = 0
        while True:
            step = block[i]
            op = step.op
            if op == "forward":
                return Record("forward", step.iface, tuple(env[f] for f in HEADER_FIELDS))
            if op == "drop":
                return DROP
            nxt = self._ops[op](step, env)
            if nxt is None:
                i += 1
            else:
                block, i = nxt, 0

    def ev(self, expr, env):
        return eval(expr.code, self.globals, env)

    def key(self, step, env) -> int:
        return eval(self._keys[step.sid], self.globals, env)

    def _write(self, obj: str) -> None:
        if obj in self._readonly:
            raise ReadOnlyViolation(f"write to read-only object {obj}")
        if self.guard is not None:
            self.guard("write")

    def _out(self, step, name, value, env):
        env[name] = value
        if self.symbols is not None:
            self.symbols[sym(name, step.sid)] = value

    def alive(self, chain, idx: int) -> bool:
        """Lazy expiry check for an index, following the aging-copy protocol."""
        if not chain.is_allocated(idx):
            return False
        if not chain.expired(idx, self.now, self.copy):
            return True
        # this core's copy says expired: only a write-locked check may decide
        if self.guard is not None:
            self.guard("expiry")
        if chain.expired(idx, self.now):
            chain.expire(idx)
            return False
        chain.last[self.copy][idx] = chain.newest(idx)
        chain.resyncs += 1
        return True

    # -- steps -----------------------------------------------------------

    def _let(self, step, env):
        for name, e in step.assigns:
            self._out(step, name, self.ev(e, env), env)

    def _rewrite(self, step, env):
        vals = [(f, self.ev(e, env) & ((1 << FIELD_BITS[f]) - 1)) for f, e in step.sets]
        env.update(vals)

    def _if(self, step, env):
        taken = bool(self.ev(step.cond, env))
        if self.symbols is not None:
            self.symbols["__branches__"].append((step.sid, taken))
        return step.then if taken else step.orelse

    def _map_get(self, step, env):
        m = self.state[step.obj]
        k = self.key(step, env)
        if self.tracker is not None and step.obj in self.tracked:
            self.tracker(step.obj, k)
        v = m.get(k)
        if v is not None and m.chain is not None and not self.alive(m.chain, v):
            v = None
        self._out(step, step.found, int(v is not None), env)
        if step.value:
            self._out(step, step.value, 0 if v is None else v, env)

    def _map_put(self, step, env):
        m = self.state[step.obj]
        k = self.key(step, env)
        if self.tracker is not None and step.obj in self.tracked:
            self.tracker(step.obj, k)
        self._write(step.obj)
        ok = m.put(k, self.ev(step.value, env))
        if step.ok:
            self._out(step, step.ok, int(ok), env)

    def _vector_get(self, step, env):
        rec = self.state[step.obj].get(self.ev(step.index, env))
        env[step.out] = rec
        if self.symbols is not None:
            for f, v in zip(rec._fields, rec):
                self.symbols[f"{sym(step.out, step.sid)}__{f}"] = v

    def _vector_put(self, step, env):
        self._write(step.obj)
        vals = {f: self.ev(e, env) for f, e in step.sets}
        self.state[step.obj].put(self.ev(step.index, env), vals)

    def _allocate(self, step, env):
        self._write(step.obj)
        idx = self.state[step.obj].allocate(self.now)
        self._out(step, step.ok, int(idx is not None), env)
        self._out(step, step.index, 0 if idx is None else idx, env)

    def _rejuvenate(self, step, env):
        if step.obj in self._readonly:
            raise ReadOnlyViolation(f"write to read-only object {step.obj}")
        chain = self.state[step.obj]
        idx = self.ev(step.index, env)
        # refreshing this core's own aging copy needs no exclusive access
        if self.alive(chain, idx):
            chain.rejuvenate(idx, self.now, self.copy)

    def _is_allocated(self, step, env):
        chain = self.state[step.obj]
        idx = self.ev(step.index, env)
        self._out(step, step.out, int(self.alive(chain, idx)), env)

    def _touch(self, step, env):
        k = self.key(step, env)
        if self.tracker is not None and step.obj in self.tracked:
            self.tracker(step.obj, k)
        self._write(step.obj)
        self.state[step.obj].touch(k)

    def _query(self, step, env):
        k = self.key(step, env)
        if self.tracker is not None and step.obj in self.tracked:
            self.tracker(step.obj, k)
        self._out(step, step.out, self.state[step.obj].query(k), env)


def resolve_headers(packet: Packet, log: BehaviorLog) -> tuple[int, ...]:
    """Headers a packet arrives with in this run.

    A reply answers the output of the packet it refers to (swapped), provided
    that packet left through the interface the reply comes in on; otherwise the
    packet's own headers are used.
    """
    if packet.reply_to is not None:
        rec = log.get(packet.reply_to)
        if rec is not None and rec.action == "forward" and rec.out_iface == packet.in_iface:
            return swap_headers(rec.headers)
    return packet.headers()


def exec_sequential(model: NfModel, trace: Trace | list[Packet]) -> BehaviorLog:
    """Process the trace in order against a single state instance."""
    rt = Runtime(model, build_state(model))
    log = BehaviorLog()
    for p in trace:
        log.add(p.id, rt.run(p, resolve_headers(p, log)))
    return log


def run_traced(model: NfModel, trace) -> list[tuple[Packet, tuple, Record, dict]]:
    """Sequential run that also records every step result, for path matching."""
    rt = Runtime(model, build_state(model))
    log = BehaviorLog()
    out = []
    for p in trace:
        hdr = resolve_headers(p, log)
        symbols: dict = {}
        rec = rt.run(p, hdr, symbols)
        log.add(p.id, rec)
        out.append((p, hdr, rec, symbols))
    return out
