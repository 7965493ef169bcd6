"""The NF description language: a loop-free tree of guarded steps per interface.

Models are YAML documents (``format: nfmodel/1``); see docs/model-format.md.
Parsing validates the whole document and reports every violation found.
"""

from __future__ import annotations

import ast
import copy
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

import yaml

from ..rss import FIELD_BITS
from .packet import HEADER_FIELDS

FORMAT = "nfmodel/1"
KINDS = ("map", "vector", "dchain", "sketch")
PACKET_NAMES = frozenset(HEADER_FIELDS) | {"now", "size"}
SYMBOL_BITS = {**FIELD_BITS, "now": 64, "size": 16}
RESULT_BITS = 32


class ModelError(ValueError):
    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("invalid NF model:\n  " + "\n  ".join(self.violations))


# -- expressions ---------------------------------------------------------------

_ALLOWED = (
    ast.Expression, ast.BinOp, ast.UnaryOp, ast.BoolOp, ast.Compare, ast.Name, ast.Load,
    ast.Constant, ast.Attribute, ast.Call,
    ast.Add, ast.Sub, ast.Mult, ast.FloorDiv, ast.Mod, ast.BitAnd, ast.BitOr, ast.BitXor,
    ast.LShift, ast.RShift, ast.Not, ast.USub, ast.Invert, ast.And, ast.Or,
    ast.Eq, ast.NotEq, ast.Lt, ast.LtE, ast.Gt, ast.GtE,
)
FUNCTIONS = {"min": min, "max": max}


@dataclass(eq=False)
class Expr:
    source: str
    tree: ast.expr
    code: Any = field(repr=False)

    @classmethod
    def parse(cls, text) -> "Expr":
        if isinstance(text, bool):
            text = int(text)
        src = str(text)
        tree = ast.parse(src, mode="eval")
        for node in ast.walk(tree):
            if not isinstance(node, _ALLOWED):
                raise SyntaxError(f"{type(node).__name__} not allowed in {src!r}")
            if isinstance(node, ast.Constant) and not isinstance(node.value, int):
                raise SyntaxError(f"only integer constants allowed in {src!r}")
            if isinstance(node, ast.Call):
                if not isinstance(node.func, ast.Name) or node.func.id not in FUNCTIONS or node.keywords:
                    raise SyntaxError(f"only min()/max() calls allowed in {src!r}")
            if isinstance(node, ast.Attribute) and not isinstance(node.value, ast.Name):
                raise SyntaxError(f"attribute access must be on a record name in {src!r}")
        return cls(src, tree.body, compile(tree, "<nf>", "eval"))

    def names(self) -> set[str]:
        out = set()
        for node in ast.walk(self.tree):
            if isinstance(node, ast.Name) and not (node.id in FUNCTIONS):
                out.add(node.id)
        # call targets are Names too; keep them out
        for node in ast.walk(self.tree):
            if isinstance(node, ast.Call):
                out.discard(node.func.id)
        return out

    def attributes(self) -> set[tuple[str, str]]:
        return {(n.value.id, n.attr) for n in ast.walk(self.tree) if isinstance(n, ast.Attribute)}


# -- key expressions -----------------------------------------------------------

@dataclass(frozen=True)
class Atom:
    """One piece of a key: a packet-field bit slice, a constant, or an expression."""

    kind: str  # "field" | "const" | "expr"
    bits: int
    field: str | None = None
    start: int = 0
    value: int | None = None
    expr: Expr | None = None

    def __str__(self) -> str:
        if self.kind == "field":
            if self.start == 0 and self.bits == FIELD_BITS[self.field]:
                return self.field
            return f"{self.field}[{self.start}:{self.start + self.bits}]"
        if self.kind == "const":
            return f"{self.value:#x}/{self.bits}"
        return f"({self.expr.source})/{self.bits}"


def parse_atom(spec, consts: dict[str, int]) -> Atom:
    if isinstance(spec, str):
        name, _, rest = spec.partition("[")
        name = name.strip()
        if name not in FIELD_BITS:
            raise ValueError(f"unknown packet field {name!r} in key")
        width = FIELD_BITS[name]
        if rest:
            lo, _, hi = rest.rstrip("]").partition(":")
            lo, hi = int(lo), int(hi)
            if not 0 <= lo < hi <= width:
                raise ValueError(f"bad slice {spec!r}")
            return Atom("field", hi - lo, field=name, start=lo)
        return Atom("field", width, field=name)
    if isinstance(spec, dict) and "const" in spec:
        bits = int(spec["bits"])
        v = spec["const"]
        v = consts[v] if isinstance(v, str) else int(v)
        if v < 0 or v >> bits:
            raise ValueError(f"constant {v} does not fit in {bits} bits")
        return Atom("const", bits, value=v)
    if isinstance(spec, dict) and "expr" in spec:
        return Atom("expr", int(spec["bits"]), expr=Expr.parse(spec["expr"]))
    raise ValueError(f"bad key atom {spec!r}")


def key_width(atoms) -> int:
    return sum(a.bits for a in atoms)


# -- declarations ---------------------------------------------------------------

@dataclass
class StateObjectDecl:
    name: str
    kind: str
    capacity: int
    key_layout: tuple[Atom, ...] = ()
    fields: tuple[str, ...] = ()
    expiry: int | None = None
    map: str | None = None
    depth: int = 5
    read_only: bool = False
    init: list | dict = field(default_factory=list)

    @property
    def key_bits(self) -> int:
        return key_width(self.key_layout)


# -- steps -----------------------------------------------------------------------

_sid = itertools.count()


@dataclass(eq=False)
class Step:
    sid: int = field(default=-1, init=False)

    def __post_init__(self):
        self.sid = next(_sid)

    terminal = False
    op = "step"


@dataclass(eq=False)
class Let(Step):
    assigns: tuple[tuple[str, Expr], ...]
    op = "let"


@dataclass(eq=False)
class MapGet(Step):
    obj: str
    key: tuple[Atom, ...]
    found: str
    value: str | None
    op = "map_get"


@dataclass(eq=False)
class MapPut(Step):
    obj: str
    key: tuple[Atom, ...]
    value: Expr
    ok: str | None
    op = "map_put"


@dataclass(eq=False)
class VectorGet(Step):
    obj: str
    index: Expr
    out: str
    op = "vector_get"


@dataclass(eq=False)
class VectorPut(Step):
    obj: str
    index: Expr
    sets: tuple[tuple[str, Expr], ...]
    op = "vector_put"


@dataclass(eq=False)
class DchainAllocate(Step):
    obj: str
    ok: str
    index: str
    op = "dchain_allocate"


@dataclass(eq=False)
class DchainRejuvenate(Step):
    obj: str
    index: Expr
    op = "dchain_rejuvenate"


@dataclass(eq=False)
class DchainIsAllocated(Step):
    obj: str
    index: Expr
    out: str
    op = "dchain_is_allocated"


@dataclass(eq=False)
class SketchTouch(Step):
    obj: str
    key: tuple[Atom, ...]
    op = "sketch_touch"


@dataclass(eq=False)
class SketchQuery(Step):
    obj: str
    key: tuple[Atom, ...]
    out: str
    op = "sketch_query"


@dataclass(eq=False)
class Rewrite(Step):
    sets: tuple[tuple[str, Expr], ...]
    op = "rewrite"


@dataclass(eq=False)
class If(Step):
    cond: Expr
    then: tuple
    orelse: tuple
    op = "if"


@dataclass(eq=False)
class Forward(Step):
    iface: str
    terminal = True
    op = "forward"


@dataclass(eq=False)
class Drop(Step):
    terminal = True
    op = "drop"


STATE_STEPS = (MapGet, MapPut, VectorGet, VectorPut, DchainAllocate, DchainRejuvenate,
               DchainIsAllocated, SketchTouch, SketchQuery)
WRITE_OPS = frozenset({"map_put", "vector_put", "dchain_allocate", "dchain_rejuvenate", "sketch_touch"})


def step_object(step) -> str | None:
    return getattr(step, "obj", None)


# -- model -----------------------------------------------------------------------

@dataclass(frozen=True)
class Abstraction:
    """Header field whose value the NF picks freely (e.g. NAT external ports).

    Compared between runs up to a renaming that is consistent and injective
    within ``scope`` on packets leaving through ``iface``.
    """

    iface: str
    field: str
    scope: tuple[str, ...]


@dataclass(frozen=True)
class InterchangeableGroup:
    replaces: tuple[str, ...]
    keys: dict  # iface -> tuple[Atom, ...]


@dataclass
class NfModel:
    name: str
    interfaces: tuple[str, ...]
    constants: dict[str, int]
    state: dict[str, StateObjectDecl]
    pipelines: dict[str, tuple]
    abstractions: tuple[Abstraction, ...] = ()
    interchangeable: tuple[InterchangeableGroup, ...] = ()
    description: str = ""
    source: str = ""

    def walk(self) -> Iterator[tuple[str, Step]]:
        def rec(block):
            for s in block:
                yield s
                if isinstance(s, If):
                    yield from rec(s.then)
                    yield from rec(s.orelse)
        for iface, block in self.pipelines.items():
            for s in rec(block):
                yield iface, s

    def written_objects(self) -> set[str]:
        return {s.obj for _, s in self.walk() if s.op in WRITE_OPS}


# -- parsing -----------------------------------------------------------------------

def _const_value(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, int):
        return v
    if isinstance(v, str):
        s = v.strip()
        if s.count(".") == 3:
            from .packet import ip
            return ip(s)
        if s.count(":") == 5:
            return int(s.replace(":", ""), 16)
        return int(s, 0)
    raise ValueError(f"bad constant {v!r}")


class _Parser:
    def __init__(self, doc: dict):
        self.doc = doc
        self.errors: list[str] = []
        self.consts: dict[str, int] = {}
        self.state: dict[str, StateObjectDecl] = {}
        self.interfaces: tuple[str, ...] = ()
        self.blocks: dict = {}

    def err(self, msg):
        self.errors.append(msg)

    def parse(self) -> NfModel:
        d = self.doc
        if not isinstance(d, dict):
            raise ModelError(["document is not a mapping"])
        if d.get("format") != FORMAT:
            self.err(f"format must be {FORMAT!r}, got {d.get('format')!r}")
        known = {"format", "name", "description", "interfaces", "constants", "state", "pipelines",
                 "blocks", "abstractions", "interchangeable"}
        for k in d:
            if k not in known:
                self.err(f"unknown top-level key {k!r}")
        ifaces = d.get("interfaces") or []
        if not ifaces or not all(isinstance(i, str) for i in ifaces):
            self.err("interfaces must be a non-empty list of names")
        self.interfaces = tuple(ifaces)
        for k, v in (d.get("constants") or {}).items():
            try:
                self.consts[k] = _const_value(v)
            except ValueError as e:
                self.err(f"constant {k}: {e}")
        for name, spec in (d.get("state") or {}).items():
            self._decl(name, spec or {})
        self.blocks = d.get("blocks") or {}
        pipelines = {}
        raw = d.get("pipelines") or {}
        for iface in self.interfaces:
            if iface not in raw:
                self.err(f"no pipeline for interface {iface!r}")
                continue
            block = self._block(raw[iface], f"pipelines.{iface}", (), frozenset())
            if block is not None:
                self._check_scope(block, f"pipelines.{iface}", set())
                pipelines[iface] = block
        for iface in raw:
            if iface not in self.interfaces:
                self.err(f"pipeline for undeclared interface {iface!r}")
        abstractions = []
        for i, a in enumerate(d.get("abstractions") or []):
            try:
                ab = Abstraction(a["iface"], a["field"], tuple(a.get("scope", ())))
                if ab.iface not in self.interfaces or ab.field not in HEADER_FIELDS:
                    raise KeyError(ab)
                abstractions.append(ab)
            except (KeyError, TypeError):
                self.err(f"abstractions[{i}] malformed")
        groups = []
        for i, g in enumerate(d.get("interchangeable") or []):
            try:
                keys = {iface: tuple(parse_atom(a, self.consts) for a in atoms)
                        for iface, atoms in g["keys"].items()}
                grp = InterchangeableGroup(tuple(g["replaces"]), keys)
                for o in grp.replaces:
                    if o not in self.state:
                        self.err(f"interchangeable[{i}] replaces unknown object {o!r}")
                widths = {key_width(k) for k in keys.values()}
                if len(widths) != 1:
                    self.err(f"interchangeable[{i}] keys differ in width")
                groups.append(grp)
            except (KeyError, TypeError, ValueError) as e:
                self.err(f"interchangeable[{i}] malformed: {e}")
        if self.errors:
            raise ModelError(self.errors)
        return NfModel(
            name=d.get("name", "nf"), interfaces=self.interfaces, constants=self.consts,
            state=self.state, pipelines=pipelines, abstractions=tuple(abstractions),
            interchangeable=tuple(groups), description=d.get("description", ""),
        )

    def _decl(self, name, spec):
        kind = spec.get("kind")
        where = f"state.{name}"
        if kind not in KINDS:
            self.err(f"{where}: unknown state kind {kind!r}")
            return
        try:
            cap = spec.get("capacity")
            cap = self.consts[cap] if isinstance(cap, str) else int(cap)
        except (TypeError, ValueError, KeyError):
            self.err(f"{where}: capacity missing or invalid")
            return
        if cap <= 0:
            self.err(f"{where}: capacity must be positive, got {cap}")
            return
        decl = StateObjectDecl(name, kind, cap, read_only=bool(spec.get("read_only", False)),
                               init=spec.get("init") or [])
        if kind in ("map", "sketch"):
            layout = spec.get("key")
            if not layout:
                self.err(f"{where}: key layout required for {kind}")
            else:
                try:
                    decl.key_layout = tuple(parse_atom(a, self.consts) for a in layout)
                except ValueError as e:
                    self.err(f"{where}: {e}")
            if kind == "sketch":
                decl.depth = int(spec.get("depth", 5))
                if decl.depth < 1:
                    self.err(f"{where}: depth must be >= 1")
        if kind == "vector":
            decl.fields = tuple(spec.get("fields") or ())
            if not decl.fields:
                self.err(f"{where}: vector needs a fields list")
        if kind == "dchain":
            exp = spec.get("expiry")
            if exp is None:
                self.err(f"{where}: dchain needs expiry")
            else:
                decl.expiry = self.consts[exp] if isinstance(exp, str) else int(exp)
            decl.map = spec.get("map")
        self.state[name] = decl

    def _key(self, spec, obj, where):
        try:
            atoms = tuple(parse_atom(a, self.consts) for a in (spec or []))
        except ValueError as e:
            self.err(f"{where}: {e}")
            return ()
        if not atoms:
            self.err(f"{where}: empty key")
        elif obj in self.state and key_width(atoms) != self.state[obj].key_bits:
            self.err(f"{where}: key is {key_width(atoms)} bits, {obj} expects {self.state[obj].key_bits}")
        return atoms

    def _expr(self, text, where):
        try:
            return Expr.parse(text)
        except SyntaxError as e:
            self.err(f"{where}: {e}")
            return Expr.parse("0")

    def _obj(self, name, kind, where):
        decl = self.state.get(name)
        if decl is None:
            self.err(f"{where}: unknown state object {name!r}")
        elif decl.kind != kind:
            self.err(f"{where}: {name!r} is a {decl.kind}, not a {kind}")
        return name

    def _block(self, items, where, stack: tuple, seen: frozenset):
        if id(items) in seen:
            self.err(f"{where}: loop detected (block refers back to itself)")
            return None
        seen = seen | {id(items)}
        if not isinstance(items, list) or not items:
            self.err(f"{where}: expected a non-empty list of steps")
            return None
        out = []
        for i, raw in enumerate(items):
            w = f"{where}[{i}]"
            last = i == len(items) - 1
            step = self._step(raw, w, stack, seen)
            if step is None:
                return None
            if isinstance(step, tuple):  # goto expansion
                if not last:
                    self.err(f"{w}: goto must be the last step of a list")
                out.extend(step)
                return tuple(out)
            out.append(step)
            if (step.terminal or isinstance(step, If)) and not last:
                self.err(f"{w}: {step.op} must be the last step of a list")
                return None
        if not (out[-1].terminal or isinstance(out[-1], If)):
            self.err(f"{where}: unterminated path (list does not end in forward/drop/if/goto)")
            return None
        return tuple(out)

    def _step(self, raw, w, stack, seen):
        if raw == "drop":
            return Drop()
        if not isinstance(raw, dict):
            self.err(f"{w}: malformed step {raw!r}")
            return None
        if "if" in raw:
            cond = self._expr(raw["if"], w)
            if "then" not in raw or "else" not in raw:
                self.err(f"{w}: unterminated path (if needs both then and else)")
                return None
            then = self._block(raw["then"], w + ".then", stack, seen)
            orelse = self._block(raw["else"], w + ".else", stack, seen)
            if then is None or orelse is None:
                return None
            return If(cond, then, orelse)
        if len(raw) != 1:
            self.err(f"{w}: a step must have exactly one operation, got {sorted(raw)}")
            return None
        (op, a), = raw.items()
        a = a if a is not None else {}
        if op == "goto":
            if a in stack:
                self.err(f"{w}: loop detected (goto {a} inside {a})")
                return None
            if a not in self.blocks:
                self.err(f"{w}: goto to unknown block {a!r}")
                return None
            body = self._block(copy.deepcopy(self.blocks[a]), f"blocks.{a}", stack + (a,), seen)
            return None if body is None else body
        if op == "drop":
            return Drop()
        if op == "forward":
            if a not in self.interfaces:
                self.err(f"{w}: forward to unknown interface {a!r}")
            return Forward(a)
        try:
            if op == "let":
                return Let(tuple((k, self._expr(v, w)) for k, v in a.items()))
            if op == "rewrite":
                for k in a:
                    if k not in HEADER_FIELDS:
                        self.err(f"{w}: cannot rewrite {k!r}")
                return Rewrite(tuple((k, self._expr(v, w)) for k, v in a.items()))
            if op == "map_get":
                obj = self._obj(a["map"], "map", w)
                return MapGet(obj, self._key(a["key"], obj, w), a["found"], a.get("value"))
            if op == "map_put":
                obj = self._obj(a["map"], "map", w)
                return MapPut(obj, self._key(a["key"], obj, w), self._expr(a["value"], w), a.get("ok"))
            if op == "vector_get":
                return VectorGet(self._obj(a["vector"], "vector", w), self._expr(a["index"], w), a["out"])
            if op == "vector_put":
                obj = self._obj(a["vector"], "vector", w)
                sets = tuple((k, self._expr(v, w)) for k, v in a["set"].items())
                if obj in self.state:
                    for k, _ in sets:
                        if k not in self.state[obj].fields:
                            self.err(f"{w}: {obj} has no field {k!r}")
                return VectorPut(obj, self._expr(a["index"], w), sets)
            if op == "dchain_allocate":
                return DchainAllocate(self._obj(a["chain"], "dchain", w), a["ok"], a["index"])
            if op == "dchain_rejuvenate":
                return DchainRejuvenate(self._obj(a["chain"], "dchain", w), self._expr(a["index"], w))
            if op == "dchain_is_allocated":
                return DchainIsAllocated(self._obj(a["chain"], "dchain", w), self._expr(a["index"], w), a["out"])
            if op == "sketch_touch":
                obj = self._obj(a["sketch"], "sketch", w)
                return SketchTouch(obj, self._key(a["key"], obj, w))
            if op == "sketch_query":
                obj = self._obj(a["sketch"], "sketch", w)
                return SketchQuery(obj, self._key(a["key"], obj, w), a["out"])
        except (KeyError, TypeError, AttributeError) as e:
            self.err(f"{w}: {op} is missing argument {e}")
            return None
        self.err(f"{w}: unknown operation {op!r}")
        return None

    # names visible along each path; records are tracked separately
    def _check_scope(self, block, where, scope: set, records: frozenset = frozenset()):
        scope = set(scope)
        records = set(records)

        def check(expr, w):
            for n in expr.names():
                if n in records:
                    continue
                if n not in PACKET_NAMES and n not in self.consts and n not in scope:
                    self.err(f"{w}: unknown name {n!r} in {expr.source!r}")
            for rec, attr in expr.attributes():
                if rec not in records:
                    self.err(f"{w}: {rec!r} is not a record in {expr.source!r}")

        def check_key(atoms, w):
            for a in atoms:
                if a.kind == "expr":
                    check(a.expr, w)

        for i, s in enumerate(block):
            w = f"{where}[{i}]"
            if isinstance(s, Let):
                for name, e in s.assigns:
                    check(e, w)
                    scope.add(name)
            elif isinstance(s, Rewrite):
                for _, e in s.sets:
                    check(e, w)
            elif isinstance(s, MapGet):
                check_key(s.key, w)
                scope.add(s.found)
                if s.value:
                    scope.add(s.value)
            elif isinstance(s, MapPut):
                check_key(s.key, w)
                check(s.value, w)
                if s.ok:
                    scope.add(s.ok)
            elif isinstance(s, VectorGet):
                check(s.index, w)
                records.add(s.out)
                scope.discard(s.out)
            elif isinstance(s, VectorPut):
                check(s.index, w)
                for _, e in s.sets:
                    check(e, w)
            elif isinstance(s, DchainAllocate):
                scope.update((s.ok, s.index))
            elif isinstance(s, (DchainRejuvenate,)):
                check(s.index, w)
            elif isinstance(s, DchainIsAllocated):
                check(s.index, w)
                scope.add(s.out)
            elif isinstance(s, SketchTouch):
                check_key(s.key, w)
            elif isinstance(s, SketchQuery):
                check_key(s.key, w)
                scope.add(s.out)
            elif isinstance(s, If):
                check(s.cond, w)
                self._check_scope(s.then, w + ".then", scope, frozenset(records))
                self._check_scope(s.orelse, w + ".else", scope, frozenset(records))


def parse_model(text: str | dict) -> NfModel:
    """Parse and validate a model document; raises ModelError listing violations."""
    if isinstance(text, dict):
        doc, src = text, ""
    else:
        src = text
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ModelError([f"YAML error: {e}"]) from e
    model = _Parser(doc).parse()
    model.source = src
    _check_init(model)
    return model


def _check_init(model: NfModel) -> None:
    errs = []
    for d in model.state.values():
        if d.init and d.kind not in ("map", "vector"):
            errs.append(f"state.{d.name}: init only supported for map and vector")
        if d.kind == "dchain" and d.map and d.map not in model.state:
            errs.append(f"state.{d.name}: bound map {d.map!r} does not exist")
    if errs:
        raise ModelError(errs)


def load_model(path: str | Path) -> NfModel:
    return parse_model(Path(path).read_text())
