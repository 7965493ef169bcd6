"""Exhaustive path enumeration over an NF model.

Every step result becomes a named symbol (``<name>_<step id>``); lets and
rewrites are substituted away, so path constraints and keys are expressions
over packet-field inputs, ``now``, ``size`` and those result symbols only.
"""

from __future__ import annotations

import ast
import copy
import itertools
import random
from dataclasses import dataclass, field as dfield

from ..rss import FIELD_BITS
from .execute import sym
from .model import FUNCTIONS, RESULT_BITS, SYMBOL_BITS, Atom, NfModel, Step
from .packet import HEADER_FIELDS


@dataclass(frozen=True)
class SymAtom:
    """A key atom after substitution along one path."""

    kind: str  # "field" | "const" | "expr"
    bits: int
    field: str | None = None
    start: int = 0
    value: int | None = None
    src: str | None = None
    tree: ast.expr | None = dfield(default=None, compare=False, hash=False, repr=False)

    @property
    def is_whole_field(self) -> bool:
        return self.kind == "field" and self.start == 0 and self.bits == FIELD_BITS[self.field]

    def bit_positions(self) -> list[tuple[str, int]]:
        """(field, bit) for every bit of a field atom, MSB first."""
        return [(self.field, self.start + i) for i in range(self.bits)] if self.kind == "field" else []

    def __str__(self) -> str:
        if self.kind == "field":
            return self.field if self.is_whole_field else f"{self.field}[{self.start}:{self.start + self.bits}]"
        if self.kind == "const":
            return f"{self.value:#x}/{self.bits}"
        return f"({self.src})/{self.bits}"


@dataclass(frozen=True)
class Constraint:
    src: str
    holds: bool
    tree: ast.expr = dfield(compare=False, hash=False, repr=False)

    def __str__(self) -> str:
        return self.src if self.holds else f"not ({self.src})"


@dataclass(frozen=True)
class SymbolInfo:
    name: str
    kind: str  # "input" | "found" | "value" | "ok" | "index" | "field" | "flag" | "estimate"
    bits: int
    sid: int | None = None
    obj: str | None = None


@dataclass(eq=False)
class TreeNode:
    kind: str  # "branch" | "state" | "terminal"
    iface: str
    step: Step
    constraints: tuple[Constraint, ...]
    children: list["TreeNode"] = dfield(default_factory=list)
    cond: ast.expr | None = None
    key: tuple[SymAtom, ...] = ()
    index: ast.expr | None = None
    value: ast.expr | None = None
    sets: tuple[tuple[str, ast.expr], ...] = ()
    results: tuple[str, ...] = ()
    action: str | None = None
    out_iface: str | None = None
    headers: tuple[str, ...] = ()
    header_trees: tuple[ast.expr, ...] = dfield(default=(), repr=False)
    leaf_id: int | None = None
    witness: dict | None = None

    @property
    def op(self) -> str:
        return self.step.op

    @property
    def obj(self):
        return getattr(self.step, "obj", None)


@dataclass
class Path:
    iface: str
    nodes: list[TreeNode]
    branches: tuple[tuple[int, bool], ...]

    @property
    def leaf(self) -> TreeNode:
        return self.nodes[-1]

    @property
    def constraints(self) -> tuple[Constraint, ...]:
        return self.leaf.constraints

    @property
    def state_nodes(self) -> list[TreeNode]:
        return [n for n in self.nodes if n.kind == "state"]


@dataclass
class ExecutionTree:
    model: NfModel
    roots: dict[str, TreeNode]
    symbols: dict[str, SymbolInfo]
    paths: list[Path]

    def nodes(self):
        seen = set()
        for root in self.roots.values():
            stack = [root]
            while stack:
                n = stack.pop()
                if id(n) in seen:
                    continue
                seen.add(id(n))
                yield n
                stack.extend(reversed(n.children))

    def state_nodes(self) -> list[TreeNode]:
        out = [n for n in self.nodes() if n.kind == "state"]
        out.sort(key=lambda n: (self.model.interfaces.index(n.iface), n.step.sid))
        return out

    def paths_for(self, iface: str) -> list[Path]:
        return [p for p in self.paths if p.iface == iface]

    def path_through(self, node: TreeNode) -> list[Path]:
        return [p for p in self.paths if any(n is node for n in p.nodes)]

    def match(self, iface: str, values: dict) -> list[Path]:
        """Paths of ``iface`` whose constraints hold under concrete symbol values."""
        out = []
        for p in self.paths_for(iface):
            try:
                if _holds(p.constraints, values):
                    out.append(p)
            except (NameError, KeyError):
                continue
        return out


# -- substitution -----------------------------------------------------------------

class _Record:
    def __init__(self, name: str):
        self.name = name


class _Subst(ast.NodeTransformer):
    def __init__(self, env):
        self.env = env

    def visit_Name(self, node):
        if node.id in FUNCTIONS and node.id not in self.env:
            return node
        v = self.env[node.id]
        if isinstance(v, _Record):
            raise ValueError(f"record {node.id} used as a value")
        return copy.deepcopy(v)

    def visit_Attribute(self, node):
        rec = self.env[node.value.id]
        return ast.Name(f"{rec.name}__{node.attr}", ast.Load())

    def visit_Call(self, node):
        node.args = [self.visit(a) for a in node.args]
        return node


def substitute(tree: ast.expr, env: dict) -> ast.expr:
    out = _Subst(env).visit(copy.deepcopy(tree))
    return ast.fix_missing_locations(out)


def free_symbols(tree: ast.expr) -> set[str]:
    calls = {n.func.id for n in ast.walk(tree) if isinstance(n, ast.Call)}
    return {n.id for n in ast.walk(tree) if isinstance(n, ast.Name)} - calls


def _sym_atom(a: Atom, env: dict) -> SymAtom:
    if a.kind == "const":
        return SymAtom("const", a.bits, value=a.value)
    if a.kind == "field":
        t = env[a.field]
        low = FIELD_BITS[a.field] - a.start - a.bits
        if isinstance(t, ast.Name) and t.id in FIELD_BITS and FIELD_BITS[t.id] == FIELD_BITS[a.field]:
            return SymAtom("field", a.bits, field=t.id, start=a.start)
        if isinstance(t, ast.Constant):
            return SymAtom("const", a.bits, value=(t.value >> low) & ((1 << a.bits) - 1))
        src = f"(({ast.unparse(t)}) >> {low}) & {(1 << a.bits) - 1}"
        return SymAtom("expr", a.bits, src=src, tree=ast.parse(src, mode="eval").body)
    t = substitute(a.expr.tree, env)
    if isinstance(t, ast.Name) and t.id in FIELD_BITS and FIELD_BITS[t.id] == a.bits:
        return SymAtom("field", a.bits, field=t.id)
    if isinstance(t, ast.Constant):
        return SymAtom("const", a.bits, value=t.value & ((1 << a.bits) - 1))
    return SymAtom("expr", a.bits, src=ast.unparse(t), tree=t)


# -- enumeration -------------------------------------------------------------------

def enumerate_paths(model: NfModel, witnesses: bool = True) -> ExecutionTree:
    symbols: dict[str, SymbolInfo] = {}
    for f in HEADER_FIELDS + ("now", "size"):
        symbols[f] = SymbolInfo(f, "input", SYMBOL_BITS[f])

    def result(step, name, kind, bits=RESULT_BITS):
        s = sym(name, step.sid)
        symbols[s] = SymbolInfo(s, kind, bits, step.sid, getattr(step, "obj", None))
        return ast.Name(s, ast.Load())

    def walk(block, start, env, cons, iface) -> TreeNode:
        for i in range(start, len(block)):
            s = block[i]
            op = s.op
            if op == "let":
                for name, e in s.assigns:
                    env[name] = substitute(e.tree, env)
            elif op == "rewrite":
                new = [(f, substitute(e.tree, env)) for f, e in s.sets]
                env.update(new)
            elif op == "forward" or op == "drop":
                hdr = tuple(env[f] for f in HEADER_FIELDS)
                return TreeNode("terminal", iface, s, cons, action=op,
                                out_iface=getattr(s, "iface", None),
                                headers=tuple(ast.unparse(h) for h in hdr) if op == "forward" else (),
                                header_trees=hdr if op == "forward" else ())
            elif op == "if":
                cond = substitute(s.cond.tree, env)
                src = ast.unparse(cond)
                node = TreeNode("branch", iface, s, cons, cond=cond)
                node.children = [
                    walk(s.then, 0, dict(env), cons + (Constraint(src, True, cond),), iface),
                    walk(s.orelse, 0, dict(env), cons + (Constraint(src, False, cond),), iface),
                ]
                return node
            else:
                node = TreeNode("state", iface, s, cons)
                if hasattr(s, "key"):
                    node.key = tuple(_sym_atom(a, env) for a in s.key)
                if hasattr(s, "index") and not isinstance(s.index, str):
                    node.index = substitute(s.index.tree, env)
                res = []
                if op == "map_get":
                    env[s.found] = result(s, s.found, "found", 1)
                    res.append(env[s.found].id)
                    if s.value:
                        env[s.value] = result(s, s.value, "value")
                        res.append(env[s.value].id)
                elif op == "map_put":
                    node.value = substitute(s.value.tree, env)
                    if s.ok:
                        env[s.ok] = result(s, s.ok, "ok", 1)
                        res.append(env[s.ok].id)
                elif op == "vector_get":
                    rec = sym(s.out, s.sid)
                    env[s.out] = _Record(rec)
                    for f in model.state[s.obj].fields:
                        symbols[f"{rec}__{f}"] = SymbolInfo(f"{rec}__{f}", "field", RESULT_BITS, s.sid, s.obj)
                        res.append(f"{rec}__{f}")
                elif op == "vector_put":
                    node.sets = tuple((f, substitute(e.tree, env)) for f, e in s.sets)
                elif op == "dchain_allocate":
                    env[s.ok] = result(s, s.ok, "ok", 1)
                    env[s.index] = result(s, s.index, "index")
                    res += [env[s.ok].id, env[s.index].id]
                elif op == "dchain_is_allocated":
                    env[s.out] = result(s, s.out, "flag", 1)
                    res.append(env[s.out].id)
                elif op == "sketch_query":
                    env[s.out] = result(s, s.out, "estimate")
                    res.append(env[s.out].id)
                node.results = tuple(res)
                node.children = [walk(block, i + 1, env, cons, iface)]
                return node
        raise AssertionError("validated pipelines always terminate")

    roots = {}
    for iface in model.interfaces:
        env: dict = {f: ast.Name(f, ast.Load()) for f in HEADER_FIELDS + ("now", "size")}
        env.update({k: ast.Constant(v) for k, v in model.constants.items()})
        roots[iface] = walk(model.pipelines[iface], 0, env, (), iface)

    paths = []
    for iface, root in roots.items():
        def rec(node, trail, branches):
            trail = trail + [node]
            if node.kind == "terminal":
                node.leaf_id = len(paths)
                paths.append(Path(iface, trail, tuple(branches)))
                return
            if node.kind == "branch":
                rec(node.children[0], trail, branches + [(node.step.sid, True)])
                rec(node.children[1], trail, branches + [(node.step.sid, False)])
            else:
                rec(node.children[0], trail, branches)
        rec(root, [], [])

    tree = ExecutionTree(model, roots, symbols, paths)
    if witnesses:
        for p in paths:
            p.leaf.witness = find_witness(p.constraints, symbols)
    return tree


# -- feasibility by brute force ------------------------------------------------------

def _conjunction(constraints) -> ast.Expression:
    terms = [c.tree if c.holds else ast.UnaryOp(ast.Not(), c.tree) for c in constraints]
    body = ast.BoolOp(ast.And(), terms) if len(terms) > 1 else (terms[0] if terms else ast.Constant(True))
    return ast.fix_missing_locations(ast.Expression(body))


_GLOBALS = {"__builtins__": {}, **FUNCTIONS}


def _holds(constraints, values: dict) -> bool:
    if not constraints:
        return True
    code = compile(_conjunction(constraints), "<path>", "eval")
    return bool(eval(code, _GLOBALS, values))


def find_witness(constraints, symbols: dict[str, SymbolInfo], budget: int = 200_000,
                 seed: int = 0) -> dict | None:
    """Concrete symbol values satisfying every constraint, or None if none found.

    Fields are searched over a reduced 8-bit domain plus the boundary values of
    every constant in the constraints; flags over {0, 1}.
    """
    if not constraints:
        return {}
    names = sorted(set().union(*(free_symbols(c.tree) for c in constraints)))
    consts = set()
    for c in constraints:
        for n in ast.walk(c.tree):
            if isinstance(n, ast.Constant) and isinstance(n.value, int):
                consts.update((n.value - 1, n.value, n.value + 1))
    domains = []
    for name in names:
        info = symbols.get(name)
        bits = info.bits if info else RESULT_BITS
        if bits == 1:
            domains.append([0, 1])
            continue
        top = (1 << bits) - 1
        base = range(256) if len(names) <= 2 else (0, 1, 2, 3, 255)
        dom = sorted({v for v in itertools.chain(base, consts) if 0 <= v <= top})
        domains.append(dom)
    code = compile(_conjunction(constraints), "<path>", "eval")
    total = 1
    for d in domains:
        total *= len(d)

    def ok(values):
        env = dict(zip(names, values))
        try:
            return bool(eval(code, _GLOBALS, env))
        except ZeroDivisionError:
            return False

    if total <= budget:
        for values in itertools.product(*domains):
            if ok(values):
                return dict(zip(names, values))
        return None
    rng = random.Random(seed)
    for _ in range(budget):
        values = [rng.choice(d) for d in domains]
        if ok(values):
            return dict(zip(names, values))
    return None
