"""From execution tree to sharding constraints.

Every state access gets an *identity space*: two accesses touch the same
memory exactly when they are in the same space and their keys are equal.  Maps
and sketches are their own space; vectors and chains inherit the space of the
map whose value (or stored allocation) indexes them, or are indexed directly
by a packet field.  Sharding then picks, per interface, the packet-field bits
every access on that interface is keyed by, and requires packets agreeing on
them to meet on one core.
"""

from __future__ import annotations

import ast
import json
from dataclasses import dataclass, field

from .nf.model import Atom, InterchangeableGroup, NfModel, WRITE_OPS
from .nf.packet import HEADER_FIELDS
from .nf.paths import ExecutionTree, SymAtom, TreeNode, free_symbols
from .rss import CANONICAL_ORDER, FIELD_BITS, NicProfile, default_profile

READ, WRITE = "read", "write"


@dataclass(eq=False)
class ReportEntry:
    iface: str
    op: str
    obj: str
    access: str
    key: tuple[SymAtom, ...]
    space: str  # identity space; "opaque" when not derivable from the packet
    via: str  # how the key was obtained, for diagnostics
    constraints: tuple = ()
    node: TreeNode | None = field(default=None, repr=False)

    @property
    def field_bits(self) -> frozenset[tuple[str, int]]:
        return frozenset(b for a in self.key for b in a.bit_positions())

    @property
    def fields(self) -> tuple[str, ...]:
        return _canonical({a.field for a in self.key if a.kind == "field"})

    def key_text(self) -> str:
        return "(" + ", ".join(str(a) for a in self.key) + ")"

    def describe(self) -> str:
        return f"{self.iface}: {self.op} {self.obj} {self.key_text()} [{self.access}, {self.via}]"


@dataclass
class StatefulReport:
    entries: list[ReportEntry]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def objects(self) -> list[str]:
        return sorted({e.obj for e in self.entries})

    def to_text(self) -> str:
        return "\n".join(e.describe() for e in self.entries)


def _canonical(fields) -> tuple[str, ...]:
    return tuple(f for f in CANONICAL_ORDER if f in fields)


# -- report --------------------------------------------------------------------------

def _injective_field(tree: ast.expr) -> str | None:
    """The field an index expression is a bijective function of, if any."""
    if isinstance(tree, ast.Name) and tree.id in FIELD_BITS:
        return tree.id
    if isinstance(tree, ast.BinOp) and isinstance(tree.op, (ast.Add, ast.Sub, ast.BitXor)):
        l, r = tree.left, tree.right
        if isinstance(l, ast.Name) and l.id in FIELD_BITS and isinstance(r, ast.Constant):
            return l.id
        if isinstance(r, ast.Name) and r.id in FIELD_BITS and isinstance(l, ast.Constant) \
                and not isinstance(tree.op, ast.Sub):
            return r.id
    return None


def _subtree(node: TreeNode):
    stack = [node]
    while stack:
        n = stack.pop()
        yield n
        stack.extend(n.children)


def build_report(tree: ExecutionTree) -> StatefulReport:
    """One entry per stateful node, with its key identity resolved."""
    by_sid: dict[int, TreeNode] = {}
    for n in tree.nodes():
        if n.kind == "state":
            by_sid.setdefault(n.step.sid, n)

    def stored_by(node: TreeNode, name: str):
        for n in _subtree(node):
            if n.kind == "state" and n.op == "map_put" and isinstance(n.value, ast.Name) and n.value.id == name:
                return n
        return None

    def index_identity(node: TreeNode, idx: ast.expr):
        names = free_symbols(idx)
        text = node.step.index.source
        if isinstance(idx, ast.Name) and idx.id in tree.symbols and tree.symbols[idx.id].kind != "input":
            info = tree.symbols[idx.id]
            src = by_sid.get(info.sid)
            if info.kind == "value" and src is not None:
                return f"map:{src.obj}", src.key, f"value of {src.obj}"
            if info.kind == "index" and src is not None:
                put = stored_by(src, idx.id)
                if put is not None:
                    return f"map:{put.obj}", put.key, f"index stored in {put.obj}"
                return "opaque", (), f"fresh {src.obj} index not stored in any map"
        if not names - set(HEADER_FIELDS):
            if not names:
                return "const", (), f"constant index {text}"
            f = _injective_field(idx)
            if f is not None:
                return (f"index:{ast.unparse(idx)}", (SymAtom("field", FIELD_BITS[f], field=f),),
                        f"index {text}")
            return "opaque", (), f"index {text} is not an injective function of one field"
        return "opaque", (), f"index {text} is read from state"

    entries = []
    for n in tree.state_nodes():
        op, obj = n.op, n.obj
        access = WRITE if op in WRITE_OPS else READ
        kind = tree.model.state[obj].kind
        if kind in ("map", "sketch"):
            space, key, via = f"{kind}:{obj}", n.key, "key"
        elif op == "dchain_allocate":
            put = stored_by(n, n.results[1])
            if put is not None:
                space, key, via = f"map:{put.obj}", put.key, f"index stored in {put.obj}"
            else:
                space, key, via = "opaque", (), "allocation not stored in any map"
        else:
            space, key, via = index_identity(n, n.index)
        entries.append(ReportEntry(n.iface, op, obj, access, tuple(key), space, via, n.constraints, n))
    return StatefulReport(entries)


def read_only_objects(model: NfModel) -> set[str]:
    written = model.written_objects()
    return {n for n, d in model.state.items() if d.read_only or n not in written}


def filter_readonly(report: StatefulReport, model: NfModel) -> StatefulReport:
    ro = read_only_objects(model)
    return StatefulReport([e for e in report.entries if e.obj not in ro])


# -- solution and diagnosis -------------------------------------------------------------

@dataclass(frozen=True)
class Reason:
    rule: str
    obj: str
    text: str

    def __str__(self) -> str:
        return f"{self.rule} [{self.obj}]: {self.text}"


@dataclass
class Diagnosis:
    verdict: str  # "shared-nothing" | "no-constraints" | "infeasible"
    reasons: list[Reason] = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return self.verdict != "infeasible"


@dataclass
class ShardingSolution:
    interfaces: tuple[str, ...]
    bits: dict[str, frozenset[tuple[str, int]]]  # per interface, chosen field bits
    entries: list[ReportEntry]
    positions: dict[str, frozenset[int]]  # per identity space, key positions used
    justifications: list[Reason]
    groups: list[InterchangeableGroup] = field(default_factory=list)
    diagnosis: Diagnosis | None = None

    def fields(self, iface: str) -> tuple[str, ...]:
        return _canonical({f for f, _ in self.bits.get(iface, ())})

    @property
    def sharding_fields(self) -> dict[str, tuple[str, ...]]:
        return {i: self.fields(i) for i in self.interfaces if self.bits.get(i)}


def _mapping(e: ReportEntry) -> dict[int, tuple[str, int]]:
    out, pos = {}, 0
    for a in e.key:
        if a.kind == "field":
            for k in range(a.bits):
                out[pos + k] = (a.field, a.start + k)
        pos += a.bits
    return out


def _hashable(e: ReportEntry, profile: NicProfile) -> frozenset:
    ok = profile.hashable_fields
    return frozenset(b for b in e.field_bits if b[0] in ok)


def _blockers(entries: list[ReportEntry], profile: NicProfile) -> dict[str, Reason]:
    """R4-style blockers per object (first reason found)."""
    out: dict[str, Reason] = {}
    by_obj: dict[str, list[ReportEntry]] = {}
    for e in entries:
        by_obj.setdefault(e.obj, []).append(e)
    for obj, es in by_obj.items():
        opaque = [e for e in es if e.space == "opaque"]
        if opaque:
            e = opaque[0]
            out[obj] = Reason("R4", obj, f"{e.iface} {e.op} is keyed by a value that does not come from the "
                              f"packet ({e.via}); every core would need the same instance, which requires "
                              f"coordination between cores")
            continue
        spaces = sorted({e.space for e in es})
        if len(spaces) > 1:
            desc = "; ".join(sorted({f"{e.iface} via {e.via}" for e in es}))
            out[obj] = Reason("R4", obj, f"accessed through unrelated identities ({desc}); no packet-field "
                              f"key relates them")
            continue
        const = [e for e in es if not e.field_bits]
        if const:
            e = const[0]
            out[obj] = Reason("R4", obj, f"{e.iface} {e.op} uses a constant key {e.key_text() if e.key else ''}"
                              f"; every packet touches the same entry".replace(" ;", ";"))
            continue
        bad = [e for e in es if not _hashable(e, profile)]
        if bad:
            e = bad[0]
            out[obj] = Reason("R4", obj, f"{e.iface} {e.op} is keyed by {', '.join(e.fields)}, which the NIC "
                              f"profile {profile.name!r} cannot hash")
    return out


def _group_entries(group: InterchangeableGroup, n: int) -> list[ReportEntry]:
    out = []
    for iface, atoms in group.keys.items():
        key = tuple(SymAtom("field", a.bits, field=a.field, start=a.start) if a.kind == "field"
                    else SymAtom("const", a.bits, value=a.value) for a in atoms)
        out.append(ReportEntry(iface, "interchangeable", f"group{n}", WRITE, key, f"group:{n}",
                               "interchangeable key"))
    return out


def _closure(objs: set[str], entries: list[ReportEntry]) -> set[str]:
    objs = set(objs)
    while True:
        spaces = {e.space for e in entries if e.obj in objs and e.space != "opaque"}
        more = {e.obj for e in entries if e.space in spaces} - objs
        if not more:
            return objs
        objs |= more


def discover_interchangeable(tree: ExecutionTree, entries: list[ReportEntry],
                             blocked: set[str]) -> list[InterchangeableGroup]:
    """Candidate R5 groups found in the tree.

    Looks for a record read through a packet-field index whose fields are
    compared against packet fields, with every mismatch ending in a drop, and
    for writers storing packet fields into those record fields.  The packet
    fields on both sides then identify the same entry.
    """
    model = tree.model
    out = []
    for obj in sorted(blocked):
        if model.state[obj].kind != "vector":
            continue
        readers = [e for e in entries if e.obj == obj and e.op == "vector_get" and e.space.startswith("index:")]
        writers = [e for e in entries if e.obj == obj and e.op == "vector_put"]
        for r in readers:
            rec_prefix = r.node.results[0].rsplit("__", 1)[0] if r.node.results else None
            if rec_prefix is None:
                continue
            for b in _subtree(r.node):
                if b.kind != "branch":
                    continue
                pairs = _equalities(b.cond, rec_prefix)
                if not pairs or not all(l.action == "drop" for l in _subtree(b.children[1]) if l.kind == "terminal"):
                    continue
                for w in writers:
                    stored = {f: t.id for f, t in w.node.sets if isinstance(t, ast.Name) and t.id in FIELD_BITS}
                    if not all(f in stored and FIELD_BITS[stored[f]] == FIELD_BITS[g] for f, g in pairs):
                        continue
                    pairs_sorted = sorted(pairs, key=lambda p: CANONICAL_ORDER.index(p[1]))
                    keys = {
                        r.iface: tuple(Atom("field", FIELD_BITS[g], field=g) for _, g in pairs_sorted),
                        w.iface: tuple(Atom("field", FIELD_BITS[stored[f]], field=stored[f]) for f, _ in pairs_sorted),
                    }
                    if len(keys) < 2:
                        continue
                    grp = InterchangeableGroup(tuple(sorted(_closure({obj}, entries))), keys)
                    if grp not in out:
                        out.append(grp)
    return out


def _equalities(cond: ast.expr, rec_prefix: str) -> list[tuple[str, str]]:
    terms = cond.values if isinstance(cond, ast.BoolOp) and isinstance(cond.op, ast.And) else [cond]
    pairs = []
    for t in terms:
        if not (isinstance(t, ast.Compare) and len(t.ops) == 1 and isinstance(t.ops[0], ast.Eq)):
            continue
        l, r = t.left, t.comparators[0]
        if not (isinstance(l, ast.Name) and isinstance(r, ast.Name)):
            continue
        for a, b in ((l.id, r.id), (r.id, l.id)):
            if a.startswith(rec_prefix + "__") and b in FIELD_BITS:
                pairs.append((a.split("__", 1)[1], b))
    return pairs


def solve_sharding(report: StatefulReport, model: NfModel, profile: NicProfile | None = None,
                   tree: ExecutionTree | None = None, interchange_check=None) -> ShardingSolution:
    """Apply R1-R5 to a read-only-filtered report.

    Returns a ShardingSolution whose ``diagnosis`` carries the verdict; an
    infeasible verdict lists the rule and object that blocked sharding.
    ``interchange_check(model, a, b)`` validates R5 candidates (defaults to the
    simulation oracle).
    """
    profile = profile or default_profile()
    ifaces = model.interfaces
    entries = list(report.entries)
    just: list[Reason] = []
    if not entries:
        d = Diagnosis("no-constraints", [Reason("-", "-", "all state is read-only after initialization; any steering is correct")])
        return ShardingSolution(ifaces, {}, [], {}, d.reasons, diagnosis=d)
    if interchange_check is None:
        from .parsim.equivalence import check_interchangeable as interchange_check

    blocked = _blockers(entries, profile)
    groups: list[InterchangeableGroup] = []
    if blocked:
        candidates = [(g, "declared") for g in model.interchangeable]
        if tree is not None:
            candidates += [(g, "discovered") for g in discover_interchangeable(tree, entries, set(blocked))]
        for g, how in candidates:
            hit = set(g.replaces) & set(blocked)
            if not hit:
                continue
            if not interchange_check(model, None, g.keys):
                just.append(Reason("R5", ",".join(g.replaces), f"{how} interchangeable key rejected by the "
                                   f"differential check"))
                continue
            n = len(groups)
            entries = [e for e in entries if e.obj not in g.replaces] + _group_entries(g, n)
            groups.append(g)
            keys = "; ".join(f"{i}: ({', '.join(str(a) for a in k)})" for i, k in g.keys.items())
            for obj in sorted(hit):
                just.append(Reason("R5", obj, f"{blocked[obj].text}; replaced by {how} interchangeable key "
                                   f"{keys}, validated by differential simulation"))
            blocked = _blockers(entries, profile)
            if not blocked:
                break
    if blocked:
        d = Diagnosis("infeasible", list(blocked.values()))
        return ShardingSolution(ifaces, {}, entries, {}, just + d.reasons, groups, d)

    # R1/R2: per interface, the bits every access there is keyed by
    bits: dict[str, frozenset] = {}
    for i in ifaces:
        es = [e for e in entries if e.iface == i]
        if es:
            s = None
            for e in es:
                hb = _hashable(e, profile)
                s = hb if s is None else s & hb
            bits[i] = s
    spaces: dict[str, list[ReportEntry]] = {}
    for e in entries:
        spaces.setdefault(e.space, []).append(e)
    maps = {id(e): _mapping(e) for e in entries}
    positions: dict[str, frozenset[int]] = {}
    changed = True
    while changed:
        changed = False
        for sp, es in spaces.items():
            pos = None
            for e in es:
                m = maps[id(e)]
                mine = frozenset(p for p, b in m.items() if b in bits[e.iface])
                pos = mine if pos is None else pos & mine
            positions[sp] = pos
            for e in es:
                m = maps[id(e)]
                allowed = frozenset(m[p] for p in pos)
                new = bits[e.iface] & allowed
                if new != bits[e.iface]:
                    bits[e.iface] = new
                    changed = True
    empty = [i for i in ifaces if i in bits and not bits[i]]
    if empty:
        reasons = []
        for i in empty:
            es = [e for e in entries if e.iface == i]
            a, b = _disjoint_pair(es, entries, profile)
            reasons.append(Reason("R3", f"{a.obj}/{b.obj}", f"{a.describe()} and {b.describe()} share no "
                                  f"packet field, so no single sharding serves both"))
        d = Diagnosis("infeasible", reasons)
        return ShardingSolution(ifaces, bits, entries, positions, just + reasons, groups, d)

    for obj in sorted({e.obj for e in entries}):
        es = [e for e in entries if e.obj == obj]
        where = sorted({e.iface for e in es})
        just.append(Reason("R1", obj, f"accesses on {', '.join(where)} reach the same entry iff their keys "
                           f"are equal; packets with equal keys must meet on one core"))
        for e in es:
            chosen = _canonical({f for f, _ in bits[e.iface]})
            if set(e.fields) - set(chosen) or len(e.field_bits) > len(bits[e.iface]):
                just.append(Reason("R2", obj, f"{e.iface} key {e.key_text()} is subsumed by the coarser "
                                   f"sharding on ({', '.join(chosen)})"))
                break
    d = Diagnosis("shared-nothing", [r for r in just if r.rule in ("R2", "R5")])
    return ShardingSolution(ifaces, bits, entries, positions, _dedupe(just), groups, d)


def _dedupe(reasons):
    out = []
    for r in reasons:
        if r not in out:
            out.append(r)
    return out


def _disjoint_pair(es, entries, profile):
    for a in es:
        for b in es:
            if not (_hashable(a, profile) & _hashable(b, profile)):
                return a, b
    # emptied by a cross-interface dependency: name the first pair involved
    a = es[0]
    other = next((e for e in entries if e.space == a.space and e.iface != a.iface), es[-1])
    return a, other


# -- constraints ----------------------------------------------------------------------------

BitEq = tuple[tuple[str, int], tuple[str, int]]


@dataclass
class PairConstraintSet:
    """C_ij per ordered interface pair: a disjunction of bit-equality conjunctions.

    Each conjunction is a sorted tuple of ((field, bit) of d at i, (field, bit)
    of d' at j).
    """

    interfaces: tuple[str, ...]
    pairs: dict[tuple[str, str], tuple[tuple[BitEq, ...], ...]]

    def get(self, i: str, j: str) -> tuple[tuple[BitEq, ...], ...]:
        return self.pairs.get((i, j), ())

    def is_empty(self) -> bool:
        return not any(self.pairs.values())

    def constrained_interfaces(self) -> list[str]:
        return [i for i in self.interfaces if any(self.get(i, j) or self.get(j, i) for j in self.interfaces)]

    def fields(self, iface: str) -> tuple[str, ...]:
        out = set()
        for (i, j), ds in self.pairs.items():
            for conj in ds:
                for a, b in conj:
                    if i == iface:
                        out.add(a[0])
                    if j == iface:
                        out.add(b[0])
        return _canonical(out)

    def canonical_pairs(self):
        """(i, j) with j not after i in interface order."""
        idx = {n: k for k, n in enumerate(self.interfaces)}
        return [(i, j) for (i, j) in self.pairs if idx[j] <= idx[i]]

    def swapped(self) -> "PairConstraintSet":
        return PairConstraintSet(self.interfaces, {
            (j, i): tuple(sorted(tuple(sorted((b, a) for a, b in conj)) for conj in ds))
            for (i, j), ds in self.pairs.items()
        })

    # run-length form: (field_a, start_a, field_b, start_b, length)
    @staticmethod
    def runs(conj) -> list[tuple[str, int, str, int, int]]:
        out = []
        for (fa, ba), (fb, bb) in conj:
            if out:
                pa, sa, pb, sb, n = out[-1]
                if pa == fa and pb == fb and sa + n == ba and sb + n == bb:
                    out[-1] = (pa, sa, pb, sb, n + 1)
                    continue
            out.append((fa, ba, fb, bb, 1))
        return out

    def describe_conj(self, conj) -> str:
        parts = []
        for fa, sa, fb, sb, n in sorted(self.runs(conj), key=lambda r: (CANONICAL_ORDER.index(r[0]), r[1])):
            if sa == 0 and sb == 0 and n == FIELD_BITS[fa] == FIELD_BITS[fb]:
                parts.append(f"d.{fa} = d'.{fb}")
            else:
                parts.append(f"d.{fa}[{sa}:{sa + n}] = d'.{fb}[{sb}:{sb + n}]")
        return " and ".join(parts)

    def to_text(self) -> str:
        lines = []
        for i, j in self.canonical_pairs():
            ds = self.get(i, j)
            if not ds:
                continue
            lines.append(f"C[{i},{j}] = " + " OR ".join(f"({self.describe_conj(c)})" for c in ds))
        return "\n".join(lines) if lines else "(no constraints)"

    def to_json(self) -> dict:
        return {
            "interfaces": list(self.interfaces),
            "pairs": [
                {"i": i, "j": j, "disjuncts": [[list(r) for r in self.runs(c)] for c in ds]}
                for (i, j), ds in sorted(self.pairs.items()) if ds
            ],
        }

    @classmethod
    def from_json(cls, data: dict | str) -> "PairConstraintSet":
        if isinstance(data, str):
            data = json.loads(data)
        pairs = {}
        for p in data["pairs"]:
            ds = []
            for runs in p["disjuncts"]:
                conj = []
                for fa, sa, fb, sb, n in runs:
                    conj += [((fa, sa + k), (fb, sb + k)) for k in range(n)]
                ds.append(tuple(sorted(conj)))
            pairs[(p["i"], p["j"])] = tuple(ds)
        return cls(tuple(data["interfaces"]), pairs)


def emit_constraints(solution: ShardingSolution, model: NfModel | None = None) -> PairConstraintSet:
    """Equalities between every pair of same-identity accesses, restricted to the chosen bits."""
    ifaces = solution.interfaces
    acc: dict[tuple[str, str], list] = {(i, j): [] for i in ifaces for j in ifaces}
    spaces: dict[str, list[ReportEntry]] = {}
    for e in solution.entries:
        spaces.setdefault(e.space, []).append(e)
    for sp, es in spaces.items():
        pos = sorted(solution.positions.get(sp, ()))
        if not pos:
            continue
        for a in es:
            ma = _mapping(a)
            for b in es:
                mb = _mapping(b)
                conj = tuple(sorted((ma[p], mb[p]) for p in pos))
                if conj not in acc[(a.iface, b.iface)]:
                    acc[(a.iface, b.iface)].append(conj)
    pairs = {k: tuple(sorted(v)) for k, v in acc.items() if v}
    return PairConstraintSet(ifaces, pairs)
