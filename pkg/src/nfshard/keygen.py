"""RSS key synthesis from sharding constraints.

For fixed inputs the Toeplitz hash is GF(2)-linear in the key, and for a fixed
key it is linear in the input.  A disjunct of C_ij says that some bits of d
(hashed at interface i) equal some bits of d' (hashed at j); all other bits
vary freely.  The pairs satisfying it form a linear space spanned by one
generator per equivalence class of tied bit positions, so the hashes agree on
the whole space iff, for every class, the XOR of the key windows of its
positions is zero.  That gives 32 linear equations per class over the key bits.

Rows are Python ints: bit 0 holds the right-hand side, bit v+1 the key
variable v.  Interface number n owns variables n*key_bits .. (n+1)*key_bits-1,
key bit t (0 = first/most significant) being variable n*key_bits + t.
"""

from __future__ import annotations

import hashlib
import json
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .rss import (
    HASH_BITS,
    FieldSet,
    IndirectionTable,
    InterfaceConfig,
    NicProfile,
    RssConfigBundle,
    RssKey,
    ToeplitzTable,
    default_profile,
)
from .sharding import PairConstraintSet


class KeygenError(RuntimeError):
    pass


class FieldsetUnavailable(KeygenError):
    """No fieldset of the NIC profile covers the fields an interface must hash."""


class NoAcceptableKey(KeygenError):
    """Every attempt failed; the best rejected candidate is attached."""

    def __init__(self, message: str, best: RssConfigBundle | None = None, score: "DistributionScore | None" = None):
        super().__init__(message)
        self.best = best
        self.score = score


@dataclass
class KeySearchConfig:
    workers: int = 1
    max_restarts: int = 32
    seed: int = 0
    soft_fraction: float = 0.5  # share of key bits asked to be 1
    threshold: float = 1.5  # accepted max/mean core load
    score_cores: int = 16
    score_flows: int = 10_000
    verify_samples: int = 100_000
    cores: int = 16  # cores the emitted indirection tables spread over

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("worker count must be at least 1")
        if self.max_restarts < 1:
            raise ValueError("max_restarts must be at least 1")
        if not 0.0 <= self.soft_fraction <= 1.0:
            raise ValueError("soft_fraction must be within [0, 1]")
        if self.verify_samples < 1 or self.score_flows < 1:
            raise ValueError("sample counts must be positive")


# -- fieldsets ------------------------------------------------------------------------

def select_fieldsets(constraints: PairConstraintSet, profile: NicProfile | None = None,
                     interfaces=None) -> dict[str, FieldSet]:
    """Smallest supported fieldset covering each interface's constrained fields.

    Interfaces without constraints hash the widest fieldset, which spreads
    load best.
    """
    profile = profile or default_profile()
    out = {}
    for iface in interfaces or constraints.interfaces:
        need = set(constraints.fields(iface))
        if not need:
            out[iface] = profile.widest()
            continue
        cover = [fs for fs in profile.fieldsets if need <= set(fs.fields)]
        if not cover:
            missing = sorted(need - profile.hashable_fields)
            why = f"fields {missing} are not hashable" if missing else "no single fieldset holds them all"
            raise FieldsetUnavailable(
                f"interface {iface}: profile {profile.name} cannot hash {sorted(need)} ({why})")
        out[iface] = min(cover, key=lambda fs: (fs.total_bits, len(fs.fields), fs.id))
    return out


# -- linear system --------------------------------------------------------------------

class GF2System:
    """Incrementally maintained reduced row echelon form with provenance tags.

    A row's tag is the set (as an int bitset) of tagged input rows XORed into
    it; a conflict's tag is therefore an unsatisfiable core of tagged rows
    (untagged rows are hard and always part of it implicitly).
    """

    def __init__(self):
        self.rows: dict[int, int] = {}  # pivot column -> row
        self.tags: dict[int, int] = {}
        self.pmask = 0

    def copy(self) -> "GF2System":
        s = GF2System()
        s.rows, s.tags, s.pmask = dict(self.rows), dict(self.tags), self.pmask
        return s

    @property
    def rank(self) -> int:
        return len(self.rows)

    def reduce(self, row: int, tag: int = 0) -> tuple[int, int]:
        m = row & self.pmask
        while m:
            p = m.bit_length() - 1
            row ^= self.rows[p]
            tag ^= self.tags[p]
            m ^= 1 << p
        return row, tag

    def add(self, row: int, tag: int = 0) -> tuple[str, int]:
        """Returns ("new" | "redundant" | "conflict", tag of the reduced row)."""
        r, t = self.reduce(row, tag)
        if r >> 1 == 0:
            return ("redundant" if r == 0 else "conflict"), t
        q = r.bit_length() - 1
        bit = 1 << q
        for p, other in self.rows.items():
            if other & bit:
                self.rows[p] = other ^ r
                self.tags[p] ^= t
        self.rows[q] = r
        self.tags[q] = t
        self.pmask |= bit
        return "new", t

    def solution(self, nvars: int, rng: random.Random) -> int:
        """A solution as a bitset over variables; free variables are random."""
        free = ((1 << (nvars + 1)) - 2) & ~self.pmask
        x = rng.getrandbits(nvars) << 1 & free
        for p, row in self.rows.items():
            if (row & 1) ^ (bin(row & x & ~(1 << p)).count("1") & 1):
                x |= 1 << p
        return x >> 1


def _classes(conj, n_i: int, n_j: int, off_i: dict, off_j: dict) -> list[tuple[list[int], list[int]]]:
    """Equivalence classes of tied positions: (positions in d, positions in d')."""
    parent = list(range(n_i + n_j))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for (fa, ba), (fb, bb) in conj:
        x, y = find(off_i[fa] + ba), find(n_i + off_j[fb] + bb)
        if x != y:
            parent[x] = y
    groups: dict[int, tuple[list[int], list[int]]] = {}
    for a in range(n_i + n_j):
        g = groups.setdefault(find(a), ([], []))
        if a < n_i:
            g[0].append(a)
        else:
            g[1].append(a - n_i)
    return list(groups.values())


def key_equations(constraints: PairConstraintSet, fieldsets: dict[str, FieldSet], key_bits: int,
                  order: list[str]) -> list[int]:
    """Hard rows (right-hand side 0) for every disjunct of every C_ij."""
    index = {n: k for k, n in enumerate(order)}
    rows: set[int] = set()
    for i, j in constraints.canonical_pairs():
        fi, fj = fieldsets[i], fieldsets[j]
        off_i = {f: fi.offset(f) for f in fi.fields}
        off_j = {f: fj.offset(f) for f in fj.fields}
        base_i, base_j = index[i] * key_bits, index[j] * key_bits
        for conj in constraints.get(i, j):
            for xs, ys in _classes(conj, fi.total_bits, fj.total_bits, off_i, off_j):
                for b in range(HASH_BITS):
                    row = 0
                    for x in xs:
                        row ^= 1 << (base_i + x + b + 1)
                    for y in ys:
                        row ^= 1 << (base_j + y + b + 1)
                    if row:
                        rows.add(row)
    return sorted(rows)


def hard_system(constraints, fieldsets, key_bits, order) -> GF2System:
    s = GF2System()
    for row in key_equations(constraints, fieldsets, key_bits, order):
        if s.add(row)[0] == "conflict":  # impossible with a zero right-hand side
            raise KeygenError("hard constraints unsatisfiable")
    return s


def soften(base: GF2System, nvars: int, soft_fraction: float, rng: random.Random) -> tuple[GF2System, int, int]:
    """Add "bit = 1" soft rows for a random subset of variables.

    On a conflict, a random half of the core is discarded; if that removes
    an already accepted soft row the pass restarts from the hard system.
    Returns (system, accepted softs, diagnosis rounds).
    """
    active = [v for v in range(nvars) if rng.random() < soft_fraction]
    rng.shuffle(active)
    rounds = 0
    while True:
        s = base.copy()
        accepted = 0
        restart = False
        for v in active:
            status, core = s.add((1 << (v + 1)) | 1, 1 << v)
            if status != "conflict":
                accepted += status == "new"
                continue
            members = [u for u in range(nvars) if core >> u & 1]
            drop = set(rng.sample(members, max(1, len(members) // 2)))
            if drop != {v}:
                active = [u for u in active if u not in drop]
                restart = True
                break
        if not restart:
            return s, accepted, rounds
        rounds += 1


# -- scoring and verification -----------------------------------------------------------

@dataclass
class DistributionScore:
    shares: list[float]  # all interfaces pooled
    ratio: float  # worst per-interface max/mean
    per_interface: dict[str, float] = field(default_factory=dict)
    threshold: float = 1.5

    @property
    def accepted(self) -> bool:
        return self.ratio <= self.threshold

    def to_dict(self) -> dict:
        return {"ratio": round(self.ratio, 6), "accepted": self.accepted, "threshold": self.threshold,
                "per_interface": {k: round(v, 6) for k, v in self.per_interface.items()}}


def flow_sample(bundle: RssConfigBundle, flows: int = 10_000, seed: int = 0) -> dict[str, np.ndarray]:
    """Uniformly random hash inputs per interface: a flow population free of constraints."""
    rng = np.random.default_rng(seed)
    return {n: rng.integers(0, 256, (flows, c.fieldset.total_bits // 8), dtype=np.uint8)
            for n, c in bundle.configs.items()}


def score_distribution(bundle: RssConfigBundle, sample: dict[str, np.ndarray] | None = None, cores: int = 16,
                       threshold: float = 1.5, seed: int = 0, own_tables: bool = False) -> DistributionScore:
    """Per-core load of a random flow population.

    Keys are judged through round-robin tables over ``cores`` cores; with
    ``own_tables`` the bundle's configured tables are used instead.
    """
    if sample is None:
        sample = flow_sample(bundle, seed=seed)
    pooled = np.zeros(cores)
    per = {}
    for name, cfg in bundle.configs.items():
        table = cfg.table if own_tables else IndirectionTable.round_robin(cores, cfg.table.size)
        entries = np.asarray(table.entries)
        h = ToeplitzTable(cfg.key, cfg.fieldset.total_bits).hash_batch(sample[name])
        load = np.bincount(entries[h & (table.size - 1)], minlength=cores).astype(float)
        pooled += load
        per[name] = float(load.max() / load.mean())
    total = pooled.sum()
    shares = (pooled / total).tolist() if total else [0.0] * cores
    return DistributionScore(shares, max(per.values(), default=0.0), per, threshold)


@dataclass
class VerificationReport:
    checked: int
    violations: int
    per_disjunct: list[tuple[str, str, int, int, int]]  # (i, j, disjunct, samples, violations)
    control_collision_rate: float

    @property
    def ok(self) -> bool:
        return self.violations == 0

    def to_dict(self) -> dict:
        return {"checked": self.checked, "violations": self.violations,
                "control_collision_rate": self.control_collision_rate}

    def to_text(self) -> str:
        head = f"verification: {self.violations} violations in {self.checked} constrained pairs; " \
               f"control collision rate {self.control_collision_rate:.3g}"
        lines = [head]
        for i, j, k, n, bad in self.per_disjunct:
            lines.append(f"  C[{i},{j}] disjunct {k}: {bad}/{n}")
        return "\n".join(lines)


def verify_keys(bundle: RssConfigBundle, constraints: PairConstraintSet, sample_count: int = 1_000_000,
                seed: int = 0, chunk: int = 200_000) -> VerificationReport:
    """Sampling oracle: random pairs forced to satisfy each disjunct must hash equally.

    Works on raw bit arrays (numpy unpack/pack), independent of the equation
    construction used by the synthesis.
    """
    rng = np.random.default_rng(seed)
    checked = violations = 0
    per = []
    for i, j in constraints.canonical_pairs():
        ci, cj = bundle.configs[i], bundle.configs[j]
        ti, tj = ci.compiled(), cj.compiled()
        for k, conj in enumerate(constraints.get(i, j)):
            xs = np.array([ci.fieldset.offset(fa) + ba for (fa, ba), _ in conj], dtype=np.intp)
            ys = np.array([cj.fieldset.offset(fb) + bb for _, (fb, bb) in conj], dtype=np.intp)
            bad = 0
            left = sample_count
            while left:
                n = min(chunk, left)
                left -= n
                a = rng.integers(0, 256, (n, ti.nbytes), dtype=np.uint8)
                b = np.unpackbits(rng.integers(0, 256, (n, tj.nbytes), dtype=np.uint8), axis=1)
                b[:, ys] = np.unpackbits(a, axis=1)[:, xs]
                bad += int(np.count_nonzero(ti.hash_batch(a) != tj.hash_batch(np.packbits(b, axis=1))))
            per.append((i, j, k, sample_count, bad))
            checked += sample_count
            violations += bad
    # control pairs: unconstrained inputs on the first interface
    collisions = 0.0
    if bundle.configs:
        cfg = next(iter(bundle.configs.values()))
        t = cfg.compiled()
        n = min(sample_count, chunk)
        a = rng.integers(0, 256, (n, t.nbytes), dtype=np.uint8)
        b = rng.integers(0, 256, (n, t.nbytes), dtype=np.uint8)
        collisions = float(np.mean(t.hash_batch(a) == t.hash_batch(b)))
    return VerificationReport(checked, violations, per, collisions)


def degenerate_key(fieldset: FieldSet, key_bits: int = 416) -> RssKey:
    """A key with a single set bit whose hash only takes the values 0 and 1.

    The bit sits where only the last input bit reaches it, and lands on the
    lowest hash bit, i.e. the one the indirection table looks at.
    """
    return RssKey(1 << (key_bits - fieldset.total_bits - HASH_BITS + 1), key_bits)


# -- synthesis --------------------------------------------------------------------------

def constraints_digest(constraints: PairConstraintSet) -> str:
    text = json.dumps(constraints.to_json(), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class _Problem:
    order: list[str]
    fieldsets: dict[str, FieldSet]
    key_bits: int
    table_size: int
    base: GF2System
    config: KeySearchConfig


def _window_nonzero(key: RssKey, fs: FieldSet) -> bool:
    span = fs.total_bits + HASH_BITS - 1
    return (key.value >> (key.bits - span)) != 0


def _attempt(problem: _Problem, attempt: int):
    cfg = problem.config
    rng = random.Random(f"keygen:{cfg.seed}:{attempt}")
    nvars = problem.key_bits * len(problem.order)
    system, accepted, rounds = soften(problem.base, nvars, cfg.soft_fraction, rng)
    x = system.solution(nvars, rng)
    mask = (1 << problem.key_bits) - 1
    configs = {}
    for n, iface in enumerate(problem.order):
        chunk = x >> (n * problem.key_bits) & mask
        # variable t is key bit t counted from the most significant end
        value = int(format(chunk, f"0{problem.key_bits}b")[::-1], 2)
        key = RssKey(value, problem.key_bits)
        configs[iface] = InterfaceConfig(key, problem.fieldsets[iface],
                                         IndirectionTable.round_robin(cfg.cores, problem.table_size))
    bundle = RssConfigBundle(configs, {})
    if not all(_window_nonzero(c.key, c.fieldset) for c in configs.values()):
        return attempt, bundle, None, rounds
    score = score_distribution(bundle, flow_sample(bundle, cfg.score_flows, seed=cfg.seed),
                               cfg.score_cores, cfg.threshold)
    return attempt, bundle, score, rounds


def synthesize_keys(constraints: PairConstraintSet, fieldsets: dict[str, FieldSet],
                    config: KeySearchConfig | None = None, profile: NicProfile | None = None) -> RssConfigBundle:
    """Keys under which every constrained packet pair hashes equally.

    Attempts are seeded by (seed, attempt number) and judged in attempt
    order, so the result does not depend on the worker count.
    """
    config = config or KeySearchConfig()
    profile = profile or default_profile()
    order = list(constraints.interfaces)
    missing = [i for i in order if i not in fieldsets]
    if missing:
        raise KeygenError(f"no fieldset chosen for interfaces {missing}")
    base = hard_system(constraints, fieldsets, profile.key_bits, order)
    problem = _Problem(order, fieldsets, profile.key_bits, profile.table_size, base, config)
    best = None
    attempts = range(config.max_restarts)
    if config.workers > 1:
        pool = ProcessPoolExecutor(config.workers)
        results = pool.map(_attempt, [problem] * len(attempts), attempts)
    else:
        pool = None
        results = (_attempt(problem, a) for a in attempts)
    try:
        for attempt, bundle, score, rounds in results:
            if score is None:
                continue
            if best is None or score.ratio < best[1].ratio:
                best = (bundle, score)
            if score.accepted:
                bundle.provenance.update({
                    "constraints": constraints_digest(constraints),
                    "seed": str(config.seed),
                    "attempt": str(attempt),
                    "rank": str(base.rank),
                    "score": f"{score.ratio:.4f}",
                })
                return bundle
    finally:
        if pool is not None:
            pool.shutdown(cancel_futures=True)
    raise NoAcceptableKey(f"no acceptable key within {config.max_restarts} attempts",
                          best[0] if best else None, best[1] if best else None)


__all__ = [
    "KeygenError", "FieldsetUnavailable", "NoAcceptableKey", "KeySearchConfig", "select_fieldsets",
    "GF2System", "key_equations", "hard_system", "soften", "DistributionScore", "flow_sample",
    "score_distribution", "VerificationReport", "verify_keys", "degenerate_key", "constraints_digest",
    "synthesize_keys",
]
