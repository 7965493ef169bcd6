import random
from collections import Counter

import pytest

from nfshard.corpus import corpus_entry
from nfshard.keygen import KeySearchConfig
from nfshard.nf.execute import DROP, BehaviorLog, Record, exec_sequential, resolve_headers
from nfshard.nf.model import Abstraction, parse_model
from nfshard.nf.packet import Packet, Trace
from nfshard.nf.state import build_state
from nfshard.parsim import (
    SimConfig,
    TrafficSpec,
    check_equivalence,
    check_interchangeable,
    exec_lock_based,
    exec_shared_nothing,
    gen_traffic,
    measure_skew,
    software_steer,
)
from nfshard.parsim.traffic import calibrate_zipf, churn_schedule, flow_identity
from nfshard.pipeline import analyze
from nfshard.rss import IndirectionTable, rebalance_table

FW_ENTRY = corpus_entry("fw")
FW = FW_ENTRY.model()
NAT_ENTRY = corpus_entry("nat")


@pytest.fixture(scope="module")
def fw_bundle():
    return analyze(FW, seed=1, config=KeySearchConfig(seed=1, verify_samples=1000)).bundle


@pytest.fixture(scope="module")
def nat_bundle():
    return analyze(NAT_ENTRY.model(), seed=1, config=KeySearchConfig(seed=1, verify_samples=1000)).bundle


def fw_with(expiry=1_000_000, cap=65536):
    text = FW_ENTRY.path.read_text().replace("EXP: 1000000", f"EXP: {expiry}").replace("CAP: 65536", f"CAP: {cap}")
    return parse_model(text)


# -- shared-nothing ---------------------------------------------------------------------

def test_single_core_is_exactly_sequential(fw_bundle, nat_bundle):
    for entry, bundle in ((FW_ENTRY, fw_bundle), (NAT_ENTRY, nat_bundle)):
        model = entry.model()
        trace = entry.trace(2, packets=3000)
        par, m = exec_shared_nothing(model, bundle.with_tables(IndirectionTable.round_robin(1)), trace, SimConfig(1))
        assert par == exec_sequential(model, trace)
        assert m.per_core_packets == [len(trace)]


def test_nat_parallel_ports_differ_but_are_equivalent(nat_bundle):
    model = NAT_ENTRY.model()
    trace = NAT_ENTRY.trace(4, packets=6000)
    seq = exec_sequential(model, trace)
    par, m = exec_shared_nothing(model, nat_bundle.with_tables(IndirectionTable.round_robin(8)), trace,
                                 SimConfig(8, "replicate"))
    strict = check_equivalence(seq, par)
    loose = check_equivalence(seq, par, model.abstractions)
    assert not strict.equivalent
    assert loose.equivalent and loose.renamings > 0
    assert m.cross_core_accesses == 0


def test_flows_stay_on_one_core(fw_bundle):
    trace = FW_ENTRY.trace(5, packets=4000)
    steer = fw_bundle.with_tables(IndirectionTable.round_robin(8)).engine().steer
    seq = exec_sequential(FW, trace)
    cores: dict = {}
    for p in trace:
        hdr = resolve_headers(p, seq)
        q = p.with_headers(hdr)
        cores.setdefault(flow_identity(q), set()).add(steer(p.in_iface, q))
    assert all(len(c) == 1 for c in cores.values())


def test_cross_core_counter_detects_bad_steering():
    trace = FW_ENTRY.trace(6, packets=3000)
    seq = exec_sequential(FW, trace)
    # hashing each direction's tuple separately splits requests from replies
    par, m = exec_shared_nothing(FW, software_steer({}, 4, salt=1), trace, SimConfig(4, "replicate"))
    assert m.cross_core_accesses > 0
    assert not check_equivalence(seq, par).equivalent


def test_shard_mode_divides_capacity():
    state = build_state(FW, divide=4, shard=FW.written_objects())
    assert state["chain"].capacity == 65536 // 4
    assert state["flows"].capacity == 65536 // 4


def test_metrics_count_every_packet(fw_bundle):
    trace = FW_ENTRY.trace(7, packets=2000)
    _, m = exec_shared_nothing(FW, fw_bundle.with_tables(IndirectionTable.round_robin(5)), trace, SimConfig(5))
    assert m.packets == len(trace) and min(m.per_core_packets) >= 0


# -- lock-based -------------------------------------------------------------------------

def repeat(packets, times, gap=1):
    out = []
    for _ in range(times):
        for p in packets:
            out.append(Packet(len(out), len(out) * gap, p.in_iface, *p.headers(), p.size_bytes))
    return out


def test_established_flows_need_no_write_locks():
    seen, first = set(), []
    for p in gen_traffic(TrafficSpec(packets=400, flows=200), seed=1):
        if p.in_iface == "lan" and flow_identity(p) not in seen:
            seen.add(flow_identity(p))
            first.append(p)
    setup = exec_lock_based(FW, Trace(repeat(first, 1)), SimConfig(8, seed=1))[1]
    steady = exec_lock_based(FW, Trace(repeat(first, 10)), SimConfig(8, seed=1))[1]
    assert setup.write_locks == len({flow_identity(p) for p in first})
    assert steady.write_locks == setup.write_locks
    assert steady.read_locks == 10 * len(first)


def test_policer_takes_a_write_lock_per_packet():
    model = corpus_entry("policer").model()
    spec = TrafficSpec(packets=3000, flows=100, origin="wan")
    trace = gen_traffic(spec, seed=2)
    par, m = exec_lock_based(model, trace, SimConfig(16, seed=2))
    assert m.write_locks == len(trace)
    assert check_equivalence(exec_sequential(model, trace), par).equivalent


def test_lock_mode_is_equivalent_with_expiry_and_full_tables():
    model = fw_with(expiry=50, cap=64)
    trace = gen_traffic(TrafficSpec(packets=5000, flows=200, reply_ratio=0.3, unsolicited=0.1, churn=20), seed=3)
    seq = exec_sequential(model, trace)
    for cores in (2, 5, 16):
        par, m = exec_lock_based(model, trace, SimConfig(cores, seed=cores))
        assert check_equivalence(seq, par).equivalent
        assert m.global_clears > 0


def one_flow(times, cores_of):
    packets = [Packet(k, t, "lan", 1, 2, 10, 20, 6, 1000, 2000) for k, t in enumerate(times)]
    steer = lambda iface, p: cores_of[p.id]
    return Trace(packets), steer


def test_rejuvenation_on_every_core_needs_no_expiry_lock():
    model = fw_with(expiry=10)
    times = list(range(0, 400, 2))
    trace, steer = one_flow(times, {k: k % 4 for k in range(len(times))})
    par, m = exec_lock_based(model, trace, SimConfig(4), steer)
    assert m.expiry_write_locks == 0
    assert m.write_locks == 1  # the allocation
    assert m.global_clears == 0


def test_silent_flow_is_cleared_once():
    model = fw_with(expiry=10)
    times = [0, 1, 2, 3, 50, 51, 52]
    trace, steer = one_flow(times, {k: k % 4 for k in range(len(times))})
    par, m = exec_lock_based(model, trace, SimConfig(4), steer)
    assert m.global_clears == 1
    assert par == exec_sequential(model, trace)


def test_stale_local_copy_is_resynced_not_cleared():
    model = fw_with(expiry=10)
    # core 0 last saw the flow at 0; core 1 refreshed it at 8; core 0 sees it again at 12
    trace, steer = one_flow([0, 8, 12], {0: 0, 1: 1, 2: 0})
    par, m = exec_lock_based(model, trace, SimConfig(2), steer)
    assert m.expiry_write_locks == 1
    assert m.resyncs == 1 and m.global_clears == 0
    assert [par.get(k).action for k in range(3)] == ["forward"] * 3


def test_churn_raises_write_locks():
    writes = []
    for churn in (0, 1, 10, 100):
        trace = gen_traffic(TrafficSpec(packets=20_000, churn=churn), seed=5)
        writes.append(exec_lock_based(FW, trace, SimConfig(4, seed=5))[1].write_locks)
    assert writes == sorted(set(writes))


# -- equivalence checker ------------------------------------------------------------------

def rec(dport, sport=80):
    return Record("forward", "wan", (0, 0, 1, 2, 6, sport, dport))


ABS = (Abstraction("wan", "sport", ()),)


def test_consistent_renaming_is_equivalent():
    seq = BehaviorLog({0: rec(1, 5000), 1: rec(1, 5001), 2: rec(1, 5000)})
    par = BehaviorLog({0: rec(1, 7000), 1: rec(1, 7001), 2: rec(1, 7000)})
    assert check_equivalence(seq, par, ABS).equivalent
    assert not check_equivalence(seq, par).equivalent


def test_inconsistent_and_non_injective_renamings_fail():
    seq = BehaviorLog({0: rec(1, 5000), 1: rec(1, 5000)})
    par = BehaviorLog({0: rec(1, 7000), 1: rec(1, 7001)})
    assert "inconsistent" in check_equivalence(seq, par, ABS).to_text()
    seq = BehaviorLog({0: rec(1, 5000), 1: rec(1, 5001)})
    par = BehaviorLog({0: rec(1, 7000), 1: rec(1, 7000)})
    assert "not injective" in check_equivalence(seq, par, ABS).to_text()


def test_divergence_reported_with_packet_id():
    seq = BehaviorLog({0: rec(1), 1: rec(2), 2: DROP})
    par = BehaviorLog({0: rec(1), 1: DROP, 2: DROP})
    r = check_equivalence(seq, par)
    assert not r.equivalent and r.total_mismatches == 1
    assert r.mismatches[0][0] == 1


# -- traffic ------------------------------------------------------------------------------

def test_zipf_top_flows_share():
    trace = gen_traffic(TrafficSpec(distribution="zipf"), seed=1)
    counts = Counter(flow_identity(p) for p in trace)
    top = sum(n for _, n in counts.most_common(48))
    assert 0.75 <= top / len(trace) <= 0.85
    assert trace.meta["zipf_s"] == calibrate_zipf(1000, 48, 0.80)


def test_no_churn_keeps_the_flow_set():
    trace = gen_traffic(TrafficSpec(packets=20_000, flows=500), seed=2)
    assert len({flow_identity(p) for p in trace}) == 500


def test_churn_is_cyclic():
    spec = TrafficSpec(packets=50_000, flows=20, churn=1)
    trace = gen_traffic(spec, seed=3)
    ids = [flow_identity(p) for p in trace]
    events = churn_schedule(spec, random.Random(0))
    assert len(events) == 50
    assert set(ids[:400]) == set(ids[-400:])  # same active flows at both ends
    assert len(set(ids)) > 20  # replacements did happen in between
    per_slot = Counter(s for _, s in events)
    assert min(per_slot.values()) >= 2


def test_traffic_is_deterministic():
    spec = TrafficSpec(packets=3000, distribution="zipf", churn=10, reply_ratio=0.2, unsolicited=0.1)
    assert gen_traffic(spec, 9).to_text() == gen_traffic(spec, 9).to_text()
    assert gen_traffic(spec, 9).to_text() != gen_traffic(spec, 10).to_text()


# -- skew ---------------------------------------------------------------------------------

def test_single_elephant_is_irreducible(fw_bundle):
    trace = gen_traffic(TrafficSpec(packets=2000, flows=1), seed=1)
    bundle = fw_bundle.with_tables(IndirectionTable.round_robin(16))
    _, m = exec_shared_nothing(FW, bundle, trace, SimConfig(16))
    skew = measure_skew(m, IndirectionTable.round_robin(16), bundle, trace)
    assert skew.max_mean == pytest.approx(16)
    balanced = rebalance_table(IndirectionTable.round_robin(16), skew.histogram, 16)
    assert measure_skew(None, balanced, bundle.with_tables(balanced), trace).max_mean == pytest.approx(16)


def test_rebalancing_lowers_zipf_skew(fw_bundle):
    trace = gen_traffic(TrafficSpec(distribution="zipf"), seed=4)
    table = IndirectionTable.round_robin(16)
    bundle = fw_bundle.with_tables(table)
    before = measure_skew(None, table, bundle, trace)
    balanced = rebalance_table(table, before.histogram, 16)
    after = measure_skew(None, balanced, bundle.with_tables(balanced), trace)
    assert after.max_mean < before.max_mean
    assert sum(after.shares) == pytest.approx(1.0)


# -- interchangeable keys -------------------------------------------------------------------

GATE = """
format: nfmodel/1
name: gate
interfaces: [lan, wan]
constants: {CAP: 64, LIMIT: 3}
state:
  seen: {kind: map, capacity: CAP, key: [ipv4_dst]}
  chain: {kind: dchain, capacity: CAP, expiry: 1000000, map: seen}
  hits: {kind: vector, capacity: CAP, fields: [n]}
pipelines:
  lan: FILTER
  wan: [drop]
blocks:
  count:
    - map_get: {map: seen, key: [ipv4_dst], found: hit, value: idx}
    - if: hit
      then:
        - vector_get: {vector: hits, index: idx, out: h}
        - if: h.n < LIMIT
          then:
            - vector_put: {vector: hits, index: idx, set: {n: h.n + 1}}
            - forward: wan
          else: [drop]
      else:
        - dchain_allocate: {chain: chain, ok: ok, index: idx}
        - if: ok
          then:
            - map_put: {map: seen, key: [ipv4_dst], value: idx}
            - vector_put: {vector: hits, index: idx, set: {n: 1}}
            - forward: wan
          else: [drop]
"""
# packets whose MAC does not name their server are dropped before any state access
MAC_FILTER = """
    - if: (eth_dst & 255) == (ipv4_dst & 255)
      then: [{goto: count}]
      else: [drop]"""


def test_mac_and_ip_keys_interchangeable_when_mismatches_drop():
    model = parse_model(GATE.replace(" FILTER", MAC_FILTER))
    assert check_interchangeable(model, {"lan": ("eth_dst",)}, {"lan": ("ipv4_dst",)})


def test_counter_keys_not_interchangeable():
    model = parse_model(GATE.replace(" FILTER", " [{goto: count}]"))
    assert not check_interchangeable(model, {"lan": ("eth_dst",)}, {"lan": ("ipv4_dst",)})
    assert check_interchangeable(model, None, {"lan": ("ipv4_dst",)})


def test_fw_source_only_vs_four_tuple_interchangeable():
    src_only = {"lan": ("ipv4_src",), "wan": ("ipv4_dst",)}
    four = {"lan": ("ipv4_src", "ipv4_dst", "sport", "dport"), "wan": ("ipv4_dst", "ipv4_src", "dport", "sport")}
    assert check_interchangeable(FW, src_only, four)
    # hashing each interface's tuple as is splits requests from replies
    same = ("ipv4_src", "ipv4_dst", "sport", "dport")
    assert not check_interchangeable(FW, src_only, {"lan": same, "wan": same})
