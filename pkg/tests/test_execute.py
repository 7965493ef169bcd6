import random

from hypothesis import given, settings, strategies as st

from nfshard.corpus import corpus_entry
from nfshard.nf.execute import BehaviorLog, DROP, Record, exec_sequential, resolve_headers
from nfshard.nf.model import parse_model
from nfshard.nf.packet import Packet, Trace, swap_headers
from nfshard.parsim import TrafficSpec, gen_traffic

from oracles import fw_reference, policer_reference

FW_ENTRY = corpus_entry("fw")
FW = FW_ENTRY.model()
# capacity and expiry small enough that both limits are hit
SMALL_FW = parse_model(FW_ENTRY.path.read_text().replace("CAP: 65536", "CAP: 3").replace("EXP: 1000000", "EXP: 4"))
POLICER = corpus_entry("policer").model()


def actions(log, trace):
    return [(log.get(p.id).action, log.get(p.id).out_iface) for p in trace]


def tiny_trace(draw_ops, gap_max=3):
    """Packets over a 2x2x2x2 field domain so flows collide and expire."""
    packets, t = [], 0
    for k, (iface, s, d, sp, dp, gap) in enumerate(draw_ops):
        t += gap
        packets.append(Packet(k, t, iface, 0, 0, 10 + s, 20 + d, 6, 1000 + sp, 2000 + dp, 64))
    return Trace(packets)


OPS = st.lists(st.tuples(st.sampled_from(["lan", "wan"]), st.integers(0, 1), st.integers(0, 1),
                         st.integers(0, 1), st.integers(0, 1), st.integers(0, 3)), max_size=60)


@settings(max_examples=60, deadline=None)
@given(OPS)
def test_firewall_matches_reference_with_expiry_and_capacity(ops):
    trace = tiny_trace(ops)
    log = exec_sequential(SMALL_FW, trace)
    assert actions(log, trace) == fw_reference(trace, capacity=3, expiry=4)


def test_firewall_matches_reference_on_generated_traffic():
    trace = gen_traffic(TrafficSpec(packets=5000, flows=300, reply_ratio=0.4, unsolicited=0.1), seed=4)
    log = exec_sequential(FW, trace)
    assert actions(log, trace) == fw_reference(trace)


def test_policer_matches_reference():
    rng = random.Random(5)
    packets, t = [], 0
    for k in range(3000):
        t += rng.choice([0, 1, 5, 40])
        iface = rng.choice(["lan", "wan", "wan"])
        packets.append(Packet(k, t, iface, 0, 0, 1, rng.randrange(6), 6, 1, 1, rng.choice([64, 512, 1500, 4000])))
    trace = Trace(packets)
    log = exec_sequential(POLICER, trace)
    assert actions(log, trace) == policer_reference(trace)


def test_reply_takes_swapped_output_of_request():
    log = BehaviorLog()
    req = Packet(0, 0, "lan", 1, 2, 3, 4, 6, 5, 6)
    log.add(0, Record("forward", "wan", (9, 8, 7, 6, 6, 5, 4)))
    reply = Packet(1, 1, "wan", 0, 0, 0, 0, 6, 0, 0, reply_to=0)
    assert resolve_headers(reply, log) == swap_headers((9, 8, 7, 6, 6, 5, 4))
    log.add(0, DROP)
    assert resolve_headers(reply, log) == reply.headers()
    assert req.headers() == (1, 2, 3, 4, 6, 5, 6)


def test_nop_forwards_everything_unchanged():
    model = corpus_entry("nop").model()
    trace = gen_traffic(TrafficSpec(packets=200, reply_ratio=0.5), seed=1)
    log = exec_sequential(model, trace)
    for p in trace:
        r = log.get(p.id)
        assert r.action == "forward" and r.out_iface != p.in_iface
        assert r.headers == resolve_headers(p, log)


def test_log_digest_tracks_content():
    trace = gen_traffic(TrafficSpec(packets=500, reply_ratio=0.3), seed=2)
    a, b = exec_sequential(FW, trace), exec_sequential(FW, trace)
    assert a == b and a.digest() == b.digest()
    b.add(0, DROP)
    assert a.digest() != b.digest()
