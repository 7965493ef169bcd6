import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nfshard.rss import (
    FieldSet,
    FieldsetInapplicable,
    HashInput,
    IndirectionTable,
    InterfaceConfig,
    RssConfigBundle,
    RssEngine,
    RssKey,
    ToeplitzTable,
    core_loads,
    default_profile,
    extract_hash_input,
    load_profile,
    rebalance_table,
    toeplitz_hash,
)
from nfshard.nf.packet import Packet, ip

from oracles import best_assignment_max_load, int_to_bits, toeplitz_reference

FS4 = FieldSet("ipv4-l4", ("ipv4_src", "ipv4_dst", "sport", "dport"))
FS_DST = FieldSet("dst", ("ipv4_dst",))

# Verification key and first vector of the widely published RSS test suite.
MS_KEY = "6d5a56da255b0ec24167253d43a38fb0d0ca2bcbae7b30b477cb2da38030f20c6a42b73bbeac01fa"


def pkt(src, dst, sport=0, dport=0, proto=6):
    return Packet(id=0, time=0, in_iface="lan", ipv4_src=ip(src), ipv4_dst=ip(dst),
                  proto=proto, sport=sport, dport=dport)


def rand_key(rng, bits=416):
    return RssKey(rng.getrandbits(bits), bits)


def test_zero_key_hashes_to_zero():
    data = HashInput(random.Random(1).getrandbits(96), 96)
    assert toeplitz_hash(RssKey(0), data) == 0


def test_zero_input_hashes_to_zero():
    key = rand_key(random.Random(2))
    assert toeplitz_hash(key, HashInput(0, 96)) == 0


def test_first_bit_selects_first_window():
    key = rand_key(random.Random(3))
    assert toeplitz_hash(key, HashInput(1 << 95, 96)) == key.value >> (416 - 32)


def test_matches_reference_on_random_pairs():
    rng = random.Random(1234)
    for _ in range(1000):
        n = rng.choice([8, 16, 32, 64, 96, 104, 200, 384])
        key = rand_key(rng)
        data = HashInput(rng.getrandbits(n), n)
        ref = toeplitz_reference(key.to_bits(), int_to_bits(data.value, n))
        assert toeplitz_hash(key, data) == ref


def test_table_and_batch_agree_with_scalar():
    rng = random.Random(7)
    key = rand_key(rng)
    tbl = ToeplitzTable(key, 96)
    values = [rng.getrandbits(96) for _ in range(300)]
    arr = np.frombuffer(b"".join(v.to_bytes(12, "big") for v in values), dtype=np.uint8).reshape(-1, 12)
    batch = tbl.hash_batch(arr)
    for v, b in zip(values, batch):
        assert tbl.hash_int(v) == toeplitz_hash(key, HashInput(v, 96)) == int(b)


def test_published_vector():
    key = RssKey.from_hex(MS_KEY, 416)
    p = pkt("66.9.149.187", "161.142.100.80", 2794, 1766)
    assert toeplitz_hash(key, extract_hash_input(p, FS4)) == 0x51CCC178
    fs_ip = FieldSet("ipv4", ("ipv4_src", "ipv4_dst"))
    assert toeplitz_hash(key, extract_hash_input(p, fs_ip)) == 0x323E8FC2


def test_input_too_long_rejected():
    with pytest.raises(ValueError):
        toeplitz_hash(RssKey(1, 64), HashInput(1, 40))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**416 - 1), st.integers(0, 2**96 - 1), st.integers(0, 2**96 - 1))
def test_linearity(k, a, b):
    key = RssKey(k)
    assert toeplitz_hash(key, HashInput(a ^ b, 96)) == (
        toeplitz_hash(key, HashInput(a, 96)) ^ toeplitz_hash(key, HashInput(b, 96)))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**416 - 1), st.integers(0, 2**96 - 1), st.integers(96 + 32, 415))
def test_window_property(k, d, flip):
    # hash only reads key bits [0, |d| + 31)
    key = RssKey(k)
    flipped = RssKey(k ^ (1 << (415 - flip)))
    data = HashInput(d, 96)
    assert toeplitz_hash(key, data) == toeplitz_hash(flipped, data)


def test_extract_four_fields():
    p = pkt("1.2.3.4", "5.6.7.8", 0x1111, 0x2222)
    hi = extract_hash_input(p, FS4)
    assert hi.bits == 96
    assert hi.value == 0x01020304_05060708_1111_2222


def test_extract_single_field():
    p = pkt("1.2.3.4", "5.6.7.8", 0x1111, 0x2222)
    assert extract_hash_input(p, FS_DST) == HashInput(0x05060708, 32)


def test_swapped_packets_give_permuted_blocks():
    rng = random.Random(5)
    for _ in range(100):
        s, d, sp, dp = rng.getrandbits(32), rng.getrandbits(32), rng.getrandbits(16), rng.getrandbits(16)
        a = extract_hash_input(Packet(0, 0, "lan", ipv4_src=s, ipv4_dst=d, proto=17, sport=sp, dport=dp), FS4)
        b = extract_hash_input(Packet(0, 0, "wan", ipv4_src=d, ipv4_dst=s, proto=17, sport=dp, dport=sp), FS4)
        blocks = lambda v: [(v >> 64) & 0xFFFFFFFF, v >> 32 & 0xFFFFFFFF, (v >> 16) & 0xFFFF, v & 0xFFFF]
        ba, bb = blocks(a.value), blocks(b.value)
        assert [bb[1], bb[0], bb[3], bb[2]] == ba


def test_extract_rejects_missing_l4():
    with pytest.raises(FieldsetInapplicable):
        extract_hash_input(pkt("1.2.3.4", "5.6.7.8", proto=1), FS4)


def _engine(key, table):
    return RssEngine({"lan": InterfaceConfig(key, FS4, table)})


def test_constant_table_steers_everything_to_one_core():
    rng = random.Random(9)
    eng = _engine(rand_key(rng), IndirectionTable((3,) * 512))
    for _ in range(200):
        p = pkt(rng.getrandbits(32), rng.getrandbits(32), rng.getrandbits(16), rng.getrandbits(16))
        assert eng.steer("lan", p) == 3


def test_zero_key_would_use_entry_zero():
    cfg = InterfaceConfig(RssKey(0), FS4, IndirectionTable.round_robin(8))
    rng = random.Random(10)
    for _ in range(50):
        p = pkt(rng.getrandbits(32), rng.getrandbits(32), 1, 2)
        assert cfg.table.lookup(cfg.hash_packet(p)) == cfg.table.entries[0]
    with pytest.raises(ValueError):
        RssEngine({"lan": cfg})


def test_steering_is_deterministic_and_input_driven():
    rng = random.Random(11)
    eng = _engine(rand_key(rng), IndirectionTable.round_robin(16))
    a = pkt("10.0.0.1", "10.0.0.2", 5, 6)
    b = pkt("10.0.0.1", "10.0.0.2", 5, 6)
    assert eng.steer("lan", a) == eng.steer("lan", b) == eng.steer("lan", a)


def test_index_uses_low_bits():
    t = IndirectionTable.round_robin(16, 512)
    assert t.index(0xABCDE123) == 0x123
    assert t.lookup(0xFFFFFE00) == 0


def test_inapplicable_packet_goes_to_default_queue():
    eng = _engine(rand_key(random.Random(12)), IndirectionTable((5,) * 512))
    assert eng.steer("lan", pkt("1.1.1.1", "2.2.2.2", proto=1)) == 0


def test_table_size_must_be_power_of_two():
    with pytest.raises(ValueError):
        IndirectionTable((0, 1, 2))


# -- rebalancing ---------------------------------------------------------------

def test_rebalance_keeps_balanced_table():
    t = IndirectionTable.round_robin(4, 16)
    assert rebalance_table(t, [1.0] * 16, 4) == t


def test_rebalance_from_single_owner_close_to_mean():
    t = IndirectionTable((0,) * 16)
    out = rebalance_table(t, [1.0] * 16, 4)
    loads = core_loads(out, [1.0] * 16, 4)
    assert max(loads) - 16 / 4 <= 1.0


@pytest.mark.parametrize("seed", range(12))
def test_rebalance_close_to_exhaustive_optimum(seed):
    rng = random.Random(seed)
    n, cores = rng.choice([4, 8]), rng.choice([2, 3, 4])
    loads = [float(rng.randint(0, 20)) for _ in range(n)]
    t = IndirectionTable(tuple(rng.randrange(cores) for _ in range(n)))
    out = rebalance_table(t, loads, cores)
    best = best_assignment_max_load(loads, cores)
    got = max(core_loads(out, loads, cores))
    assert got <= max(core_loads(t, loads, cores))
    assert got - best <= max(loads)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 1000), min_size=16, max_size=16), st.integers(1, 6), st.randoms())
def test_rebalance_never_worse_and_keeps_loads(loads, cores, r):
    t = IndirectionTable(tuple(r.randrange(cores) for _ in range(16)))
    out = rebalance_table(t, loads, cores)
    assert out.size == t.size
    assert max(core_loads(out, loads, cores)) <= max(core_loads(t, loads, cores))
    assert sorted(core_loads(out, loads, cores)) and sum(core_loads(out, loads, cores)) == sum(loads)


# -- profiles and config files ------------------------------------------------

def test_default_profile_has_no_address_only_option():
    prof = default_profile()
    assert prof.key_bits == 416 and prof.table_size == 512
    assert all(set(fs.fields) != {"ipv4_src", "ipv4_dst"} for fs in prof.fieldsets)
    assert "eth_src" not in prof.hashable_fields


def test_generic_profile_loads():
    prof = load_profile("generic")
    assert prof.fieldset("ipv4").total_bits == 64


def test_fieldset_order_enforced():
    with pytest.raises(ValueError):
        FieldSet("bad", ("ipv4_dst", "ipv4_src"))


def test_config_roundtrip():
    rng = random.Random(13)
    bundle = RssConfigBundle(
        {
            "lan": InterfaceConfig(rand_key(rng), FS4, IndirectionTable.round_robin(4)),
            "wan": InterfaceConfig(rand_key(rng), FS_DST, IndirectionTable.round_robin(4)),
        },
        {"seed": "42"},
    )
    text = bundle.to_text()
    again = RssConfigBundle.from_text(text)
    assert again.to_text() == text
    assert again.configs["wan"].key == bundle.configs["wan"].key
    key_line = [l for l in text.splitlines() if l.startswith("key = ")][0]
    assert len(key_line.split()[-1]) == 104
