from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from nfshard.nf.state import DChainState, MapState, ReadOnlyViolation, SketchState, VectorState


def test_allocation_takes_lowest_free_index():
    c = DChainState("c", 4, expiry=10)
    assert [c.allocate(0) for _ in range(3)] == [0, 1, 2]
    c.expire(1)
    assert c.allocate(1) == 1
    assert c.allocate(1) == 3
    assert c.allocate(1) is None  # full, nothing expired


def test_expiry_boundary():
    c = DChainState("c", 2, expiry=10)
    i = c.allocate(5)
    assert not c.expired(i, 15)
    assert c.expired(i, 16)


def test_full_chain_reclaims_expired_entries():
    c = DChainState("c", 2, expiry=10)
    c.allocate(0)
    c.allocate(5)
    assert c.allocate(11) == 0  # index 0 expired at 11, index 1 still live
    assert c.clears == 1


def test_expire_forgets_map_entry():
    m = MapState("m", 4)
    c = DChainState("c", 4, expiry=10)
    m.chain, c.maps = c, [m]
    idx = c.allocate(0)
    m.put(42, idx)
    c.expire(idx)
    assert m.get(42) is None


def test_full_map_refuses_new_keys_but_updates_existing():
    m = MapState("m", 2)
    assert m.put(1, 10) and m.put(2, 20)
    assert not m.put(3, 30)
    assert m.put(1, 11) and m.get(1) == 11


def test_read_only_objects_refuse_writes():
    m = MapState("m", 2, read_only=True)
    with pytest.raises(ReadOnlyViolation):
        m.put(1, 1)
    v = VectorState("v", 2, ("x",), read_only=True)
    with pytest.raises(ReadOnlyViolation):
        v.put(0, {"x": 1})


def test_vector_bounds():
    v = VectorState("v", 2, ("x", "y"))
    v.put(1, {"y": 5})
    assert v.get(1) == (0, 5)
    with pytest.raises(IndexError):
        v.get(2)


def test_aging_copies():
    c = DChainState("c", 2, expiry=10, copies=3)
    i = c.allocate(0)
    assert [c.last[k][i] for k in range(3)] == [0, 0, 0]
    c.rejuvenate(i, 8, copy=1)
    assert c.newest(i) == 8
    assert c.expired(i, 11, copy=0) and not c.expired(i, 11)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 2**64 - 1), min_size=1, max_size=60))
def test_sketch_never_undercounts(keys):
    s = SketchState("s", 64, depth=3)
    for k in keys:
        s.touch(k)
    for k, n in Counter(keys).items():
        assert s.query(k) >= n


def test_sketch_separates_keys_sharing_low_bits():
    # keys that agree on their low 32 bits must still land in different columns
    s = SketchState("s", 65536, depth=5)
    keys = [(a << 32) | 0xDEADBEEF for a in range(8)]
    for k in keys:
        for _ in range(3):
            s.touch(k)
    assert [s.query(k) for k in keys] == [3] * 8


def test_sketch_seeded_by_name():
    a, b, a2 = SketchState("a", 1024), SketchState("b", 1024), SketchState("a", 1024)
    assert a.params == a2.params != b.params
