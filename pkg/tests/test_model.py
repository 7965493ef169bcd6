from pathlib import Path

import pytest

from nfshard.corpus import CORPUS_DIR, load_corpus
from nfshard.nf.model import Expr, ModelError, load_model, parse_model

BASE = """
format: nfmodel/1
name: t
interfaces: [lan, wan]
constants:
  CAP: 16
  GW: "10.0.0.1"
  MAC: "02:00:00:00:00:01"
state:
  flows: {kind: map, capacity: CAP, key: [ipv4_src, sport]}
  chain: {kind: dchain, capacity: CAP, expiry: 100, map: flows}
pipelines:
  lan:
    - map_get: {map: flows, key: [ipv4_src, sport], found: hit, value: idx}
    - if: hit
      then: [{forward: wan}]
      else: [drop]
  wan: [drop]
"""


def violations(text):
    with pytest.raises(ModelError) as e:
        parse_model(text)
    return "\n".join(e.value.violations)


def test_every_corpus_model_parses():
    names = {e.name for e in load_corpus()}
    assert names == {"nop", "sbridge", "dbridge", "policer", "fw", "psd", "nat", "cl", "lb"}
    for path in sorted(Path(CORPUS_DIR).glob("*.yaml")):
        if path.name == "index.yaml":
            continue
        m = load_model(path)
        assert m.name == path.stem
        assert set(m.pipelines) == set(m.interfaces)


def test_constants_accept_ints_addresses_and_macs():
    m = parse_model(BASE)
    assert m.constants["CAP"] == 16
    assert m.constants["GW"] == (10 << 24) + 1
    assert m.constants["MAC"] == 0x020000000001


def test_zero_capacity_rejected():
    assert "capacity must be positive" in violations(BASE.replace("CAP: 16", "CAP: 0"))


def test_unterminated_path_rejected():
    text = BASE.replace("  wan: [drop]", "  wan:\n    - let: {x: sport + 1}")
    assert "unterminated path" in violations(text)


def test_goto_cycle_reports_loop():
    text = BASE.replace("  wan: [drop]", "  wan: [{goto: a}]") + """
blocks:
  a: [{goto: b}]
  b: [{goto: a}]
"""
    assert "loop detected" in violations(text)


def test_unknown_state_object_and_width_mismatch():
    text = BASE.replace("map: flows, key: [ipv4_src, sport], found", "map: nope, key: [ipv4_src, sport], found")
    assert "unknown state object 'nope'" in violations(text)
    text = BASE.replace("map: flows, key: [ipv4_src, sport], found", "map: flows, key: [ipv4_src], found")
    assert "48" in violations(text)


def test_all_violations_reported_together():
    text = BASE.replace("CAP: 16", "CAP: 0").replace("  wan: [drop]", "  wan: [{forward: nowhere}]")
    v = violations(text)
    assert "capacity" in v and "unknown interface" in v


def test_missing_pipeline_rejected():
    assert "no pipeline for interface 'wan'" in violations(BASE.replace("  wan: [drop]\n", ""))


@pytest.mark.parametrize("bad", ["__import__('os')", "x.y.z", "open(1)", "'text'", "[1, 2]", "lambda: 1"])
def test_expression_whitelist(bad):
    with pytest.raises(SyntaxError):
        Expr.parse(bad)


@pytest.mark.parametrize("good", ["a + 1", "min(a, b.c)", "a >= 3 and not b", "(x ^ 5) % 64", "a != b"])
def test_expression_whitelist_accepts(good):
    Expr.parse(good)


def test_vector_init_list_and_dict():
    doc_list = BASE.replace("pipelines:", "  v: {kind: vector, capacity: 4, fields: [x], init: [1, 2, 3, 4]}\npipelines:")
    doc_dict = BASE.replace("pipelines:", "  v: {kind: vector, capacity: 4, fields: [x], init: {2: 7}}\npipelines:")
    assert parse_model(doc_list).state["v"].init == [1, 2, 3, 4]
    assert parse_model(doc_dict).state["v"].init == {2: 7}


def test_written_objects():
    m = load_model(Path(CORPUS_DIR) / "fw.yaml")
    assert m.written_objects() == {"flows", "chain"}
    m = load_model(Path(CORPUS_DIR) / "sbridge.yaml")
    assert m.written_objects() == set()
