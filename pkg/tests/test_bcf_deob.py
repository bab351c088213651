"""Opaque predicate recognition and dead branch removal."""

from __future__ import annotations

import pytest

from deobflab.deobf.bcf import deobfuscate_bcf, find_predicate_blocks, remove_dead_branches
from deobflab.ir import Cfg, Program, build_cfg, parse_program
from deobflab.metrics import IoProtocol, io_equivalence
from deobflab.obfuscator import OPAQUE_X, OPAQUE_Y, ObfConfig, bcf_pass

from conftest import corpus, main_function, obfuscated

# a: plain entry, b: predicate, c: never runs, e: re-tests the predicate register
SHAPE = """
.global x = 0
.global y = 0
func f(1):
a:
    ADD R0, R0, #1
b:
    LDRG R5, @y
    CMP R5, #10
    LDRG R6, @x
    SUB R7, R6, #1
    MUL R8, R6, R7
    MOVLT R8, #0
    ANDS R2, R8, #1
    BEQ e
    B c
c:
    MOV R0, #99
    B e
e:
    CMP R2, #{k}
    B{cond} c
r:
    RET
"""


def _shape(k: int = 0, cond: str = "NE"):
    return parse_program(SHAPE.replace("{k}", str(k)).replace("{cond}", cond))


def test_predicate_and_its_reader_are_both_resolved():
    p = _shape()
    g, ps, removed = deobfuscate_bcf(p.function("f"))
    assert ps.predicate_blocks == {"b", "e"}
    assert ps.forced_edges == {"b": "e", "e": "r"}
    assert removed == ["c"]
    # nothing of the predicate survives, including the re-test
    assert {i.opcode for i in g.instructions()} == {"ADD", "NOP", "B", "RET"}
    assert io_equivalence(p, "f", Program({"f": g}, p.globals)) == 100.0


def test_compare_with_one_is_resolved_and_reported():
    p = _shape(1, "EQ")
    g, ps, removed = deobfuscate_bcf(p.function("f"))
    assert ps.compare_with_one == {"e"}
    assert ps.forced_edges["e"] == "r"
    assert removed == ["c"]


def test_clean_functions_have_no_predicates():
    for p in corpus().values():
        for f in p.functions.values():
            ps = find_predicate_blocks(f)
            assert not ps.predicate_blocks
            g, _, removed = deobfuscate_bcf(f)
            assert g == f and not removed


def test_full_probability_on_a_single_block():
    p = parse_program("func f(1):\ne:\n    ADD R0, R0, #3\n    RET\n")
    q, truth = bcf_pass(p.function("f"), ObfConfig(passes=["bcf"], bcf_prob=100))
    g, ps, removed = deobfuscate_bcf(q)
    assert ps.predicate_blocks == truth.predicate_blocks
    assert set(removed) == truth.dead_blocks
    assert io_equivalence(p, "f", Program({"f": g}, {OPAQUE_X: 0, OPAQUE_Y: 0})) == 100.0


def test_remove_dead_branches():
    nodes = {n: () for n in "abc"}
    g = Cfg("a", nodes, frozenset({("a", "b", "fallthrough")}))
    assert set(remove_dead_branches(g).nodes) == {"a", "b"}
    g = Cfg("a", nodes, frozenset({("a", "b", "fallthrough"), ("b", "c", "uncond")}))
    assert remove_dead_branches(g) == g


@pytest.mark.parametrize("prob", [30, 50, 100])
def test_exact_recovery_on_corpus(prob):
    proto = IoProtocol(15, 15, 30)
    for name, p in corpus().items():
        q, gt = obfuscated(name, ("bcf",), bcf_prob=prob)
        funcs = {}
        for fname, f in q.functions.items():
            g, ps, removed = deobfuscate_bcf(f)
            assert ps.predicate_blocks == gt[fname].predicate_blocks, (name, fname)
            assert set(removed) == gt[fname].dead_blocks, (name, fname)
            assert not ps.unresolved
            funcs[fname] = g
        d = Program(funcs, q.globals)
        assert io_equivalence(p, main_function(p), d, proto=proto) == 100.0, name
        for fname in funcs:
            assert build_cfg(funcs[fname]).n_nodes <= build_cfg(q.function(fname)).n_nodes
