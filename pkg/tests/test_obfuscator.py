"""Obfuscation passes: shapes, ground truth and semantic preservation."""

from __future__ import annotations

import json
import random

import pytest

from deobflab.ir import (
    BasicBlock, Function, Imm, Machine, Program, Reg, build_cfg, compile_program, ins,
    parse_program, serialize_program,
)
from deobflab.ir.interp import adr_value
from deobflab.metrics import IoProtocol, io_equivalence
from deobflab.obfuscator import (
    ObfConfig, ObfuscationError, bcf_pass, cff_pass, inssub_pass, obfuscate, opaque_predicate,
)

from conftest import corpus, main_function, obfuscated

DIAMOND = """
func diamond(2):
entry:
    CMP R0, R1
    BLT left
right:
    SUB R2, R0, R1
    B join
left:
    SUB R2, R1, R0
    B join
join:
    ADD R0, R2, #1
    CMP R0, #100
    BGT big
small:
    RET
big:
    MOV R0, #100
    RET
"""


def _one(src: str) -> Function:
    return next(iter(parse_program(src).functions.values()))


def test_config_validation():
    with pytest.raises(ValueError):
        ObfConfig(bcf_prob=0)
    with pytest.raises(ValueError):
        ObfConfig(split_num=9)
    with pytest.raises(ValueError):
        ObfConfig(passes=["virtualize"])


def test_no_passes_is_identity():
    p = corpus()["gcd"]
    q, gt = obfuscate(p, ObfConfig(passes=()))
    assert serialize_program(q) == serialize_program(p)
    assert gt.empty


def test_same_seed_same_bytes():
    p = corpus()["roman"]
    a, ga = obfuscate(p, ObfConfig(split_num=2))
    b, gb = obfuscate(p, ObfConfig(split_num=2))
    assert serialize_program(a) == serialize_program(b)
    assert ga.to_json() == gb.to_json()
    c, _ = obfuscate(p, ObfConfig(split_num=2, seed=7))
    assert serialize_program(c) != serialize_program(a)


def test_all_passes_on_gcd_change_code_but_not_behaviour():
    p = corpus()["gcd"]
    q, _ = obfuscate(p, ObfConfig())
    assert serialize_program(q) != serialize_program(p)
    assert io_equivalence(p, "gcd", q) == 100.0


def _site_for(op_text: str, wanted: int) -> list[str]:
    fn = _one(f"func f(3):\ne:\n    {op_text}\n    RET\n")
    for seed in range(500):
        g, truth = inssub_pass(fn, ObfConfig(passes=["inssub"], seed=seed))
        if truth.substituted_sites[0].pattern_id == wanted:
            return [i.text() for i in g.blocks[0].instructions]
    raise AssertionError(f"pattern {wanted} never drawn")


def test_add_variant_three_shape():
    seq = _site_for("ADD R0, R1, R2", 3)
    mov, first, second, third, ret = seq
    r = mov.split()[1].rstrip(",")
    assert mov.startswith(f"MOV {r}, #")
    assert first == f"ADD R0, R1, {r}"
    assert second == "ADD R0, R0, R2"
    assert third == f"SUB R0, R0, {r}"


def test_eor_variant_with_cancelling_r():
    seq = _site_for("EOR R0, R1, R2", 13)
    assert [s.split()[0] for s in seq] == ["MOV", "EOR", "EOR", "EOR", "RET"]
    assert seq[1].split(", ")[1] == "R1" and seq[2].split(", ")[1] == "R2"


def test_inssub_leaves_functions_without_candidates_alone():
    fn = _one("func f(1):\ne:\n    MUL R0, R0, R0\n    RET\n")
    g, truth = inssub_pass(fn, ObfConfig(passes=["inssub"]))
    assert g == fn
    assert not truth.substituted_sites


def test_inssub_records_skips_when_registers_run_out():
    body = "\n".join(f"    MOV R{k}, #{k}" for k in range(4, 12))
    fn = _one(f"func f(2):\ne:\n{body}\n    ADD R0, R0, R1\n    RET\n")
    g, truth = inssub_pass(fn, ObfConfig(passes=["inssub"]))
    assert truth.skipped_sites and not truth.substituted_sites
    assert g == fn


def test_bcf_full_probability_on_single_block():
    fn = _one("func f(1):\ne:\n    ADD R0, R0, #3\n    RET\n")
    g, truth = bcf_pass(fn, ObfConfig(passes=["bcf"], bcf_prob=100))
    assert len(truth.predicate_blocks) == 1 and len(truth.dead_blocks) == 1
    assert len(g.blocks) == 3


def test_opaque_predicate_is_a_tautology():
    pred = opaque_predicate(Reg(4), Reg(5), Reg(6), "yes", "no")
    fn = Function("t", 2, (
        BasicBlock("e", (ins("STRG", Reg(0), "@x"), ins("STRG", Reg(1), "@y"))),
        BasicBlock("p", tuple(pred)),
        BasicBlock("yes", (ins("MOV", Reg(0), Imm(1)), ins("RET"))),
        BasicBlock("no", (ins("MOV", Reg(0), Imm(0)), ins("RET"))),
    )).with_layout()
    cp = compile_program(Program({"t": fn}, {"x": 0, "y": 0}))
    for x in range(-128, 128):
        for y in range(-128, 128):
            assert cp.run("t", [x & 0xFFFFFFFF, y & 0xFFFFFFFF]).return_value == 1, (x, y)


def test_dead_blocks_never_execute():
    p = corpus()["bubble4"]
    q, gt = obfuscate(p, ObfConfig(passes=["bcf"], bcf_prob=100))
    fn = main_function(p)
    dead_addrs = set()
    for name, f in q.functions.items():
        for b in f.blocks:
            if b.label in gt[name].dead_blocks:
                dead_addrs |= {i.address for i in b.instructions}
    assert dead_addrs
    rng = random.Random(5)
    for xv, yv in [(0, 0), (3, 50), (-7, 9), (12345, -1)]:
        prog = q.with_globals(x=xv, y=yv)
        for _ in range(5):
            hits = []
            Machine(prog, trace=lambda fname, inst, regs, flags: hits.append(inst.address)).run(
                fn, [rng.getrandbits(32) for _ in range(q.function(fn).arity)])
            assert not dead_addrs & set(hits)


def test_cff_diamond_shape():
    fn = _one(DIAMOND)
    g, truth = cff_pass(fn, ObfConfig(passes=["cff"]))
    pre = truth.dispatchers[0]
    cfg = build_cfg(g)
    disp = set(truth.dispatchers)
    for b in g.blocks:
        if b.label in disp or not g.successors(b.label):
            continue
        assert b.instructions[-1].text() == f"B {pre}"
        assert cfg.out_degree(b.label) == 1
    assert cfg.in_degree(pre) > 2
    assert set(truth.case_values) == {"right", "left", "join", "small", "big"}
    assert io_equivalence(Program({"diamond": fn}), "diamond", Program({"diamond": g})) == 100.0


def test_case_values_follow_the_adr_rule():
    for name in ("gcd", "roman", "itoa"):
        q, gt = obfuscated(name, ("cff",))
        for fname, f in q.functions.items():
            t = gt[fname]
            if not t.case_values:
                continue
            assert len(set(t.case_values.values())) == len(t.case_values)
            for d in t.dispatchers:
                blk = f.block(d)
                adr, _, br = blk.instructions[:3]
                assert t.case_values[br.target] == adr_value(adr) == (adr.address + 8 + adr.src1.value) & 0xFFFFFFFF


def test_cff_refuses_a_busy_routing_register():
    fn = _one("func f(1):\ne:\n    MOV R12, #1\n    CMP R0, #0\n    BEQ z\nn:\n    RET\nz:\n    MOV R0, R12\n    RET\n")
    with pytest.raises(ObfuscationError):
        cff_pass(fn, ObfConfig(passes=["cff"]))


def test_cff_skips_single_block_functions():
    fn = _one("func f(1):\ne:\n    ADD R0, R0, #1\n    RET\n")
    g, truth = cff_pass(fn, ObfConfig(passes=["cff"]))
    assert g == fn and not truth.case_values


def test_split_pieces_become_cases():
    q, gt = obfuscated("hash", ("cff",), split_num=3)
    t = gt[main_function(q)]
    assert t.split_pieces
    for pieces in t.split_pieces.values():
        for piece in pieces[1:]:
            assert piece in t.case_values


def test_synthetic_prologue_when_entry_is_a_loop_head():
    q, gt = obfuscated("digital_root", ("cff",))
    t = gt["digital_root"]
    assert t.synthetic_prologue
    assert t.prologue == q.function("digital_root").entry
    assert t.original_cfg.entry in t.case_values


def test_ground_truth_json_shape():
    _, gt = obfuscated("gcd", ("inssub", "bcf", "cff"))
    data = json.loads(json.dumps(gt.to_json()))
    entry = data["functions"]["gcd"]
    for key in ("case_values", "predicate_blocks", "dead_blocks", "substituted_sites"):
        assert key in entry
    assert entry["substituted_sites"][0]["op"] in {"ADD", "SUB", "AND", "ORR", "EOR"}


@pytest.mark.parametrize("passes", [("inssub",), ("bcf",), ("cff",), ("inssub", "bcf", "cff")])
def test_corpus_semantics_preserved_quick(passes):
    proto = IoProtocol(20, 20, 60)
    for name, p in corpus().items():
        q, _ = obfuscated(name, passes)
        assert io_equivalence(p, main_function(p), q, proto=proto) == 100.0, name
