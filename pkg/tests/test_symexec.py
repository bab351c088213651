"""Symbolic execution engine: stepping, driving, forking and saved states."""

from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deobflab.ir import BasicBlock, Function, Imm, Program, Reg, ins, parse_program
from deobflab.obfuscator import ObfConfig, cff_pass
from deobflab.symexec import (
    BudgetExceeded, Engine, EngineConfig, EngineFault, NoCondMove, Opaque, OpaqueBranch, StateStore,
    SymState, hook_calls, is_concrete, restore_state, save_state,
)

from conftest import machine_trace, random_straight_line

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
    RET
"""


def _block(*insts, arity: int = 4) -> Function:
    return Function("f", arity, (BasicBlock("e", tuple(insts) + (ins("RET"),)),)).with_layout()


@pytest.fixture(scope="module")
def flat():
    fn = parse_program(DIAMOND).function("diamond")
    g, truth = cff_pass(fn, ObfConfig(passes=["cff"]))
    return g, truth


def _routing_fork(flat_fn, truth):
    eng = Engine(flat_fn)
    s = SymState.concrete(truth.prologue, [0, 0])
    s.n, s.z = Opaque.fresh(), Opaque.fresh()
    s.regs[0], s.regs[1] = Opaque.fresh(), Opaque.fresh()
    return eng, eng.fork_at_condmove(s, lambda inst, _s: inst.dest == Reg(12))


# -- single steps --------------------------------------------------------------

def test_mov_of_a_concrete_value():
    eng = Engine(_block(ins("MOV", Reg(1), Imm(5))))
    s = eng.step(SymState.blank("e"))
    assert s.regs[1] == 5 and s.pc == 1


def test_step_leaves_the_input_state_alone():
    eng = Engine(_block(ins("MOV", Reg(1), Imm(5))))
    s0 = SymState.concrete("e", [1, 2])
    eng.step(s0)
    assert s0.regs[1] == 2 and s0.pc == 0


def test_concrete_plus_opaque_is_opaque():
    eng = Engine(_block(ins("MOV", Reg(1), Imm(5)), ins("ADD", Reg(2), Reg(1), Reg(3))))
    s = eng.step(eng.step(SymState.blank("e")))
    assert not is_concrete(s.regs[2])
    assert s.regs[2] != s.regs[3]


def test_mov_of_an_opaque_value_copies_the_symbol():
    eng = Engine(_block(ins("MOV", Reg(1), Reg(3))))
    s = eng.step(SymState.blank("e"))
    assert s.regs[1] is s.regs[3]


def test_forced_flag_decides_and_is_consumed():
    eng = Engine(_block(ins("MOV", Reg(1), Imm(7), cond="EQ"), ins("MOV", Reg(2), Imm(9), cond="EQ")))
    s = SymState.blank("e")
    s.n, s.z = Opaque.fresh(), Opaque.fresh()
    s.forced_flag = 1
    s = eng.step(s)
    assert s.regs[1] == 7 and s.forced_flag is None
    # the next conditional sees opaque flags again and its effect is unknown
    s = eng.step(s)
    assert not is_concrete(s.regs[2])

    s = SymState.concrete("e", [])
    s.z = 1  # EQ holds concretely, but the forced flag wins
    s.forced_flag = 0
    s = eng.step(s)
    assert s.regs[1] == 0


def test_conditional_branch_on_opaque_flags_raises():
    fn = parse_program("func f(1):\ne:\n    CMP R0, #3\n    BEQ z\nn:\n    RET\nz:\n    RET\n").function("f")
    eng = Engine(fn)
    s = eng.step(SymState.blank("e"))
    assert not is_concrete(s.z)
    with pytest.raises(OpaqueBranch):
        eng.step(s)
    s.forced_flag = 1
    assert eng.step(s).block == "z"


def test_unwritten_global_is_opaque_and_written_one_is_not():
    eng = Engine(_block(ins("LDRG", Reg(1), "@g"), ins("STRG", Reg(2), "@g"), ins("LDRG", Reg(3), "@g")))
    s = SymState.concrete("e", [0, 0, 11])
    for _ in range(3):
        s = eng.step(s)
    assert not is_concrete(s.regs[1])
    assert s.regs[3] == 11


def test_step_after_return_is_a_fault():
    eng = Engine(_block())
    s = eng.step(SymState.blank("e"))
    assert s.returned
    with pytest.raises(EngineFault):
        eng.step(s)


# -- calls ---------------------------------------------------------------------

@pytest.mark.parametrize("op", ["BL", "BLX"])
def test_hooked_calls_clobber_only_r0(op):
    fn = _block(ins(op, "g"))
    s = SymState.concrete("e", [1, 2, 3, 4] + [0] * 8 + [0x928])
    out = Engine(fn).step(s)
    assert not is_concrete(out.regs[0])
    assert out.regs[1:] == s.regs[1:]
    assert out.regs[12] == 0x928


def test_unhooked_call_is_a_fault():
    fn = _block(ins("BL", "g"))
    with pytest.raises(EngineFault):
        Engine(fn, EngineConfig()).step(SymState.blank("e"))
    assert Engine(fn, hook_calls(EngineConfig())).cfg.hook_calls


# -- driving -------------------------------------------------------------------

def test_run_until_returns_at_once_on_a_stop_block(flat):
    g, truth = flat
    s = SymState.blank("left")
    label, out = Engine(g).run_until(s, {"left"})
    assert label == "left" and out.steps == 0


def test_run_until_reaches_the_right_case(flat):
    g, truth = flat
    eng = Engine(g)
    for args, want in (([1, 5], "left"), ([5, 1], "right"), ([3, 3], "right")):
        label, s = eng.run_until(SymState.concrete(truth.prologue, args), set(truth.case_values))
        assert label == want
        assert s.regs[12] == truth.case_values[want]


def test_corrupted_routing_exhausts_the_budget(flat):
    g, truth = flat
    eng = Engine(g, hook_calls(EngineConfig(budget=500)))
    s = SymState.concrete(truth.dispatchers[0], [0] * 12 + [0xDEAD])
    with pytest.raises(BudgetExceeded):
        eng.run_until(s, set(truth.case_values))


def test_fork_reaches_both_successors(flat):
    g, truth = flat
    eng, (t, f) = _routing_fork(g, truth)
    stop = set(truth.case_values)
    reached = {eng.run_until(eng.step(x), stop)[0] for x in (t, f)}
    assert reached == {"left", "right"}


def test_forks_differ_only_in_the_forced_flag(flat):
    g, truth = flat
    _, (t, f) = _routing_fork(g, truth)
    assert (t.forced_flag, f.forced_flag) == (1, 0)
    t.forced_flag = f.forced_flag = None
    assert t == f


def test_fork_without_a_conditional_move(flat):
    g, truth = flat
    eng = Engine(g)
    with pytest.raises(NoCondMove):
        eng.fork_at_condmove(SymState.blank("join"), lambda inst, s: inst.dest == Reg(12), set(truth.case_values))


def test_step_out_leaves_the_block(flat):
    g, truth = flat
    s = Engine(g).step_out(SymState.concrete("left", [1, 5]))
    assert s.block != "left" and s.trace[-2:] == ["left", s.block]


# -- saved states --------------------------------------------------------------

def test_state_store_keeps_the_newest_copies():
    store = StateStore(capacity=2)
    assert restore_state(store, "x").block == "x" and not store.has("x")
    for v in (1, 2, 3):
        save_state(store, "x", SymState.concrete("elsewhere", [v]))
    assert len(store) == 2
    assert [s.regs[0] for s in store.candidates("x")] == [3, 2]
    got = store.restore("x")
    assert got.block == "x" and got.pc == 0 and got.regs[0] == 3
    got.regs[0] = 99
    assert store.restore("x").regs[0] == 3
    with pytest.raises(ValueError):
        StateStore(0)


def test_blank_state():
    s = SymState.blank("b")
    assert all(not is_concrete(v) for v in s.regs)
    assert len({id(v) for v in s.regs}) == 16
    assert s.flags == (0, 0) and s.forced_flag is None


# -- properties against the concrete interpreter --------------------------------

def lockstep(p: Program, args: list[int]) -> None:
    eng = Engine(p.function("f"))
    s = SymState.concrete("e", args, p.globals)
    for inst, regs, (n, z) in machine_trace(p, "f", args):
        if inst.opcode == "RET":
            break
        s = eng.step(s)
        assert s.regs == list(regs), inst.text()
        assert (s.n, s.z) == (int(n), int(z)), inst.text()


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32), st.lists(st.integers(0, 2**32 - 1), min_size=4, max_size=4))
def test_lockstep_with_interpreter(seed, args):
    lockstep(random_straight_line(random.Random(seed)), args)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32), st.lists(st.integers(0, 2**32 - 1), min_size=4, max_size=4),
       st.sets(st.integers(0, 11)))
def test_known_values_hold_for_every_concretisation(seed, args, unknown):
    # hide some registers: whatever stays concrete must match the real run
    p = random_straight_line(random.Random(seed))
    eng = Engine(p.function("f"))
    s = SymState.concrete("e", args, p.globals)
    for k in unknown:
        s.regs[k] = Opaque.fresh()
    steps = machine_trace(p, "f", args)
    for inst, regs, (n, z) in steps:
        if inst.opcode == "RET":
            break
        s = eng.step(s)
        for k in range(16):
            if is_concrete(s.regs[k]):
                assert s.regs[k] == regs[k], (inst.text(), k)
        if is_concrete(s.n) and is_concrete(s.z):
            assert (s.n, s.z) == (int(n), int(z))
