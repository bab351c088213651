"""Find opaque predicates, pin their branches and drop the dead code.

The predicate family is recognised structurally: a parity chain
``SUB t,x,#1; MUL u,x,t; ANDS v,u,#1`` always clears the low bit, so the
flags it leaves are ``Z=1, N=0`` and the register ``v`` holds zero.  A
``y < 10`` guard can only push ``u`` to zero as well, so it never changes
that outcome.  Later compares of ``v`` against 0 or 1 are resolved too.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from ..analysis import constant_registers, liveness, transfer
from ..detect import (DetectionError, DispatcherDict, build_dispatcher_dict, compares_with_ten,
                      parity_chain, unreferenced_cases)
from ..ir.cfg import Cfg, build_cfg
from ..ir.interp import cond_holds
from ..ir.model import NOP, BasicBlock, Function, Imm, Instruction, Reg, to_unsigned
from .inssub import TaintMap


@dataclass
class Decision:
    """Where a block's flag-consuming terminator goes and why."""

    outcome: bool
    consumer: int  # index of the branch or conditional routing move
    flattened: bool
    target: str | None


@dataclass
class PredicateSet:
    predicate_blocks: set[str] = field(default_factory=set)
    forced_edges: dict[str, str | None] = field(default_factory=dict)
    decisions: dict[str, Decision] = field(default_factory=dict)
    computation: dict[str, set[int]] = field(default_factory=dict)
    guards: set[str] = field(default_factory=set)
    compare_with_one: set[str] = field(default_factory=set)
    taint: TaintMap = field(default_factory=TaintMap)
    unresolved: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "predicates": sorted(self.predicate_blocks),
            "forced_edges": dict(sorted(self.forced_edges.items())),
            "guards": sorted(self.guards),
            "compare_with_one": sorted(self.compare_with_one),
            "unresolved": list(self.unresolved),
        }


def _safe_dict(f: Function) -> DispatcherDict:
    try:
        return build_dispatcher_dict(f)
    except DetectionError:
        return DispatcherDict()


def _flag_consumer(b: BasicBlock, after: int, routing: Reg | None) -> tuple[int, bool] | None:
    """First instruction after ``after`` that decides the successor from
    the flags: a conditional branch, or a conditional move into the
    routing register.  ``None`` if the flags are overwritten first."""
    insts = b.instructions
    for k in range(after + 1, len(insts)):
        inst = insts[k]
        if inst.is_branch and inst.conditional:
            return k, False
        if routing is not None and inst.conditional and inst.dest == routing:
            return k, True
        if inst.sets_flags:
            return None
    return None


def _successor_for(f: Function, b: BasicBlock, k: int, flattened: bool, outcome: bool,
                   d: DispatcherDict, consts: dict[int, int]) -> str | None:
    insts = b.instructions
    if not flattened:
        succ = dict((kind, t) for t, kind in f.successors(b.label))
        return succ.get("true" if outcome else "false")
    routing = insts[k].dest
    if outcome:
        src = insts[k].src1
    else:
        prev = [i for i in insts[:k] if i.dest == routing and not i.conditional]
        if not prev:
            return None
        src = prev[-1].src1
    value = to_unsigned(src.value) if isinstance(src, Imm) else consts.get(src.index)
    return None if value is None else d.target_of(value)


def _known_zero(f: Function, chains: dict[str, tuple[list[int], Reg]]):
    """Must-analysis of registers holding a parity-chain result.

    Returns the facts at each block entry and the per-block transfer
    function (which can stop early at a given index)."""
    everything = set(range(16))
    preds: dict[str, list[str]] = {b.label: [] for b in f.blocks}
    for b in f.blocks:
        for t, _ in f.successors(b.label):
            preds[t].append(b.label)
    inn = {b.label: (set() if b.label == f.entry else set(everything)) for b in f.blocks}
    out = {b.label: set(everything) for b in f.blocks}

    def run(b: BasicBlock, facts: set[int], upto: int | None = None) -> set[int]:
        facts = set(facts)
        chain = chains.get(b.label)
        ands = chain[0][-1] if chain else None
        for k, inst in enumerate(b.instructions[:upto]):
            facts -= inst.writes()
            if k == ands:
                facts.add(chain[1].index)
        return facts

    changed = True
    while changed:
        changed = False
        for b in f.blocks:
            if b.label != f.entry:
                ps = [out[p] for p in preds[b.label]]
                new_in = set.intersection(*ps) if ps else set()
            else:
                new_in = set()
            new_out = run(b, new_in)
            if new_in != inn[b.label] or new_out != out[b.label]:
                inn[b.label], out[b.label] = new_in, new_out
                changed = True
    return inn, run


def find_predicate_blocks(f: Function, d: DispatcherDict | None = None) -> PredicateSet:
    d = _safe_dict(f) if d is None else d
    routing = d.routing_register
    consts = constant_registers(f)
    ps = PredicateSet()
    chains: dict[str, tuple[list[int], Reg]] = {}
    for b in f.blocks:
        found = parity_chain(b.instructions)
        if found is not None:
            chains[b.label] = found

    def loaded(b: BasicBlock, positions) -> set[int]:
        regs = set()
        for k in positions:
            regs |= b.instructions[k].reads()
        return {k for k, i in enumerate(b.instructions)
                if i.opcode == "LDRG" and i.dest.index in regs}

    def record(b: BasicBlock, k: int, flattened: bool, outcome: bool, comp: set[int]) -> None:
        target = _successor_for(f, b, k, flattened, outcome, d, consts)
        ps.predicate_blocks.add(b.label)
        ps.decisions[b.label] = Decision(outcome, k, flattened, target)
        ps.forced_edges[b.label] = target
        ps.computation[b.label] = comp
        if target is None:
            ps.unresolved.append(b.label)

    # parity chains: Z=1, N=0 after the ANDS
    for label, (positions, v) in chains.items():
        b = f.block(label)
        found = _flag_consumer(b, positions[-1], routing)
        if found is None:
            continue
        k, flattened = found
        outcome = cond_holds(b.instructions[k].cond, False, True)
        comp = set(positions) | set(compares_with_ten(b.instructions[:positions[-1]]))
        comp |= loaded(b, comp)
        record(b, k, flattened, outcome, comp)
        ps.taint.taint(v.index, b.instructions[positions[-1]].address)

    # y < 10 guards in front of a parity block: steer them into it
    for b in f.blocks:
        if b.label in ps.predicate_blocks:
            continue
        tens = compares_with_ten(b.instructions)
        if not tens:
            continue
        found = _flag_consumer(b, tens[-1], routing)
        if found is None:
            continue
        k, flattened = found
        for outcome in (True, False):
            nxt = _successor_for(f, b, k, flattened, outcome, d, consts)
            other = _successor_for(f, b, k, flattened, not outcome, d, consts)
            if nxt in chains and ps.forced_edges.get(nxt) == other and other is not None:
                comp = {tens[-1]} | loaded(b, {tens[-1]})
                record(b, k, flattened, outcome, comp)
                ps.guards.add(b.label)
                break

    # compares of a known-zero register against 0 or 1
    zero_in, run = _known_zero(f, chains)
    for b in f.blocks:
        if b.label in ps.predicate_blocks:
            continue
        insts = b.instructions
        for k, inst in enumerate(insts):
            if inst.opcode != "CMP" or not isinstance(inst.src1, Reg) or not isinstance(inst.src2, Imm):
                continue
            if inst.src2.value not in (0, 1):
                continue
            facts = run(b, zero_in[b.label], k)
            if inst.src1.index not in facts:
                continue
            found = _flag_consumer(b, k, routing)
            if found is None:
                continue
            c, flattened = found
            n, z = (False, True) if inst.src2.value == 0 else (True, False)
            outcome = cond_holds(insts[c].cond, n, z)
            record(b, c, flattened, outcome, {k})
            if inst.src2.value == 1:
                ps.compare_with_one.add(b.label)
            break
    return ps


def resolve_opaque_branches(f: Function, ps: PredicateSet, d: DispatcherDict | None = None) -> Function:
    """Pin each predicate to its live successor, drop unreachable blocks
    (unflattened functions only) and NOP the predicate arithmetic once
    nothing reads it."""
    d = _safe_dict(f) if d is None else d
    blocks = []
    for b in f.blocks:
        dec = ps.decisions.get(b.label)
        if dec is None or b.label in ps.unresolved:
            blocks.append(b)
            continue
        blocks.append(BasicBlock(b.label, _pin(b, dec)))
    g = Function(f.name, f.arity, tuple(blocks), f.base_address)
    if not d:
        g = prune_unreachable(g)
    return _drop_predicate_code(g, ps, d)


def _nop(inst: Instruction) -> Instruction:
    return replace(NOP, address=inst.address)


def _pin(b: BasicBlock, dec: Decision) -> tuple[Instruction, ...]:
    insts = list(b.instructions)
    k = dec.consumer
    br = insts[k]
    if dec.flattened:
        if dec.outcome:
            prev = [i for i in range(k) if insts[i].dest == br.dest and not insts[i].conditional]
            if prev:
                insts[prev[-1]] = _nop(insts[prev[-1]])
            insts[k] = replace(br, cond="AL")
        else:
            insts[k] = _nop(br)
        return tuple(insts)
    pair = k + 1 < len(insts) and insts[k + 1].is_branch
    if dec.outcome:
        if pair:
            insts[k] = _nop(br)
            insts[k + 1] = replace(insts[k + 1], target=br.target)
        else:
            insts[k] = replace(br, cond="AL")
    else:
        insts[k] = _nop(br)
    return tuple(insts)


def _drop_predicate_code(f: Function, ps: PredicateSet, d: DispatcherDict) -> Function:
    # removing a reader can free the code that fed it, so repeat to a fixpoint
    while True:
        g = _drop_once(f, ps, d)
        if g == f:
            return g
        f = g


def _drop_once(f: Function, ps: PredicateSet, d: DispatcherDict) -> Function:
    view = f
    if d:
        # blocks no longer routed to must not keep predicate registers alive
        gone = unreferenced_cases(f, d)
        view = Function(f.name, f.arity, tuple(
            BasicBlock(b.label, b.instructions[len(b.body()):] if b.label in gone else b.instructions)
            for b in f.blocks), f.base_address)
    lv = liveness(view)
    blocks = []
    for b in f.blocks:
        comp = ps.computation.get(b.label)
        if not comp or b.label in ps.unresolved:
            blocks.append(b)
            continue
        insts = list(b.instructions)
        live = set(lv.live_out[b.label])
        for k in range(len(insts) - 1, -1, -1):
            inst = insts[k]
            if k in comp and inst.opcode != "NOP" and not (inst.writes() & live):
                insts[k] = _nop(inst)
                continue
            live = transfer(inst, live)
        blocks.append(BasicBlock(b.label, tuple(insts)))
    return Function(f.name, f.arity, tuple(blocks), f.base_address)


def prune_unreachable(f: Function) -> Function:
    """Delete blocks unreachable from the entry; the function keeps its base."""
    keep = build_cfg(f).reachable()
    if len(keep) == len(f.blocks):
        return f
    return f.with_blocks([b for b in f.blocks if b.label in keep])


def remove_dead_branches(g: Cfg) -> Cfg:
    return g.restrict(g.reachable())


def deobfuscate_bcf(f: Function) -> tuple[Function, PredicateSet, list[str]]:
    """Returns the cleaned function, the predicates found and the labels
    of the blocks that were removed."""
    d = _safe_dict(f)
    ps = find_predicate_blocks(f, d)
    g = resolve_opaque_branches(f, ps, d)
    removed = [lbl for lbl in f.labels if lbl not in set(g.labels)]
    return g, ps, removed
