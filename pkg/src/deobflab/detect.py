"""Fingerprint which obfuscations a function carries.

Flattening shows up as dispatcher blocks of the shape::

    ADR  Rt, #alpha
    CMP  Rr, Rt
    B<c> case

whose routing value is ``address(ADR) + 8 + alpha``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .analysis import constant_registers
from .ir.interp import adr_value
from .ir.model import BasicBlock, Function, Imm, Instruction, IRError, Reg, to_unsigned
from .deobf.inssub import match_substitutions


class DetectionError(IRError):
    pass


@dataclass
class DispatcherDict:
    entries: dict[str, int] = field(default_factory=dict)  # dispatcher label -> value
    targets: dict[str, str] = field(default_factory=dict)  # dispatcher label -> case block
    routing_register: Reg | None = None
    temp_registers: set[int] = field(default_factory=set)

    @property
    def values(self) -> set[int]:
        return set(self.entries.values())

    def target_of(self, value: int) -> str | None:
        for d, v in self.entries.items():
            if v == value:
                return self.targets[d]
        return None

    def __bool__(self) -> bool:
        return bool(self.entries)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class DetectionReport:
    inssub: bool = False
    bcf: bool = False
    cff: bool = False
    dispatcher_labels: set[str] = field(default_factory=set)
    routing_register: Reg | None = None
    error: str | None = None

    def to_json(self) -> dict:
        return {
            "inssub": self.inssub,
            "bcf": self.bcf,
            "cff": self.cff,
            "dispatcher_labels": sorted(self.dispatcher_labels),
            "routing_register": str(self.routing_register) if self.routing_register else None,
            "error": self.error,
        }


def _live(insts) -> list[Instruction]:
    return [i for i in insts if i.opcode != "NOP"]


def dispatcher_shape(b: BasicBlock) -> tuple[Instruction, Reg, str] | None:
    """``(adr, routing register, case label)`` if ``b`` is a dispatcher."""
    insts = _live(b.instructions)
    if len(insts) not in (3, 4):
        return None
    adr, cmp, br = insts[:3]
    if adr.opcode != "ADR" or adr.conditional:
        return None
    if cmp.opcode != "CMP" or cmp.conditional or not br.is_branch or not br.conditional:
        return None
    if len(insts) == 4 and not (insts[3].is_branch and not insts[3].conditional):
        return None
    t = adr.dest
    if cmp.src2 == t and isinstance(cmp.src1, Reg) and cmp.src1 != t:
        routing = cmp.src1
    elif cmp.src1 == t and isinstance(cmp.src2, Reg) and cmp.src2 != t:
        routing = cmp.src2
    else:
        return None
    return adr, routing, br.target


def build_dispatcher_dict(f: Function) -> DispatcherDict:
    d = DispatcherDict()
    for b in f.blocks:
        shape = dispatcher_shape(b)
        if shape is None:
            continue
        adr, routing, target = shape
        if d.routing_register is not None and routing != d.routing_register:
            raise DetectionError(
                f"{f.name}: dispatchers disagree on the routing register "
                f"({d.routing_register} vs {routing} in {b.label})")
        d.routing_register = routing
        d.entries[b.label] = adr_value(adr)
        d.targets[b.label] = target
        d.temp_registers.add(adr.dest.index)
    return d


def unreferenced_cases(f: Function, d: DispatcherDict) -> set[str]:
    """Case blocks whose value no routing move ever loads."""
    routing = d.routing_register
    consts = constant_registers(f)
    used = set()
    for inst in f.instructions():
        if inst.opcode == "MOV" and inst.dest == routing:
            if isinstance(inst.src1, Imm):
                used.add(to_unsigned(inst.src1.value))
            elif inst.src1.index in consts:
                used.add(consts[inst.src1.index])
    return {d.targets[k] for k, v in d.entries.items() if v not in used}


def _is_imm(op, value: int) -> bool:
    return isinstance(op, Imm) and op.value == value


def parity_chain(insts) -> tuple[list[int], Reg] | None:
    """Find ``SUB t,x,#1; MUL u,x,t; [MOV<c> u,#0;] ANDS v,u,#1``.

    Returns the chain positions and the ANDS result register."""
    for i, sub in enumerate(insts):
        if sub.opcode != "SUB" or sub.conditional or not isinstance(sub.src1, Reg) \
                or not _is_imm(sub.src2, 1):
            continue
        x, t = sub.src1, sub.dest
        if x == t:
            continue
        for j in range(i + 1, len(insts)):
            mul = insts[j]
            if mul.opcode == "MUL" and not mul.conditional and {mul.src1, mul.src2} == {x, t}:
                u = mul.dest
                chain = [i, j]
                for k in range(j + 1, len(insts)):
                    ins_k = insts[k]
                    if ins_k.opcode == "ANDS" and ins_k.src1 == u and not ins_k.conditional \
                            and _is_imm(ins_k.src2, 1):
                        return chain + [k], ins_k.dest
                    if ins_k.opcode == "MOV" and ins_k.conditional and ins_k.dest == u \
                            and _is_imm(ins_k.src1, 0):
                        chain.append(k)
                        continue
                    if u.index in ins_k.writes():
                        break
                break
            if x.index in mul.writes() or t.index in mul.writes():
                break
    return None


def compares_with_ten(insts) -> list[int]:
    return [k for k, i in enumerate(insts)
            if i.opcode == "CMP" and isinstance(i.src1, Reg) and _is_imm(i.src2, 10)]


def has_bcf_fingerprint(f: Function) -> bool:
    succ = {b.label: {t for t, _ in f.successors(b.label)} for b in f.blocks}
    tens = {b.label for b in f.blocks if compares_with_ten(b.instructions)}
    for b in f.blocks:
        if parity_chain(b.instructions) is None:
            continue
        if b.label in tens:
            return True
        if any(b.label in succ[g] for g in tens):
            return True
    return False


def detect_obfuscations(f: Function) -> DetectionReport:
    rep = DetectionReport()
    try:
        d = build_dispatcher_dict(f)
    except DetectionError as exc:
        rep.error = str(exc)
        d = DispatcherDict()
    rep.cff = bool(d)
    rep.dispatcher_labels = set(d.entries)
    rep.routing_register = d.routing_register
    rep.bcf = has_bcf_fingerprint(f)
    rep.inssub = bool(match_substitutions(f))
    return rep
