"""Program model for the mini instruction set.

Everything here is immutable; transforms build new objects with
``dataclasses.replace`` and re-run :meth:`Function.with_layout` when the
instruction count changes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator, Union

MASK = 0xFFFFFFFF
WORD = 4
DEFAULT_BASE = 0x800

OPCODES = (
    "MOV", "MVN", "ADD", "SUB", "RSB", "MUL", "AND", "ORR", "EOR",
    "CMP", "ANDS", "SUBS", "ADR", "B", "BL", "BLX", "RET", "NOP",
    "OUT", "LDRG", "STRG",
)
CONDS = ("AL", "EQ", "NE", "LT", "GT", "LE", "GE")

# Rd, Rn, op2
ALU_OPS = frozenset({"ADD", "SUB", "RSB", "MUL", "AND", "ORR", "EOR", "ANDS", "SUBS"})
COMMUTATIVE = frozenset({"ADD", "MUL", "AND", "ORR", "EOR", "ANDS"})
FLAG_SETTERS = frozenset({"CMP", "ANDS", "SUBS"})
CALLS = frozenset({"BL", "BLX"})
MOVES = frozenset({"MOV", "MVN"})

# pseudo register index standing for the N/Z flag pair in dataflow sets
FLAGS = 16
ARG_REGS = (0, 1, 2, 3)


class IRError(ValueError):
    """A program violates a structural invariant of the model."""


def to_signed(value: int) -> int:
    value &= MASK
    return value - (1 << 32) if value & 0x80000000 else value


def to_unsigned(value: int) -> int:
    return value & MASK


@dataclass(frozen=True, slots=True)
class Reg:
    index: int

    def __post_init__(self) -> None:
        if not 0 <= self.index <= 15:
            raise IRError(f"register index out of range: {self.index}")

    def __str__(self) -> str:
        return f"R{self.index}"


@dataclass(frozen=True, slots=True)
class Imm:
    """32-bit immediate, stored in signed form."""

    value: int

    def __post_init__(self) -> None:
        if not -(1 << 31) <= self.value <= MASK:
            raise IRError(f"immediate does not fit in 32 bits: {self.value}")
        object.__setattr__(self, "value", to_signed(self.value))

    def __str__(self) -> str:
        return f"#{self.value}"


Operand = Union[Reg, Imm]


def _regs_of(*operands: Operand | None) -> set[int]:
    return {op.index for op in operands if isinstance(op, Reg)}


@dataclass(frozen=True, slots=True)
class Instruction:
    """One 4-byte instruction slot.

    Operand placement by opcode:

    * ``MOV/MVN Rd, op`` -> dest, src1
    * ``ALU Rd, Rn, op`` -> dest, src1, src2
    * ``CMP Rn, op`` -> src1, src2
    * ``ADR Rd, #alpha`` -> dest, src1 (Imm)
    * ``B/BL/BLX label`` -> target
    * ``OUT op`` -> src1
    * ``LDRG Rd, @g`` -> dest, glob; ``STRG Rs, @g`` -> src1, glob
    """

    opcode: str
    cond: str = "AL"
    dest: Reg | None = None
    src1: Operand | None = None
    src2: Operand | None = None
    target: str | None = None
    glob: str | None = None
    address: int = 0

    def __post_init__(self) -> None:
        if self.opcode not in OPCODES:
            raise IRError(f"unknown opcode {self.opcode!r}")
        if self.cond not in CONDS:
            raise IRError(f"unknown condition {self.cond!r}")

    @property
    def conditional(self) -> bool:
        return self.cond != "AL"

    @property
    def is_branch(self) -> bool:
        return self.opcode == "B"

    @property
    def is_call(self) -> bool:
        return self.opcode in CALLS

    @property
    def sets_flags(self) -> bool:
        return self.opcode in FLAG_SETTERS

    def reads(self) -> set[int]:
        """Registers (and ``FLAGS``) whose value this instruction consumes."""
        op = self.opcode
        if op in MOVES or op == "OUT":
            used = _regs_of(self.src1)
        elif op in ALU_OPS or op == "CMP":
            used = _regs_of(self.src1, self.src2)
        elif op == "STRG":
            used = _regs_of(self.src1)
        elif op in CALLS:
            used = set(ARG_REGS)
        elif op == "RET":
            used = {0}
        else:
            used = set()
        if self.conditional:
            used.add(FLAGS)
            # a skipped conditional def leaves the old value in place
            if self.dest is not None:
                used.add(self.dest.index)
        return used

    def writes(self) -> set[int]:
        out = set()
        if self.dest is not None:
            out.add(self.dest.index)
        if self.opcode in CALLS:
            out.add(0)
        if self.sets_flags:
            out.add(FLAGS)
        return out

    def operands_text(self) -> str:
        op = self.opcode
        if op in ("B", "BL", "BLX"):
            return self.target or ""
        if op in ("RET", "NOP"):
            return ""
        if op == "LDRG":
            return f"{self.dest}, @{self.glob}"
        if op == "STRG":
            return f"{self.src1}, @{self.glob}"
        parts = [self.dest, self.src1, self.src2]
        return ", ".join(str(p) for p in parts if p is not None)

    @property
    def mnemonic(self) -> str:
        return self.opcode if self.cond == "AL" else self.opcode + self.cond

    def text(self) -> str:
        ops = self.operands_text()
        return f"{self.mnemonic} {ops}" if ops else self.mnemonic

    def __str__(self) -> str:
        return self.text()


NOP = Instruction("NOP")


def ins(opcode: str, *operands: Operand | str, cond: str = "AL") -> Instruction:
    """Convenience constructor used by transforms and tests.

    ``ins("ADD", Reg(0), Reg(1), Imm(2))``, ``ins("B", "loop", cond="EQ")``,
    ``ins("LDRG", Reg(4), "@x")``.
    """
    if opcode in ("B", "BL", "BLX"):
        (target,) = operands
        return Instruction(opcode, cond, target=str(target))
    if opcode in ("LDRG", "STRG"):
        reg, g = operands
        name = str(g).lstrip("@")
        if opcode == "LDRG":
            return Instruction(opcode, cond, dest=reg, glob=name)
        return Instruction(opcode, cond, src1=reg, glob=name)
    if opcode in MOVES or opcode == "ADR":
        d, s = operands
        return Instruction(opcode, cond, dest=d, src1=s)
    if opcode in ALU_OPS:
        d, a, b = operands
        return Instruction(opcode, cond, dest=d, src1=a, src2=b)
    if opcode == "CMP":
        a, b = operands
        return Instruction(opcode, cond, src1=a, src2=b)
    if opcode == "OUT":
        (a,) = operands
        return Instruction(opcode, cond, src1=a)
    return Instruction(opcode, cond)


@dataclass(frozen=True)
class BasicBlock:
    label: str
    instructions: tuple[Instruction, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "instructions", tuple(self.instructions))

    def __len__(self) -> int:
        return len(self.instructions)

    def __iter__(self) -> Iterator[Instruction]:
        return iter(self.instructions)

    @property
    def terminator(self) -> str:
        """``return``, ``branch``, ``cond_pair``, ``cond_fall`` or ``fallthrough``."""
        body = self.instructions
        if not body:
            return "fallthrough"
        last = body[-1]
        if last.opcode == "RET":
            return "return"
        if last.is_branch:
            if last.conditional:
                return "cond_fall"
            if len(body) > 1 and body[-2].is_branch and body[-2].conditional:
                return "cond_pair"
            return "branch"
        return "fallthrough"

    def body(self) -> tuple[Instruction, ...]:
        """Instructions excluding the block-ending branch(es)."""
        kind = self.terminator
        if kind == "cond_pair":
            return self.instructions[:-2]
        if kind in ("branch", "cond_fall"):
            return self.instructions[:-1]
        return self.instructions

    def validate(self) -> None:
        body = self.instructions
        for i, inst in enumerate(body):
            last = i == len(body) - 1
            if inst.opcode == "RET":
                if not last:
                    raise IRError(f"{self.label}: RET must end its block")
                if inst.conditional:
                    raise IRError(f"{self.label}: conditional RET is not supported")
            elif inst.is_branch and not last:
                pair = inst.conditional and i == len(body) - 2 and body[-1].is_branch \
                    and not body[-1].conditional
                if not pair:
                    raise IRError(f"{self.label}: branch at {i} must end its block")
            elif inst.is_call and inst.conditional:
                raise IRError(f"{self.label}: conditional calls are not supported")


@dataclass(frozen=True)
class Function:
    name: str
    arity: int
    blocks: tuple[BasicBlock, ...]
    base_address: int = DEFAULT_BASE

    def __post_init__(self) -> None:
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if not 0 <= self.arity <= 4:
            raise IRError(f"{self.name}: arity must be in 0..4")
        if not self.blocks:
            raise IRError(f"{self.name}: function has no blocks")

    @property
    def entry(self) -> str:
        return self.blocks[0].label

    @property
    def labels(self) -> list[str]:
        return [b.label for b in self.blocks]

    def block(self, label: str) -> BasicBlock:
        for b in self.blocks:
            if b.label == label:
                return b
        raise KeyError(label)

    def block_map(self) -> dict[str, BasicBlock]:
        return {b.label: b for b in self.blocks}

    def instructions(self) -> Iterator[Instruction]:
        for b in self.blocks:
            yield from b.instructions

    def __len__(self) -> int:
        return sum(len(b) for b in self.blocks)

    @property
    def end_address(self) -> int:
        return self.base_address + WORD * len(self)

    def used_registers(self) -> set[int]:
        used: set[int] = set(range(self.arity))
        for inst in self.instructions():
            used |= inst.reads() | inst.writes()
        used.discard(FLAGS)
        return used

    def successors(self, label: str) -> list[tuple[str, str]]:
        """``(target, kind)`` pairs with kind in uncond/true/false/fallthrough."""
        idx = self.labels.index(label)
        blk = self.blocks[idx]
        nxt = self.blocks[idx + 1].label if idx + 1 < len(self.blocks) else None
        kind = blk.terminator
        if kind == "return":
            return []
        if kind == "branch":
            return [(blk.instructions[-1].target, "uncond")]
        if kind == "cond_pair":
            return [(blk.instructions[-2].target, "true"), (blk.instructions[-1].target, "false")]
        if nxt is None:
            raise IRError(f"{self.name}:{label} falls off the end of the function")
        if kind == "cond_fall":
            return [(blk.instructions[-1].target, "true"), (nxt, "false")]
        return [(nxt, "fallthrough")]

    def with_layout(self, base: int | None = None) -> "Function":
        """Reassign addresses to consecutive 4-byte slots from ``base``."""
        base = self.base_address if base is None else base
        addr = base
        blocks = []
        for b in self.blocks:
            out = []
            for inst in b.instructions:
                out.append(inst if inst.address == addr else replace(inst, address=addr))
                addr += WORD
            blocks.append(BasicBlock(b.label, tuple(out)))
        return Function(self.name, self.arity, tuple(blocks), base)

    def with_blocks(self, blocks) -> "Function":
        return Function(self.name, self.arity, tuple(blocks), self.base_address).with_layout()

    def validate(self, program: "Program | None" = None) -> None:
        seen: set[str] = set()
        for b in self.blocks:
            if b.label in seen:
                raise IRError(f"{self.name}: duplicate label {b.label!r}")
            seen.add(b.label)
            b.validate()
        for b in self.blocks:
            for inst in b.instructions:
                if inst.is_branch and inst.target not in seen:
                    raise IRError(f"{self.name}: unresolved branch target {inst.target!r}")
                for op in (inst.dest, inst.src1, inst.src2):
                    if isinstance(op, Reg) and op.index in (13, 15):
                        raise IRError(f"{self.name}: R{op.index} may not be used")
                if program is not None:
                    if inst.is_call and inst.target not in program.functions:
                        raise IRError(f"{self.name}: call to unknown function {inst.target!r}")
                    if inst.glob is not None and inst.glob not in program.globals:
                        raise IRError(f"{self.name}: undeclared global @{inst.glob}")
            self.successors(b.label)
        addr = self.base_address
        for inst in self.instructions():
            if inst.address != addr:
                raise IRError(f"{self.name}: address {inst.address:#x} out of sequence")
            addr += WORD


@dataclass(frozen=True)
class Program:
    functions: dict[str, Function] = field(default_factory=dict)
    globals: dict[str, int] = field(default_factory=dict)

    def function(self, name: str) -> Function:
        return self.functions[name]

    def with_function(self, fn: Function) -> "Program":
        funcs = dict(self.functions)
        funcs[fn.name] = fn
        return Program(funcs, dict(self.globals))

    def with_globals(self, **values: int) -> "Program":
        g = dict(self.globals)
        for k, v in values.items():
            g.setdefault(k, v)
        return Program(dict(self.functions), g)

    def laid_out(self, base: int = DEFAULT_BASE) -> "Program":
        """Place functions back to back starting at ``base``."""
        funcs = {}
        addr = base
        for name, fn in self.functions.items():
            fn = fn.with_layout(addr)
            funcs[name] = fn
            addr = fn.end_address
        return Program(funcs, dict(self.globals))

    def validate(self) -> None:
        for fn in self.functions.values():
            fn.validate(self)
