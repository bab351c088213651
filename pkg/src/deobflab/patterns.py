"""The thirteen instruction-substitution rewrites of O-LLVM.

Each pattern is a template over pattern variables:

``a``  final destination      ``b``  first operand (register)
``c``  second operand         ``r``  random value that cancels out
``s``, ``t``  scratch registers holding intermediates

The obfuscator instantiates templates; the deobfuscator unifies them
against instruction sequences.  Keeping one table keeps both sides honest.
"""

from __future__ import annotations

from dataclasses import dataclass

from .ir.model import Imm, Instruction, Operand, Reg

Step = tuple[str, str, str, "str | None"]


@dataclass(frozen=True)
class SubPattern:
    id: int
    op: str
    expr: str
    steps: tuple[Step, ...]

    @property
    def uses_r(self) -> bool:
        return any("r" in st[2:] for st in self.steps)

    @property
    def scratch(self) -> tuple[str, ...]:
        names = []
        for st in self.steps:
            if st[1] in ("s", "t") and st[1] not in names:
                names.append(st[1])
        return tuple(names)

    def __len__(self) -> int:
        return len(self.steps)


PATTERNS: tuple[SubPattern, ...] = (
    SubPattern(1, "ADD", "a = b - (-c)", (
        ("RSB", "s", "c", "#0"), ("SUB", "a", "b", "s"))),
    SubPattern(2, "ADD", "a = -(-b + (-c))", (
        ("RSB", "s", "b", "#0"), ("RSB", "t", "c", "#0"),
        ("ADD", "s", "s", "t"), ("RSB", "a", "s", "#0"))),
    SubPattern(3, "ADD", "a = b + r; a += c; a -= r", (
        ("ADD", "s", "b", "r"), ("ADD", "s", "s", "c"), ("SUB", "a", "s", "r"))),
    SubPattern(4, "ADD", "a = b - r; a += c; a += r", (
        ("SUB", "s", "b", "r"), ("ADD", "s", "s", "c"), ("ADD", "a", "s", "r"))),
    SubPattern(5, "SUB", "a = b + (-c)", (
        ("RSB", "s", "c", "#0"), ("ADD", "a", "b", "s"))),
    SubPattern(6, "SUB", "a = -((-b) + c)", (
        ("RSB", "s", "b", "#0"), ("ADD", "s", "s", "c"), ("RSB", "a", "s", "#0"))),
    SubPattern(7, "SUB", "a = b + r; a -= c; a -= r", (
        ("ADD", "s", "b", "r"), ("SUB", "s", "s", "c"), ("SUB", "a", "s", "r"))),
    SubPattern(8, "SUB", "a = b - r; a -= c; a += r", (
        ("SUB", "s", "b", "r"), ("SUB", "s", "s", "c"), ("ADD", "a", "s", "r"))),
    SubPattern(9, "AND", "a = (b ^ ~c) & b", (
        ("MVN", "s", "c", None), ("EOR", "s", "b", "s"), ("AND", "a", "s", "b"))),
    SubPattern(10, "AND", "a = ~(~b | ~c) & (r | ~r)", (
        ("MVN", "s", "b", None), ("MVN", "t", "c", None), ("ORR", "s", "s", "t"),
        ("MVN", "s", "s", None), ("MVN", "t", "r", None), ("ORR", "t", "t", "r"),
        ("AND", "a", "s", "t"))),
    SubPattern(11, "ORR", "a = (b & c) | (b ^ c)", (
        ("AND", "s", "b", "c"), ("EOR", "t", "b", "c"), ("ORR", "a", "s", "t"))),
    SubPattern(12, "EOR", "a = (~b & c) | (b & ~c)", (
        ("MVN", "s", "b", None), ("AND", "s", "s", "c"), ("MVN", "t", "c", None),
        ("AND", "t", "b", "t"), ("ORR", "a", "s", "t"))),
    SubPattern(13, "EOR", "a = (b ^ r) ^ (c ^ r)", (
        ("EOR", "s", "b", "r"), ("EOR", "t", "c", "r"), ("EOR", "a", "s", "t"))),
)

BY_ID = {p.id: p for p in PATTERNS}
SUBSTITUTABLE = frozenset(p.op for p in PATTERNS)


def _resolve(name: str | None, env: dict[str, Operand]) -> Operand | None:
    if name is None:
        return None
    if name.startswith("#"):
        return Imm(int(name[1:]))
    return env[name]


def instantiate(p: SubPattern, env: dict[str, Operand]) -> list[Instruction] | None:
    """Concrete instructions for ``p`` under ``env``; ``None`` if an operand
    lands somewhere the ISA cannot encode it (an immediate as first source)."""
    out = []
    for op, d, x, y in p.steps:
        dest = _resolve(d, env)
        src1 = _resolve(x, env)
        src2 = _resolve(y, env)
        if not isinstance(dest, Reg):
            return None
        if y is not None and not isinstance(src1, Reg):
            return None
        out.append(Instruction(op, dest=dest, src1=src1, src2=src2))
    return out


def recovered_instruction(p: SubPattern, env: dict[str, Operand]) -> Instruction:
    return Instruction(p.op, dest=env["a"], src1=env["b"], src2=env["c"])
