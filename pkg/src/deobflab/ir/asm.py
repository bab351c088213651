"""Textual assembly: parser and serializer.

Grammar (line oriented, ``;`` starts a comment)::

    .global <name> = <int>
    func <name>(<arity>) [@ <base>]:
    <label>:
    OPCODE[COND] operands

Operands are ``Rn``, ``#imm``, ``@global`` or a label / function name.
"""

from __future__ import annotations

import re

from .model import (
    ALU_OPS, CONDS, DEFAULT_BASE, MOVES, OPCODES, BasicBlock, Function, Imm,
    Instruction, IRError, Program, Reg,
)

_IDENT = r"[A-Za-z_][A-Za-z0-9_.]*"
_FUNC_RE = re.compile(rf"^func\s+({_IDENT})\s*(?:\(\s*(\d+)\s*\))?\s*(?:@\s*(\S+?))?\s*:$")
_GLOBAL_RE = re.compile(rf"^\.global\s+({_IDENT})\s*=\s*(\S+)$")
_LABEL_RE = re.compile(rf"^({_IDENT}):\s*(.*)$")
_REG_RE = re.compile(r"^[Rr](\d+)$")


class AsmError(IRError):
    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def _split_mnemonic(word: str) -> tuple[str, str]:
    word = word.upper()
    if word in OPCODES:
        return word, "AL"
    for cond in CONDS:
        if word.endswith(cond) and word[: -len(cond)] in OPCODES:
            return word[: -len(cond)], cond
    raise ValueError(f"unknown mnemonic {word!r}")


def _parse_int(text: str) -> int:
    return int(text.replace("_", ""), 0)


def _operand(tok: str) -> Reg | Imm:
    m = _REG_RE.match(tok)
    if m:
        idx = int(m.group(1))
        if idx == 13:
            raise ValueError("R13 is reserved")
        if idx == 15:
            raise ValueError("R15 is only readable through ADR")
        return Reg(idx)
    if tok.startswith("#"):
        return Imm(_parse_int(tok[1:]))
    raise ValueError(f"bad operand {tok!r}")


def _reg(tok: str) -> Reg:
    op = _operand(tok)
    if not isinstance(op, Reg):
        raise ValueError(f"expected a register, got {tok!r}")
    return op


def parse_instruction(text: str) -> Instruction:
    parts = text.strip().split(None, 1)
    opcode, cond = _split_mnemonic(parts[0])
    args = [a.strip() for a in parts[1].split(",")] if len(parts) > 1 else []
    args = [a for a in args if a]

    def want(n: int) -> None:
        if len(args) != n:
            raise ValueError(f"{opcode} takes {n} operand(s), got {len(args)}")

    if opcode in ("B", "BL", "BLX"):
        want(1)
        if not re.fullmatch(_IDENT, args[0]):
            raise ValueError(f"bad branch target {args[0]!r}")
        return Instruction(opcode, cond, target=args[0])
    if opcode in ("RET", "NOP"):
        want(0)
        return Instruction(opcode, cond)
    if opcode in ("LDRG", "STRG"):
        want(2)
        if not args[1].startswith("@"):
            raise ValueError("global operand must start with '@'")
        name = args[1][1:]
        if opcode == "LDRG":
            return Instruction(opcode, cond, dest=_reg(args[0]), glob=name)
        return Instruction(opcode, cond, src1=_reg(args[0]), glob=name)
    if opcode in MOVES:
        want(2)
        return Instruction(opcode, cond, dest=_reg(args[0]), src1=_operand(args[1]))
    if opcode == "ADR":
        want(2)
        alpha = _operand(args[1])
        if not isinstance(alpha, Imm):
            raise ValueError("ADR takes an immediate offset")
        return Instruction(opcode, cond, dest=_reg(args[0]), src1=alpha)
    if opcode in ALU_OPS:
        want(3)
        return Instruction(opcode, cond, dest=_reg(args[0]), src1=_reg(args[1]),
                           src2=_operand(args[2]))
    if opcode == "CMP":
        want(2)
        return Instruction(opcode, cond, src1=_reg(args[0]), src2=_operand(args[1]))
    if opcode == "OUT":
        want(1)
        return Instruction(opcode, cond, src1=_operand(args[0]))
    raise ValueError(f"unhandled opcode {opcode}")  # pragma: no cover


def parse_program(text: str) -> Program:
    """Parse assembly source into a laid-out, validated :class:`Program`."""
    globals_: dict[str, int] = {}
    funcs: list[tuple[str, int, int | None, list[tuple[str, list[Instruction]]], int]] = []
    cur = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split(";", 1)[0].strip()
        if not line:
            continue
        m = _GLOBAL_RE.match(line)
        if m:
            name = m.group(1)
            if name in globals_:
                raise AsmError(f"duplicate global {name!r}", lineno)
            try:
                globals_[name] = Imm(_parse_int(m.group(2))).value
            except (ValueError, IRError) as exc:
                raise AsmError(str(exc), lineno) from None
            continue
        m = _FUNC_RE.match(line)
        if m:
            name, arity, base = m.group(1), m.group(2), m.group(3)
            if any(f[0] == name for f in funcs):
                raise AsmError(f"duplicate function {name!r}", lineno)
            cur = (name, int(arity or 0), _parse_int(base) if base else None, [], lineno)
            funcs.append(cur)
            continue
        if cur is None:
            raise AsmError("instruction outside of a function", lineno)
        blocks = cur[3]
        m = _LABEL_RE.match(line)
        if m:
            label, rest = m.group(1), m.group(2).strip()
            if any(b[0] == label for b in blocks):
                raise AsmError(f"duplicate label {label!r}", lineno)
            blocks.append((label, []))
            if not rest:
                continue
            line = rest
        if not blocks:
            blocks.append(("entry", []))
        try:
            blocks[-1][1].append(parse_instruction(line))
        except (ValueError, IRError) as exc:
            raise AsmError(str(exc), lineno) from None

    functions: dict[str, Function] = {}
    addr = DEFAULT_BASE
    for name, arity, base, blocks, lineno in funcs:
        if not blocks:
            raise AsmError(f"function {name!r} has no body", lineno)
        try:
            fn = Function(name, arity, [BasicBlock(lbl, body) for lbl, body in blocks],
                          addr if base is None else base).with_layout()
        except IRError as exc:
            raise AsmError(str(exc), lineno) from None
        functions[name] = fn
        addr = fn.end_address
    program = Program(functions, globals_)
    try:
        program.validate()
    except AsmError:
        raise
    except IRError as exc:
        raise AsmError(str(exc)) from None
    return program


def serialize_program(program: Program) -> str:
    out: list[str] = []
    for name, value in program.globals.items():
        out.append(f".global {name} = {value}")
    if program.globals:
        out.append("")
    for fn in program.functions.values():
        out.append(serialize_function(fn))
    return "\n".join(out)


def serialize_function(fn: Function) -> str:
    lines = [f"func {fn.name}({fn.arity}) @ {fn.base_address:#x}:"]
    for b in fn.blocks:
        lines.append(f"{b.label}:")
        for inst in b.instructions:
            lines.append(f"    {inst.text()}")
    lines.append("")
    return "\n".join(lines)
