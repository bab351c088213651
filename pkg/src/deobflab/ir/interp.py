"""Concrete interpreter for the mini instruction set.

Two backends share one semantics:

* :class:`Machine` steps one instruction at a time and can report every
  intermediate register file (used by lockstep checks);
* :func:`compile_program` turns each function into straight Python code,
  which is what :func:`interpret` and the I/O harness use.

All arithmetic wraps mod 2**32.  ``CMP``/``SUBS`` set N from the signed
comparison of their operands and Z from equality; ``ANDS`` sets N/Z from
its result.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

from .model import MASK, Function, Imm, Instruction, IRError, Program, Reg

DEFAULT_STEP_BUDGET = 1_000_000
MAX_CALL_DEPTH = 64
_SIGN = 0x80000000


class ExecutionError(RuntimeError):
    pass


class DivergenceError(ExecutionError):
    """Step budget exhausted."""


class CallDepthError(ExecutionError):
    """Call nesting deeper than :data:`MAX_CALL_DEPTH`."""


class ExecResult(NamedTuple):
    return_value: int
    out_stream: tuple[int, ...]
    steps: int


# -- shared semantics ---------------------------------------------------------

def alu(op: str, a: int, b: int) -> int:
    if op in ("ADD",):
        return (a + b) & MASK
    if op in ("SUB", "SUBS"):
        return (a - b) & MASK
    if op == "RSB":
        return (b - a) & MASK
    if op == "MUL":
        return (a * b) & MASK
    if op in ("AND", "ANDS"):
        return a & b
    if op == "ORR":
        return a | b
    if op == "EOR":
        return a ^ b
    raise IRError(f"not an ALU opcode: {op}")


def compare_flags(a: int, b: int) -> tuple[bool, bool]:
    """(N, Z) after ``CMP a, b`` on unsigned 32-bit encodings."""
    return (a ^ _SIGN) < (b ^ _SIGN), a == b


def result_flags(v: int) -> tuple[bool, bool]:
    return bool(v & _SIGN), v == 0


def cond_holds(cond: str, n: bool, z: bool) -> bool:
    if cond == "AL":
        return True
    if cond == "EQ":
        return z
    if cond == "NE":
        return not z
    if cond == "LT":
        return n
    if cond == "GE":
        return not n
    if cond == "GT":
        return not z and not n
    if cond == "LE":
        return z or n
    raise IRError(f"unknown condition {cond}")


def adr_value(inst: Instruction) -> int:
    """Value written by ``ADR``: its own address + 8 + alpha."""
    return (inst.address + 8 + inst.src1.value) & MASK


def _arg_values(inputs: Sequence[int], arity: int, name: str) -> list[int]:
    if len(inputs) != arity:
        raise ExecutionError(f"{name} expects {arity} input(s), got {len(inputs)}")
    return [v & MASK for v in inputs]


# -- reference stepping machine -------------------------------------------------

@dataclass
class _Frame:
    fn: Function
    code: list[Instruction]
    index: dict[str, int]
    regs: list[int]
    pc: int = 0


class Machine:
    """Instruction-at-a-time interpreter.

    ``trace`` is called after every executed slot with
    ``(function name, instruction, registers, (n, z))``.
    """

    def __init__(self, program: Program, budget: int = DEFAULT_STEP_BUDGET,
                 trace: Callable | None = None) -> None:
        self.program = program
        self.budget = budget
        self.trace = trace
        self.globals = dict(program.globals)
        self.globals = {k: v & MASK for k, v in self.globals.items()}
        self.out: list[int] = []
        self.n = False
        self.z = False
        self.steps = 0

    def _frame(self, fn: Function, args: list[int]) -> _Frame:
        code: list[Instruction] = []
        index: dict[str, int] = {}
        for b in fn.blocks:
            index[b.label] = len(code)
            code.extend(b.instructions)
        regs = [0] * 16
        regs[: len(args)] = args
        return _Frame(fn, code, index, regs)

    def _val(self, regs: list[int], op: Reg | Imm) -> int:
        return regs[op.index] if isinstance(op, Reg) else op.value & MASK

    def run(self, fn_name: str, inputs: Sequence[int]) -> ExecResult:
        fn = self.program.function(fn_name)
        stack = [self._frame(fn, _arg_values(inputs, fn.arity, fn_name))]
        # flags live per frame; save caller flags across calls
        saved_flags: list[tuple[bool, bool]] = []
        self.n = self.z = False
        while True:
            fr = stack[-1]
            if fr.pc >= len(fr.code):
                raise ExecutionError(f"{fr.fn.name}: fell off the end")
            inst = fr.code[fr.pc]
            fr.pc += 1
            self.steps += 1
            if self.steps > self.budget:
                raise DivergenceError(f"step budget {self.budget} exhausted")
            regs = fr.regs
            op = inst.opcode
            if not cond_holds(inst.cond, self.n, self.z):
                self._emit(fr, inst)
                continue
            if op == "B":
                fr.pc = fr.index[inst.target]
            elif op in ("BL", "BLX"):
                callee = self.program.function(inst.target)
                if len(stack) >= MAX_CALL_DEPTH:
                    raise CallDepthError(f"call depth exceeds {MAX_CALL_DEPTH}")
                self._emit(fr, inst)
                saved_flags.append((self.n, self.z))
                self.n = self.z = False
                stack.append(self._frame(callee, regs[: callee.arity]))
                continue
            elif op == "RET":
                value = regs[0]
                stack.pop()
                if not stack:
                    self._emit(fr, inst)
                    return ExecResult(value, tuple(self.out), self.steps)
                self.n, self.z = saved_flags.pop()
                stack[-1].regs[0] = value
                fr = stack[-1]
            else:
                self.execute(inst, regs)
            self._emit(fr, inst)

    def _emit(self, fr: _Frame, inst: Instruction) -> None:
        if self.trace is not None:
            self.trace(fr.fn.name, inst, tuple(fr.regs), (self.n, self.z))

    def execute(self, inst: Instruction, regs: list[int]) -> None:
        """Apply a non-control instruction whose condition already holds."""
        op = inst.opcode
        if op == "MOV":
            regs[inst.dest.index] = self._val(regs, inst.src1)
        elif op == "MVN":
            regs[inst.dest.index] = self._val(regs, inst.src1) ^ MASK
        elif op == "CMP":
            self.n, self.z = compare_flags(regs[inst.src1.index], self._val(regs, inst.src2))
        elif op == "SUBS":
            a, b = regs[inst.src1.index], self._val(regs, inst.src2)
            self.n, self.z = compare_flags(a, b)
            regs[inst.dest.index] = alu(op, a, b)
        elif op == "ANDS":
            v = alu(op, regs[inst.src1.index], self._val(regs, inst.src2))
            self.n, self.z = result_flags(v)
            regs[inst.dest.index] = v
        elif op in ("ADD", "SUB", "RSB", "MUL", "AND", "ORR", "EOR"):
            regs[inst.dest.index] = alu(op, regs[inst.src1.index], self._val(regs, inst.src2))
        elif op == "ADR":
            regs[inst.dest.index] = adr_value(inst)
        elif op == "OUT":
            self.out.append(self._val(regs, inst.src1))
        elif op == "LDRG":
            regs[inst.dest.index] = self.globals[inst.glob]
        elif op == "STRG":
            self.globals[inst.glob] = regs[inst.src1.index]
        elif op == "NOP":
            pass
        else:  # pragma: no cover - control flow handled by run()
            raise IRError(f"cannot execute {op} here")


# -- compiled backend ---------------------------------------------------------

_COND_EXPR = {
    "EQ": "z", "NE": "not z", "LT": "n", "GE": "not n",
    "GT": "(not z and not n)", "LE": "(z or n)",
}


def _opnd(op: Reg | Imm) -> str:
    return f"r{op.index}" if isinstance(op, Reg) else str(op.value & MASK)


def _inst_code(inst: Instruction) -> list[str]:
    op = inst.opcode
    d = f"r{inst.dest.index}" if inst.dest is not None else None
    if op == "MOV":
        return [f"{d} = {_opnd(inst.src1)}"]
    if op == "MVN":
        return [f"{d} = {_opnd(inst.src1)} ^ {MASK}"]
    if op in ("CMP", "SUBS"):
        a, b = _opnd(inst.src1), _opnd(inst.src2)
        lines = [f"_a = {a}", f"_b = {b}",
                 f"n = (_a ^ {_SIGN}) < (_b ^ {_SIGN})", "z = _a == _b"]
        if op == "SUBS":
            lines.append(f"{d} = (_a - _b) & {MASK}")
        return lines
    if op == "ANDS":
        return [f"{d} = {_opnd(inst.src1)} & {_opnd(inst.src2)}",
                f"n = {d} >= {_SIGN}", f"z = {d} == 0"]
    a, b = (_opnd(inst.src1), _opnd(inst.src2)) if inst.src2 is not None else (None, None)
    if op == "ADD":
        return [f"{d} = ({a} + {b}) & {MASK}"]
    if op == "SUB":
        return [f"{d} = ({a} - {b}) & {MASK}"]
    if op == "RSB":
        return [f"{d} = ({b} - {a}) & {MASK}"]
    if op == "MUL":
        return [f"{d} = ({a} * {b}) & {MASK}"]
    if op == "AND":
        return [f"{d} = {a} & {b}"]
    if op == "ORR":
        return [f"{d} = {a} | {b}"]
    if op == "EOR":
        return [f"{d} = {a} ^ {b}"]
    if op == "ADR":
        return [f"{d} = {adr_value(inst)}"]
    if op == "OUT":
        return [f"out.append({_opnd(inst.src1)})"]
    if op == "LDRG":
        return [f"{d} = G[{inst.glob!r}]"]
    if op == "STRG":
        return [f"G[{inst.glob!r}] = {_opnd(inst.src1)}"]
    if op == "NOP":
        return []
    raise IRError(f"cannot compile {op}")  # pragma: no cover


class _Ctx:
    __slots__ = ("steps", "budget", "out", "G", "funcs")

    def __init__(self, budget: int, globals_: dict[str, int], funcs: dict) -> None:
        self.steps = 0
        self.budget = budget
        self.out: list[int] = []
        self.G = globals_
        self.funcs = funcs


def _gen_function(fn: Function) -> str:
    labels = {b.label: i for i, b in enumerate(fn.blocks)}
    bodies: list[list[str]] = []
    for i, b in enumerate(fn.blocks):
        code = [f"steps += {len(b.instructions)}"]
        kind = b.terminator
        insts = b.instructions
        for k, inst in enumerate(insts):
            op = inst.opcode
            if op == "B":
                tgt = labels[inst.target]
                if inst.conditional:
                    pair = kind == "cond_pair" and k == len(insts) - 2
                    code.append(f"if {_COND_EXPR[inst.cond]}:")
                    if pair:
                        code.append("    steps -= 1")
                    code.append(f"    blk = {tgt}")
                    code.append("    continue")
                else:
                    code.append(f"blk = {tgt}")
                    code.append("continue")
                continue
            if op == "RET":
                code.append("if steps > budget: raise DivergenceError('step budget exhausted')")
                code.append("ctx.steps = steps")
                code.append("return r0")
                continue
            if op in ("BL", "BLX"):
                code.append("ctx.steps = steps")
                code.append("if depth >= MAX_DEPTH: raise CallDepthError('call depth exceeded')")
                code.append(f"_f, _n = funcs[{inst.target!r}]")
                code.append("r0 = _f((r0, r1, r2, r3)[:_n], depth + 1, ctx)")
                code.append("steps = ctx.steps")
                continue
            lines = _inst_code(inst)
            if inst.conditional and lines:
                code.append(f"if {_COND_EXPR[inst.cond]}:")
                code.extend("    " + ln for ln in lines)
            else:
                code.extend(lines)
        if kind in ("fallthrough", "cond_fall"):
            if i + 1 >= len(fn.blocks):
                code.append("raise ExecutionError('fell off the end')")
            else:
                code.append(f"blk = {i + 1}")
                code.append("continue")
        bodies.append(code)

    def tree(lo: int, hi: int, indent: str) -> list[str]:
        if hi - lo == 1:
            return [indent + ln for ln in bodies[lo]]
        mid = (lo + hi) // 2
        return ([f"{indent}if blk < {mid}:"] + tree(lo, mid, indent + "    ")
                + [f"{indent}else:"] + tree(mid, hi, indent + "    "))

    regs = ", ".join(f"r{i}" for i in range(16))
    src = [
        "def run(args, depth, ctx):",
        f"    {regs} = (tuple(args) + (0,) * 16)[:16]",
        "    n = z = False",
        "    steps = ctx.steps",
        "    budget = ctx.budget",
        "    out = ctx.out",
        "    G = ctx.G",
        "    funcs = ctx.funcs",
        "    blk = 0",
        "    while True:",
        "        if steps > budget:",
        "            raise DivergenceError('step budget exhausted')",
    ]
    src += tree(0, len(bodies), "        ")
    return "\n".join(src) + "\n"


class CompiledProgram:
    """A program translated to Python closures; reusable across runs."""

    def __init__(self, program: Program) -> None:
        self.program = program
        self.funcs: dict[str, tuple[Callable, int]] = {}
        env = {
            "DivergenceError": DivergenceError,
            "CallDepthError": CallDepthError,
            "ExecutionError": ExecutionError,
            "MAX_DEPTH": MAX_CALL_DEPTH,
        }
        for name, fn in program.functions.items():
            ns = dict(env)
            exec(compile(_gen_function(fn), f"<mini:{name}>", "exec"), ns)
            self.funcs[name] = (ns["run"], fn.arity)
        self.globals = {k: v & MASK for k, v in program.globals.items()}

    def run(self, fn_name: str, inputs: Sequence[int],
            budget: int = DEFAULT_STEP_BUDGET) -> ExecResult:
        f, arity = self.funcs[fn_name]
        args = _arg_values(inputs, arity, fn_name)
        ctx = _Ctx(budget, dict(self.globals), self.funcs)
        value = f(args, 1, ctx)
        return ExecResult(value, tuple(ctx.out), ctx.steps)


def compile_program(program: Program) -> CompiledProgram:
    return CompiledProgram(program)


def interpret(p: Program, fn: str, inputs: Sequence[int],
              budget: int = DEFAULT_STEP_BUDGET) -> ExecResult:
    """Run ``fn`` with ``inputs`` in R0..R3 and return R0 at top-level RET."""
    return CompiledProgram(p).run(fn, inputs, budget)


def trace_run(p: Program, fn: str, inputs: Sequence[int], trace: Callable,
              budget: int = DEFAULT_STEP_BUDGET) -> ExecResult:
    return Machine(p, budget, trace).run(fn, inputs)
