"""A small concolic engine for chopped, per-block execution.

Values are either concrete 32-bit integers or :class:`Opaque` symbols.
There is no solver: anything touching an opaque value becomes opaque, and
conditional instructions whose flags are unknown either follow a forced
flag or make their destination opaque.  Routing through a flattening
dispatcher stays concrete because case values are constants.
"""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Union

from .ir.interp import adr_value, alu, compare_flags, cond_holds, result_flags
from .ir.model import ALU_OPS, MASK, Function, Imm, Instruction, Reg

DEFAULT_BUDGET = 100_000


class SymExecError(RuntimeError):
    pass


class EngineFault(SymExecError):
    """The engine met something it cannot model (malformed or unhooked)."""


class BudgetExceeded(SymExecError):
    """No stop block was reached within the step budget."""


class OpaqueBranch(SymExecError):
    """A conditional branch depends on unknown flags."""


class NoCondMove(SymExecError):
    pass


_ids = itertools.count(1)


@dataclass(frozen=True)
class Opaque:
    id: int

    @staticmethod
    def fresh() -> "Opaque":
        return Opaque(next(_ids))

    def __repr__(self) -> str:
        return f"?{self.id}"


SymValue = Union[int, Opaque]


def is_concrete(v: SymValue) -> bool:
    return not isinstance(v, Opaque)


@dataclass
class SymState:
    regs: list[SymValue]
    n: SymValue = 0
    z: SymValue = 0
    block: str = ""
    pc: int = 0
    forced_flag: int | None = None
    trace: list[str] = field(default_factory=list)
    globals: dict[str, SymValue] = field(default_factory=dict)
    outputs: list[SymValue] = field(default_factory=list)
    steps: int = 0
    returned: bool = False

    @classmethod
    def blank(cls, block: str) -> "SymState":
        return cls([Opaque.fresh() for _ in range(16)], 0, 0, block, 0, trace=[block])

    @classmethod
    def concrete(cls, block: str, regs: Iterable[int], globals_: dict[str, int] | None = None) -> "SymState":
        regs = [r & MASK for r in regs]
        regs += [0] * (16 - len(regs))
        return cls(regs, 0, 0, block, 0, trace=[block], globals=dict(globals_ or {}))

    def copy(self) -> "SymState":
        return replace(self, regs=list(self.regs), trace=list(self.trace),
                       globals=dict(self.globals), outputs=list(self.outputs))

    def moved_to(self, block: str) -> "SymState":
        s = self.copy()
        s.block, s.pc = block, 0
        return s

    @property
    def flags(self) -> tuple[SymValue, SymValue]:
        return self.n, self.z


class StateStore:
    """Saved states per block, newest last, at most ``capacity`` each."""

    def __init__(self, capacity: int = 1) -> None:
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.saved: dict[str, deque[SymState]] = {}

    def save(self, label: str, s: SymState) -> None:
        q = self.saved.setdefault(label, deque(maxlen=self.capacity))
        q.append(s.moved_to(label))

    def restore(self, label: str) -> SymState:
        q = self.saved.get(label)
        if not q:
            return SymState.blank(label)
        return q[-1].copy()

    def candidates(self, label: str) -> list[SymState]:
        """Saved states newest first."""
        return [s.copy() for s in reversed(self.saved.get(label, ()))]

    def has(self, label: str) -> bool:
        return bool(self.saved.get(label))

    def __len__(self) -> int:
        return sum(len(q) for q in self.saved.values())


def save_state(store: StateStore, label: str, s: SymState) -> None:
    store.save(label, s)


def restore_state(store: StateStore, label: str) -> SymState:
    return store.restore(label)


@dataclass(frozen=True)
class EngineConfig:
    budget: int = DEFAULT_BUDGET
    hook_calls: bool = False


def hook_calls(cfg: EngineConfig) -> EngineConfig:
    """Calls become skips that clobber R0 with a fresh symbol."""
    return replace(cfg, hook_calls=True)


class Engine:
    def __init__(self, f: Function, cfg: EngineConfig | None = None) -> None:
        self.f = f
        self.cfg = cfg or hook_calls(EngineConfig())
        self.blocks = f.block_map()
        labels = f.labels
        self.next_label = {a: b for a, b in zip(labels, labels[1:])}

    # -- single instruction ------------------------------------------------
    def _val(self, s: SymState, op) -> SymValue:
        if isinstance(op, Imm):
            return op.value & MASK
        if isinstance(op, Reg):
            return s.regs[op.index]
        raise EngineFault(f"bad operand {op!r}")

    def _cond(self, s: SymState, inst: Instruction) -> bool | None:
        """Whether a conditional instruction executes; None when unknown."""
        if s.forced_flag is not None:
            taken = s.forced_flag == 1
            s.forced_flag = None
            return taken
        if is_concrete(s.n) and is_concrete(s.z):
            return cond_holds(inst.cond, bool(s.n), bool(s.z))
        return None

    def step(self, s: SymState) -> SymState:
        """Execute one instruction on a copy of ``s``."""
        s = s.copy()
        self.step_in_place(s)
        return s

    def step_in_place(self, s: SymState) -> None:
        if s.returned:
            raise EngineFault("state already returned")
        blk = self.blocks.get(s.block)
        if blk is None:
            raise EngineFault(f"unknown block {s.block!r}")
        if s.pc >= len(blk.instructions):
            self._enter(s, self._fallthrough(s.block))
            return
        inst = blk.instructions[s.pc]
        s.steps += 1
        op = inst.opcode
        taken = True
        if inst.conditional:
            taken = self._cond(s, inst)
            if taken is None:
                if op == "B":
                    raise OpaqueBranch(f"{s.block}: {inst.text()} on unknown flags")
                self._smear(s, inst)
                s.pc += 1
                return
        if not taken:
            s.pc += 1
            return
        if op == "B":
            self._enter(s, inst.target)
            return
        if op == "RET":
            s.returned = True
            return
        self._exec(s, inst)
        s.pc += 1
        if s.pc >= len(blk.instructions) and blk.terminator == "fallthrough":
            self._enter(s, self._fallthrough(s.block))

    def _fallthrough(self, label: str) -> str:
        nxt = self.next_label.get(label)
        if nxt is None:
            raise EngineFault(f"{label} falls off the end of {self.f.name}")
        return nxt

    def _enter(self, s: SymState, label: str) -> None:
        s.block, s.pc = label, 0
        s.trace.append(label)

    def _smear(self, s: SymState, inst: Instruction) -> None:
        """Effect of a conditional instruction that may or may not run."""
        if inst.dest is not None:
            s.regs[inst.dest.index] = Opaque.fresh()
        if inst.sets_flags:
            s.n, s.z = Opaque.fresh(), Opaque.fresh()
        if inst.opcode == "STRG":
            s.globals[inst.glob] = Opaque.fresh()

    def _exec(self, s: SymState, inst: Instruction) -> None:
        op = inst.opcode
        if op == "NOP":
            return
        if op in ("MOV", "MVN"):
            v = self._val(s, inst.src1)
            if is_concrete(v):
                v = v if op == "MOV" else ~v & MASK
            elif op == "MVN":
                v = Opaque.fresh()
            s.regs[inst.dest.index] = v
        elif op in ALU_OPS:
            a, b = self._val(s, inst.src1), self._val(s, inst.src2)
            if is_concrete(a) and is_concrete(b):
                r = alu(op, a, b)
                s.regs[inst.dest.index] = r
                if op == "ANDS":
                    s.n, s.z = (int(x) for x in result_flags(r))
                elif op == "SUBS":
                    s.n, s.z = (int(x) for x in compare_flags(a, b))
            else:
                s.regs[inst.dest.index] = Opaque.fresh()
                if inst.sets_flags:
                    s.n, s.z = Opaque.fresh(), Opaque.fresh()
        elif op == "CMP":
            a, b = self._val(s, inst.src1), self._val(s, inst.src2)
            if is_concrete(a) and is_concrete(b):
                s.n, s.z = (int(x) for x in compare_flags(a, b))
            else:
                s.n, s.z = Opaque.fresh(), Opaque.fresh()
        elif op == "ADR":
            s.regs[inst.dest.index] = adr_value(inst)
        elif op in ("BL", "BLX"):
            if not self.cfg.hook_calls:
                raise EngineFault(f"call to {inst.target} without a hook")
            s.regs[0] = Opaque.fresh()
        elif op == "OUT":
            s.outputs.append(self._val(s, inst.src1))
        elif op == "LDRG":
            v = s.globals.get(inst.glob)
            s.regs[inst.dest.index] = Opaque.fresh() if v is None else v
        elif op == "STRG":
            s.globals[inst.glob] = self._val(s, inst.src1)
        else:
            raise EngineFault(f"cannot execute {inst.text()}")

    # -- multi-step drivers ------------------------------------------------
    def _check_budget(self, s: SymState, start: int) -> None:
        if s.steps - start > self.cfg.budget:
            raise BudgetExceeded(f"no stop block reached from {s.trace[0] if s.trace else '?'}")

    def step_out(self, s: SymState, start: int | None = None) -> SymState:
        """Run until control leaves the current block (or returns)."""
        s = s.copy()
        start = s.steps if start is None else start
        label = s.block
        n_trace = len(s.trace)
        while not s.returned and s.block == label and len(s.trace) == n_trace:
            self.step_in_place(s)
            self._check_budget(s, start)
        return s

    def run_until(self, s: SymState, stopset: set[str],
                  watch: Callable[[SymState], None] | None = None) -> tuple[str, SymState]:
        """Step until entering a block of ``stopset`` or returning.

        A state sitting at the start of a stop block returns at once."""
        s = s.copy()
        start = s.steps
        while True:
            if s.pc == 0 and s.block in stopset:
                return s.block, s
            if s.returned:
                return s.block, s
            if watch is not None:
                watch(s)
            self.step_in_place(s)
            self._check_budget(s, start)

    def fork_at_condmove(self, s: SymState, qualifies: Callable[[Instruction, SymState], bool],
                         stop: set[str] = frozenset()) -> tuple[SymState, SymState]:
        """Advance to the next qualifying conditional move and return two
        copies positioned on it with the flag forced to 1 and to 0."""
        s = s.copy()
        start = s.steps
        while True:
            blk = self.blocks[s.block]
            if s.pc < len(blk.instructions):
                inst = blk.instructions[s.pc]
                if inst.conditional and inst.opcode in ("MOV", "MVN") and qualifies(inst, s):
                    t, f = s.copy(), s.copy()
                    t.forced_flag, f.forced_flag = 1, 0
                    return t, f
            if s.returned or (s.pc == 0 and s.block in stop and s.steps > start):
                raise NoCondMove(f"no conditional move ahead of {s.block}")
            self.step_in_place(s)
            self._check_budget(s, start)
