"""Register liveness over a function's CFG.

The N/Z flag pair is tracked as the pseudo register :data:`FLAGS`.
"""

from __future__ import annotations

from dataclasses import dataclass

from .ir.model import FLAGS, Function, Imm, Instruction, to_unsigned


def kills(inst: Instruction) -> set[int]:
    # a conditional write may not happen, so it kills nothing
    return set() if inst.conditional else inst.writes()


def transfer(inst: Instruction, live_after: set[int]) -> set[int]:
    return (live_after - kills(inst)) | inst.reads()


@dataclass
class Liveness:
    live_in: dict[str, frozenset[int]]
    live_out: dict[str, frozenset[int]]

    def after_each(self, f: Function, label: str) -> list[frozenset[int]]:
        """Live set right after every instruction of block ``label``."""
        blk = f.block(label)
        live = set(self.live_out[label])
        out: list[frozenset[int]] = [frozenset()] * len(blk.instructions)
        for i in range(len(blk.instructions) - 1, -1, -1):
            out[i] = frozenset(live)
            live = transfer(blk.instructions[i], live)
        return out


def liveness(f: Function) -> Liveness:
    succ = {b.label: [t for t, _ in f.successors(b.label)] for b in f.blocks}
    live_in = {b.label: set() for b in f.blocks}
    live_out = {b.label: set() for b in f.blocks}
    blocks = list(reversed(f.blocks))
    changed = True
    while changed:
        changed = False
        for b in blocks:
            out = set()
            for s in succ[b.label]:
                out |= live_in[s]
            live = set(out)
            for inst in reversed(b.instructions):
                live = transfer(inst, live)
            if out != live_out[b.label] or live != live_in[b.label]:
                live_out[b.label] = out
                live_in[b.label] = live
                changed = True
    return Liveness(
        {k: frozenset(v) for k, v in live_in.items()},
        {k: frozenset(v) for k, v in live_out.items()},
    )


def flags_live_across_blocks(f: Function) -> list[str]:
    """Blocks that expect incoming flags (unsupported by BCF/CFF)."""
    lv = liveness(f)
    return [lbl for lbl, live in lv.live_in.items() if FLAGS in live]


def constant_registers(f: Function) -> dict[int, int]:
    """Registers whose only definition in ``f`` is one unconditional
    ``MOV Rk, #imm``; such a register holds that value wherever it is read
    after the move, which is how hoisted case constants look."""
    defs: dict[int, list[Instruction]] = {}
    for inst in f.instructions():
        for r in inst.writes():
            defs.setdefault(r, []).append(inst)
    out = {}
    for r, ds in defs.items():
        if r == FLAGS or len(ds) != 1:
            continue
        d = ds[0]
        if d.opcode == "MOV" and not d.conditional and isinstance(d.src1, Imm):
            out[r] = to_unsigned(d.src1.value)
    return out
