"""Undo instruction substitution.

Sequences are recognised by unifying the shared pattern table against the
instructions of one block, allowing unrelated instructions in between as
long as they leave the pattern's operands alone.  A per-site taint walk
then decides which intermediate definitions are still observed outside
the pattern and must be kept.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from ..analysis import kills, liveness
from ..ir.model import COMMUTATIVE, NOP, BasicBlock, Function, Imm, Instruction, Operand, Reg
from ..patterns import PATTERNS, SubPattern, recovered_instruction

# bound on how far apart the instructions of one site may lie
MAX_SPAN = 24


@dataclass
class TaintMap:
    tainted: set[int] = field(default_factory=set)
    origin: dict[int, int] = field(default_factory=dict)

    def taint(self, reg: int, address: int) -> None:
        self.tainted.add(reg)
        self.origin[reg] = address

    def free(self, reg: int) -> None:
        self.tainted.discard(reg)
        self.origin.pop(reg, None)


@dataclass(frozen=True)
class MatchSite:
    block: str
    positions: tuple[int, ...]  # indices in the block, prefix MOV first if present
    addresses: tuple[int, ...]
    pattern_id: int
    recovered_op: Instruction
    env: tuple[tuple[str, Operand], ...]
    prefix: int | None = None  # index of a MOV that materialises r
    retained: frozenset[int] = frozenset()  # addresses

    @property
    def pattern(self) -> SubPattern:
        return next(p for p in PATTERNS if p.id == self.pattern_id)

    @property
    def final(self) -> int:
        return self.positions[-1]

    def to_json(self) -> dict:
        return {
            "block": self.block,
            "addresses": list(self.addresses),
            "pattern": self.pattern_id,
            "recovered": self.recovered_op.text(),
            "retained": sorted(self.retained),
        }


def _bind(env: dict[str, Operand], var: str, op: Operand | None) -> bool:
    if op is None:
        return False
    if var.startswith("#"):
        return isinstance(op, Imm) and op.value == int(var[1:])
    if var in ("a", "b", "s", "t") and not isinstance(op, Reg):
        return False
    if var in env:
        return env[var] == op
    env[var] = op
    return True


def _unify(step, inst: Instruction, env: dict[str, Operand]) -> dict[str, Operand] | None:
    opcode, d, x, y = step
    if inst.opcode != opcode or inst.conditional:
        return None
    orders = [(inst.src1, inst.src2)]
    if y is not None and opcode in COMMUTATIVE:
        orders.append((inst.src2, inst.src1))
    for s1, s2 in orders:
        trial = dict(env)
        if not _bind(trial, d, inst.dest) or not _bind(trial, x, s1):
            continue
        if y is None:
            if inst.src2 is not None:
                continue
        elif not _bind(trial, y, s2):
            continue
        if _consistent(trial):
            return trial
    return None


def _regs(env: dict[str, Operand], names) -> set[int]:
    return {env[n].index for n in names if isinstance(env.get(n), Reg)}


def _consistent(env: dict[str, Operand]) -> bool:
    """Intermediates must not alias the pattern's inputs."""
    inputs = _regs(env, ("b", "c", "r"))
    s, t = env.get("s"), env.get("t")
    if s is not None and s.index in inputs:
        return False
    if t is not None and (t.index in inputs or t == s):
        return False
    return True


def _protected(env: dict[str, Operand]) -> set[int]:
    return _regs(env, ("b", "c", "r", "s", "t"))


def _search(insts, p: SubPattern, start: int):
    """Depth-first search for ``p`` anchored at ``start``."""
    limit = min(len(insts), start + MAX_SPAN)

    def go(step: int, pos: int, env: dict, chosen: list[int]):
        if step == len(p.steps):
            return chosen, env
        guard = _protected(env)
        for q in range(pos, limit):
            inst = insts[q]
            if inst.is_branch or inst.opcode == "RET":
                return None
            trial = _unify(p.steps[step], inst, env)
            if trial is not None:
                found = go(step + 1, q + 1, trial, chosen + [q])
                if found:
                    return found
            # skipping q: it must leave every bound operand untouched
            if inst.writes() & guard:
                return None
        return None

    first = _unify(p.steps[0], insts[start], {})
    if first is None:
        return None
    return go(1, start + 1, first, [start])


def _interleaved_ok(insts, positions: list[int], env: dict) -> bool:
    guard = _protected(env)
    own = set(positions)
    for q in range(positions[0], positions[-1] + 1):
        if q not in own and insts[q].writes() & guard:
            return False
    return True


def _find_prefix(insts, first: int, env: dict) -> int | None:
    r = env.get("r")
    if not isinstance(r, Reg) or r.index in _regs(env, ("b", "c")):
        return None
    for q in range(first - 1, -1, -1):
        inst = insts[q]
        if r.index in inst.writes():
            if inst.opcode == "MOV" and not inst.conditional and isinstance(inst.src1, Imm):
                return q
            return None
    return None


def match_substitutions(f: Function) -> list[MatchSite]:
    """All non-overlapping pattern occurrences, longest first then leftmost."""
    sites: list[MatchSite] = []
    for b in f.blocks:
        insts = b.instructions
        found = []
        for start, inst in enumerate(insts):
            for p in PATTERNS:
                if p.steps[0][0] != inst.opcode:
                    continue
                hit = _search(insts, p, start)
                if hit is None:
                    continue
                positions, env = hit
                if _interleaved_ok(insts, positions, env):
                    found.append((p, positions, env))
        found.sort(key=lambda h: (-len(h[0].steps), h[1][0], h[0].id))
        used: set[int] = set()
        chosen = []
        for p, positions, env in found:
            if used.intersection(positions):
                continue
            used.update(positions)
            chosen.append((p, positions, env))
        for p, positions, env in chosen:
            pre = _find_prefix(insts, positions[0], env)
            if pre is not None and pre in used:
                pre = None
            if pre is not None:
                used.add(pre)
            full = ([pre] if pre is not None else []) + positions
            sites.append(MatchSite(
                block=b.label,
                positions=tuple(full),
                addresses=tuple(insts[q].address for q in full),
                pattern_id=p.id,
                recovered_op=recovered_instruction(p, env),
                env=tuple(sorted(env.items())),
                prefix=pre,
            ))
    sites.sort(key=lambda s: s.addresses[0])
    return sites


def site_taint(f: Function, site: MatchSite, live_out: frozenset[int]) -> tuple[set[int], TaintMap]:
    """Walk forward from the site and return the positions whose
    definitions are read by non-pattern code, plus the final taint map."""
    insts = f.block(site.block).instructions
    own = set(site.positions)
    tm = TaintMap()
    keep: set[int] = set()
    pos_of = {insts[q].address: q for q in site.positions}
    for q in range(site.positions[0], len(insts)):
        inst = insts[q]
        if q in own:
            for r in inst.writes():
                if q == site.final:
                    tm.free(r)
                else:
                    tm.taint(r, inst.address)
            continue
        for r in inst.reads() & tm.tainted:
            keep.add(pos_of[tm.origin[r]])
        for r in kills(inst) & tm.tainted:
            tm.free(r)
    for r in tm.tainted & live_out:
        keep.add(pos_of[tm.origin[r]])
    # retained instructions need their in-pattern inputs too
    work = list(keep)
    while work:
        q = work.pop()
        for r in insts[q].reads():
            defs = [d for d in site.positions if d < q and r in insts[d].writes()]
            if defs and defs[-1] not in keep:
                keep.add(defs[-1])
                work.append(defs[-1])
    return keep, tm


def taint_filter(f: Function, sites: list[MatchSite]) -> list[MatchSite]:
    lv = liveness(f)
    out = []
    for site in sites:
        keep, _ = site_taint(f, site, lv.live_out[site.block])
        insts = f.block(site.block).instructions
        out.append(replace(site, retained=frozenset(insts[q].address for q in keep)))
    return out


def _placement(insts, site: MatchSite) -> int:
    """Slot for the recovered instruction: the earliest freed slot after
    which nothing in the span touches the destination."""
    a = site.recovered_op.dest.index
    free = [q for q in site.positions
            if q != site.prefix and insts[q].address not in site.retained]
    for j in free:
        later = (insts[q] for q in range(j + 1, site.final + 1) if q not in free)
        if not any(a in i.reads() or a in i.writes() for i in later):
            return j
    return site.final


def apply_rewrites(f: Function, sites: list[MatchSite]) -> Function:
    """NOP out non-retained pattern slots and place each recovered
    instruction in one of them; addresses do not move."""
    if not sites:
        return f
    by_block: dict[str, list[MatchSite]] = {}
    for s in sites:
        by_block.setdefault(s.block, []).append(s)
    blocks = []
    for b in f.blocks:
        insts = list(b.instructions)
        for site in by_block.get(b.label, []):
            j = _placement(b.instructions, site)
            for q in site.positions:
                if b.instructions[q].address not in site.retained:
                    insts[q] = replace(NOP, address=b.instructions[q].address)
            insts[j] = replace(site.recovered_op, address=b.instructions[j].address)
        blocks.append(BasicBlock(b.label, tuple(insts)))
    return Function(f.name, f.arity, tuple(blocks), f.base_address)


def deobfuscate_inssub(f: Function) -> tuple[Function, list[MatchSite]]:
    sites = taint_filter(f, match_substitutions(f))
    return apply_rewrites(f, sites), sites
