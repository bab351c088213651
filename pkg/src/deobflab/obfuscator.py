"""O-LLVM style obfuscation passes with ground truth for oracle testing.

Passes run per function in the order split, inssub, bcf, cff.  Splitting
is part of the flattening configuration but happens first so that later
passes see the split pieces as ordinary blocks.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace
from typing import Iterable

from .analysis import flags_live_across_blocks, liveness
from .ir.cfg import Cfg, build_cfg
from .ir.model import (
    FLAGS, BasicBlock, Function, Imm, Instruction, IRError, Program,
    Reg, ins, to_unsigned,
)
from .patterns import PATTERNS, SUBSTITUTABLE, SubPattern, instantiate

PASS_NAMES = ("inssub", "bcf", "cff")
DEFAULT_SEED = 0xD1A0A
ROUTING_REG = 12
SCRATCH_POOL = tuple(range(4, 12))
ALPHA_RANGE = 4096
OPAQUE_X = "x"
OPAQUE_Y = "y"


class ObfuscationError(IRError):
    pass


@dataclass(frozen=True)
class ObfConfig:
    passes: frozenset[str] = frozenset(PASS_NAMES)
    seed: int = DEFAULT_SEED
    bcf_prob: int = 30
    bcf_loop: int = 1
    split_num: int = 0
    # how many case constants the prologue preloads into spare registers;
    # None picks roughly a third of the cases
    hoist: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "passes", frozenset(self.passes))
        unknown = self.passes - set(PASS_NAMES)
        if unknown:
            raise ValueError(f"unknown passes: {sorted(unknown)}")
        if not 1 <= self.bcf_prob <= 100:
            raise ValueError("bcf_prob must be in 1..100")
        if self.bcf_loop < 1:
            raise ValueError("bcf_loop must be at least 1")
        if not 0 <= self.split_num <= 8:
            raise ValueError("split_num must be in 0..8")

    def rng(self, fname: str, stage: str) -> random.Random:
        return random.Random(f"{self.seed}:{fname}:{stage}")


@dataclass(frozen=True)
class SubstitutedSite:
    block: str
    start: int
    end: int  # address of the last instruction of the sequence
    op: str
    pattern_id: int

    def to_json(self) -> dict:
        return {"block": self.block, "start": self.start, "end": self.end,
                "op": self.op, "pattern": self.pattern_id}


@dataclass
class FunctionTruth:
    """What the passes did to one function."""

    case_values: dict[str, int] = field(default_factory=dict)
    predicate_blocks: set[str] = field(default_factory=set)
    dead_blocks: set[str] = field(default_factory=set)
    substituted_sites: list[SubstitutedSite] = field(default_factory=list)
    skipped_sites: list[str] = field(default_factory=list)
    dispatchers: list[str] = field(default_factory=list)
    prologue: str | None = None
    synthetic_prologue: bool = False
    routing_register: int | None = None
    hoisted: dict[int, int] = field(default_factory=dict)
    split_pieces: dict[str, list[str]] = field(default_factory=dict)
    original_cfg: Cfg | None = None

    def merge(self, other: "FunctionTruth") -> None:
        self.case_values.update(other.case_values)
        self.predicate_blocks |= other.predicate_blocks
        self.dead_blocks |= other.dead_blocks
        self.substituted_sites += other.substituted_sites
        self.skipped_sites += other.skipped_sites
        self.dispatchers += other.dispatchers
        self.hoisted.update(other.hoisted)
        self.split_pieces.update(other.split_pieces)
        if other.prologue is not None:
            self.prologue = other.prologue
            self.synthetic_prologue = other.synthetic_prologue
            self.routing_register = other.routing_register
        if other.original_cfg is not None:
            self.original_cfg = other.original_cfg

    def to_json(self) -> dict:
        return {
            "case_values": dict(sorted(self.case_values.items())),
            "predicate_blocks": sorted(self.predicate_blocks),
            "dead_blocks": sorted(self.dead_blocks),
            "substituted_sites": [s.to_json() for s in self.substituted_sites],
            "skipped_sites": list(self.skipped_sites),
            "dispatchers": list(self.dispatchers),
            "prologue": self.prologue,
            "routing_register": self.routing_register,
        }


@dataclass
class GroundTruth:
    functions: dict[str, FunctionTruth] = field(default_factory=dict)

    def __getitem__(self, fname: str) -> FunctionTruth:
        return self.functions[fname]

    @property
    def empty(self) -> bool:
        return all(_is_empty(t) for t in self.functions.values())

    def to_json(self) -> dict:
        return {"functions": {n: t.to_json() for n, t in self.functions.items()}}


def _is_empty(t: FunctionTruth) -> bool:
    return not (t.case_values or t.predicate_blocks or t.dead_blocks
                or t.substituted_sites or t.dispatchers)


class _Labels:
    def __init__(self, taken: Iterable[str]) -> None:
        self.taken = set(taken)

    def fresh(self, base: str) -> str:
        name, n = base, 1
        while name in self.taken:
            n += 1
            name = f"{base}{n}"
        self.taken.add(name)
        return name


def _eligible_for_substitution(inst: Instruction) -> bool:
    return (inst.opcode in SUBSTITUTABLE and not inst.conditional
            and inst.src2 is not None and isinstance(inst.dest, Reg))


# ---------------------------------------------------------------- split

def split_blocks(f: Function, split_num: int, rng: random.Random) -> tuple[Function, dict[str, list[str]]]:
    """Cut every block at up to ``split_num`` interior points where the
    flags are dead; pieces fall through to each other."""
    if split_num <= 0:
        return f, {}
    lv = liveness(f)
    labels = _Labels(f.labels)
    blocks: list[BasicBlock] = []
    pieces: dict[str, list[str]] = {}
    for b in f.blocks:
        body_len = len(b.body())
        after = lv.after_each(f, b.label)
        points = [i for i in range(1, body_len) if FLAGS not in after[i - 1]]
        chosen = sorted(rng.sample(points, min(split_num, len(points))))
        if not chosen:
            blocks.append(b)
            continue
        cuts = [0] + chosen + [len(b.instructions)]
        names = [b.label] + [labels.fresh(f"{b.label}.s") for _ in chosen]
        for name, lo, hi in zip(names, cuts, cuts[1:]):
            blocks.append(BasicBlock(name, b.instructions[lo:hi]))
        pieces[b.label] = names
    return f.with_blocks(blocks), pieces


# --------------------------------------------------------------- inssub

def inssub_pass(f: Function, cfg: ObfConfig, rng: random.Random | None = None) -> tuple[Function, FunctionTruth]:
    """Replace every eligible ADD/SUB/AND/ORR/EOR with a random
    equivalent sequence from the substitution table."""
    rng = rng or cfg.rng(f.name, "inssub")
    used = f.used_registers()
    pool = [r for r in SCRATCH_POOL if r not in used]
    truth = FunctionTruth()
    blocks = []
    # (block, index of first instruction, length, op, pattern id)
    placed: list[tuple[str, int, int, str, int]] = []
    for b in f.blocks:
        out: list[Instruction] = []
        for inst in b.instructions:
            if not _eligible_for_substitution(inst):
                out.append(inst)
                continue
            seq = _substitute(inst, pool, rng)
            if seq is None:
                truth.skipped_sites.append(f"{b.label}@{inst.address:#x}: {inst.text()}")
                out.append(inst)
                continue
            seq, pid = seq
            placed.append((b.label, len(out), len(seq), inst.opcode, pid))
            out.extend(seq)
        blocks.append(BasicBlock(b.label, tuple(out)))
    g = f.with_blocks(blocks)
    bmap = g.block_map()
    for label, start, n, op, pid in placed:
        body = bmap[label].instructions
        truth.substituted_sites.append(
            SubstitutedSite(label, body[start].address, body[start + n - 1].address, op, pid))
    return g, truth


def _substitute(inst: Instruction, pool: list[int], rng: random.Random):
    a, b, c = inst.dest, inst.src1, inst.src2
    candidates = [p for p in PATTERNS if p.op == inst.opcode]
    rng.shuffle(candidates)
    for p in candidates:
        plan = _plan_registers(p, a, b, c, pool, rng)
        if plan is None:
            continue
        env, prefix = plan
        seq = instantiate(p, env)
        if seq is None:
            continue
        return prefix + seq, p.id
    return None


def _plan_registers(p: SubPattern, a: Reg, b, c, pool: list[int], rng: random.Random):
    need = list(p.scratch)
    env = {"a": a, "b": b, "c": c}
    # the destination doubles as the first intermediate when that cannot
    # clobber an input, which is the shape O-LLVM emits
    if "s" in need and a != b and a != c:
        env["s"] = a
        need.remove("s")
    if p.uses_r:
        need.append("r")
    if len(need) > len(pool):
        return None
    regs = rng.sample(pool, len(need))
    for name, r in zip(need, regs):
        env[name] = Reg(r)
    prefix = []
    if p.uses_r:
        k = rng.getrandbits(32)
        prefix.append(Instruction("MOV", dest=env["r"], src1=Imm(k)))
    return env, prefix


# ------------------------------------------------------------------ bcf

def opaque_predicate(ry: Reg, rx: Reg, rt: Reg, true_label: str, false_label: str) -> list[Instruction]:
    """``y < 10 || x*(x-1) even`` in a single block; always takes ``true_label``."""
    return [
        ins("LDRG", ry, OPAQUE_Y),
        ins("CMP", ry, Imm(10)),
        ins("LDRG", rx, OPAQUE_X),
        ins("SUB", rt, rx, Imm(1)),
        ins("MUL", rt, rx, rt),
        ins("MOV", rt, Imm(0), cond="LT"),
        ins("ANDS", rt, rt, Imm(1)),
        ins("B", true_label, cond="EQ"),
        ins("B", false_label),
    ]


def _garbage_clone(b: BasicBlock, back_to: str, rng: random.Random) -> tuple[Instruction, ...]:
    body = [i for i in b.instructions
            if i.opcode not in ("OUT", "RET", "B", "NOP")]
    # conditions are dropped so the clone never expects incoming flags
    body = [replace(i, cond="AL", address=0) for i in body]
    rng.shuffle(body)
    return tuple(body) + (ins("B", back_to),)


def _predicate_registers(live_in: frozenset[int], rng: random.Random) -> list[Reg] | None:
    scratch = [r for r in SCRATCH_POOL if r not in live_in]
    if len(scratch) >= 3:
        return [Reg(r) for r in rng.sample(scratch, 3)]
    free = scratch + [r for r in (0, 1, 2, 3, 14) if r not in live_in]
    if len(free) < 2:
        return None
    # y's register is dead after the compare, so it can double as the temp
    rx, rt = free[:2]
    return [Reg(rt), Reg(rx), Reg(rt)]


def bcf_pass(f: Function, cfg: ObfConfig, rng: random.Random | None = None) -> tuple[Function, FunctionTruth]:
    """Guard blocks with an always-true opaque predicate whose false edge
    leads to a garbage clone that loops back to the predicate."""
    rng = rng or cfg.rng(f.name, "bcf")
    truth = FunctionTruth()
    labels = _Labels(f.labels)
    blocks = list(f.blocks)
    tail: list[BasicBlock] = []
    generated: set[str] = set()
    for _ in range(cfg.bcf_loop):
        hosts = [b.label for b in blocks if b.label not in generated]
        for label in hosts:
            if rng.randrange(100) >= cfg.bcf_prob:
                continue
            cur = f.with_blocks(blocks + tail)
            lv = liveness(cur)
            regs = _predicate_registers(lv.live_in[label], rng)
            if regs is None:
                truth.skipped_sites.append(f"bcf:{label}")
                continue
            ry, rx, rt = regs
            idx = [b.label for b in blocks].index(label)
            host = blocks[idx]
            body_label = labels.fresh(f"{label}.o")
            dead_label = labels.fresh(f"{label}.d")
            pred = BasicBlock(label, tuple(opaque_predicate(ry, rx, rt, body_label, dead_label)))
            body = BasicBlock(body_label, host.instructions)
            dead = BasicBlock(dead_label, _garbage_clone(host, label, rng))
            blocks[idx: idx + 1] = [pred, body]
            tail.append(dead)
            generated |= {label, dead_label}
            truth.predicate_blocks.add(label)
            truth.dead_blocks.add(dead_label)
    g = f.with_blocks(blocks + tail)
    truth.original_cfg = build_cfg(f)
    return g, truth


# ------------------------------------------------------------------ cff

def _immediates(f: Function) -> set[int]:
    out = set()
    for inst in f.instructions():
        for op in (inst.src1, inst.src2):
            if isinstance(op, Imm):
                out.add(to_unsigned(op.value))
    return out


def _branch_targets(f: Function) -> set[str]:
    return {t for b in f.blocks for t, _ in f.successors(b.label)}


def cff_pass(f: Function, cfg: ObfConfig, rng: random.Random | None = None) -> tuple[Function, FunctionTruth]:
    """Flatten ``f`` into a dispatcher ladder driven by R12.

    Every block except a non-target entry gets a case value; the entry
    becomes the prologue, or a fresh prologue is prepended when some edge
    leads back to the entry.
    """
    rng = rng or cfg.rng(f.name, "cff")
    truth = FunctionTruth()
    if len(f.blocks) < 2:
        return f, truth
    used = f.used_registers()
    if ROUTING_REG in used:
        raise ObfuscationError(f"{f.name}: R{ROUTING_REG} is reserved for routing")
    carried = flags_live_across_blocks(f)
    if carried:
        raise ObfuscationError(f"{f.name}: flags live into blocks {carried}")
    truth.original_cfg = build_cfg(f)
    lv = liveness(f)
    live_anywhere = set().union(*lv.live_in.values())
    labels = _Labels(f.labels)

    # temp register for ADR: dead at every block entry
    spare = [r for r in SCRATCH_POOL + (14,) if r not in used]
    tmp_choices = spare or [r for r in SCRATCH_POOL + (0, 1, 2, 3, 14) if r not in live_anywhere]
    if not tmp_choices:
        raise ObfuscationError(f"{f.name}: no register free for the dispatcher")
    rt = Reg(rng.choice(tmp_choices))
    spare = [r for r in spare if r != rt.index]

    entry = f.entry
    synthetic = entry in _branch_targets(f)
    routed = [b.label for b in f.blocks if synthetic or b.label != entry]
    prologue = labels.fresh("prologue") if synthetic else entry
    dispatchers = [labels.fresh("dispatch") for _ in routed]
    order = list(routed)
    rng.shuffle(order)  # dispatcher i routes to order[i]
    predisp = dispatchers[0]

    n_hoist = cfg.hoist if cfg.hoist is not None else max(1, len(routed) // 3)
    hoist_regs = rng.sample(spare, min(n_hoist, len(spare), len(routed)))
    hoist_labels = rng.sample(routed, len(hoist_regs))
    reg_for = dict(zip(hoist_labels, hoist_regs))

    # case values depend on final addresses; until then the glob slot of a
    # MOV carries a "case:<label>" placeholder
    def route(target: str, cond: str = "AL") -> Instruction:
        if target in reg_for:
            return Instruction("MOV", cond, dest=Reg(ROUTING_REG), src1=Reg(reg_for[target]))
        return Instruction("MOV", cond, dest=Reg(ROUTING_REG), src1=Imm(0), glob=f"case:{target}")

    def rewrite(b: BasicBlock) -> tuple[Instruction, ...]:
        succ = f.successors(b.label)
        if not succ:
            return b.instructions
        body = list(b.body())
        if len(succ) == 1:
            body.append(route(succ[0][0]))
        else:
            (t, _), (fl, _) = succ
            cond = b.instructions[-2].cond if b.terminator == "cond_pair" else b.instructions[-1].cond
            body += [route(fl), route(t, cond)]
        body.append(ins("B", predisp))
        return tuple(body)

    hoist_prefix = [Instruction("MOV", dest=Reg(r), src1=Imm(0), glob=f"case:{lbl}")
                    for lbl, r in zip(hoist_labels, hoist_regs)]
    new_blocks: list[BasicBlock] = []
    if synthetic:
        new_blocks.append(BasicBlock(prologue, tuple(hoist_prefix) + (route(entry), ins("B", predisp))))
    else:
        eb = f.block(entry)
        new_blocks.append(BasicBlock(prologue, tuple(hoist_prefix) + rewrite(eb)))
    for i, (d, tgt) in enumerate(zip(dispatchers, order)):
        seq = [Instruction("ADR", dest=rt, src1=Imm(0)),
               ins("CMP", Reg(ROUTING_REG), rt),
               ins("B", tgt, cond="EQ")]
        if i == len(dispatchers) - 1:
            seq.append(ins("B", predisp))
        new_blocks.append(BasicBlock(d, tuple(seq)))
    for b in f.blocks:
        if b.label == entry and not synthetic:
            continue
        new_blocks.append(BasicBlock(b.label, rewrite(b)))
    g = f.with_blocks(new_blocks)

    # draw alphas against final addresses
    avoid = _immediates(f)
    cases: dict[str, int] = {}
    alphas: dict[str, int] = {}
    taken: set[int] = set()
    for d, tgt in zip(dispatchers, order):
        adr_addr = g.block(d).instructions[0].address
        while True:
            alpha = rng.randint(-ALPHA_RANGE, ALPHA_RANGE)
            value = to_unsigned(adr_addr + 8 + alpha)
            if value not in taken and value not in avoid:
                break
        taken.add(value)
        cases[tgt] = value
        alphas[d] = alpha

    def patch(inst: Instruction, label: str) -> Instruction:
        if inst.opcode == "ADR" and label in alphas:
            return replace(inst, src1=Imm(alphas[label]))
        if inst.glob and inst.glob.startswith("case:"):
            return replace(inst, src1=Imm(cases[inst.glob[5:]]), glob=None)
        return inst

    g = Function(g.name, g.arity, tuple(
        BasicBlock(b.label, tuple(patch(i, b.label) for i in b.instructions)) for b in g.blocks
    ), g.base_address)

    truth.case_values = cases
    truth.dispatchers = dispatchers
    truth.prologue = prologue
    truth.synthetic_prologue = synthetic
    truth.routing_register = ROUTING_REG
    truth.hoisted = {r: cases[lbl] for lbl, r in zip(hoist_labels, hoist_regs)}
    return g, truth


# ------------------------------------------------------------- pipeline

def obfuscate_function(f: Function, cfg: ObfConfig) -> tuple[Function, FunctionTruth]:
    truth = FunctionTruth()
    if "cff" in cfg.passes and cfg.split_num:
        f, pieces = split_blocks(f, cfg.split_num, cfg.rng(f.name, "split"))
        truth.split_pieces = pieces
    if "inssub" in cfg.passes:
        f, t = inssub_pass(f, cfg)
        truth.merge(t)
    if "bcf" in cfg.passes:
        f, t = bcf_pass(f, cfg)
        truth.merge(t)
    if "cff" in cfg.passes:
        f, t = cff_pass(f, cfg)
        truth.merge(t)
    return f, truth


def obfuscate(p: Program, cfg: ObfConfig) -> tuple[Program, GroundTruth]:
    """Apply the configured passes to every function of ``p``.

    Functions are laid out back to back before each one is transformed so
    that PC-relative case values stay valid in the final program.
    """
    gt = GroundTruth()
    funcs: dict[str, Function] = {}
    addr = min((fn.base_address for fn in p.functions.values()), default=0x800)
    for name, fn in p.functions.items():
        fn = fn.with_layout(addr)
        fn, truth = obfuscate_function(fn, cfg)
        funcs[name] = fn
        gt.functions[name] = truth
        addr = fn.end_address
    globals_ = dict(p.globals)
    if "bcf" in cfg.passes and any(t.predicate_blocks for t in gt.functions.values()):
        globals_.setdefault(OPAQUE_X, 0)
        globals_.setdefault(OPAQUE_Y, 0)
    out = Program(funcs, globals_)
    out.validate()
    return out, gt
