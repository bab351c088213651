"""Recover the control flow hidden behind a flattening dispatcher.

Blocks are classified around the dispatcher ladder, each original block
is executed symbolically up to the next original block (once, or twice
with the routing condition forced each way), and the discovered edges are
simplified by two rewriting rules.  The order in which blocks are analysed
follows a two-pointer queue so that most blocks start from a state
inherited from a predecessor rather than from a blank one.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from ..analysis import constant_registers
from ..detect import DispatcherDict, build_dispatcher_dict, detect_obfuscations, unreferenced_cases
from ..ir.cfg import Cfg, Edge, build_cfg
from ..ir.model import NOP, BasicBlock, Function, Imm, Instruction, IRError, Reg, ins, to_unsigned
from ..symexec import (Engine, EngineConfig, NoCondMove, StateStore, SymExecError, SymState,
                       hook_calls, is_concrete)
from .bcf import deobfuscate_bcf
from .inssub import deobfuscate_inssub

PROLOGUE, DISPATCHER, PREDISPATCHER, RETURN, RELEVANT, OTHER = (
    "Prologue", "Dispatcher", "PreDispatcher", "Return", "Relevant", "Other")


class ClassificationError(IRError):
    pass


@dataclass
class BlockClass:
    kinds: dict[str, str]
    prologue: str
    dispatchers: list[str]
    predispatchers: list[str]
    relevants: list[str]
    returns: list[str]
    merged: dict[str, list[str]] = field(default_factory=dict)  # folded block -> parents
    unreachable: set[str] = field(default_factory=set)
    dispatch: DispatcherDict = field(default_factory=DispatcherDict)

    @property
    def oo_blocks(self) -> list[str]:
        return [self.prologue] + self.relevants + self.returns


def classify_blocks(f: Function, d: DispatcherDict) -> BlockClass:
    if not d:
        raise ClassificationError(f"{f.name}: no dispatcher")
    g = build_cfg(f)
    ins_deg, out_deg = g.degrees()
    preds: dict[str, list[str]] = {n: [] for n in g.nodes}
    for e in g.edges:
        preds[e.dst].append(e.src)
    dispatchers = [b for b in f.labels if b in d.entries]
    dset = set(dispatchers)
    pre = [b for b in dispatchers if ins_deg[b] > 2]
    if not pre:
        # tiny bodies: the ladder head is the dispatcher entered from outside
        pre = [b for b in dispatchers if any(p not in dset for p in preds[b])]
    if not pre:
        raise ClassificationError(f"{f.name}: no pre-dispatcher")
    prologue = f.entry

    found: set[str] = set()
    todo = deque(p for b in pre for p in preds[b] if p not in dset)
    while todo:
        n = todo.popleft()
        if n in found or n == prologue or n in dset:
            continue
        found.add(n)
        todo.extend(p for p in preds[n] if p not in dset)

    # a block reached only by direct jumps from several parents is folded
    # into each of them
    merged = {n: sorted(preds[n]) for n in found
              if len(preds[n]) >= 2 and not (set(preds[n]) & dset)}
    returns = [b for b in f.labels if out_deg[b] == 0 and b != prologue]
    relevants = [b for b in f.labels if b in found and b not in merged and b not in returns]
    unreachable = unreferenced_cases(f, d) & set(relevants + returns)
    relevants = [b for b in relevants if b not in unreachable]
    returns = [b for b in returns if b not in unreachable]

    kinds = {}
    for b in f.labels:
        if b == prologue:
            kinds[b] = PROLOGUE
        elif b in pre:
            kinds[b] = PREDISPATCHER
        elif b in dset:
            kinds[b] = DISPATCHER
        elif b in returns:
            kinds[b] = RETURN
        elif b in relevants:
            kinds[b] = RELEVANT
        else:
            kinds[b] = OTHER
    return BlockClass(kinds, prologue, dispatchers, pre, relevants, returns, merged, unreachable, d)


def _path(f: Function, label: str, stop: set[str]) -> list[Instruction]:
    """Instructions from ``label`` along direct jumps until a stop block."""
    out: list[Instruction] = []
    seen = set()
    cur: str | None = label
    while cur is not None and cur not in seen:
        seen.add(cur)
        b = f.block(cur)
        out.extend(b.instructions)
        succ = f.successors(cur)
        cur = succ[0][0] if len(succ) == 1 and succ[0][0] not in stop else None
    return out


def successor_count(label: str, f: Function, d: DispatcherDict, bc: BlockClass | None = None) -> int:
    """2 when a conditional move touching a case value lies on the path
    from ``label`` to the pre-dispatcher, else 1.  The prologue counts 2."""
    if bc is not None and label == bc.prologue:
        return 2
    values = d.values
    stop = set(d.entries) | (set(bc.oo_blocks) - {label} if bc else set())
    tainted = {r for r, v in constant_registers(f).items() if v in values}
    for inst in _path(f, label, stop):
        src = inst.src1
        if inst.conditional and inst.opcode in ("MOV", "MVN"):
            if inst.dest == d.routing_register or inst.dest.index in tainted:
                return 2
            if isinstance(src, Imm) and to_unsigned(src.value) in values:
                return 2
            if isinstance(src, Reg) and src.index in tainted:
                return 2
        if inst.opcode == "MOV" and not inst.conditional:
            if (isinstance(src, Imm) and to_unsigned(src.value) in values) or \
                    (isinstance(src, Reg) and src.index in tainted):
                tainted.add(inst.dest.index)
                continue
        tainted -= inst.writes()
    return 1


@dataclass
class BlockQueue:
    sequence: list[str]
    execution_pointer: int = 0
    swap_pointer: int = 1
    log: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.swap_pointer = min(self.swap_pointer, len(self.sequence))
        self.pos = {b: k for k, b in enumerate(self.sequence)}

    def begin(self) -> str:
        """Enter the block at the execution pointer."""
        if self.execution_pointer == self.swap_pointer:
            self.swap_pointer += 1
        self._check()
        return self.sequence[self.execution_pointer]

    def promote(self, label: str) -> None:
        """Move a freshly found successor up to the swap pointer."""
        k = self.pos.get(label)
        if k is None or k < self.swap_pointer:
            return
        sp = self.swap_pointer
        a, b = self.sequence[sp], self.sequence[k]
        self.sequence[sp], self.sequence[k] = b, a
        self.pos[a], self.pos[b] = k, sp
        self.swap_pointer += 1
        self._check()

    def advance(self) -> bool:
        self.execution_pointer += 1
        return self.execution_pointer < len(self.sequence)

    def _check(self) -> None:
        self.log.append((self.execution_pointer, self.swap_pointer))
        if not 0 <= self.execution_pointer <= self.swap_pointer <= len(self.sequence):
            raise AssertionError(f"queue pointers out of order: {self.log[-1]}")


@dataclass
class RecoveredCfg:
    cfg: Cfg
    classes: BlockClass
    queue: BlockQueue
    order: list[str] = field(default_factory=list)  # analysis order
    restored: dict[str, bool] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)

    @property
    def partial(self) -> bool:
        return bool(self.failures)

    @property
    def restored_fraction(self) -> float:
        others = [b for b in self.order if b != self.classes.prologue]
        if not others:
            return 1.0
        return sum(self.restored[b] for b in others) / len(others)

    def to_json(self) -> dict:
        return {
            "relevants": list(self.classes.relevants),
            "edges": [list(e) for e in sorted(self.cfg.edges)],
            "restored_fraction": self.restored_fraction,
            "partial": self.partial,
            "failures": dict(self.failures),
        }


def _content(f: Function, label: str, bc: BlockClass) -> tuple[Instruction, ...]:
    b = f.block(label)
    insts = list(b.instructions)
    for t, _ in f.successors(label):
        if t in bc.merged:
            insts += _content(f, t, bc)
    return tuple(insts)


def recover_flow(f: Function, bc: BlockClass, saved_states: int = 1,
                 engine_cfg: EngineConfig | None = None) -> RecoveredCfg:
    """Dynamic queue scheduling over chopped symbolic runs."""
    d = bc.dispatch
    engine = Engine(f, engine_cfg or hook_calls(EngineConfig()))
    store = StateStore(saved_states)
    queue = BlockQueue(bc.oo_blocks)
    stop = set(bc.oo_blocks)
    returns = set(bc.returns)
    values = d.values
    edges: set[Edge] = set()
    rc = RecoveredCfg(Cfg(bc.prologue), bc, queue)

    def qualifies(inst: Instruction, s: SymState) -> bool:
        if inst.dest == d.routing_register:
            return True
        src = inst.src1
        v = src.value if isinstance(src, Imm) else s.regs[src.index]
        return is_concrete(v) and to_unsigned(v) in values

    def run(s: SymState) -> tuple[str, SymState]:
        s = engine.step_out(s)
        if s.returned:
            raise SymExecError(f"returned inside {s.block} before reaching an original block")
        return engine.run_until(s, stop)

    def record(src: str, reached: str, kind: str, s: SymState) -> None:
        edges.add(Edge(src, reached, kind))
        store.save(reached, s)
        queue.promote(reached)

    while queue.execution_pointer < len(queue.sequence):
        label = queue.begin()
        rc.order.append(label)
        rc.restored[label] = store.has(label)
        state = store.restore(label)
        if label not in returns:
            try:
                if successor_count(label, f, d, bc) == 2:
                    try:
                        forks = engine.fork_at_condmove(state, qualifies, stop)
                    except NoCondMove:
                        forks = None
                    if forks is None:
                        reached, out = run(state)
                        record(label, reached, "uncond", out)
                    else:
                        for s, kind in zip(forks, ("true", "false")):
                            reached, out = run(s)
                            record(label, reached, kind, out)
                else:
                    reached, out = run(state)
                    record(label, reached, "uncond", out)
            except SymExecError as exc:
                rc.failures[label] = str(exc)
        queue.advance()

    nodes = {b: _content(f, b, bc) for b in bc.oo_blocks}
    rc.cfg = Cfg(bc.prologue, nodes, frozenset(edges))
    return rc


# ------------------------------------------------------------ reconstruction

def _plumbing(inst: Instruction, bc: BlockClass, hoisted: set[int]) -> bool:
    d = bc.dispatch
    if inst.opcode == "NOP":
        return True
    if inst.opcode in ("MOV", "MVN") and inst.dest == d.routing_register:
        return True
    if inst.opcode == "B" and not inst.conditional and inst.target in d.entries:
        return True
    if inst.opcode == "B" and not inst.conditional and inst.target in bc.merged:
        return True
    if inst.opcode == "MOV" and not inst.conditional and inst.dest.index in hoisted:
        return True
    return False


def strip_plumbing(rc: RecoveredCfg, f: Function | None = None) -> tuple[dict[str, tuple], dict[str, str]]:
    """Node contents without routing code, plus the branch condition of
    each two-way node."""
    bc = rc.classes
    d = bc.dispatch
    hoisted: set[int] = set()
    if f is not None:
        hoisted = {r for r, v in constant_registers(f).items() if v in d.values and Reg(r) != d.routing_register}
    nodes, conds = {}, {}
    for n, content in rc.cfg.nodes.items():
        for inst in content:
            if inst.opcode in ("MOV", "MVN") and inst.conditional and inst.dest == d.routing_register:
                conds[n] = inst.cond
        nodes[n] = tuple(i for i in content if not _plumbing(i, bc, hoisted))
    return nodes, conds


def _alike(contents: list[tuple[Instruction, ...]]) -> bool:
    """Same instruction shapes; immediates either equal or consecutive."""
    first = contents[0]
    if any(len(c) != len(first) for c in contents) or not first:
        return False
    stepping = False
    for column in zip(*contents):
        head = column[0]
        for i in column[1:]:
            if (i.opcode, i.cond, i.dest, i.target, i.glob) != (head.opcode, head.cond, head.dest, head.target, head.glob):
                return False
        for slot in ("src1", "src2"):
            ops = [getattr(i, slot) for i in column]
            if all(isinstance(o, Imm) for o in ops):
                vals = [o.value for o in ops]
                if len(set(vals)) == 1:
                    continue
                diffs = {b - a for a, b in zip(vals, vals[1:])}
                if diffs in ({1}, {-1}):
                    stepping = True
                    continue
                return False
            if len(set(ops)) != 1:
                return False
    return stepping


class _Graph:
    """Mutable view used by the rewriting rules."""

    def __init__(self, entry: str, nodes: dict[str, tuple], edges, conds: dict[str, str]):
        self.entry = entry
        self.nodes = dict(nodes)
        self.edges = set(edges)
        self.conds = dict(conds)

    def succ(self, n: str) -> list[Edge]:
        return sorted(e for e in self.edges if e.src == n)

    def pred(self, n: str) -> list[Edge]:
        return sorted(e for e in self.edges if e.dst == n)

    def in_degree(self, n: str) -> int:
        return len(self.pred(n)) + (n == self.entry)

    def order(self) -> list[str]:
        seen, out, todo = {self.entry}, [], deque([self.entry])
        while todo:
            n = todo.popleft()
            out.append(n)
            for e in self.succ(n):
                if e.dst not in seen:
                    seen.add(e.dst)
                    todo.append(e.dst)
        return out

    def rule_one(self) -> bool:
        for p in self.order():
            out = self.succ(p)
            if len(out) != 1:
                continue
            c = out[0].dst
            if c == p or self.in_degree(c) > 1:
                continue
            self.nodes[p] = self.nodes[p] + self.nodes.pop(c)
            self.conds.pop(p, None)
            if c in self.conds:
                self.conds[p] = self.conds.pop(c)
            self.edges.discard(out[0])
            for e in self.succ(c):
                self.edges.discard(e)
                self.edges.add(Edge(p, p if e.dst == c else e.dst, e.kind))
            return True
        return False

    def rule_two(self) -> bool:
        for head in self.order():
            out = self.succ(head)
            if len(out) != 2:
                continue
            for exit_edge in out:
                x = exit_edge.dst
                chain = [head]
                cur = head
                while True:
                    nxt = [e for e in self.succ(cur) if e.dst != x]
                    if len(nxt) != 1:
                        break
                    n = nxt[0].dst
                    s = self.succ(n)
                    if n in chain or n == x or len(s) != 2 or x not in {e.dst for e in s} \
                            or self.in_degree(n) != 1:
                        break
                    chain.append(n)
                    cur = n
                if len(chain) < 3 or not _alike([self.nodes[n] for n in chain]):
                    continue
                last = chain[-1]
                cont = [e for e in self.succ(last) if e.dst != x][0]
                for n in chain:
                    for e in self.succ(n):
                        self.edges.discard(e)
                for n in chain[1:]:
                    del self.nodes[n]
                    self.conds.pop(n, None)
                self.edges |= {Edge(head, x, exit_edge.kind), Edge(head, cont.dst, cont.kind),
                               Edge(head, head, "uncond")}
                return True
        return False

    def unify_copies(self, candidates: set[str]) -> bool:
        """Re-join duplicated nodes that ended up identical."""
        seen: dict[tuple, str] = {}
        for n in self.order():
            if n not in candidates:
                continue
            key = (self.nodes[n], tuple((e.dst, e.kind) for e in self.succ(n)))
            if key in seen:
                keep = seen[key]
                for e in self.pred(n):
                    self.edges.discard(e)
                    self.edges.add(Edge(e.src, keep, e.kind))
                for e in self.succ(n):
                    self.edges.discard(e)
                del self.nodes[n]
                return True
            seen[key] = n
        return False

    def prune(self) -> None:
        keep = set(self.order())
        self.nodes = {n: c for n, c in self.nodes.items() if n in keep}
        self.edges = {e for e in self.edges if e.src in keep and e.dst in keep}


def _with_branches(g: _Graph) -> dict[str, tuple[Instruction, ...]]:
    out = {}
    for n, content in g.nodes.items():
        succ = g.succ(n)
        tail: list[Instruction] = []
        kinds = {e.kind: e.dst for e in succ}
        if len(succ) == 1:
            tail = [ins("B", succ[0].dst)]
        elif len(succ) == 2 and "true" in kinds and "false" in kinds:
            tail = [ins("B", kinds["true"], cond=g.conds.get(n, "NE")), ins("B", kinds["false"])]
        out[n] = content + tuple(tail)
    return out


def simplify(g: Cfg, conds: dict[str, str] | None = None, duplicated: set[str] = frozenset(),
             empty_entry_elision: bool = True) -> Cfg:
    """Apply the merge and loop rules to a fixpoint.

    Node contents are taken as branch-free; branches matching the final
    edges are appended to the result."""
    m = _Graph(g.entry, g.nodes, g.edges, conds or {})
    m.prune()
    if empty_entry_elision and not m.nodes.get(m.entry) and len(m.succ(m.entry)) == 1:
        nxt = m.succ(m.entry)[0].dst
        if nxt != m.entry:
            m.edges.discard(m.succ(m.entry)[0])
            del m.nodes[m.entry]
            m.entry = nxt
            m.prune()
    while m.rule_one() or m.rule_two() or m.unify_copies(set(duplicated)):
        pass
    m.prune()
    return Cfg(m.entry, _with_branches(m), frozenset(m.edges))


def reconstruct(rc: RecoveredCfg, f: Function | None = None) -> Cfg:
    """Strip routing code from the recovered blocks and simplify."""
    nodes, conds = strip_plumbing(rc, f)
    dup = {p for parents in rc.classes.merged.values() for p in parents}
    g = Cfg(rc.cfg.entry, nodes, rc.cfg.edges)
    return simplify(g, conds, dup)


def strip_branches(content) -> tuple[Instruction, ...]:
    return tuple(i for i in content if i.opcode not in ("B", "NOP"))


def reconstruct_plain(g: Cfg) -> Cfg:
    """The rules applied to an ordinary CFG (branches are re-synthesised)."""
    conds = {}
    for n, content in g.nodes.items():
        for i in content:
            if i.opcode == "B" and i.conditional:
                conds[n] = i.cond
    return simplify(Cfg(g.entry, {n: strip_branches(c) for n, c in g.nodes.items()}, g.edges), conds,
                    empty_entry_elision=False)


def recovered_function(f: Function, g: Cfg) -> Function:
    """Lay a recovered CFG out as a listing, entry first then breadth-first."""
    order = _Graph(g.entry, g.nodes, g.edges, {}).order()
    order += [n for n in g.nodes if n not in order]
    blocks = [BasicBlock(n, g.nodes[n] or (NOP,)) for n in order]
    return Function(f.name, f.arity, tuple(blocks), f.base_address).with_layout()


# ------------------------------------------------------------ pipeline

def normalise_edges(edges) -> set[tuple[str, str, str]]:
    """Fallthrough and direct jumps both count as unconditional."""
    return {(e.src, e.dst, "uncond" if e.kind == "fallthrough" else e.kind) for e in edges}


@dataclass
class DeobResult:
    function: Function  # rewritten after the InsSub and BCF stages
    recovered: Cfg
    report: dict
    recovery: RecoveredCfg | None = None


def deobfuscate_function(f: Function, saved_states: int = 1,
                         engine_cfg: EngineConfig | None = None) -> DeobResult:
    """InsSub, then BCF, then (when a dispatcher is present) CFF recovery."""
    detection = detect_obfuscations(f)
    g, sites = deobfuscate_inssub(f)
    g, ps, removed = deobfuscate_bcf(g)
    report: dict = {
        "function": f.name,
        "detected": detection.to_json(),
        "stages": {
            "inssub": {"sites": len(sites), "retained": sum(len(s.retained) for s in sites)},
            "bcf": {"predicates": sorted(ps.predicate_blocks), "dead_removed": sorted(removed)},
            "cff": None,
        },
    }
    try:
        d = build_dispatcher_dict(g)
    except IRError:
        d = DispatcherDict()
    if not d:
        return DeobResult(g, build_cfg(g), report)
    bc = classify_blocks(g, d)
    rc = recover_flow(g, bc, saved_states, engine_cfg)
    recovered = reconstruct(rc, g)
    report["stages"]["bcf"]["dead_removed"] = sorted(set(removed) | bc.unreachable)
    report["stages"]["cff"] = rc.to_json()
    return DeobResult(g, recovered, report, rc)
