"""Shared fixtures: the bundled corpus and obfuscation settings."""

from __future__ import annotations

import random
from fractions import Fraction
from functools import lru_cache
from importlib import resources

import pytest

from deobflab.ir import BasicBlock, Cfg, Edge, Function, Imm, Machine, Program, Reg, ins, parse_program
from deobflab.metrics import content_cost
from deobflab.obfuscator import ObfConfig, obfuscate

PASS_SETS = {
    "inssub": ("inssub",),
    "bcf": ("bcf",),
    "cff": ("cff",),
    "all": ("inssub", "bcf", "cff"),
}
CONFIGS = {
    "default": {},
    "bcf_prob=50": {"bcf_prob": 50},
    "split_num=3": {"split_num": 3},
}


@lru_cache(maxsize=None)
def corpus() -> dict[str, Program]:
    root = resources.files("deobflab") / "corpus"
    out = {}
    for entry in sorted(root.iterdir(), key=lambda e: e.name):
        if entry.name.endswith(".asm"):
            out[entry.name[:-4]] = parse_program(entry.read_text())
    return out


def corpus_source(name: str) -> str:
    return (resources.files("deobflab") / "corpus" / f"{name}.asm").read_text()


@lru_cache(maxsize=None)
def obfuscated(name: str, passes: tuple[str, ...], **kw):
    return obfuscate(corpus()[name], ObfConfig(passes=passes, **kw))


def main_function(p: Program) -> str:
    return next(iter(p.functions))


CONDS = ("EQ", "NE", "LT", "GT", "LE", "GE")
ALU = ("ADD", "SUB", "RSB", "MUL", "AND", "ORR", "EOR", "ANDS", "SUBS")


def random_straight_line(rng: random.Random, length: int = 20) -> Program:
    """A branch-free function over R0..R11 mixing every non-control opcode."""
    def reg() -> Reg:
        return Reg(rng.randrange(12))

    def operand():
        return reg() if rng.random() < 0.6 else Imm(rng.randint(-4096, 4096))

    body = []
    for _ in range(rng.randint(1, length)):
        kind = rng.choice(("alu", "alu", "mov", "cmp", "cond", "out", "glob", "adr", "nop"))
        cond = rng.choice(CONDS) if rng.random() < 0.2 else "AL"
        if kind == "alu":
            body.append(ins(rng.choice(ALU), reg(), reg(), operand(), cond=cond))
        elif kind == "mov":
            body.append(ins(rng.choice(("MOV", "MVN")), reg(), operand(), cond=cond))
        elif kind == "cmp":
            body.append(ins("CMP", reg(), operand(), cond=cond))
        elif kind == "cond":
            body.append(ins("MOV", reg(), operand(), cond=rng.choice(CONDS)))
        elif kind == "out":
            body.append(ins("OUT", reg()))
        elif kind == "glob":
            body.append(ins("STRG", reg(), "@g") if rng.random() < 0.5 else ins("LDRG", reg(), "@g"))
        elif kind == "adr":
            body.append(ins("ADR", reg(), Imm(rng.randint(-4096, 4096))))
        else:
            body.append(ins("NOP"))
    body.append(ins("RET"))
    fn = Function("f", 4, (BasicBlock("e", tuple(body)),)).with_layout()
    return Program({"f": fn}, {"g": rng.getrandbits(32)})


def machine_trace(p: Program, fn: str, args) -> list[tuple]:
    """(instruction, registers, flags) after every executed slot."""
    out = []
    Machine(p, trace=lambda _f, inst, regs, flags: out.append((inst, regs, flags))).run(fn, args)
    return out


CONTENT_POOL = (
    ins("ADD", Reg(0), Reg(1), Imm(1)), ins("ADD", Reg(2), Reg(2), Reg(3)), ins("SUB", Reg(0), Reg(0), Imm(4)),
    ins("CMP", Reg(0), Imm(0)), ins("MOV", Reg(1), Imm(7)), ins("LDRG", Reg(4), "@g"), ins("OUT", Reg(0)),
)


def random_cfg(rng: random.Random, max_nodes: int = 6) -> Cfg:
    n = rng.randint(0, max_nodes)
    names = [f"n{k}" for k in range(n)]
    nodes = {v: tuple(rng.choice(CONTENT_POOL) for _ in range(rng.randint(0, 3))) for v in names}
    edges = set()
    for v in names:
        for kind in rng.sample(("true", "false", "uncond"), rng.randint(0, 2)):
            edges.add(Edge(v, rng.choice(names), kind))
    return Cfg(names[0] if names else "n0", nodes, frozenset(edges))


def brute_force_sigma(g1: Cfg, g2: Cfg) -> Fraction:
    """Cheapest partial injection of g1's nodes into g2's, tried exhaustively."""
    in1, out1 = g1.degrees()
    in2, out2 = g2.degrees()
    n1, n2 = list(g1.nodes), list(g2.nodes)

    def sub(u, v):
        return abs(out1[u] - out2[v]) + abs(in1[u] - in2[v]) + content_cost(g1.nodes[u], g2.nodes[v])

    best = None

    def go(k: int, used: frozenset, acc: Fraction) -> None:
        nonlocal best
        if best is not None and acc >= best:
            return
        if k == len(n1):
            total = acc + sum(in2[v] + out2[v] + 1 for v in n2 if v not in used)
            if best is None or total < best:
                best = total
            return
        u = n1[k]
        go(k + 1, used, acc + in1[u] + out1[u] + 1)
        for v in n2:
            if v not in used:
                go(k + 1, used | {v}, acc + sub(u, v))

    go(0, frozenset(), Fraction(0))
    return best


@pytest.fixture(scope="session")
def programs() -> dict[str, Program]:
    return corpus()
