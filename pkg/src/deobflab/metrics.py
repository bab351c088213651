"""Evaluation metrics: opcode-vector distance, CFG similarity through an
assignment-based graph edit distance, and I/O equivalence testing."""

from __future__ import annotations

import math
import random
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .ir.cfg import Cfg
from .ir.interp import CompiledProgram, ExecutionError, compile_program
from .ir.model import Function, Imm, Instruction, Program, Reg

INT_MIN = -(1 << 31)
INT_MAX = (1 << 31) - 1


# ------------------------------------------------------------ opcode vectors

def opcode_vector(f: Function) -> Counter:
    return Counter(i.opcode for i in f.instructions() if i.opcode != "NOP")


def euclidean_distance(a: Function, b: Function) -> float:
    x, y = opcode_vector(a), opcode_vector(b)
    return math.sqrt(sum((x[k] - y[k]) ** 2 for k in set(x) | set(y)))


# ------------------------------------------------------------ graph similarity

def _kind(op) -> str:
    if isinstance(op, Reg):
        return "r"
    if isinstance(op, Imm):
        return "i"
    return "-"


def _signature(inst: Instruction) -> tuple:
    return (inst.opcode, _kind(inst.dest), _kind(inst.src1), _kind(inst.src2),
            inst.target is not None, inst.glob is not None)


def _bag(content) -> Counter:
    return Counter(_signature(i) for i in content if i.opcode != "NOP")


def content_cost(c1, c2) -> Fraction:
    """1 minus the multiset overlap of instruction shapes, relative to the
    longer block; two empty blocks cost nothing."""
    a, b = _bag(c1), _bag(c2)
    longest = max(sum(a.values()), sum(b.values()))
    if longest == 0:
        return Fraction(0)
    return 1 - Fraction(sum((a & b).values()), longest)


def cost_matrix(g1: Cfg, g2: Cfg) -> tuple[list[list[Fraction]], list[str], list[str]]:
    """Square (n1+n2) matrix: substitutions top left, deletions and
    insertions on the diagonals of the side blocks, zero bottom right."""
    n1, n2 = list(g1.nodes), list(g2.nodes)
    in1, out1 = g1.degrees()
    in2, out2 = g2.degrees()
    size = len(n1) + len(n2)
    sub = [[abs(out1[u] - out2[v]) + abs(in1[u] - in2[v]) + content_cost(g1.nodes[u], g2.nodes[v])
            for v in n2] for u in n1]
    dele = [in1[u] + out1[u] + 1 for u in n1]
    inse = [in2[v] + out2[v] + 1 for v in n2]
    big = Fraction(sum(sum(r) for r in sub) + sum(dele) + sum(inse) + 1)
    m = [[big] * size for _ in range(size)]
    for i in range(len(n1)):
        for j in range(len(n2)):
            m[i][j] = sub[i][j]
        m[i][len(n2) + i] = Fraction(dele[i])
    for j in range(len(n2)):
        m[len(n1) + j][j] = Fraction(inse[j])
        for i in range(len(n1)):
            m[len(n1) + j][len(n2) + i] = Fraction(0)
    return m, n1, n2


def cfg_edit_distance(g1: Cfg, g2: Cfg) -> tuple[float, dict[str, str | None]]:
    """Minimal assignment cost and the node pairing (None = deleted)."""
    m, n1, n2 = cost_matrix(g1, g2)
    if not m:
        return 0.0, {}
    rows, cols = linear_sum_assignment(np.array(m, dtype=float))
    sigma = sum((m[r][c] for r, c in zip(rows, cols)), Fraction(0))
    mapping: dict[str, str | None] = {}
    for r, c in zip(rows, cols):
        if r < len(n1):
            mapping[n1[r]] = n2[c] if c < len(n2) else None
    return float(sigma), mapping


@dataclass
class SimilarityReport:
    sigma: float
    n1: int
    n2: int
    e1: int
    e2: int
    sim: float
    mapping: dict[str, str | None] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"metric": "sim", "value": self.sim, "sigma": self.sigma,
                "nodes": [self.n1, self.n2], "edges": [self.e1, self.e2],
                "mapping": dict(self.mapping)}


def cfg_similarity(g1: Cfg, g2: Cfg) -> SimilarityReport:
    norm = g1.n_nodes + g2.n_nodes + g1.n_edges + g2.n_edges
    if norm == 0:
        raise ValueError("similarity of two empty graphs is undefined")
    sigma, mapping = cfg_edit_distance(g1, g2)
    return SimilarityReport(sigma, g1.n_nodes, g2.n_nodes, g1.n_edges, g2.n_edges,
                            1 - sigma / norm, mapping)


# ------------------------------------------------------------ I/O equivalence

@dataclass(frozen=True)
class IoProtocol:
    n_small: int = 500
    n_large: int = 500
    n_random: int = 500
    seed: int = 0xD1A0A

    @property
    def total(self) -> int:
        return self.n_small + self.n_large + self.n_random

    def inputs(self, arity: int) -> Iterator[list[int]]:
        """Each trial draws every parameter from its own category."""
        for t in range(self.n_small):
            yield [INT_MIN + t] * arity
        for t in range(self.n_large):
            yield [INT_MAX - t] * arity
        rng = random.Random(self.seed)
        for t in range(self.n_random):
            if t == 0:
                yield [0] * arity
            else:
                yield [rng.getrandbits(32) for _ in range(arity)]


def _outcome(cp: CompiledProgram, fn: str, args: Sequence[int]):
    try:
        r = cp.run(fn, args)
    except ExecutionError:
        return "diverged"
    return r.return_value, r.out_stream


def io_equivalence(p1: Program, fn: str, p2: Program, fn2: str | None = None,
                   proto: IoProtocol | None = None) -> float:
    """Percentage of protocol inputs on which both programs agree."""
    proto = proto or IoProtocol()
    fn2 = fn2 or fn
    arity = p1.function(fn).arity
    if p2.function(fn2).arity != arity:
        raise ValueError(f"arity mismatch: {fn} vs {fn2}")
    c1, c2 = compile_program(p1), compile_program(p2)
    same = sum(_outcome(c1, fn, a) == _outcome(c2, fn2, a) for a in proto.inputs(arity))
    return 100.0 * same / proto.total
