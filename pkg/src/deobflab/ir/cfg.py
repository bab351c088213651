"""Control-flow graphs over basic blocks, plus DOT rendering."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

from .model import Function, Instruction

EDGE_KINDS = ("uncond", "true", "false", "fallthrough")


class Edge(NamedTuple):
    src: str
    dst: str
    kind: str


@dataclass(frozen=True)
class Cfg:
    """Nodes carry their instruction content; edges are typed.

    Graphs built from a :class:`Function` keep unreachable blocks so that
    dead branches stay visible until they are removed explicitly.
    """

    entry: str
    nodes: dict[str, tuple[Instruction, ...]] = field(default_factory=dict)
    edges: frozenset[Edge] = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "edges", frozenset(Edge(*e) for e in self.edges))

    def successors(self, node: str) -> list[Edge]:
        return sorted(e for e in self.edges if e.src == node)

    def predecessors(self, node: str) -> list[Edge]:
        return sorted(e for e in self.edges if e.dst == node)

    def out_degree(self, node: str) -> int:
        return sum(1 for e in self.edges if e.src == node)

    def in_degree(self, node: str) -> int:
        return sum(1 for e in self.edges if e.dst == node)

    def degrees(self) -> tuple[dict[str, int], dict[str, int]]:
        ins = dict.fromkeys(self.nodes, 0)
        outs = dict.fromkeys(self.nodes, 0)
        for e in self.edges:
            outs[e.src] += 1
            ins[e.dst] += 1
        return ins, outs

    def reachable(self, start: str | None = None) -> set[str]:
        start = self.entry if start is None else start
        if start not in self.nodes:
            return set()
        succ: dict[str, list[str]] = {n: [] for n in self.nodes}
        for e in self.edges:
            succ[e.src].append(e.dst)
        seen = {start}
        todo = deque([start])
        while todo:
            n = todo.popleft()
            for m in succ[n]:
                if m not in seen:
                    seen.add(m)
                    todo.append(m)
        return seen

    def restrict(self, keep: Iterable[str]) -> "Cfg":
        keep = set(keep)
        return Cfg(
            self.entry,
            {n: c for n, c in self.nodes.items() if n in keep},
            frozenset(e for e in self.edges if e.src in keep and e.dst in keep),
        )

    def edge_pairs(self) -> set[tuple[str, str]]:
        return {(e.src, e.dst) for e in self.edges}

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self.edges)


def build_cfg(f: Function) -> Cfg:
    nodes = {b.label: b.instructions for b in f.blocks}
    edges = set()
    for b in f.blocks:
        for dst, kind in f.successors(b.label):
            edges.add(Edge(b.label, dst, kind))
    return Cfg(f.entry, nodes, frozenset(edges))


def _dot_id(name: str) -> str:
    return '"' + name.replace('"', r"\"") + '"'


def _dot_label(label: str, content: Iterable[Instruction]) -> str:
    lines = [label + ":"] + [i.text() for i in content if i.opcode != "NOP"]
    return r"\l".join(s.replace('"', r"\"") for s in lines) + r"\l"


def emit_dot(g: Cfg, name: str = "cfg") -> str:
    out = [f"digraph {_dot_id(name)} {{", "  node [shape=box, fontname=monospace];"]
    for node, content in g.nodes.items():
        extra = ", penwidth=2" if node == g.entry else ""
        out.append(f"  {_dot_id(node)} [label=\"{_dot_label(node, content)}\"{extra}];")
    if g.entry not in g.nodes:
        out.append(f"  {_dot_id(g.entry)};")
    for e in sorted(g.edges):
        if e.kind == "true":
            attrs = ' [label="T", color=darkgreen]'
        elif e.kind == "false":
            attrs = ' [label="F", color=red, style=dashed]'
        else:
            attrs = ""
        out.append(f"  {_dot_id(e.src)} -> {_dot_id(e.dst)}{attrs};")
    out.append("}")
    return "\n".join(out) + "\n"
