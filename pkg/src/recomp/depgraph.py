"""Fragment-level dependency DAG and placement order."""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Set, Tuple

from .errors import DependencyCycleError
from .expr import TensorAccess
from .fragments import MinimalFragment


@dataclass
class DependencyGraph:
    nodes: List[TensorAccess] = field(default_factory=list)
    edges: List[Tuple[TensorAccess, TensorAccess]] = field(default_factory=list)
    writers: Dict[TensorAccess, List[MinimalFragment]] = field(default_factory=dict)

    def is_output(self, node: TensorAccess) -> bool:
        return node in self.writers

    def sources(self) -> List[TensorAccess]:
        return [n for n in self.nodes if n not in self.writers]

    def predecessors(self, node: TensorAccess) -> List[TensorAccess]:
        return [a for a, b in self.edges if b == node]

    def to_dot(self) -> str:
        ids = {n: f"n{k}" for k, n in enumerate(self.nodes)}
        lines = ["digraph dependencies {"]
        for n in self.nodes:
            shape = "box" if self.is_output(n) else "ellipse"
            lines.append(f'  {ids[n]} [label="{n}", shape={shape}];')
        for a, b in self.edges:
            lines.append(f"  {ids[a]} -> {ids[b]};")
        lines.append("}")
        return "\n".join(lines) + "\n"


def build_dag(frags: Sequence[MinimalFragment]) -> DependencyGraph:
    """Nodes are accesses; an operand joins an output node only on an exact match."""
    dag = DependencyGraph()
    seen: Set[TensorAccess] = set()

    def node(acc: TensorAccess) -> TensorAccess:
        if acc not in seen:
            seen.add(acc)
            dag.nodes.append(acc)
        return acc

    for frag in frags:
        # recurrences over disjoint regions may share an lhs node
        dag.writers.setdefault(node(frag.lhs), []).append(frag)
    for frag in frags:
        for acc in frag.reads():
            edge = (node(acc), frag.lhs)
            if edge not in dag.edges:
                dag.edges.append(edge)
    _check_acyclic(dag)
    return dag


def _check_acyclic(dag: DependencyGraph) -> None:
    succ: Dict[TensorAccess, List[TensorAccess]] = {n: [] for n in dag.nodes}
    for a, b in dag.edges:
        succ[a].append(b)
    color: Dict[TensorAccess, int] = {}
    for start in dag.nodes:
        if start in color:
            continue
        stack = [(start, iter(succ[start]))]
        path = [start]
        color[start] = 1
        while stack:
            n, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                color[n] = 2
                stack.pop()
                path.pop()
                continue
            state = color.get(nxt)
            if state == 1:
                cycle = path[path.index(nxt):] + [nxt]
                raise DependencyCycleError(cycle)
            if state is None:
                color[nxt] = 1
                stack.append((nxt, iter(succ[nxt])))
                path.append(nxt)


def topological_order(dag: DependencyGraph) -> List[MinimalFragment]:
    """Kahn's algorithm; ready fragments leave in (origin, creation index) order."""
    frags = [f for n in dag.nodes for f in dag.writers.get(n, [])]
    pos = {id(f): k for k, f in enumerate(frags)}
    indeg = {id(f): 0 for f in frags}
    succ: Dict[int, List[MinimalFragment]] = {id(f): [] for f in frags}
    for a, b in dag.edges:
        for src in dag.writers.get(a, []):
            for dst in dag.writers[b]:
                if src is not dst:
                    indeg[id(dst)] += 1
                    succ[id(src)].append(dst)

    def key(f):
        return (f.origin, f.index, pos[id(f)])

    heap = [(key(f), f) for f in frags if indeg[id(f)] == 0]
    heapq.heapify(heap)
    order: List[MinimalFragment] = []
    while heap:
        _, f = heapq.heappop(heap)
        order.append(f)
        for m in succ[id(f)]:
            indeg[id(m)] -= 1
            if indeg[id(m)] == 0:
                heapq.heappush(heap, (key(m), m))
    if len(order) != len(frags):
        _check_acyclic(dag)
    return order


def predecessor_fragments(dag: DependencyGraph, frag: MinimalFragment) -> List[MinimalFragment]:
    out: List[MinimalFragment] = []
    for acc in frag.reads():
        for w in dag.writers.get(acc, []):
            if w is not frag and all(w is not o for o in out):
                out.append(w)
    return out
