"""Architecture cells as node-labeled DAGs.

A cell is a directed acyclic graph with one source (INPUT), one sink
(OUTPUT) and operation-tagged interior nodes.  The enumerable search
space is the set of 5^6 = 15625 cells obtained by assigning one of five
operations to each of the six edges of the fixed four-node template;
each labeled template edge becomes one interior node here, so the
graph autoencoder only ever deals with node labels plus generic edges.
"""

from __future__ import annotations

import heapq
import itertools
import re
from dataclasses import dataclass
from enum import IntEnum

N_MAX = 10  # hard cap on node count, incl. INPUT/OUTPUT


class GraphError(ValueError):
    """Raised when a graph violates the cell invariants."""


class CycleError(GraphError):
    """Raised when a supposed DAG contains a cycle."""


class OpKind(IntEnum):
    ZEROIZE = 0
    SKIP = 1
    CONV1X1 = 2
    CONV3X3 = 3
    AVGPOOL3X3 = 4
    INPUT = 5
    OUTPUT = 6
    END = 7  # decoder termination symbol only; never stored in a graph


SEARCHABLE_OPS = (
    OpKind.ZEROIZE,
    OpKind.SKIP,
    OpKind.CONV1X1,
    OpKind.CONV3X3,
    OpKind.AVGPOOL3X3,
)

TAG_NAMES = {
    OpKind.ZEROIZE: "none",
    OpKind.SKIP: "skip_connect",
    OpKind.CONV1X1: "nor_conv_1x1",
    OpKind.CONV3X3: "nor_conv_3x3",
    OpKind.AVGPOOL3X3: "avg_pool_3x3",
    OpKind.INPUT: "input",
    OpKind.OUTPUT: "output",
}
_NAME_TAGS = {v: k for k, v in TAG_NAMES.items()}


@dataclass(frozen=True)
class EdgeSpec:
    """Operations for the six template edges, in the fixed order
    (0->1, 0->2, 1->2, 0->3, 1->3, 2->3)."""

    ops: tuple[OpKind, OpKind, OpKind, OpKind, OpKind, OpKind]

    def __post_init__(self):
        if len(self.ops) != 6:
            raise GraphError(f"edge spec needs 6 operations, got {len(self.ops)}")
        for op in self.ops:
            if op not in SEARCHABLE_OPS:
                raise GraphError(f"{op!r} is not a searchable operation")


@dataclass(frozen=True)
class CellGraph:
    """Immutable node-labeled DAG.  ``edges`` holds (src, dst) index pairs."""

    nodes: tuple[OpKind, ...]
    edges: frozenset[tuple[int, int]]

    def predecessors(self, v: int) -> list[int]:
        return sorted(u for (u, w) in self.edges if w == v)

    def successors(self, v: int) -> list[int]:
        return sorted(w for (u, w) in self.edges if u == v)

    def __len__(self) -> int:
        return len(self.nodes)


def validate(g: CellGraph, n_max: int = N_MAX) -> None:
    """Raise GraphError unless ``g`` satisfies every cell invariant."""
    n = len(g.nodes)
    if n < 2:
        raise GraphError(f"graph needs at least INPUT and OUTPUT, got {n} nodes")
    if n > n_max:
        raise GraphError(f"graph has {n} nodes, cap is {n_max}")
    for tag in g.nodes:
        if tag == OpKind.END:
            raise GraphError("END is a decoder symbol and may not be stored")
    for (u, v) in g.edges:
        if not (0 <= u < n and 0 <= v < n):
            raise GraphError(f"edge ({u},{v}) out of range for {n} nodes")
        if u == v:
            raise GraphError(f"self-loop at node {u}")
    # acyclicity via Kahn; also validates degree constraints afterwards
    order = topological_order(g)
    assert len(order) == n
    inputs = [i for i, t in enumerate(g.nodes) if t == OpKind.INPUT]
    outputs = [i for i, t in enumerate(g.nodes) if t == OpKind.OUTPUT]
    if len(inputs) != 1:
        raise GraphError(f"expected exactly one INPUT node, found {len(inputs)}")
    if len(outputs) != 1:
        raise GraphError(f"expected exactly one OUTPUT node, found {len(outputs)}")
    src, sink = inputs[0], outputs[0]
    if g.predecessors(src):
        raise GraphError("INPUT node must have no predecessors")
    if g.successors(sink):
        raise GraphError("OUTPUT node must have no successors")
    for v in range(n):
        if v != src and not g.predecessors(v):
            raise GraphError(f"node {v} ({g.nodes[v].name}) has no predecessor")
        if v != sink and not g.successors(v):
            raise GraphError(f"node {v} ({g.nodes[v].name}) has no successor")


def is_valid(g: CellGraph, n_max: int = N_MAX) -> bool:
    try:
        validate(g, n_max)
    except GraphError:
        return False
    return True


def topological_order(g: CellGraph) -> list[int]:
    """Deterministic Kahn order; ready nodes are taken by (op tag, index)."""
    n = len(g.nodes)
    indeg = [0] * n
    succ: list[list[int]] = [[] for _ in range(n)]
    for (u, v) in g.edges:
        if not (0 <= u < n and 0 <= v < n):
            raise GraphError(f"edge ({u},{v}) out of range for {n} nodes")
        indeg[v] += 1
        succ[u].append(v)
    heap = [(int(g.nodes[i]), i) for i in range(n) if indeg[i] == 0]
    heapq.heapify(heap)
    order: list[int] = []
    while heap:
        _, v = heapq.heappop(heap)
        order.append(v)
        for w in sorted(succ[v]):
            indeg[w] -= 1
            if indeg[w] == 0:
                heapq.heappush(heap, (int(g.nodes[w]), w))
    if len(order) != n:
        raise CycleError("graph contains a cycle")
    return order


# Node layout produced by from_edge_spec: INPUT, then one node per template
# edge in spec order, then OUTPUT.  Template edge k runs between the template
# endpoints below; an interior node consumes whatever produces its source
# endpoint and feeds whatever consumes its destination endpoint.
_TEMPLATE_ENDPOINTS = ((0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3))


def from_edge_spec(spec: EdgeSpec) -> CellGraph:
    """Convert an edge-labeled template cell to its node-labeled DAG."""
    nodes = [OpKind.INPUT] + list(spec.ops) + [OpKind.OUTPUT]
    producers: dict[int, list[int]] = {0: [0]}  # template endpoint -> node idxs
    for k, (a, b) in enumerate(_TEMPLATE_ENDPOINTS):
        producers.setdefault(b, []).append(k + 1)
    edges = set()
    for k, (a, b) in enumerate(_TEMPLATE_ENDPOINTS):
        for p in producers[a]:
            edges.add((p, k + 1))
    for p in producers[3]:
        edges.add((p, 7))
    return CellGraph(nodes=tuple(nodes), edges=frozenset(edges))


def enumerate_edge_specs() -> list[EdgeSpec]:
    """All 5^6 specs in lexicographic op order."""
    return [EdgeSpec(ops) for ops in itertools.product(SEARCHABLE_OPS, repeat=6)]


def enumerate_search_space() -> list[CellGraph]:
    """All 15625 cells, ordered lexicographically by their EdgeSpec."""
    return [from_edge_spec(s) for s in enumerate_edge_specs()]


def _ancestry_signatures(g: CellGraph, reverse: bool = False) -> list[str]:
    """Per-node structural signature built from predecessor (or successor)
    history; independent of node storage order."""
    order = topological_order(g)
    if reverse:
        order = order[::-1]
        neigh = {v: g.successors(v) for v in range(len(g.nodes))}
    else:
        neigh = {v: g.predecessors(v) for v in range(len(g.nodes))}
    sig = [""] * len(g.nodes)
    for v in order:
        parts = sorted(sig[u] for u in neigh[v])
        sig[v] = f"{int(g.nodes[v])}({','.join(parts)})"
    return sig


def canonical_key(g: CellGraph) -> str:
    """Deterministic identity string, stable under node-insertion order.

    Nodes are relabeled by a Kahn order whose ties are broken by op tag and
    then by ancestry/descendancy signatures (two refinement rounds), so any
    storage permutation of the same structure maps to the same key.  The key
    is CSV-safe: no commas.
    """
    validate(g)
    up = _ancestry_signatures(g)
    down = _ancestry_signatures(g, reverse=True)
    # second refinement round: fold the combined signature back through the
    # ancestry recursion to separate nodes that round one left tied
    combo = [f"{u}|{d}" for u, d in zip(up, down)]
    n = len(g.nodes)
    up2 = [""] * n
    for v in topological_order(g):
        parts = sorted(up2[u] for u in g.predecessors(v))
        up2[v] = f"{combo[v]}({','.join(parts)})"
    indeg = {v: len(g.predecessors(v)) for v in range(n)}
    heap = [(int(g.nodes[v]), up[v], down[v], up2[v], v) for v in range(n) if indeg[v] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        v = heapq.heappop(heap)[-1]
        order.append(v)
        for w in g.successors(v):
            indeg[w] -= 1
            if indeg[w] == 0:
                heapq.heappush(heap, (int(g.nodes[w]), up[w], down[w], up2[w], w))
    pos = {v: i for i, v in enumerate(order)}
    tags = "|".join(TAG_NAMES[g.nodes[v]] for v in order)
    edges = ";".join(f"{a}>{b}" for a, b in sorted((pos[u], pos[v]) for u, v in g.edges))
    return f"{tags}#{edges}"


def format_cell(spec: EdgeSpec) -> str:
    """Flat textual form ``|op0|op1|op2|op3|op4|op5|``."""
    return "|" + "|".join(TAG_NAMES[op] for op in spec.ops) + "|"


def parse_cell(text: str) -> EdgeSpec:
    parts = text.strip().strip("|").split("|")
    if len(parts) != 6:
        raise GraphError(f"cell notation needs 6 ops, got {len(parts)}: {text!r}")
    try:
        ops = tuple(_NAME_TAGS[p] for p in parts)
    except KeyError as e:
        raise GraphError(f"unknown operation tag {e.args[0]!r} in {text!r}") from None
    return EdgeSpec(ops)


def format_graph(g: CellGraph) -> str:
    """General serialization ``nodes=[tags];edges=[(i,j),...]``."""
    tags = ",".join(TAG_NAMES[t] for t in g.nodes)
    edges = ",".join(f"({u},{v})" for u, v in sorted(g.edges))
    return f"nodes=[{tags}];edges=[{edges}]"


_GRAPH_RE = re.compile(r"^nodes=\[(?P<nodes>[^\]]*)\];edges=\[(?P<edges>.*)\]$")


def parse_graph(text: str) -> CellGraph:
    m = _GRAPH_RE.match(text.strip())
    if not m:
        raise GraphError(f"not a graph serialization: {text!r}")
    try:
        nodes = tuple(_NAME_TAGS[t] for t in m.group("nodes").split(","))
    except KeyError as e:
        raise GraphError(f"unknown node tag {e.args[0]!r} in {text!r}") from None
    edges = set()
    body = m.group("edges")
    if body:
        for pair in re.findall(r"\((\d+),(\d+)\)", body):
            edges.add((int(pair[0]), int(pair[1])))
    return CellGraph(nodes=nodes, edges=frozenset(edges))
