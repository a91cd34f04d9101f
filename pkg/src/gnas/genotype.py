"""Three-level cell topology, architecture logits and discrete genotypes.

Node numbering inside a cell: ``0`` is the root embedding, ``1..N`` the first
level, ``N+1..2N`` the second level (node ``N+i`` is fed only by node ``i``
through an aggregation slot) and ``2N+1..2N+M`` the third level.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Module, Tensor
from .errors import ParseError, ValidationError
from .ops import AGGREGATION_OPS, FILTER_OPS, Op

__all__ = [
    "CellTopology", "ArchParams", "Edge", "CellGenotype", "GenotypeReport",
    "derive_genotype", "validate_genotype", "softmax_np", "genotypes_to_json",
    "genotypes_from_json", "genotypes_to_dot", "TIE_TOL",
]

# softmax weights closer than this count as tied; ties go to the lowest index
TIE_TOL = 1e-12

_LEVEL1_OPS = frozenset({Op.IDENTITY, Op.SPARSE, Op.DENSE, Op.SKIP})
_LEVEL2_OPS = frozenset({Op.IDENTITY, Op.SUM, Op.MEAN, Op.MAX, Op.SKIP})


class CellTopology:
    """Edge sets of the three-level search space for given ``N`` and ``M``."""

    def __init__(self, N=3, M=3):
        if N < 1 or M < 1:
            raise ValueError("N and M must be positive")
        self.N, self.M = N, M
        self.level1_edges = [(i, j) for j in range(1, N + 1) for i in range(j)]
        self.level2_edges = [(i, N + i) for i in range(1, N + 1)]
        self.level3_edges = [(i, 2 * N + j) for j in range(1, M + 1) for i in range(N + 1, 2 * N + j)]

    @property
    def filter_edges(self):
        return self.level1_edges + self.level3_edges

    @property
    def edges(self):
        return self.level1_edges + self.level2_edges + self.level3_edges

    @property
    def num_edges(self):
        return len(self.level1_edges) + len(self.level2_edges) + len(self.level3_edges)

    @property
    def num_nodes(self):
        return 2 * self.N + self.M + 1

    def sources(self, node):
        """Candidate predecessors of a level-1 or level-3 node."""
        N = self.N
        if 1 <= node <= N:
            return list(range(node))
        if 2 * N < node <= 2 * N + self.M:
            return list(range(N + 1, node))
        raise ValueError(f"node {node} has no searchable incoming edges")

    def level(self, node):
        N = self.N
        if node == 0:
            return 0
        if node <= N:
            return 1
        if node <= 2 * N:
            return 2
        if node <= 2 * N + self.M:
            return 3
        raise ValueError(f"node {node} outside a cell with N={N}, M={self.M}")

    def __eq__(self, other):
        return isinstance(other, CellTopology) and (self.N, self.M) == (other.N, other.M)

    def __hash__(self):
        return hash((self.N, self.M))

    def __repr__(self):
        return f"CellTopology(N={self.N}, M={self.M})"


def edge_key(edge):
    return f"{edge[0]}->{edge[1]}"


class ArchParams(Module):
    """Mixing logits: one vector over ``FILTER_OPS`` per level-1/3 edge and one
    over ``AGGREGATION_OPS`` per level-2 edge. Initialized to zeros."""

    def __init__(self, topology):
        super().__init__()
        self.topology = topology
        self.alpha_F = {edge_key(e): Tensor(np.zeros(len(FILTER_OPS)), requires_grad=True)
                        for e in topology.filter_edges}
        self.alpha_L = {edge_key(e): Tensor(np.zeros(len(AGGREGATION_OPS)), requires_grad=True)
                        for e in topology.level2_edges}

    def logits(self, edge):
        key = edge_key(edge)
        return self.alpha_L[key] if key in self.alpha_L else self.alpha_F[key]

    def snapshot(self):
        """Plain ``{edge: list}`` copy of all logits."""
        out = {k: v.data.tolist() for k, v in self.alpha_F.items()}
        out.update({k: v.data.tolist() for k, v in self.alpha_L.items()})
        return out

    def set_logits(self, edge, values):
        t = self.logits(edge)
        values = np.asarray(values, dtype=np.float64)
        if values.shape != t.shape:
            raise ValidationError(f"edge {edge}: expected {t.shape[0]} logits, got {values.shape}")
        t.data = values.copy()


def softmax_np(v):
    z = np.asarray(v, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def _first_max(values, tol=TIE_TOL):
    values = np.asarray(values)
    return int(np.flatnonzero(values >= values.max() - tol)[0])


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    op: Op


@dataclass
class CellGenotype:
    """Discrete cell: one incoming edge per level-1/3 node, one op per level-2 slot."""

    N: int
    M: int
    level1: list
    level2: list
    level3: list

    def __post_init__(self):
        self.level1 = sorted((Edge(e.src, e.dst, Op(e.op)) for e in self.level1), key=lambda e: e.dst)
        self.level2 = [Op(op) for op in self.level2]
        self.level3 = sorted((Edge(e.src, e.dst, Op(e.op)) for e in self.level3), key=lambda e: e.dst)

    @property
    def topology(self):
        return CellTopology(self.N, self.M)

    def edges(self):
        """All retained edges, level-2 slots included, in node order."""
        N = self.N
        slots = [Edge(i, N + i, op) for i, op in enumerate(self.level2, start=1)]
        return list(self.level1) + slots + list(self.level3)

    def incoming(self):
        return {e.dst: e for e in self.edges()}

    def live_nodes(self):
        """Nodes that feed the fused output (all level-3 nodes and their ancestors)."""
        inc = self.incoming()
        live = set()
        stack = list(range(2 * self.N + 1, 2 * self.N + self.M + 1))
        while stack:
            v = stack.pop()
            if v in live:
                continue
            live.add(v)
            if v in inc:
                stack.append(inc[v].src)
        return live

    def has_aggregation(self, live_only=True):
        live = self.live_nodes() if live_only else None
        N = self.N
        return any(op.is_aggregation and (live is None or N + i in live)
                   for i, op in enumerate(self.level2, start=1))

    def to_dict(self):
        return {
            "N": self.N,
            "M": self.M,
            "level1": [{"to": e.dst, "from": e.src, "op": e.op.value} for e in self.level1],
            "level2": [{"op": op.value} for op in self.level2],
            "level3": [{"to": e.dst, "from": e.src, "op": e.op.value} for e in self.level3],
        }

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(
                int(d["N"]), int(d["M"]),
                [Edge(int(e["from"]), int(e["to"]), Op(e["op"])) for e in d["level1"]],
                [Op(e["op"]) for e in d["level2"]],
                [Edge(int(e["from"]), int(e["to"]), Op(e["op"])) for e in d["level3"]],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed genotype: {exc}") from None

    def __str__(self):
        l1 = ", ".join(f"{e.src}->{e.dst}:{e.op}" for e in self.level1)
        l2 = ", ".join(f"{i}->{self.N + i}:{op}" for i, op in enumerate(self.level2, start=1))
        l3 = ", ".join(f"{e.src}->{e.dst}:{e.op}" for e in self.level3)
        return f"[{l1} | {l2} | {l3}]"


def derive_genotype(arch):
    """Discretize logits: strongest non-zero op per edge, strongest edge per node.

    Edge strength is the softmax weight of its strongest non-zero op. Ties go
    to the lowest op index, then the lowest source node.
    """
    topo = arch.topology
    N, M = topo.N, topo.M

    def best_incoming(node):
        best = None
        for src in topo.sources(node):
            w = softmax_np(arch.alpha_F[edge_key((src, node))].data)
            k = 1 + _first_max(w[1:])
            strength = w[k]
            if best is None or strength > best[0] + TIE_TOL:
                best = (strength, Edge(src, node, FILTER_OPS[k]))
        return best[1]

    level1 = [best_incoming(j) for j in range(1, N + 1)]
    level2 = [AGGREGATION_OPS[_first_max(softmax_np(arch.alpha_L[edge_key(e)].data))]
              for e in topo.level2_edges]
    level3 = [best_incoming(2 * N + j) for j in range(1, M + 1)]
    return CellGenotype(N, M, level1, level2, level3)


@dataclass
class GenotypeReport:
    """Structural check of a genotype.

    ``paths`` lists every root-to-output path (one per level-3 node) as node
    sequences; ``aggregations`` counts sum/mean/max ops on each path and
    ``slots`` counts second-level crossings. ``dangling`` are nodes that do not
    feed the output.
    """

    paths: list = field(default_factory=list)
    aggregations: list = field(default_factory=list)
    slots: list = field(default_factory=list)
    has_zero: bool = False
    dangling: list = field(default_factory=list)
    violations: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations


def validate_genotype(genotype):
    report = GenotypeReport()
    N, M = genotype.N, genotype.M
    nodes = 2 * N + M + 1
    topo = CellTopology(N, M) if N >= 1 and M >= 1 else None
    if topo is None:
        report.violations.append(f"N={N}, M={M} must both be positive")
        return report
    if len(genotype.level2) != N:
        report.violations.append(f"{len(genotype.level2)} second-level ops for N={N}")
    for level, edges, allowed, targets in (
        (1, genotype.level1, _LEVEL1_OPS, range(1, N + 1)),
        (3, genotype.level3, _LEVEL1_OPS, range(2 * N + 1, 2 * N + M + 1)),
    ):
        seen = [e.dst for e in edges]
        for node in targets:
            count = seen.count(node)
            if count != 1:
                report.violations.append(f"level-{level} node {node} has {count} incoming edges")
        for e in edges:
            if e.dst not in targets:
                report.violations.append(f"edge {e.src}->{e.dst} does not end in level {level}")
            elif e.src not in topo.sources(e.dst):
                report.violations.append(f"edge {e.src}->{e.dst} is not in the search space")
            if e.op is Op.ZERO:
                report.has_zero = True
                report.violations.append(f"edge {e.src}->{e.dst} keeps the zero op")
            elif e.op not in allowed:
                report.violations.append(f"edge {e.src}->{e.dst} uses {e.op.value} outside the second level")
    for i, op in enumerate(genotype.level2, start=1):
        if op not in _LEVEL2_OPS:
            report.violations.append(f"slot {i}->{N + i} uses non-aggregation op {op.value}")
    if report.violations:
        return report

    incoming = genotype.incoming()
    for leaf in range(2 * N + 1, 2 * N + M + 1):
        path = [leaf]
        while path[-1] != 0:
            path.append(incoming[path[-1]].src)
            if len(path) > nodes:
                report.violations.append(f"cycle through node {leaf}")
                return report
        path.reverse()
        ops = [incoming[v].op for v in path[1:]]
        aggs = sum(op.is_aggregation for op in ops)
        slots = sum(1 for v in path if N < v <= 2 * N)
        report.paths.append(path)
        report.aggregations.append(aggs)
        report.slots.append(slots)
        if aggs > 1:
            report.violations.append(f"path {path} has {aggs} neighbor aggregations")
        if slots != 1:
            report.violations.append(f"path {path} crosses the second level {slots} times")
    live = genotype.live_nodes()
    report.dangling = [v for v in range(1, nodes) if v not in live]
    return report


def genotypes_to_json(genotypes, meta=None):
    """Serialize per-cell genotypes; returns a deterministic JSON string."""
    doc = {"depth": len(genotypes), "cells": [g.to_dict() for g in genotypes]}
    if meta is not None:
        doc = {"meta": meta, **doc}
    return json.dumps(doc, indent=2, sort_keys=False) + "\n"


def genotypes_from_json(text, depth=None):
    """Parse a genotype file.

    Accepts either ``{"cells": [...]}`` or a bare single-cell object, which is
    repeated ``depth`` times (default 1).
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ParseError("genotype file must hold a JSON object")
    if "cells" in doc:
        cells = [CellGenotype.from_dict(c) for c in doc["cells"]]
        if depth is not None and depth != len(cells):
            raise ValidationError(f"genotype file has {len(cells)} cells, depth {depth} requested")
        return cells
    return [CellGenotype.from_dict(doc)] * (depth or 1)


_LEVEL_COLORS = {0: "lightgray", 1: "lightblue", 2: "lightpink", 3: "palegreen"}


def genotypes_to_dot(genotypes, name="gnas"):
    """Graphviz drawing; ``x_y`` is embedding ``y`` of layer ``x``.

    Filter edges are blue, aggregation-slot edges red. Each layer's root is
    ``Input_x``.
    """
    lines = [f"digraph {name} {{", "  rankdir=LR;", '  node [shape=box, style="rounded,filled"];']
    for x, g in enumerate(genotypes):
        lines.append(f"  subgraph cluster_{x} {{")
        lines.append(f'    label="layer {x}";')
        topo = g.topology
        for v in range(topo.num_nodes):
            label = f"Input_{x}" if v == 0 else f"{x}_{v}"
            lines.append(f'    "{label}" [fillcolor={_LEVEL_COLORS[topo.level(v)]}];')
        for e in g.edges():
            src = f"Input_{x}" if e.src == 0 else f"{x}_{e.src}"
            color = "red" if topo.level(e.dst) == 2 else "blue"
            lines.append(f'    "{src}" -> "{x}_{e.dst}" [label="{e.op.label}", color={color}];')
        lines.append("  }")
    lines.append("}")
    return "\n".join(lines) + "\n"
