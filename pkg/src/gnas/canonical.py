"""Free-form GAP trees and their rewrite into the three-level cell layout.

A tree is stored as parallel ``parents``/``ops`` lists: node ``0`` is the
root (the cell input) and node ``v > 0`` hangs off ``parents[v] < v`` through
``ops[v]``. The leaves, in index order, are fused into the cell output.

The rewrite only inserts ``SKIP`` pass-through nodes, so a canonical cell
built with the tree's own op modules computes exactly the same function.
"""

import copy
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Module
from .errors import ValidationError
from .genotype import CellGenotype, Edge, edge_key
from .ops import Fusion, Op, Operation
from .supernet import GenotypeCell

__all__ = ["GapTree", "TreeCell", "CanonicalForm", "tree_forward", "canonicalize_tree",
           "canonical_cell"]

_TREE_OPS = frozenset({Op.IDENTITY, Op.SPARSE, Op.DENSE, Op.SUM, Op.MEAN, Op.MAX})


@dataclass(frozen=True)
class GapTree:
    parents: tuple
    ops: tuple

    def __post_init__(self):
        parents = tuple(None if p is None else int(p) for p in self.parents)
        ops = tuple(None if o is None else Op(o) for o in self.ops)
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "ops", ops)
        if not parents or len(parents) != len(ops):
            raise ValidationError("a tree needs matching, nonempty parents and ops")
        if parents[0] is not None or ops[0] is not None:
            raise ValidationError("node 0 is the root and has no incoming edge")
        for v in range(1, len(parents)):
            if parents[v] is None or not 0 <= parents[v] < v:
                raise ValidationError(f"node {v} needs a parent with a smaller index")
            if ops[v] not in _TREE_OPS:
                raise ValidationError(f"edge {parents[v]}->{v} uses unsupported op {ops[v]}")

    @classmethod
    def from_edges(cls, edges):
        """Build from ``[(parent, child, op), ...]`` with children numbered 1..n-1."""
        n = 1 + len(edges)
        parents, ops = [None] * n, [None] * n
        for p, c, op in edges:
            if not 1 <= c < n or parents[c] is not None:
                raise ValidationError(f"bad child index {c}")
            parents[c], ops[c] = p, op
        return cls(tuple(parents), tuple(ops))

    @property
    def size(self):
        return len(self.parents)

    def children(self, v):
        return [c for c in range(v + 1, self.size) if self.parents[c] == v]

    @property
    def leaves(self):
        return [v for v in range(self.size) if not self.children(v)]

    def path(self, v):
        out = [v]
        while out[-1] != 0:
            out.append(self.parents[out[-1]])
        return out[::-1]

    def aggregations_on_path(self, v):
        return sum(self.ops[u].is_aggregation for u in self.path(v)[1:])

    def check_paths(self):
        """Raise if a root-to-leaf path holds more than one neighbor aggregation."""
        for leaf in self.leaves:
            count = self.aggregations_on_path(leaf)
            if count > 1:
                path = "->".join(map(str, self.path(leaf)))
                raise ValidationError(f"path {path} has {count} neighbor aggregations")


class TreeCell(Module):
    """Op modules for every tree edge plus the leaf fusion."""

    def __init__(self, tree, dim, rng, bn_momentum=0.1, bn_eps=1e-5):
        super().__init__()
        tree.check_paths()
        self.tree = tree
        self.dim = dim
        self.ops = {str(v): Operation(tree.ops[v], dim, rng) for v in range(1, tree.size)}
        self.fusion = Fusion(len(tree.leaves), dim, rng, bn_momentum, bn_eps)

    def forward(self, x0, graph):
        return tree_forward(self.tree, x0, graph, self.ops, self.fusion)


def tree_forward(tree, x0, graph, ops, fusion):
    x = {0: x0}
    for v in range(1, tree.size):
        x[v] = ops[str(v)](x[tree.parents[v]], x0, graph)
    return fusion([x[v] for v in tree.leaves])


@dataclass
class CanonicalForm:
    """Result of :func:`canonicalize_tree`.

    ``node_map`` sends tree nodes to cell nodes, ``leaf_slots`` gives the
    level-3 node holding each tree leaf (in leaf order), ``added`` lists the
    inserted pass-through nodes and ``padding`` the filler nodes used to
    reach the requested ``N``/``M``.
    """

    genotype: CellGenotype
    node_map: dict
    leaf_slots: list
    added: list = field(default_factory=list)
    padding: list = field(default_factory=list)
    edge_sources: dict = field(default_factory=dict)


def canonicalize_tree(tree, N_target=None, M_target=None):
    tree.check_paths()
    n = tree.size
    agg_children = {v: [c for c in tree.children(v) if tree.ops[c].is_aggregation] for v in range(n)}

    # classify: "pre" nodes have no aggregation above them, "slot" nodes are
    # aggregation targets, "post" nodes sit below a slot
    kind = {0: "root"}
    for v in range(1, n):
        p = tree.parents[v]
        if tree.ops[v].is_aggregation:
            kind[v] = "slot"
        elif kind[p] in ("root", "pre"):
            kind[v] = "pre"
        else:
            kind[v] = "post"

    # level 1: ("tree", v) for a pre node, ("copy", v, k) for an inserted carrier
    level1 = []       # entries (key, parent_key, op)
    carrier = {}      # aggregation target -> level-1 key feeding its slot
    pre_leaf_term = []  # level-1 keys whose slot ends a filter-only path
    for v in range(n):
        if kind[v] not in ("root", "pre"):
            continue
        aggs = agg_children[v]
        is_leaf = not tree.children(v)
        if kind[v] == "pre":
            key = ("tree", v)
            level1.append((key, _key_of(tree, kind, tree.parents[v]), tree.ops[v]))
            first = 0
            if aggs:
                carrier[aggs[0]] = key
                first = 1
            elif is_leaf:
                pre_leaf_term.append((key, v))
        else:
            first = 0
            if is_leaf:
                key = ("copy", v, 0)
                level1.append((key, ("root",), Op.SKIP))
                pre_leaf_term.append((key, v))
        parent_key = ("tree", v) if kind[v] == "pre" else ("root",)
        for k, w in enumerate(aggs[first:], start=1):
            key = ("copy", v, k)
            level1.append((key, parent_key, Op.SKIP))
            carrier[w] = key

    N = len(level1)
    if N_target is not None and N_target < N:
        raise ValidationError(f"tree needs N >= {N}, got {N_target}")
    N_final = N if N_target is None else N_target
    index1 = {key: i for i, (key, _, _) in enumerate(level1, start=1)}

    def cell_node(key):
        if key == ("root",):
            return 0
        return index1[key]

    node_map = {0: 0}
    added = []
    edges1 = []
    for key, parent_key, op in level1:
        i = index1[key]
        edges1.append(Edge(cell_node(parent_key), i, op))
        if key[0] == "tree":
            node_map[key[1]] = i
        else:
            added.append(i)

    slots = [Op.SKIP] * N_final
    for w, key in carrier.items():
        i = index1[key]
        slots[i - 1] = tree.ops[w]
        node_map[w] = N_final + i

    # level 3: post nodes in tree order, plus terminals after slot leaves and
    # filter-only leaves
    level3 = []       # (parent cell node or ("l3", tag), tag, op)
    terminal_of = {}
    for key, v in pre_leaf_term:
        terminal_of[v] = ("term", v)
        level3.append((N_final + index1[key], ("term", v), Op.SKIP))
    for v in range(1, n):
        if kind[v] == "post":
            p = tree.parents[v]
            src = node_map[p] if kind[p] == "slot" else ("post", p)
            level3.append((src, ("post", v), tree.ops[v]))
        if kind[v] == "slot" and not tree.children(v):
            terminal_of[v] = ("term", v)
            level3.append((node_map[v], ("term", v), Op.SKIP))

    M = len(level3)
    if M_target is not None and M_target < M:
        raise ValidationError(f"tree needs M >= {M}, got {M_target}")
    M_final = M if M_target is None else M_target
    index3 = {tag: 2 * N_final + j for j, (_, tag, _) in enumerate(level3, start=1)}
    edges3 = []
    for src, tag, op in level3:
        src = index3[src] if isinstance(src, tuple) else src
        edges3.append(Edge(src, index3[tag], op))
        if tag[0] == "post":
            node_map[tag[1]] = index3[tag]
        else:
            added.append(index3[tag])

    padding = []
    for i in range(N + 1, N_final + 1):
        edges1.append(Edge(0, i, Op.SKIP))
        padding.append(i)
    for j in range(M + 1, M_final + 1):
        edges3.append(Edge(N_final + 1, 2 * N_final + j, Op.SKIP))
        padding.append(2 * N_final + j)

    leaf_slots = [index3[terminal_of[v]] if v in terminal_of else node_map[v] for v in tree.leaves]
    genotype = CellGenotype(N_final, M_final, edges1, slots, edges3)

    # cell edge -> tree node whose op module it runs
    edge_sources = {}
    for v in range(1, n):
        if kind[v] == "slot":
            i = node_map[v] - N_final
            edge_sources[edge_key((i, N_final + i))] = v
        else:
            dst = node_map[v]
            src = genotype.incoming()[dst].src
            edge_sources[edge_key((src, dst))] = v
    return CanonicalForm(genotype, node_map, leaf_slots, sorted(added), padding, edge_sources)


def _key_of(tree, kind, v):
    return ("root",) if kind[v] == "root" else ("tree", v)


def canonical_cell(tree_cell, form):
    """A :class:`GenotypeCell` running ``form`` with the tree cell's parameters.

    Fusion weights are transplanted block by block; level-3 nodes that are
    not tree leaves get zero blocks.
    """
    g = form.genotype
    d = tree_cell.dim
    out = GenotypeCell.__new__(GenotypeCell)
    Module.__init__(out)
    out.genotype = g
    out.dim = d
    out.ops = {}
    for e in g.edges():
        key = edge_key((e.src, e.dst))
        if key in form.edge_sources:
            out.ops[key] = copy.deepcopy(tree_cell.ops[str(form.edge_sources[key])])
        else:
            out.ops[key] = Operation(Op.SKIP, d, None)
    fusion = copy.deepcopy(tree_cell.fusion)
    W = np.zeros((g.M * d, d))
    old = tree_cell.fusion.mlp.weight.data
    for k, node in enumerate(form.leaf_slots):
        j = node - 2 * g.N - 1
        W[j * d:(j + 1) * d] = old[k * d:(k + 1) * d]
    fusion.mlp.weight = ad.Tensor(W, requires_grad=True)
    out.fusion = fusion
    out._live = sorted(g.live_nodes())
    out._incoming = g.incoming()
    out.training = tree_cell.training
    return out
