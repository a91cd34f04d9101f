"""Graphs in CSR form, batching, and differentiable neighborhood reductions.

Edges point from a message source to a destination; row ``i`` of the CSR
arrays lists the in-neighbors of node ``i`` sorted ascending. Undirected
inputs are stored as two directed edges.
"""

from collections import deque
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .autodiff import Tensor, _record
from .errors import DimensionError, ValidationError

__all__ = [
    "Graph", "GraphBatch", "build_graph", "batch_graphs", "permute_graph",
    "permute_rows", "segment_reduce", "readout", "graph_diameter",
    "bfs_distances", "sparse_matmul",
]


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


class Graph:
    """Immutable graph with CSR in-neighbor lists and node features."""

    def __init__(self, num_nodes, csr_offsets, csr_neighbors, node_features,
                 node_labels=None, graph_label=None):
        self.num_nodes = int(num_nodes)
        self.csr_offsets = _frozen(csr_offsets, np.int64)
        self.csr_neighbors = _frozen(csr_neighbors, np.int64)
        x = np.array(node_features, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(self.num_nodes, -1)
        x.setflags(write=False)
        self.node_features = x
        self.node_labels = None if node_labels is None else _frozen(node_labels, np.asarray(node_labels).dtype)
        self.graph_label = graph_label
        self._check()

    def _check(self):
        n, off, nb = self.num_nodes, self.csr_offsets, self.csr_neighbors
        if off.shape != (n + 1,) or off[0] != 0 or off[-1] != len(nb) or np.any(np.diff(off) < 0):
            raise ValidationError("malformed CSR offsets")
        if len(nb) and (nb.min() < 0 or nb.max() >= n):
            raise ValidationError("neighbor index out of range")
        if self.node_features.shape[0] != n:
            raise ValidationError(f"{self.node_features.shape[0]} feature rows for {n} nodes")

    @property
    def num_edges(self):
        return len(self.csr_neighbors)

    @property
    def feature_dim(self):
        return self.node_features.shape[1]

    @cached_property
    def degrees(self):
        return np.diff(self.csr_offsets)

    @cached_property
    def edge_dst(self):
        return np.repeat(np.arange(self.num_nodes), self.degrees)

    @property
    def edge_src(self):
        return self.csr_neighbors

    def neighbors(self, i):
        return self.csr_neighbors[self.csr_offsets[i]:self.csr_offsets[i + 1]]

    @cached_property
    def adjacency(self):
        """Sparse ``A`` with ``A[i, j] = 1`` when ``j`` sends to ``i``."""
        n = self.num_nodes
        return sp.csr_matrix((np.ones(self.num_edges), self.csr_neighbors, self.csr_offsets), shape=(n, n))

    @cached_property
    def mean_adjacency(self):
        deg = self.degrees.astype(np.float64)
        inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
        return sp.diags(inv) @ self.adjacency

    def edge_list(self):
        """Directed ``(src, dst)`` pairs in CSR order."""
        return np.stack([self.edge_src, self.edge_dst], axis=1)

    def is_symmetric(self):
        a = self.adjacency
        return (a != a.T).nnz == 0

    def undirected_edges(self):
        """``(u, v)`` pairs with ``u < v`` plus self-loops; only for symmetric graphs."""
        e = self.edge_list()
        return e[e[:, 0] <= e[:, 1]]

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return (self.num_nodes == other.num_nodes
                and np.array_equal(self.csr_offsets, other.csr_offsets)
                and np.array_equal(self.csr_neighbors, other.csr_neighbors)
                and np.array_equal(self.node_features, other.node_features)
                and _labels_equal(self.node_labels, other.node_labels)
                and _labels_equal(self.graph_label, other.graph_label))

    __hash__ = None

    def __repr__(self):
        return f"Graph(num_nodes={self.num_nodes}, num_edges={self.num_edges}, feature_dim={self.feature_dim})"


def _labels_equal(a, b):
    if a is None or b is None:
        return a is None and b is None
    return np.array_equal(np.asarray(a), np.asarray(b))


class GraphBatch(Graph):
    """Disjoint union of graphs with a nondecreasing node-to-graph index."""

    def __init__(self, num_nodes, csr_offsets, csr_neighbors, node_features,
                 node_to_graph, graphs_count, node_labels=None, graph_labels=None):
        super().__init__(num_nodes, csr_offsets, csr_neighbors, node_features, node_labels)
        self.node_to_graph = _frozen(node_to_graph, np.int64)
        self.graphs_count = int(graphs_count)
        self.graph_labels = None if graph_labels is None else np.asarray(graph_labels)

    @cached_property
    def graph_sizes(self):
        return np.bincount(self.node_to_graph, minlength=self.graphs_count)

    @cached_property
    def readout_matrix(self):
        n = self.num_nodes
        return sp.csr_matrix((np.ones(n), (self.node_to_graph, np.arange(n))), shape=(self.graphs_count, n))


def build_graph(num_nodes, edge_list, features, undirected=True, node_labels=None,
                graph_label=None, allow_self_loops=False):
    """Canonical CSR graph from ``(src, dst)`` pairs.

    Neighbor lists are sorted and deduplicated; with ``undirected`` every pair
    is inserted in both directions.
    """
    n = int(num_nodes)
    e = np.asarray(edge_list, dtype=np.int64).reshape(-1, 2)
    if len(e) and (e.min() < 0 or e.max() >= n):
        bad = e[(e < 0).any(axis=1) | (e >= n).any(axis=1)][0]
        raise ValidationError(f"edge {tuple(int(v) for v in bad)} has an endpoint outside [0, {n})")
    if not allow_self_loops and np.any(e[:, 0] == e[:, 1]):
        raise ValidationError("self-loops are not allowed")
    if undirected:
        e = np.concatenate([e, e[:, ::-1]])
    src, dst = e[:, 0], e[:, 1]
    # sort by destination then source, drop duplicates
    key = np.unique(dst * n + src) if len(e) else np.zeros(0, dtype=np.int64)
    dst, src = key // max(n, 1), key % max(n, 1)
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.add.at(offsets, dst + 1, 1)
    offsets = np.cumsum(offsets)
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features.reshape(-1, 1)
    if features.shape[0] != n:
        raise ValidationError(f"{features.shape[0]} feature rows for {n} nodes")
    return Graph(n, offsets, src, features, node_labels, graph_label)


def batch_graphs(graphs):
    """Merge graphs into one :class:`GraphBatch` with offset node indices."""
    graphs = list(graphs)
    if not graphs:
        raise ValidationError("cannot batch an empty list of graphs")
    d = graphs[0].feature_dim
    for g in graphs:
        if g.feature_dim != d:
            raise ValidationError(f"feature dimension mismatch: {g.feature_dim} vs {d}")
    sizes = np.array([g.num_nodes for g in graphs])
    node_offsets = np.concatenate([[0], np.cumsum(sizes)])
    edge_offsets = np.concatenate([[0], np.cumsum([g.num_edges for g in graphs])])
    offsets = np.concatenate([[0]] + [g.csr_offsets[1:] + edge_offsets[k] for k, g in enumerate(graphs)])
    neighbors = np.concatenate([g.csr_neighbors + node_offsets[k] for k, g in enumerate(graphs)])
    features = np.concatenate([g.node_features for g in graphs])
    node_to_graph = np.repeat(np.arange(len(graphs)), sizes)
    node_labels = None
    if all(g.node_labels is not None for g in graphs):
        node_labels = np.concatenate([g.node_labels for g in graphs])
    graph_labels = None
    if all(g.graph_label is not None for g in graphs):
        graph_labels = np.array([g.graph_label for g in graphs])
    return GraphBatch(int(node_offsets[-1]), offsets, neighbors, features, node_to_graph,
                      len(graphs), node_labels, graph_labels)


def _check_perm(perm, n):
    perm = np.asarray(perm, dtype=np.int64)
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise ValidationError(f"not a permutation of {n} nodes")
    return perm


def permute_rows(h, perm):
    """Move row ``i`` of ``h`` to row ``perm[i]``."""
    h = np.asarray(h)
    perm = _check_perm(perm, h.shape[0])
    out = np.empty_like(h)
    out[perm] = h
    return out


def permute_graph(g, perm):
    """Relabel node ``i`` as ``perm[i]``; features and labels follow their node."""
    perm = _check_perm(perm, g.num_nodes)
    e = g.edge_list()
    edges = perm[e] if len(e) else e
    labels = None if g.node_labels is None else permute_rows(g.node_labels, perm)
    return build_graph(g.num_nodes, edges, permute_rows(g.node_features, perm), undirected=False,
                       node_labels=labels, graph_label=g.graph_label, allow_self_loops=True)


def sparse_matmul(matrix, h):
    """``matrix @ h`` for a constant scipy sparse ``matrix``."""
    if matrix.shape[1] != h.shape[0]:
        raise DimensionError(f"sparse_matmul: {matrix.shape} by {h.shape}")
    mt = matrix.T.tocsr()
    return _record(np.asarray(matrix @ h.data), (h,), lambda g: (np.asarray(mt @ g),))


def _segment_max(h, g):
    n, d = h.shape
    deg = g.degrees
    out = np.zeros((n, d))
    rows = np.flatnonzero(deg > 0)
    if len(rows) == 0:
        return _record(out, (h,), lambda G: (np.zeros((n, d)),))
    starts = g.csr_offsets[rows]
    gathered = h.data[g.csr_neighbors]
    out[rows] = np.maximum.reduceat(gathered, starts, axis=0)
    # first edge (lowest neighbor index) attaining the max, per row and column
    hit = gathered == out[g.edge_dst]
    edge_ids = np.where(hit, np.arange(g.num_edges)[:, None], g.num_edges)
    first = np.minimum.reduceat(edge_ids, starts, axis=0)
    src = g.csr_neighbors[first]
    cols = np.broadcast_to(np.arange(d), src.shape)

    def rule(G):
        grad = np.zeros((n, d))
        np.add.at(grad, (src, cols), G[rows])
        return (grad,)

    return _record(out, (h,), rule)


def segment_reduce(h, g, kind):
    """Reduce in-neighbor rows of ``h`` with ``sum``, ``mean`` or ``max``.

    Nodes without in-neighbors get a zero row for every kind. The max
    gradient goes to the lowest-index neighbor among ties.
    """
    if h.ndim != 2 or h.shape[0] != g.num_nodes:
        raise DimensionError(f"segment_reduce: {h.shape} rows for {g.num_nodes} nodes")
    if kind == "sum":
        return sparse_matmul(g.adjacency, h)
    if kind == "mean":
        return sparse_matmul(g.mean_adjacency, h)
    if kind == "max":
        return _segment_max(h, g)
    raise ValueError(f"unknown reduction {kind!r}")


def readout(h, batch, kind="mean"):
    """Per-graph ``sum`` or ``mean`` of node rows."""
    if h.shape[0] != batch.num_nodes:
        raise DimensionError(f"readout: {h.shape[0]} rows for {batch.num_nodes} nodes")
    r = batch.readout_matrix
    if kind == "sum":
        return sparse_matmul(r, h)
    if kind == "mean":
        sizes = batch.graph_sizes.astype(np.float64)
        inv = np.divide(1.0, sizes, out=np.zeros_like(sizes), where=sizes > 0)
        return sparse_matmul(sp.diags(inv) @ r, h)
    raise ValueError(f"unknown readout {kind!r}")


def bfs_distances(g, source):
    """Hop distances from ``source`` over the undirected view; -1 if unreachable."""
    dist = np.full(g.num_nodes, -1, dtype=np.int64)
    dist[source] = 0
    queue = deque([source])
    adj = _undirected_lists(g)
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def _undirected_lists(g):
    cached = getattr(g, "_undirected_cache", None)
    if cached is None:
        a = g.adjacency
        sym = ((a + a.T) > 0).tocsr()
        cached = [sym.indices[sym.indptr[i]:sym.indptr[i + 1]] for i in range(g.num_nodes)]
        g._undirected_cache = cached
    return cached


def graph_diameter(g):
    """Largest BFS eccentricity within the biggest connected component.

    Components are ranked by node count; ties go to the larger diameter.
    """
    if g.num_nodes < 1:
        raise ValidationError("diameter of an empty graph is undefined")
    best_size, best_diam = 0, 0
    component = np.full(g.num_nodes, -1)
    for start in range(g.num_nodes):
        if component[start] >= 0:
            continue
        members = np.flatnonzero(bfs_distances(g, start) >= 0)
        component[members] = start
        diam = max(int(bfs_distances(g, int(u)).max()) for u in members)
        if len(members) > best_size or (len(members) == best_size and diam > best_diam):
            best_size, best_diam = len(members), diam
    return best_diam
