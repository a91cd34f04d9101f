"""Synthetic graph datasets, JSON-lines storage and seeded splits.

File format: one graph per line,
``{"n": int, "edges": [[u, v], ...], "x": [[...], ...], "y": ...}`` where
``y`` is a list of node labels or a single graph target. Edges are stored
once per undirected pair unless the line carries ``"directed": true``.
A ``<path>.meta.json`` sidecar records task and generator settings. Paths
ending in ``.gz`` are gzip-compressed.
"""

import gzip
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ParseError, ValidationError
from .graph import build_graph, graph_diameter
from .network import TASKS

__all__ = [
    "Dataset", "gen_sbm", "gen_khop_task", "gen_substructure_regression",
    "save_dataset", "load_dataset", "split", "count_triangles", "khop_labels",
    "avg_graph_diameter",
]


@dataclass
class Dataset:
    graphs: list
    task: str
    num_classes: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigurationError(f"unknown task {self.task!r}")
        if self.graphs:
            d = self.graphs[0].feature_dim
            if any(g.feature_dim != d for g in self.graphs):
                raise ValidationError("graphs disagree on feature dimension")

    def __len__(self):
        return len(self.graphs)

    def __getitem__(self, i):
        return self.graphs[i]

    def __iter__(self):
        return iter(self.graphs)

    @property
    def feature_dim(self):
        return self.graphs[0].feature_dim

    @property
    def out_dim(self):
        return 1 if self.task == "graph-regress" else self.num_classes

    def subset(self, index):
        return Dataset([self.graphs[i] for i in index], self.task, self.num_classes, dict(self.meta))


def gen_sbm(num_graphs, nodes_per_graph, communities=2, p_intra=0.5, p_inter=0.05, seed=0):
    """Community detection on stochastic block model graphs.

    Communities are balanced. Features have ``communities + 1`` columns: one
    randomly chosen node per community reveals its community as a one-hot
    row, all other nodes are zero there, and the last column is N(0, 1) noise.
    """
    if communities < 2:
        raise ValidationError("need at least two communities")
    if not 0.0 <= p_inter < p_intra <= 1.0:
        raise ValidationError(f"need 0 <= p_inter < p_intra <= 1, got {p_inter}, {p_intra}")
    if nodes_per_graph < communities:
        raise ValidationError("fewer nodes than communities")
    rng = np.random.default_rng(seed)
    n = nodes_per_graph
    graphs = []
    iu = np.triu_indices(n, k=1)
    for _ in range(num_graphs):
        labels = rng.permutation(np.arange(n) % communities)
        same = labels[iu[0]] == labels[iu[1]]
        p = np.where(same, p_intra, p_inter)
        keep = rng.random(len(p)) < p
        edges = np.stack([iu[0][keep], iu[1][keep]], axis=1)
        x = np.zeros((n, communities + 1))
        for c in range(communities):
            seed_node = rng.choice(np.flatnonzero(labels == c))
            x[seed_node, c] = 1.0
        x[:, -1] = rng.standard_normal(n)
        graphs.append(build_graph(n, edges, x, node_labels=labels))
    meta = {"generator": "sbm", "num_graphs": num_graphs, "nodes": n, "communities": communities,
            "p_intra": p_intra, "p_inter": p_inter, "seed": seed}
    return Dataset(graphs, "node-classify", communities, meta)


def _random_tree(n, rng):
    # each new node attaches to a uniformly chosen earlier node, then labels are shuffled
    parents = [int(rng.integers(0, i)) for i in range(1, n)]
    perm = rng.permutation(n)
    return [(int(perm[p]), int(perm[i])) for i, p in enumerate(parents, start=1)]


def _ball_sums(n, edges, bits, k):
    adj = [[] for _ in range(n)]
    for u, v in edges:
        adj[u].append(v)
        adj[v].append(u)
    out = np.zeros(n, dtype=np.int64)
    for s in range(n):
        dist = {s: 0}
        queue = deque([s])
        while queue:
            u = queue.popleft()
            if dist[u] == k:
                continue
            for v in adj[u]:
                if v not in dist:
                    dist[v] = dist[u] + 1
                    queue.append(v)
        out[s] = sum(bits[v] for v in dist)
    return out


def khop_labels(graph, k, rule="parity"):
    """Labels from the binary first feature column over each ``k``-hop ball."""
    bits = graph.node_features[:, 0].astype(np.int64)
    sums = _ball_sums(graph.num_nodes, graph.undirected_edges().tolist(), bits, k)
    if rule == "parity":
        return sums % 2
    if rule == "any":
        return (sums > 0).astype(np.int64)
    raise ValueError(f"unknown rule {rule!r}")


def gen_khop_task(k, num_graphs, nodes, seed=0, rule="parity", p_one=None, retries=100):
    """Node labels that depend on the ``k``-hop ball on random trees.

    Features are ``[b_i, 1]`` with random bits ``b_i``. The label is the
    parity (``rule="parity"``) or the OR (``rule="any"``) of the bits within
    distance ``k``. Trees are redrawn until their diameter is at least
    ``2k``, so every node has some node at distance exactly ``k`` and its
    label is not fixed by a smaller ball.
    """
    if k < 1:
        raise ValidationError("k must be at least 1")
    if nodes < 2 * k + 1:
        raise ValidationError(f"need at least {2 * k + 1} nodes for k={k}")
    if p_one is None:
        # for OR labels keep the classes roughly balanced
        p_one = 0.5 if rule == "parity" else 1.0 - 0.5 ** (1.0 / (1 + 2 * k))
    rng = np.random.default_rng(seed)
    graphs = []
    for _ in range(num_graphs):
        for _attempt in range(retries):
            edges = _random_tree(nodes, rng)
            x = np.zeros((nodes, 2))
            x[:, 0] = rng.random(nodes) < p_one
            x[:, 1] = 1.0
            g = build_graph(nodes, edges, x)
            if graph_diameter(g) >= 2 * k:
                break
        else:
            raise ValidationError(f"no tree with diameter >= {2 * k} after {retries} draws")
        labels = khop_labels(g, k, rule)
        graphs.append(build_graph(nodes, edges, x, node_labels=labels))
    meta = {"generator": "khop", "k": k, "num_graphs": num_graphs, "nodes": nodes, "rule": rule,
            "p_one": p_one, "seed": seed}
    return Dataset(graphs, "node-classify", 2, meta)


def count_triangles(graph):
    """Triangles counted once each, by intersecting sorted neighbor lists."""
    total = 0
    for u, v in graph.undirected_edges():
        if u == v:
            continue
        common = np.intersect1d(graph.neighbors(u), graph.neighbors(v), assume_unique=True)
        total += int(np.sum(common > v))
    return total


def gen_substructure_regression(num_graphs, nodes, seed=0, p=None, max_degree=6):
    """Graph regression: target is triangle count divided by node count.

    Graphs are G(n, p) with ``p = 3 / n`` by default; features are one-hot
    degrees capped at ``max_degree``.
    """
    if nodes < 3:
        raise ValidationError("need at least 3 nodes")
    rng = np.random.default_rng(seed)
    p = 3.0 / nodes if p is None else p
    iu = np.triu_indices(nodes, k=1)
    graphs = []
    for _ in range(num_graphs):
        keep = rng.random(len(iu[0])) < p
        edges = np.stack([iu[0][keep], iu[1][keep]], axis=1)
        g = build_graph(nodes, edges, np.zeros((nodes, 1)))
        x = np.zeros((nodes, max_degree + 1))
        x[np.arange(nodes), np.minimum(g.degrees, max_degree)] = 1.0
        y = count_triangles(g) / nodes
        graphs.append(build_graph(nodes, edges, x, graph_label=float(y)))
    meta = {"generator": "substructure", "num_graphs": num_graphs, "nodes": nodes, "p": p,
            "max_degree": max_degree, "seed": seed}
    return Dataset(graphs, "graph-regress", 0, meta)


def avg_graph_diameter(dataset):
    graphs = list(dataset)
    if not graphs:
        raise ValidationError("average diameter of an empty dataset")
    return float(np.mean([graph_diameter(g) for g in graphs]))


# ---------------------------------------------------------------------------
# storage


def _open(path, mode):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode + "t", encoding="utf-8")
    return open(path, mode, encoding="utf-8")


def _meta_path(path):
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def _plain(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


def graph_record(g):
    rec = {"n": g.num_nodes}
    if g.is_symmetric():
        rec["edges"] = g.undirected_edges().tolist()
    else:
        rec["directed"] = True
        rec["edges"] = g.edge_list().tolist()
    rec["x"] = g.node_features.tolist()
    if g.node_labels is not None:
        rec["y"] = g.node_labels.tolist()
    elif g.graph_label is not None:
        rec["y"] = _plain(g.graph_label)
    return rec


def save_dataset(ds, path):
    """Write JSON lines plus a metadata sidecar; output is deterministic."""
    with _open(path, "w") as fh:
        for g in ds:
            fh.write(json.dumps(graph_record(g), separators=(",", ":")) + "\n")
    meta = {"task": ds.task, "num_classes": ds.num_classes, "num_graphs": len(ds), "meta": ds.meta}
    _meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _parse_graph(rec, lineno):
    try:
        n = int(rec["n"])
        edges = rec["edges"]
        x = np.asarray(rec["x"], dtype=np.float64)
        y = rec.get("y")
        node_labels = graph_label = None
        if isinstance(y, list):
            node_labels = np.asarray(y, dtype=np.int64)
            if node_labels.shape != (n,):
                raise ValueError(f"{len(y)} labels for {n} nodes")
        elif y is not None:
            graph_label = y
        return build_graph(n, edges, x.reshape(n, -1) if x.size else np.zeros((n, 0)),
                           undirected=not rec.get("directed", False),
                           node_labels=node_labels, graph_label=graph_label,
                           allow_self_loops=bool(rec.get("directed", False)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad graph record: {exc}", line=lineno) from None


def load_dataset(path):
    graphs = []
    with _open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", line=lineno) from None
            if not isinstance(rec, dict):
                raise ParseError("expected a JSON object", line=lineno)
            graphs.append(_parse_graph(rec, lineno))
    if not graphs:
        raise ParseError(f"{path} holds no graphs")
    meta_file = _meta_path(path)
    sidecar = json.loads(meta_file.read_text()) if meta_file.exists() else {}
    task = sidecar.get("task")
    num_classes = sidecar.get("num_classes")
    meta = sidecar.get("meta", {})
    if task is None:
        g = graphs[0]
        if g.node_labels is not None:
            task = "node-classify"
        elif isinstance(g.graph_label, float):
            task = "graph-regress"
        else:
            task = "graph-classify"
    if num_classes is None:
        if task == "node-classify":
            num_classes = int(max(g.node_labels.max() for g in graphs)) + 1
        elif task == "graph-classify":
            num_classes = int(max(g.graph_label for g in graphs)) + 1
        else:
            num_classes = 0
    return Dataset(graphs, task, int(num_classes), meta)


def split(ds, fractions=(0.5, 0.25, 0.25), seed=0):
    """Seeded shuffle, then consecutive chunks with the given fractions."""
    fractions = np.asarray(fractions, dtype=np.float64)
    if np.any(fractions <= 0) or abs(fractions.sum() - 1.0) > 1e-9:
        raise ValidationError(f"split fractions must be positive and sum to 1, got {fractions.tolist()}")
    n = len(ds)
    if n < len(fractions):
        raise ValidationError(f"cannot split {n} graphs into {len(fractions)} parts")
    order = np.random.default_rng(seed).permutation(n)
    bounds = np.rint(np.cumsum(fractions) * n).astype(int)
    bounds[-1] = n
    starts = np.concatenate([[0], bounds[:-1]])
    if np.any(bounds <= starts):
        raise ValidationError(f"fractions {fractions.tolist()} leave an empty part of {n} graphs")
    return tuple(ds.subset(order[a:b]) for a, b in zip(starts, bounds))
