"""Architecture search loops, optimal depth search and op-usage statistics."""

import csv
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .autodiff import backward, no_grad
from .errors import ConfigurationError
from .datasets import avg_graph_diameter
from .genotype import CellGenotype, derive_genotype, softmax_np, _first_max
from .graph import batch_graphs
from .network import NetworkConfig, task_loss
from .ops import AGGREGATION_OPS, FILTER_OPS
from .optim import SGD, Adam, cosine_lr
from .supernet import SuperNetwork

__all__ = [
    "SearchConfig", "EpochRecord", "SearchRun", "DepthSearchTrace", "bilevel_search",
    "single_level_search", "run_search", "depth_search", "op_distribution",
    "identity_fraction", "iterate_batches", "HISTOGRAM_KEYS", "CSV_COLUMNS", "network_config_for",
    "collapse_report",
]

HISTOGRAM_KEYS = tuple(f"f_{op.value}" for op in FILTER_OPS) + tuple(f"l_{op.value}" for op in AGGREGATION_OPS)
CSV_COLUMNS = ("epoch", "train_loss", "val_loss", "lr_w", "lr_alpha", "identity_fraction") + HISTOGRAM_KEYS


@dataclass
class SearchConfig:
    depth: int = 4
    hidden_dim: int = 16
    N: int = 3
    M: int = 3
    epochs: int = 50
    batch_size: int = 64
    lr_w: float = 0.025
    momentum: float = 0.9
    weight_decay_w: float = 3e-4
    lr_alpha: float = 3e-4
    alpha_betas: tuple = (0.5, 0.999)
    weight_decay_alpha: float = 1e-3
    objective: str = "bilevel"
    per_cell_alpha: bool = False
    seed: int = 0
    readout: str = "mean"
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    max_depth: int = 8
    max_outer_iters: int = 6

    def __post_init__(self):
        self.alpha_betas = tuple(self.alpha_betas)
        if self.objective not in ("bilevel", "single_level"):
            raise ConfigurationError(f"objective must be bilevel or single_level, got {self.objective!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if self.max_depth < 1 or self.max_outer_iters < 1:
            raise ConfigurationError("max_depth and max_outer_iters must be positive")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    def to_dict(self):
        d = asdict(self)
        d["alpha_betas"] = list(self.alpha_betas)
        return d


def network_config_for(config, dataset, depth=None):
    return NetworkConfig(in_dim=dataset.feature_dim, out_dim=dataset.out_dim, task=dataset.task,
                         depth=config.depth if depth is None else depth, hidden_dim=config.hidden_dim,
                         N=config.N, M=config.M, readout=config.readout,
                         bn_momentum=config.bn_momentum, bn_eps=config.bn_eps)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr_w: float
    lr_alpha: float
    identity_fraction: float
    histogram: dict
    alpha: list

    def row(self):
        return [self.epoch, self.train_loss, self.val_loss, self.lr_w, self.lr_alpha,
                self.identity_fraction] + [self.histogram[k] for k in HISTOGRAM_KEYS]


@dataclass
class SearchRun:
    config: SearchConfig
    records: list = field(default_factory=list)
    genotypes: list = field(default_factory=list)
    network: object = None

    @property
    def genotype(self):
        return self.genotypes[0] if self.genotypes else None


def iterate_batches(dataset, batch_size, rng=None):
    """Batches of whole graphs, shuffled when ``rng`` is given."""
    n = len(dataset)
    order = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, batch_size):
        yield batch_graphs([dataset[i] for i in order[start:start + batch_size]])


@contextmanager
def _frozen(tensors):
    """Temporarily stop recording gradients for ``tensors``."""
    saved = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, flag in zip(tensors, saved):
            t.requires_grad = flag


def op_distribution(source):
    """Counts of chosen ops, keyed ``f_<op>`` (filter edges) and ``l_<op>`` (slots).

    ``source`` is a genotype, a list of genotypes, logits (``ArchParams``, a
    list of them, or a :class:`SuperNetwork`). For logits every edge
    contributes its argmax, zero op included, so counts sum to the number of
    topology edges per logit set.
    """
    hist = dict.fromkeys(HISTOGRAM_KEYS, 0)
    items = source if isinstance(source, (list, tuple)) else [source]
    if isinstance(source, SuperNetwork):
        items = source.arch
    for item in items:
        if isinstance(item, CellGenotype):
            for e in list(item.level1) + list(item.level3):
                if f"f_{e.op.value}" in hist:
                    hist[f"f_{e.op.value}"] += 1
            for op in item.level2:
                if f"l_{op.value}" in hist:
                    hist[f"l_{op.value}"] += 1
        else:
            for vec in item.alpha_F.values():
                hist[f"f_{FILTER_OPS[_first_max(softmax_np(vec.data))].value}"] += 1
            for vec in item.alpha_L.values():
                hist[f"l_{AGGREGATION_OPS[_first_max(softmax_np(vec.data))].value}"] += 1
    return hist


def identity_fraction(source):
    """Share of aggregation slots whose strongest op is the identity."""
    hist = op_distribution(source)
    total = sum(hist[f"l_{op.value}"] for op in AGGREGATION_OPS)
    return hist["l_identity"] / total if total else 0.0


def _mean(values):
    return float(np.mean(values)) if values else float("nan")


def _record(run, net, epoch, train_losses, val_losses, lr_w, lr_alpha):
    arch = net.arch
    run.records.append(EpochRecord(
        epoch=epoch, train_loss=_mean(train_losses), val_loss=_mean(val_losses),
        lr_w=lr_w, lr_alpha=lr_alpha, identity_fraction=identity_fraction(arch),
        histogram=op_distribution(arch), alpha=[a.snapshot() for a in arch]))


def _loss(net, batch):
    return task_loss(net(batch), batch, net.config.task)


def _validation_loss(net, val, batch_size):
    if val is None or len(val) == 0:
        return []
    net.eval()
    with no_grad():
        losses = [float(_loss(net, b).data) for b in iterate_batches(val, batch_size)]
    net.train()
    return losses


def _setup(config, train, depth):
    if len(train) == 0:
        raise ConfigurationError("training split is empty")
    rng = np.random.default_rng(config.seed)
    net = SuperNetwork(network_config_for(config, train, depth), rng, config.per_cell_alpha)
    w_opt = SGD(net.weight_parameters(), config.lr_w, config.momentum, config.weight_decay_w)
    a_opt = Adam(net.arch_parameters(), config.lr_alpha, config.alpha_betas, config.weight_decay_alpha)
    return net, w_opt, a_opt, np.random.default_rng([config.seed, 1])


def bilevel_search(config, train, val, depth=None, callback=None):
    """First-order alternating search.

    For each pair of batches the logits take an Adam step on the validation
    loss, then the weights take an SGD step on the training loss.
    """
    if val is None or len(val) == 0:
        raise ConfigurationError("bilevel search needs a nonempty validation split")
    net, w_opt, a_opt, rng = _setup(config, train, depth)
    weights, alphas = net.weight_parameters(), net.arch_parameters()
    run = SearchRun(config)
    for epoch in range(config.epochs):
        w_opt.lr = cosine_lr(epoch, config.epochs, config.lr_w)
        train_losses, val_losses = [], []
        val_batches = list(iterate_batches(val, config.batch_size, rng))
        for k, batch in enumerate(iterate_batches(train, config.batch_size, rng)):
            vb = val_batches[k % len(val_batches)]
            with _frozen(weights):
                net.zero_grad()
                loss = _loss(net, vb)
                backward(loss)
            a_opt.step()
            val_losses.append(float(loss.data))

            with _frozen(alphas):
                net.zero_grad()
                loss = _loss(net, batch)
                backward(loss)
            w_opt.step()
            train_losses.append(float(loss.data))
        _record(run, net, epoch + 1, train_losses, val_losses, w_opt.lr, a_opt.lr)
        if callback is not None:
            callback(run.records[-1])
    run.genotypes = net.genotypes()
    run.network = net
    return run


def single_level_search(config, train, val=None, depth=None, callback=None):
    """Weights and logits both step on the training loss of the same batch.

    ``val``, when given, is only evaluated for the records.
    """
    net, w_opt, a_opt, rng = _setup(config, train, depth)
    run = SearchRun(config)
    for epoch in range(config.epochs):
        w_opt.lr = cosine_lr(epoch, config.epochs, config.lr_w)
        train_losses = []
        for batch in iterate_batches(train, config.batch_size, rng):
            net.zero_grad()
            loss = _loss(net, batch)
            backward(loss)
            a_opt.step()
            w_opt.step()
            train_losses.append(float(loss.data))
        val_losses = _validation_loss(net, val, config.batch_size)
        _record(run, net, epoch + 1, train_losses, val_losses, w_opt.lr, a_opt.lr)
        if callback is not None:
            callback(run.records[-1])
    run.genotypes = net.genotypes()
    run.network = net
    return run


def run_search(config, train, val, depth=None, callback=None):
    if config.objective == "bilevel":
        return bilevel_search(config, train, val, depth, callback)
    return single_level_search(config, train, val, depth, callback)


@dataclass
class DepthSearchTrace:
    """Outer-loop history: ``(depth searched, aggregation cells found, genotypes)``."""

    initial_depth: int
    avg_diameter: float
    iterations: list = field(default_factory=list)
    converged: bool = False
    runs: list = field(default_factory=list)

    @property
    def final_depth(self):
        return self.iterations[-1][1] if self.iterations else self.initial_depth

    @property
    def final_genotypes(self):
        return self.iterations[-1][2] if self.iterations else []

    def depths(self):
        return [self.initial_depth] + [count for _, count, _ in self.iterations]


def aggregation_cells(genotypes):
    return sum(g.has_aggregation(live_only=True) for g in genotypes)


def depth_search(train, val, config, per_cell_alpha=True, callback=None):
    """Grow or shrink the stack until it equals its own aggregation-cell count.

    Starts from ``ceil(avg_diameter / 2)`` clamped to ``[1, max_depth]``.
    Each round searches a network of the current depth and counts the cells
    whose derived genotype keeps a live sum/mean/max slot; that count (at
    least 1) is the next depth. Stops at a fixpoint or after
    ``max_outer_iters`` rounds (``converged`` is then False).
    """
    diam = avg_graph_diameter(train)
    d_o = min(max(math.ceil(diam / 2), 1), config.max_depth)
    trace = DepthSearchTrace(initial_depth=d_o, avg_diameter=diam)
    cfg = replace(config, per_cell_alpha=per_cell_alpha)
    for _ in range(config.max_outer_iters):
        d_i = d_o
        run = run_search(cfg, train, val, depth=d_i)
        genotypes = run.genotypes
        count = aggregation_cells(genotypes)
        d_o = min(max(count, 1), config.max_depth)
        trace.iterations.append((d_i, d_o, genotypes))
        run.network = None
        trace.runs.append(run)
        if callback is not None:
            callback(d_i, d_o, genotypes)
        if d_i == d_o:
            trace.converged = True
            break
    return trace


def collapse_report(bilevel, single, path):
    """Per-epoch identity fractions of paired runs as CSV, plus a summary dict.

    Rows are ``epoch, bilevel, single_level``; a shorter run leaves its
    cells empty.
    """
    a = [r.identity_fraction for r in bilevel.records]
    b = [r.identity_fraction for r in single.records]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "bilevel", "single_level"])
        for epoch in range(max(len(a), len(b))):
            writer.writerow([epoch + 1] + [f"{v[epoch]:.6f}" if epoch < len(v) else "" for v in (a, b)])
    return {
        "epochs": max(len(a), len(b)),
        "bilevel_final": a[-1] if a else float("nan"),
        "single_level_final": b[-1] if b else float("nan"),
        "bilevel_histogram": op_distribution(bilevel.genotypes),
        "single_level_histogram": op_distribution(single.genotypes),
    }
