"""Shared network skeleton: input embedding, stacked cells with ``BN & Add``
residuals, and task heads."""

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNorm, Linear, Module, Tensor
from .errors import ConfigurationError
from .graph import GraphBatch, batch_graphs, readout

TASKS = ("node-classify", "graph-classify", "graph-regress")


@dataclass
class NetworkConfig:
    in_dim: int
    out_dim: int
    task: str = "node-classify"
    depth: int = 4
    hidden_dim: int = 16
    N: int = 3
    M: int = 3
    readout: str = "mean"
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigurationError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.depth < 1 or self.hidden_dim < 1:
            raise ConfigurationError("depth and hidden_dim must be at least 1")
        if self.task == "graph-regress" and self.out_dim != 1:
            raise ConfigurationError("regression head must have a single output")
        if self.readout not in ("mean", "sum"):
            raise ConfigurationError(f"unknown readout {self.readout!r}")

    def to_dict(self):
        return asdict(self)


class Backbone(Module):
    """``embed -> [h + BN(cell_k(h))] * depth -> head``.

    Subclasses provide ``_build_cells(rng)`` and ``cell_forward(k, h, batch)``.
    """

    def __init__(self, config, rng):
        super().__init__()
        self.config = config
        d = config.hidden_dim
        self.embed = Linear(config.in_dim, d, rng)
        self.cells = self._build_cells(rng)
        self.norms = [BatchNorm(d, config.bn_momentum, config.bn_eps) for _ in range(config.depth)]
        self.head = Linear(d, config.out_dim, rng)

    def _build_cells(self, rng):
        raise NotImplementedError

    def cell_forward(self, k, h, batch):
        raise NotImplementedError

    def embed_features(self, batch):
        if batch.feature_dim != self.config.in_dim:
            raise ConfigurationError(f"network expects {self.config.in_dim} input features,"
                                     f" batch has {batch.feature_dim}")
        return self.embed(Tensor._wrap(np.asarray(batch.node_features)))

    def forward(self, batch):
        if self.config.task != "node-classify" and not isinstance(batch, GraphBatch):
            batch = batch_graphs([batch])
        h = self.embed_features(batch)
        for k in range(self.config.depth):
            h = ad.add(self.norms[k](self.cell_forward(k, h, batch)), h)
        return self.predict(h, batch)

    def predict(self, h, batch):
        if self.config.task == "node-classify":
            return self.head(h)
        return self.head(readout(h, batch, self.config.readout))


def targets(batch, task):
    if task == "node-classify":
        if batch.node_labels is None:
            raise ConfigurationError("node classification needs node labels")
        return np.asarray(batch.node_labels)
    labels = getattr(batch, "graph_labels", None)
    if labels is None:
        labels = None if batch.graph_label is None else np.array([batch.graph_label])
    if labels is None:
        raise ConfigurationError(f"{task} needs graph labels")
    return np.asarray(labels)


def task_loss(pred, batch, task):
    """Cross-entropy for classification, mean absolute error for regression."""
    y = targets(batch, task)
    if task == "graph-regress":
        return ad.l1_loss(pred, y.astype(np.float64))
    return ad.cross_entropy(pred, y.astype(np.int64))


def task_metric(pred, batch, task):
    """Accuracy for classification, MAE for regression (plain floats)."""
    y = targets(batch, task)
    p = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    if task == "graph-regress":
        return float(np.abs(p.reshape(-1) - y.astype(np.float64)).mean())
    return float((p.argmax(axis=1) == y).mean())
