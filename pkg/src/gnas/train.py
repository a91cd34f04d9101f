"""Training and evaluation of discrete networks, plus JSON checkpoints."""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, backward, no_grad
from .baselines import BaselineNetwork
from .errors import ConfigurationError, ParseError
from .genotype import CellGenotype
from .graph import batch_graphs
from .network import NetworkConfig, task_loss, task_metric
from .optim import Adam, PlateauScheduler
from .supernet import GenotypeNetwork

__all__ = ["TrainConfig", "TrainRecord", "train_model", "evaluate", "predict",
           "save_checkpoint", "load_checkpoint", "build_network", "config_hash", "TRAIN_COLUMNS"]

TRAIN_COLUMNS = ("epoch", "train_loss", "val_loss", "val_metric", "lr")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.0
    patience: int = 10
    min_lr: float = 1e-5
    seed: int = 0


@dataclass
class TrainRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_metric: float
    lr: float

    def row(self):
        return [self.epoch, self.train_loss, self.val_loss, self.val_metric, self.lr]


@dataclass
class TrainResult:
    records: list = field(default_factory=list)

    @property
    def final(self):
        return self.records[-1] if self.records else None


def predict(net, dataset, batch_size=256):
    """Concatenated predictions in evaluation mode."""
    was_training = net.training
    net.eval()
    outs = []
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            batch = batch_graphs(dataset.graphs[start:start + batch_size])
            outs.append(net(batch).data)
    net.train(was_training)
    return np.concatenate(outs)


def evaluate(net, dataset, batch_size=256):
    """``(loss, metric)`` over a whole dataset; metric is accuracy or MAE."""
    pred = predict(net, dataset, batch_size)
    batch = batch_graphs(dataset.graphs)
    loss = float(task_loss(Tensor(pred), batch, dataset.task).data)
    return loss, task_metric(pred, batch, dataset.task)


def train_model(net, train, val=None, config=None, callback=None):
    """Adam on the training loss; lr halves when validation loss plateaus."""
    config = config or TrainConfig()
    if len(train) == 0:
        raise ConfigurationError("training split is empty")
    rng = np.random.default_rng([config.seed, 2])
    opt = Adam(net.parameters(), config.lr, weight_decay=config.weight_decay)
    sched = PlateauScheduler(opt, config.patience, 0.5, config.min_lr)
    result = TrainResult()
    net.train()
    for epoch in range(1, config.epochs + 1):
        losses = []
        order = rng.permutation(len(train))
        for start in range(0, len(train), config.batch_size):
            batch = batch_graphs([train[i] for i in order[start:start + config.batch_size]])
            net.zero_grad()
            loss = task_loss(net(batch), batch, train.task)
            backward(loss)
            opt.step()
            losses.append(float(loss.data))
        train_loss = float(np.mean(losses))
        if val is not None and len(val):
            val_loss, val_metric = evaluate(net, val)
        else:
            val_loss, val_metric = train_loss, float("nan")
        lr_used = opt.lr
        sched.step(val_loss)
        result.records.append(TrainRecord(epoch, train_loss, val_loss, val_metric, lr_used))
        if callback is not None:
            callback(result.records[-1])
    return result


# ---------------------------------------------------------------------------
# checkpoints


def build_network(desc, rng=None):
    """Network from a checkpoint-style description (no weights loaded)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    config = NetworkConfig(**desc["network"])
    if desc["kind"] == "genotype":
        genotypes = [CellGenotype.from_dict(c) for c in desc["genotypes"]]
        return GenotypeNetwork(config, genotypes, rng)
    if desc["kind"] == "baseline":
        return BaselineNetwork(config, desc["baseline"], rng, desc.get("form", "reference"))
    raise ConfigurationError(f"unknown network kind {desc['kind']!r}")


def describe(net):
    desc = {"network": net.config.to_dict()}
    if isinstance(net, GenotypeNetwork):
        desc["kind"] = "genotype"
        desc["genotypes"] = [g.to_dict() for g in net.genotypes]
    elif isinstance(net, BaselineNetwork):
        desc["kind"] = "baseline"
        desc["baseline"] = net.kind.value
        desc["form"] = net.form
    else:
        raise ConfigurationError(f"cannot checkpoint {type(net).__name__}")
    return desc


def config_hash(obj):
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def save_checkpoint(net, path, meta=None):
    """Architecture, weights and batch-norm statistics as deterministic JSON."""
    doc = describe(net)
    if meta:
        doc["meta"] = meta
    doc["state"] = {k: v.tolist() for k, v in net.state_dict().items()}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        net = build_network(doc)
        net.load_state_dict({k: np.asarray(v, dtype=np.float64) for k, v in doc["state"].items()})
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError(f"bad checkpoint {path}: {exc}") from None
    net.eval()
    return net, doc.get("meta", {})
