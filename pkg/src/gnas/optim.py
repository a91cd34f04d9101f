"""SGD with momentum, Adam, cosine annealing and plateau halving."""

import math

import numpy as np

from .errors import DimensionError

__all__ = ["sgd_momentum_step", "adam_step", "cosine_lr", "SGD", "Adam", "PlateauScheduler"]


def _check(params, grads):
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if np.shape(p) != np.shape(g):
            raise DimensionError(f"param {np.shape(p)} vs grad {np.shape(g)}")


def sgd_momentum_step(params, grads, velocity, lr, momentum=0.9, weight_decay=0.0):
    """In-place ``v = mu*v + (g + wd*p); p -= lr*v`` on numpy arrays."""
    _check(params, grads)
    for p, g, v in zip(params, grads, velocity):
        v *= momentum
        v += g + weight_decay * p
        p -= lr * v


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), weight_decay=0.0, eps=1e-8):
    """In-place Adam with bias correction; weight decay is added to the gradient.

    ``state`` is a dict holding ``step``, ``m`` and ``v`` (lists of arrays).
    """
    _check(params, grads)
    b1, b2 = betas
    state["step"] += 1
    t = state["step"]
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        g = g + weight_decay * p
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def cosine_lr(epoch, total_epochs, lr0):
    if total_epochs <= 0:
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def _grads(tensors):
    return [np.zeros_like(t.data) if t.grad is None else t.grad for t in tensors]


class SGD:
    """Momentum SGD over autodiff tensors (missing grads count as zero)."""

    def __init__(self, tensors, lr, momentum=0.9, weight_decay=0.0):
        self.tensors = list(tensors)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity = [np.zeros_like(t.data) for t in self.tensors]

    def step(self):
        sgd_momentum_step([t.data for t in self.tensors], _grads(self.tensors), self.velocity,
                          self.lr, self.momentum, self.weight_decay)


class Adam:
    def __init__(self, tensors, lr, betas=(0.9, 0.999), weight_decay=0.0, eps=1e-8):
        self.tensors = list(tensors)
        self.lr, self.betas, self.weight_decay, self.eps = lr, tuple(betas), weight_decay, eps
        self.state = {"step": 0,
                      "m": [np.zeros_like(t.data) for t in self.tensors],
                      "v": [np.zeros_like(t.data) for t in self.tensors]}

    def step(self):
        adam_step([t.data for t in self.tensors], _grads(self.tensors), self.state,
                  self.lr, self.betas, self.weight_decay, self.eps)


class PlateauScheduler:
    """Halve the learning rate after ``patience`` epochs without improvement."""

    def __init__(self, optimizer, patience=10, factor=0.5, min_lr=0.0):
        self.optimizer = optimizer
        self.patience, self.factor, self.min_lr = patience, factor, min_lr
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, metric):
        if metric < self.best:
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                lr = self.optimizer.lr
                self.optimizer.lr = min(lr, max(lr * self.factor, self.min_lr))
                self.bad_epochs = 0
        return self.optimizer.lr
