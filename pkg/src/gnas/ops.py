"""Feature filtering and neighbor aggregation operations.

Every searchable operation ends in its own ``ReLU(x @ W + b)`` post
transform. Filters compute their gate from ``[h || h_in]`` where ``h_in`` is
the cell's root embedding. ``SKIP`` is the parameter-free pass-through used
only when rewriting trees into the three-level layout.
"""

from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Linear, Module, Tensor
from .errors import DimensionError, ValidationError
from .graph import segment_reduce

__all__ = [
    "Op", "FILTER_OPS", "AGGREGATION_OPS", "Operation", "Fusion",
    "sparse_filter", "dense_filter", "identity_filter", "zero_op", "aggregate",
    "cell_output", "filter_gate",
]


class Op(str, Enum):
    ZERO = "zero"
    IDENTITY = "identity"
    SPARSE = "sparse"
    DENSE = "dense"
    SUM = "sum"
    MEAN = "mean"
    MAX = "max"
    SKIP = "skip"

    def __str__(self):
        return self.value

    @property
    def is_aggregation(self):
        return self in (Op.SUM, Op.MEAN, Op.MAX)

    @property
    def label(self):
        """Display name used in architecture drawings."""
        return "Identity" if self is Op.SKIP else self.value.capitalize()


# candidate sets, in the index order used by architecture logits
FILTER_OPS = (Op.ZERO, Op.IDENTITY, Op.SPARSE, Op.DENSE)
AGGREGATION_OPS = (Op.IDENTITY, Op.SUM, Op.MEAN, Op.MAX)


class Operation(Module):
    """One atomic operation with its own parameters.

    Filters own a gate ``Linear(2d, 1)`` (sparse) or ``Linear(2d, d)`` (dense);
    all non-zero, non-skip ops own a post transform ``Linear(d, d)``.
    """

    def __init__(self, op, dim, rng):
        super().__init__()
        self.op = Op(op)
        self.dim = dim
        self.gate = None
        self.post = None
        if self.op is Op.SPARSE:
            self.gate = Linear(2 * dim, 1, rng)
        elif self.op is Op.DENSE:
            self.gate = Linear(2 * dim, dim, rng)
        if self.op not in (Op.ZERO, Op.SKIP):
            self.post = Linear(dim, dim, rng)

    def forward(self, h, h_in=None, graph=None, joint=None):
        op = self.op
        if op is Op.ZERO:
            return zero_op(h)
        if op is Op.SKIP:
            return h
        if op is Op.IDENTITY:
            return identity_filter(h, self)
        if op is Op.SPARSE:
            return sparse_filter(h, h_in, self, joint=joint)
        if op is Op.DENSE:
            return dense_filter(h, h_in, self, joint=joint)
        return aggregate(h, graph, op.value, self)

    def __repr__(self):
        return f"Operation({self.op.value}, dim={self.dim})"


def _post(x, p):
    return ad.relu(p.post(x))


def filter_gate(h, h_in, p, joint=None):
    """``sigmoid(fc([h || h_in]))`` with one column (sparse) or ``d`` columns (dense)."""
    if joint is None:
        if h_in is None or h.shape != h_in.shape:
            raise DimensionError(f"filter gate needs h and h_in of equal shape, got {h.shape}"
                                 f" and {None if h_in is None else h_in.shape}")
        joint = ad.concat([h, h_in])
    return ad.sigmoid(p.gate(joint))


def sparse_filter(h, h_in, p, post=True, joint=None):
    """Scale each node's row by one learned gate in (0, 1)."""
    if p.gate.out_features != 1:
        raise DimensionError("sparse filter gate must have a single output")
    out = ad.row_scale(h, filter_gate(h, h_in, p, joint))
    return _post(out, p) if post else out


def dense_filter(h, h_in, p, post=True, joint=None):
    """Scale every entry of ``h`` by its own learned gate in (0, 1)."""
    if p.gate.out_features != h.shape[1]:
        raise DimensionError(f"dense filter gate width {p.gate.out_features} != {h.shape[1]}")
    out = ad.mul(filter_gate(h, h_in, p, joint), h)
    return _post(out, p) if post else out


def identity_filter(h, p=None):
    """Pass-through when ``p`` is None, otherwise the post transform of ``h``."""
    return h if p is None else _post(h, p)


def zero_op(h):
    return Tensor(np.zeros(h.shape))


def aggregate(h, graph, kind, p=None):
    """Neighborhood ``sum``/``mean``/``max`` followed by the post transform."""
    out = segment_reduce(h, graph, kind)
    return out if p is None else _post(out, p)


class Fusion(Module):
    """``FC-BN-ReLU`` over the concatenated leaf embeddings of a cell."""

    def __init__(self, num_leaves, dim, rng, bn_momentum=0.1, bn_eps=1e-5):
        super().__init__()
        self.mlp = Linear(num_leaves * dim, dim, rng)
        self.bn = ad.BatchNorm(dim, bn_momentum, bn_eps)

    def forward(self, leaves):
        return cell_output(leaves, self)


def cell_output(leaves, p):
    """Fuse leaf embeddings: concat, linear, batch norm, ReLU."""
    leaves = list(leaves)
    if not leaves:
        raise ValidationError("a cell needs at least one leaf to fuse")
    if p.mlp.in_features != sum(leaf.shape[1] for leaf in leaves):
        raise DimensionError(f"fusion expects {p.mlp.in_features} input columns")
    return ad.relu(p.bn(p.mlp(ad.concat(leaves))))
