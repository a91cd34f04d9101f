"""Classic message-passing layers, both as written and in filter/aggregate form.

``ReferenceLayer`` implements each model's own update rule. ``GapFormLayer``
rebuilds it from pure filters and reductions followed by one learned map
``M`` (``ReLU(Linear)``; two layers for GIN). GAT uses a single head and the
factorized score ``m1(h_i) * m2(h_j)`` with scalar sigmoid maps and no
softmax normalization.
"""

from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Linear, Module, Tensor
from .errors import ConfigurationError
from .graph import segment_reduce
from .network import Backbone
from .ops import dense_filter, identity_filter, sparse_filter

__all__ = [
    "BaselineKind", "ReferenceLayer", "GapFormLayer", "BaselineNetwork",
    "reference_layer", "gap_form_layer", "build_baseline_network", "gin_gap_from_reference",
]


class BaselineKind(str, Enum):
    GCN = "gcn"
    GIN = "gin"
    GRAPHSAGE = "graphsage"
    GAT = "gat"
    GATEDGCN = "gatedgcn"
    MLP = "mlp"

    def __str__(self):
        return self.value


def _kind(kind):
    try:
        return BaselineKind(str(kind).lower())
    except ValueError:
        raise ConfigurationError(f"unknown baseline {kind!r}; choose from"
                                 f" {[k.value for k in BaselineKind]}") from None


class _Gate(Module):
    """Gate-only filter parameters (no post transform)."""

    def __init__(self, dim, width, rng):
        super().__init__()
        self.gate = Linear(2 * dim, width, rng)


class ReferenceLayer(Module):
    def __init__(self, kind, dim, rng):
        super().__init__()
        self.kind = _kind(kind)
        d = dim
        k = self.kind
        if k is BaselineKind.GCN:
            self.W = Linear(d, d, rng, bias=False)
        elif k is BaselineKind.GIN:
            self.eps = Tensor(np.zeros(1), requires_grad=True)
            self.mlp1 = Linear(d, d, rng)
            self.mlp2 = Linear(d, d, rng)
        elif k is BaselineKind.GRAPHSAGE:
            self.U = Linear(2 * d, d, rng, bias=False)
        elif k is BaselineKind.GAT:
            self.score_dst = Linear(d, 1, rng)
            self.score_src = Linear(d, 1, rng)
            self.W = Linear(d, d, rng, bias=False)
        elif k is BaselineKind.GATEDGCN:
            self.U = Linear(d, d, rng, bias=False)
            self.V = Linear(d, d, rng, bias=False)
            self.A = Linear(d, d, rng, bias=False)
            self.B = Linear(d, d, rng, bias=False)
        else:
            self.W = Linear(d, d, rng)

    def forward(self, h, graph):
        return reference_layer(self.kind, h, graph, self)


def _gin_mlp(x, p):
    return ad.relu(p.mlp2(ad.relu(p.mlp1(x))))


def reference_layer(kind, h, g, p):
    """The model's original update equation."""
    k = _kind(kind)
    if k is BaselineKind.GCN:
        return ad.relu(p.W(segment_reduce(h, g, "mean")))
    if k is BaselineKind.GIN:
        self_term = ad.add(ad.mul(p.eps, h), h)
        return _gin_mlp(ad.add(self_term, segment_reduce(h, g, "sum")), p)
    if k is BaselineKind.GRAPHSAGE:
        return ad.relu(p.U(ad.concat([h, segment_reduce(h, g, "mean")])))
    if k is BaselineKind.GAT:
        m1 = ad.sigmoid(p.score_dst(h))
        m2 = ad.sigmoid(p.score_src(h))
        msg = segment_reduce(ad.row_scale(h, m2), g, "sum")
        return ad.relu(p.W(ad.row_scale(msg, m1)))
    if k is BaselineKind.GATEDGCN:
        src, dst = g.edge_src, g.edge_dst
        eta = ad.sigmoid(ad.add(ad.gather_rows(p.A(h), dst), ad.gather_rows(p.B(h), src)))
        msg = ad.mul(eta, ad.gather_rows(p.V(h), src))
        return ad.relu(ad.add(p.U(h), ad.scatter_add_rows(msg, dst, g.num_nodes)))
    return ad.relu(p.W(h))


class GapFormLayer(Module):
    def __init__(self, kind, dim, rng):
        super().__init__()
        self.kind = _kind(kind)
        d = dim
        k = self.kind
        width = {BaselineKind.GCN: 1, BaselineKind.GIN: 3, BaselineKind.GRAPHSAGE: 2,
                 BaselineKind.GAT: 1, BaselineKind.GATEDGCN: 2, BaselineKind.MLP: 1}[k]
        if k is BaselineKind.GIN:
            self.fs = _Gate(d, 1, rng)
            self.mlp1 = Linear(3 * d, d, rng)
            self.mlp2 = Linear(d, d, rng)
        else:
            self.mlp = Linear(width * d, d, rng)
        if k is BaselineKind.GAT:
            self.inner = _Gate(d, 1, rng)
            self.outer = _Gate(d, 1, rng)
        elif k is BaselineKind.GATEDGCN:
            self.inner = _Gate(d, d, rng)
            self.outer = _Gate(d, d, rng)

    def forward(self, h, graph):
        return gap_form_layer(self.kind, h, graph, self)


def gap_form_layer(kind, h, g, p):
    """Filter/aggregate composition followed by the single learned map ``M``.

    Filters are gate-only; their gates see ``[x || h]`` with ``h`` the layer input.
    """
    k = _kind(kind)
    if k is BaselineKind.GCN:
        x = segment_reduce(h, g, "mean")
    elif k is BaselineKind.GIN:
        x = ad.concat([identity_filter(h), sparse_filter(h, h, p.fs, post=False),
                       segment_reduce(h, g, "sum")])
        return _gin_mlp(x, p)
    elif k is BaselineKind.GRAPHSAGE:
        x = ad.concat([identity_filter(h), segment_reduce(h, g, "mean")])
    elif k is BaselineKind.GAT:
        inner = sparse_filter(h, h, p.inner, post=False)
        x = sparse_filter(segment_reduce(inner, g, "sum"), h, p.outer, post=False)
    elif k is BaselineKind.GATEDGCN:
        inner = dense_filter(h, h, p.inner, post=False)
        x = ad.concat([identity_filter(h),
                       dense_filter(segment_reduce(inner, g, "sum"), h, p.outer, post=False)])
    else:
        x = h
    return ad.relu(p.mlp(x))


def gin_gap_from_reference(ref, gate, rng=None):
    """GIN in filter form that reproduces ``ref`` exactly.

    The sparse-filter gate is frozen at the constant ``gate`` in (0, 1) (zero
    weights, bias ``logit(gate)``) and the first map is rebuilt blockwise as
    ``[0; (1 + eps) / gate * W1; W1]`` so the identity block is unused.
    """
    if not 0.0 < gate < 1.0:
        raise ValueError("gate constant must lie in (0, 1)")
    d = ref.mlp1.in_features
    out = GapFormLayer(BaselineKind.GIN, d, rng if rng is not None else np.random.default_rng(0))
    out.fs.gate.weight.data = np.zeros_like(out.fs.gate.weight.data)
    out.fs.gate.bias.data = np.array([np.log(gate / (1.0 - gate))])
    W1 = ref.mlp1.weight.data
    factor = (1.0 + float(ref.eps.data[0])) / gate
    out.mlp1.weight.data = np.vstack([np.zeros_like(W1), factor * W1, W1])
    out.mlp1.bias.data = ref.mlp1.bias.data.copy()
    out.mlp2.weight.data = ref.mlp2.weight.data.copy()
    out.mlp2.bias.data = ref.mlp2.bias.data.copy()
    return out


class BaselineNetwork(Backbone):
    """Baseline layers inside the shared embed / residual / head skeleton."""

    def __init__(self, config, kind, rng, form="reference"):
        self.kind = _kind(kind)
        if form not in ("reference", "gap"):
            raise ConfigurationError(f"unknown layer form {form!r}")
        self.form = form
        super().__init__(config, rng)

    def _build_cells(self, rng):
        layer = ReferenceLayer if self.form == "reference" else GapFormLayer
        return [layer(self.kind, self.config.hidden_dim, rng) for _ in range(self.config.depth)]

    def cell_forward(self, k, h, batch):
        return self.cells[k](h, batch)


def build_baseline_network(kind, config, rng, form="reference"):
    return BaselineNetwork(config, kind, rng, form)
