"""Softmax-relaxed search cells, discrete cells, and the networks built from them."""

import copy

from . import autodiff as ad
from .autodiff import Module
from .errors import ConfigurationError, ValidationError
from .genotype import ArchParams, CellTopology, derive_genotype, edge_key
from .network import Backbone
from .ops import AGGREGATION_OPS, FILTER_OPS, Fusion, Op, Operation

__all__ = [
    "MixedOp", "SearchCell", "GenotypeCell", "SuperNetwork", "GenotypeNetwork",
    "mixed_op_forward", "cell_forward", "network_forward", "genotype_forward",
]


def mixed_op_forward(x, h_in, graph, alpha, op_set, ops):
    """``sum_o softmax(alpha)_o * o(x)`` over ``op_set`` with per-op modules ``ops``."""
    op_set = tuple(op_set)
    if alpha.shape != (len(op_set),):
        raise ValidationError(f"{alpha.shape[0] if alpha.ndim == 1 else alpha.shape} logits"
                              f" for {len(op_set)} candidate ops")
    weights = ad.softmax_vec(alpha)
    joint = ad.concat([x, h_in]) if {Op.SPARSE, Op.DENSE} & set(op_set) else None
    outs = [ops[op.value](x, h_in, graph, joint) for op in op_set]
    return ad.weighted_sum(outs, weights)


class MixedOp(Module):
    def __init__(self, op_set, dim, rng):
        super().__init__()
        self.op_set = tuple(op_set)
        self.ops = {op.value: Operation(op, dim, rng) for op in self.op_set}

    def forward(self, x, h_in, graph, alpha):
        return mixed_op_forward(x, h_in, graph, alpha, self.op_set, self.ops)


def _sum(terms):
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


class SearchCell(Module):
    """Three-level cell where every edge is a :class:`MixedOp`."""

    def __init__(self, topology, dim, rng, bn_momentum=0.1, bn_eps=1e-5):
        super().__init__()
        self.topology = topology
        self.dim = dim
        self.edges = {}
        for e in topology.edges:
            op_set = AGGREGATION_OPS if e in topology.level2_edges else FILTER_OPS
            self.edges[edge_key(e)] = MixedOp(op_set, dim, rng)
        self.fusion = Fusion(topology.M, dim, rng, bn_momentum, bn_eps)

    def forward(self, x0, graph, arch):
        if arch.topology != self.topology:
            raise ValidationError(f"logits for {arch.topology} used with {self.topology}")
        if x0.ndim != 2 or x0.shape[1] != self.dim:
            raise ValidationError(f"cell expects width {self.dim}, got {x0.shape}")
        topo, N, M = self.topology, self.topology.N, self.topology.M
        x = {0: x0}

        def mixed(src, dst):
            key = edge_key((src, dst))
            return self.edges[key](x[src], x0, graph, arch.logits((src, dst)))

        for j in range(1, N + 1):
            x[j] = _sum([mixed(i, j) for i in topo.sources(j)])
        for i in range(1, N + 1):
            x[N + i] = mixed(i, N + i)
        for j in range(2 * N + 1, 2 * N + M + 1):
            x[j] = _sum([mixed(i, j) for i in topo.sources(j)])
        return self.fusion([x[j] for j in range(2 * N + 1, 2 * N + M + 1)])


def cell_forward(x0, graph, cell, arch):
    return cell(x0, graph, arch)


class GenotypeCell(Module):
    """Discrete cell executing only the retained edge of every node."""

    def __init__(self, genotype, dim, rng, bn_momentum=0.1, bn_eps=1e-5):
        super().__init__()
        self.genotype = genotype
        self.dim = dim
        self.ops = {edge_key((e.src, e.dst)): Operation(e.op, dim, rng) for e in genotype.edges()}
        self.fusion = Fusion(genotype.M, dim, rng, bn_momentum, bn_eps)
        self._live = sorted(genotype.live_nodes())
        self._incoming = genotype.incoming()

    @classmethod
    def from_search_cell(cls, cell, genotype):
        """Copy the parameters of each retained op out of a search cell."""
        if CellTopology(genotype.N, genotype.M) != cell.topology:
            raise ValidationError("genotype and search cell disagree on N, M")
        out = cls.__new__(cls)
        Module.__init__(out)
        out.genotype = genotype
        out.dim = cell.dim
        out.ops = {}
        for e in genotype.edges():
            key = edge_key((e.src, e.dst))
            if e.op is Op.SKIP:
                out.ops[key] = Operation(Op.SKIP, cell.dim, None)
            else:
                out.ops[key] = copy.deepcopy(cell.edges[key].ops[e.op.value])
        out.fusion = copy.deepcopy(cell.fusion)
        out._live = sorted(genotype.live_nodes())
        out._incoming = genotype.incoming()
        out.training = cell.training
        return out

    def forward(self, x0, graph):
        if x0.ndim != 2 or x0.shape[1] != self.dim:
            raise ValidationError(f"cell expects width {self.dim}, got {x0.shape}")
        g = self.genotype
        x = {0: x0}
        for v in self._live:
            if v == 0:
                continue
            e = self._incoming[v]
            x[v] = self.ops[edge_key((e.src, e.dst))](x[e.src], x0, graph)
        return self.fusion([x[j] for j in range(2 * g.N + 1, 2 * g.N + g.M + 1)])


class SuperNetwork(Backbone):
    """Stack of search cells.

    Logits are shared by all cells unless ``per_cell_alpha`` is set; weights
    are always per cell.
    """

    def __init__(self, config, rng, per_cell_alpha=False):
        self.topology = CellTopology(config.N, config.M)
        super().__init__(config, rng)
        count = config.depth if per_cell_alpha else 1
        self._arch = [ArchParams(self.topology) for _ in range(count)]
        self.per_cell_alpha = per_cell_alpha

    def _build_cells(self, rng):
        c = self.config
        return [SearchCell(self.topology, c.hidden_dim, rng, c.bn_momentum, c.bn_eps) for _ in range(c.depth)]

    @property
    def arch(self):
        return list(self._arch)

    def arch_for(self, k):
        return self._arch[k if self.per_cell_alpha else 0]

    def arch_parameters(self):
        return [p for a in self._arch for p in a.parameters()]

    def weight_parameters(self):
        return self.parameters()

    def cell_forward(self, k, h, batch):
        return self.cells[k](h, batch, self.arch_for(k))

    def genotypes(self):
        """One derived genotype per cell."""
        derived = [derive_genotype(a) for a in self._arch]
        return derived if self.per_cell_alpha else derived * self.config.depth


def network_forward(batch, network):
    return network(batch)


class GenotypeNetwork(Backbone):
    """Discrete network: one :class:`GenotypeCell` per layer."""

    def __init__(self, config, genotypes, rng):
        genotypes = list(genotypes)
        if len(genotypes) == 1 and config.depth > 1:
            genotypes = genotypes * config.depth
        if len(genotypes) != config.depth:
            raise ConfigurationError(f"{len(genotypes)} genotypes for depth {config.depth}")
        for g in genotypes:
            if (g.N, g.M) != (config.N, config.M):
                raise ConfigurationError(f"genotype N={g.N}, M={g.M} does not match config")
        self.genotypes = genotypes
        super().__init__(config, rng)

    def _build_cells(self, rng):
        c = self.config
        return [GenotypeCell(g, c.hidden_dim, rng, c.bn_momentum, c.bn_eps) for g in self.genotypes]

    def cell_forward(self, k, h, batch):
        return self.cells[k](h, batch)

    @classmethod
    def from_supernet(cls, supernet, genotypes=None):
        """Discrete network that inherits the supernet's weights for retained ops."""
        genotypes = list(genotypes) if genotypes is not None else supernet.genotypes()
        out = cls.__new__(cls)
        Module.__init__(out)
        out.config = supernet.config
        out.genotypes = genotypes
        out.embed = copy.deepcopy(supernet.embed)
        out.cells = [GenotypeCell.from_search_cell(c, g) for c, g in zip(supernet.cells, genotypes)]
        out.norms = copy.deepcopy(supernet.norms)
        out.head = copy.deepcopy(supernet.head)
        out.train(supernet.training)
        return out


def genotype_forward(batch, network):
    return network(batch)


def saturate(arch, genotype, margin=40.0):
    """Set logits so the supernet behaves like ``genotype``.

    Retained edges put ``+margin/2`` on their op and ``-margin/2`` elsewhere;
    every other filter edge saturates on the zero op the same way.
    """
    half = margin / 2.0
    topo = arch.topology
    kept = {(e.src, e.dst): e.op for e in genotype.edges()}
    for edge in topo.filter_edges:
        op = kept.get(edge, Op.ZERO)
        arch.set_logits(edge, [half if o is op else -half for o in FILTER_OPS])
    for edge in topo.level2_edges:
        op = kept[edge]
        arch.set_logits(edge, [half if o is op else -half for o in AGGREGATION_OPS])
