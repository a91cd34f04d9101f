import numpy as np
import pytest

from gnas import autodiff as ad
from gnas.autodiff import Tensor
from gnas.errors import ConfigurationError, ValidationError
from gnas.genotype import ArchParams, CellGenotype, CellTopology, Edge, derive_genotype
from gnas.gradcheck import check_gradients
from gnas.graph import batch_graphs, permute_graph, permute_rows, readout
from gnas.network import NetworkConfig
from gnas.ops import AGGREGATION_OPS, FILTER_OPS, Op
from gnas.supernet import (
    GenotypeCell, GenotypeNetwork, MixedOp, SearchCell, SuperNetwork, mixed_op_forward, saturate,
)

from conftest import random_graph

D = 4


def relu(x):
    return np.maximum(x, 0.0)


def random_genotype(rng, N=3, M=3):
    arch = ArchParams(CellTopology(N, M))
    for e in arch.topology.edges:
        arch.set_logits(e, rng.normal(scale=3, size=4))
    return derive_genotype(arch)


def node_config(**kw):
    base = dict(in_dim=3, out_dim=2, task="node-classify", depth=2, hidden_dim=D)
    base.update(kw)
    return NetworkConfig(**base)


def test_uniform_mixture_is_average(rng):
    g = random_graph(rng, 5, 0.5, D)
    m = MixedOp(FILTER_OPS, D, rng)
    x, h_in = Tensor(rng.normal(size=(5, D))), Tensor(rng.normal(size=(5, D)))
    out = m(x, h_in, g, Tensor(np.zeros(4))).data
    manual = sum(m.ops[op.value](x, h_in, g).data for op in FILTER_OPS) / 4
    np.testing.assert_allclose(out, manual, atol=1e-12)


def test_zero_saturation(rng):
    g = random_graph(rng, 5, 0.5, D)
    m = MixedOp(FILTER_OPS, D, rng)
    out = m(Tensor(rng.normal(size=(5, D))), Tensor(rng.normal(size=(5, D))), g,
            Tensor([30.0, -30.0, -30.0, -30.0])).data
    assert np.abs(out).max() <= 1e-9


@pytest.mark.parametrize("k", range(4))
def test_one_hot_saturation_matches_single_op(rng, k):
    g = random_graph(rng, 5, 0.5, D)
    m = MixedOp(AGGREGATION_OPS, D, rng)
    x, h_in = Tensor(rng.normal(size=(5, D))), Tensor(rng.normal(size=(5, D)))
    alpha = np.full(4, -15.0)
    alpha[k] = 15.0
    out = m(x, h_in, g, Tensor(alpha)).data
    np.testing.assert_allclose(out, m.ops[AGGREGATION_OPS[k].value](x, h_in, g).data, atol=1e-9)


def test_alpha_length_checked(rng):
    m = MixedOp(FILTER_OPS, D, rng)
    x = Tensor(np.ones((2, D)))
    with pytest.raises(ValidationError):
        mixed_op_forward(x, x, None, Tensor(np.zeros(3)), m.op_set, m.ops)


def test_minimal_cell_composition(rng):
    # identity -> sum -> identity, fused by one linear + BN + ReLU
    topo = CellTopology(1, 1)
    cell = SearchCell(topo, D, rng)
    arch = ArchParams(topo)
    saturate(arch, CellGenotype(1, 1, [Edge(0, 1, Op.IDENTITY)], [Op.SUM], [Edge(2, 3, Op.IDENTITY)]))
    g = random_graph(rng, 6, 0.5, D)
    x0 = rng.normal(size=(6, D))
    out = cell(Tensor(x0), g, arch).data

    def post(p, v):
        return relu(v @ p.post.weight.data + p.post.bias.data)

    x1 = post(cell.edges["0->1"].ops["identity"], x0)
    x2 = post(cell.edges["1->2"].ops["sum"], g.adjacency @ x1)
    x3 = post(cell.edges["2->3"].ops["identity"], x2)
    z = x3 @ cell.fusion.mlp.weight.data + cell.fusion.mlp.bias.data
    expected = relu((z - z.mean(0)) / np.sqrt(z.var(0) + cell.fusion.bn.eps))
    np.testing.assert_allclose(out, expected, atol=1e-9)


def test_zero_saturated_cell_rows_identical(rng):
    topo = CellTopology(3, 3)
    cell = SearchCell(topo, D, rng).eval()
    arch = ArchParams(topo)
    for e in topo.filter_edges:
        arch.set_logits(e, [30.0, -30.0, -30.0, -30.0])
    out = cell(Tensor(rng.normal(size=(7, D))), random_graph(rng, 7, 0.4, D), arch).data
    np.testing.assert_allclose(out, np.tile(out[0], (7, 1)), atol=1e-9)


def _saturated_gap(trial, margin, eval_mode):
    rng = np.random.default_rng(trial)
    task = ("node-classify", "graph-classify", "graph-regress")[trial % 3]
    cfg = node_config(task=task, depth=int(rng.integers(1, 4)), out_dim=1 if task == "graph-regress" else 2)
    net = SuperNetwork(cfg, rng, per_cell_alpha=bool(trial % 2))
    for a in net.arch:
        saturate(a, random_genotype(rng), margin)
    discrete = GenotypeNetwork.from_supernet(net)
    batch = batch_graphs([random_graph(rng, int(rng.integers(3, 9)), 0.4, 3) for _ in range(3)])
    if eval_mode:
        net.eval()
        discrete.eval()
    return np.abs(net(batch).data - discrete(batch).data).max()


def test_saturated_supernet_equals_genotype_network():
    assert max(_saturated_gap(t, 40.0, t % 4 == 0) for t in range(50)) <= 1e-9


def test_margin_thirty_in_eval_mode():
    assert max(_saturated_gap(t, 30.0, True) for t in range(50)) <= 1e-9


def test_from_supernet_copies_weights(rng):
    net = SuperNetwork(node_config(), rng)
    gt = net.genotypes()[0]
    discrete = GenotypeNetwork.from_supernet(net)
    e = gt.level1[0]
    key = f"{e.src}->{e.dst}"
    np.testing.assert_array_equal(discrete.cells[0].ops[key].post.weight.data,
                                  net.cells[0].edges[key].ops[e.op.value].post.weight.data)
    discrete.cells[0].ops[key].post.weight.data[:] = 0
    assert np.any(net.cells[0].edges[key].ops[e.op.value].post.weight.data != 0)


def test_shared_versus_per_cell_logits(rng):
    shared = SuperNetwork(node_config(depth=3), rng)
    per_cell = SuperNetwork(node_config(depth=3), rng, per_cell_alpha=True)
    n_edges = CellTopology(3, 3).num_edges
    assert len(shared.arch_parameters()) == n_edges
    assert len(per_cell.arch_parameters()) == 3 * n_edges
    assert shared.arch_for(2) is shared.arch_for(0)
    assert len(shared.genotypes()) == 3
    ids = {id(p) for p in shared.arch_parameters()}
    assert not ids & {id(p) for p in shared.weight_parameters()}


def test_depth_one_passthrough(rng):
    cfg = node_config(depth=1)
    net = SuperNetwork(cfg, rng).eval()
    for e in net.topology.filter_edges:
        net.arch[0].set_logits(e, [60.0, -60.0, -60.0, -60.0])
    cell = net.cells[0]
    cell.fusion.mlp.bias.data[:] = -1.0  # ReLU clips the now-constant fusion input
    net.norms[0].eps = 0.0
    net.norms[0].beta.data[:] = 0.0
    g = random_graph(rng, 5, 0.5, 3, node_labels=np.zeros(5, dtype=int))
    x = g.node_features
    expected = (x @ net.embed.weight.data + net.embed.bias.data) @ net.head.weight.data + net.head.bias.data
    np.testing.assert_allclose(net(g).data, expected, atol=1e-12)


def test_depth_two_composition(rng):
    net = GenotypeNetwork(node_config(depth=2), [random_genotype(rng)], rng)
    g = random_graph(rng, 6, 0.4, 3)
    h = net.embed(Tensor(g.node_features))
    for k in range(2):
        h = ad.add(net.norms[k](net.cells[k](h, g)), h)
    np.testing.assert_allclose(net(g).data, net.head(h).data, atol=1e-10)


def test_batch_equals_single_graph_runs(rng):
    net = GenotypeNetwork(node_config(depth=2), [random_genotype(rng)], rng).eval()
    graphs = [random_graph(rng, 5, 0.5, 3), random_graph(rng, 4, 0.5, 3)]
    whole = net(batch_graphs(graphs)).data
    parts = np.concatenate([net(g).data for g in graphs])
    np.testing.assert_allclose(whole, parts, atol=1e-10)


def test_all_identity_genotype(rng):
    N = M = 1
    gt = CellGenotype(N, M, [Edge(0, 1, Op.IDENTITY)], [Op.IDENTITY], [Edge(2, 3, Op.IDENTITY)])
    cfg = node_config(depth=2, N=1, M=1)
    net = GenotypeNetwork(cfg, [gt], rng).eval()
    for cell in net.cells:
        for op in cell.ops.values():
            op.post.weight.data = np.eye(D)
            op.post.bias.data[:] = 0.0
        cell.fusion.mlp.weight.data = np.eye(D)
        cell.fusion.mlp.bias.data[:] = 0.0
        cell.fusion.bn.eps = 0.0
    for bn in net.norms:
        bn.eps = 0.0
    g = random_graph(rng, 4, 0.5, 3)
    h = g.node_features @ net.embed.weight.data + net.embed.bias.data
    for _ in range(2):
        h = h + relu(relu(h))
    np.testing.assert_allclose(net(g).data, h @ net.head.weight.data + net.head.bias.data, atol=1e-12)


def test_genotype_mismatch_errors(rng):
    with pytest.raises(ConfigurationError):
        GenotypeNetwork(node_config(depth=3), [random_genotype(rng)] * 2, rng)
    with pytest.raises(ConfigurationError):
        GenotypeNetwork(node_config(), [random_genotype(rng, 2, 2)], rng)
    with pytest.raises(ConfigurationError):
        NetworkConfig(in_dim=1, out_dim=2, task="graph-regress")


@pytest.mark.parametrize("task", ["node-classify", "graph-classify"])
def test_network_permutation_symmetry(rng, task):
    nets = [SuperNetwork(node_config(task=task), rng).eval(),
            GenotypeNetwork(node_config(task=task), [random_genotype(rng)], rng).eval()]
    for net in nets:
        for _ in range(20):
            g = random_graph(rng, 7, 0.4, 3)
            perm = rng.permutation(7)
            out = net(g).data
            moved = net(permute_graph(g, perm)).data
            expected = permute_rows(out, perm) if task == "node-classify" else out
            np.testing.assert_allclose(moved, expected, atol=1e-10)


def test_cell_equivariance(rng):
    cell = SearchCell(CellTopology(3, 3), D, rng).eval()
    arch = ArchParams(CellTopology(3, 3))
    for e in arch.topology.edges:
        arch.set_logits(e, rng.normal(size=4))
    for _ in range(20):
        g = random_graph(rng, 6, 0.5, D)
        x0 = rng.normal(size=(6, D))
        perm = rng.permutation(6)
        out = cell(Tensor(x0), g, arch).data
        moved = cell(Tensor(permute_rows(x0, perm)), permute_graph(g, perm), arch).data
        np.testing.assert_allclose(moved, permute_rows(out, perm), atol=1e-10)


def test_mixed_op_gradients():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        g = random_graph(rng, 5, 0.5, 3)
        m = MixedOp(FILTER_OPS if seed % 2 else AGGREGATION_OPS, 3, rng)
        for p in m.parameters():
            if p.ndim == 1:
                p.data = rng.uniform(0.3, 1.0, size=p.shape)
        x = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        h_in = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        alpha = Tensor(rng.normal(size=4), requires_grad=True)
        r = Tensor(rng.normal(size=(5, 3)))
        err = check_gradients(lambda: ad.sum(ad.mul(m(x, h_in, g, alpha), r)),
                              [x, h_in, alpha] + m.parameters())
        assert err <= 1e-4, (seed, err)


def test_cell_gradients():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        topo = CellTopology(2, 1)
        cell = SearchCell(topo, 3, rng)
        arch = ArchParams(topo)
        for e in topo.edges:
            arch.set_logits(e, rng.normal(size=4))
        g = random_graph(rng, 6, 0.5, 3)
        x0 = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
        r = Tensor(rng.normal(size=(6, 3)))
        err = check_gradients(lambda: ad.sum(ad.mul(cell(x0, g, arch), r)),
                              [x0] + arch.parameters(), max_coords=40, rng=rng)
        assert err <= 1e-4, (seed, err)


def test_network_gradients():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        net = SuperNetwork(node_config(task="graph-regress", out_dim=1, depth=1, hidden_dim=3, N=1, M=2), rng)
        for a in net.arch:
            for e in a.topology.edges:
                a.set_logits(e, rng.normal(size=4))
        batch = batch_graphs([random_graph(rng, 5, 0.5, 3), random_graph(rng, 4, 0.6, 3)])
        err = check_gradients(lambda: ad.sum(net(batch)), net.arch_parameters() + net.embed.parameters(),
                              max_coords=40, rng=rng)
        assert err <= 1e-4, (seed, err)


def test_genotype_cell_skips_dangling_nodes(rng):
    gt = random_genotype(rng)
    cell = GenotypeCell(gt, D, rng)
    assert set(cell._live) == gt.live_nodes()
