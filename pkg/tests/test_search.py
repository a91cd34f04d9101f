import numpy as np
import pytest

from gnas import search as search_mod
from gnas.datasets import Dataset, gen_sbm, split
from gnas.errors import ConfigurationError
from gnas.genotype import ArchParams, CellGenotype, CellTopology, Edge, derive_genotype
from gnas.graph import build_graph
from gnas.ops import Op
from gnas.search import (
    CSV_COLUMNS, HISTOGRAM_KEYS, SearchConfig, SearchRun, bilevel_search, depth_search,
    identity_fraction, op_distribution, run_search, single_level_search,
)

from conftest import random_graph

N_EDGES = CellTopology(3, 3).num_edges


@pytest.fixture(scope="module")
def tiny():
    ds = gen_sbm(12, 10, seed=3)
    return split(ds, (0.5, 0.25, 0.25), seed=0)


def tiny_config(**kw):
    base = dict(depth=2, hidden_dim=4, epochs=2, batch_size=3)
    base.update(kw)
    return SearchConfig(**base)


def uniform_genotype(f_op=Op.IDENTITY, l_op=Op.IDENTITY):
    return CellGenotype(3, 3, [Edge(0, j, f_op) for j in (1, 2, 3)], [l_op] * 3,
                        [Edge(4, j, f_op) for j in (7, 8, 9)])


def test_histogram_of_all_identity():
    hist = op_distribution(uniform_genotype())
    assert hist["f_identity"] == 6 and hist["l_identity"] == 3
    assert sum(hist.values()) == 9
    assert identity_fraction(uniform_genotype()) == 1.0
    assert identity_fraction(uniform_genotype(l_op=Op.MAX)) == 0.0


def test_histogram_of_uniform_logits():
    hist = op_distribution(ArchParams(CellTopology(3, 3)))
    assert hist["f_zero"] == N_EDGES - 3
    assert hist["l_identity"] == 3
    assert sum(hist.values()) == N_EDGES


def test_columns():
    assert CSV_COLUMNS[:6] == ("epoch", "train_loss", "val_loss", "lr_w", "lr_alpha", "identity_fraction")
    assert set(HISTOGRAM_KEYS) <= set(CSV_COLUMNS)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        SearchConfig(objective="trilevel")
    with pytest.raises(ConfigurationError):
        SearchConfig(epochs=-1)
    assert SearchConfig().to_dict()["alpha_betas"] == [0.5, 0.999]


@pytest.mark.parametrize("search", [bilevel_search, single_level_search])
def test_zero_epochs_leave_logits(tiny, search):
    train, val, _ = tiny
    run = search(tiny_config(epochs=0), train, val)
    assert run.records == []
    assert all(np.all(p.data == 0) for p in run.network.arch_parameters())
    assert run.genotypes == [derive_genotype(ArchParams(CellTopology(3, 3)))] * 2


@pytest.mark.parametrize("objective", ["bilevel", "single_level"])
def test_records_and_histograms(tiny, objective):
    train, val, _ = tiny
    run = run_search(tiny_config(objective=objective, epochs=3), train, val)
    assert [r.epoch for r in run.records] == [1, 2, 3]
    for r in run.records:
        assert sum(r.histogram.values()) == N_EDGES
        assert len(r.row()) == len(CSV_COLUMNS)
        assert np.isfinite(r.train_loss) and np.isfinite(r.val_loss)
    assert run.records[0].lr_w == pytest.approx(0.025)
    assert run.records[1].lr_w < run.records[0].lr_w


def test_logits_move_and_weights_step(tiny):
    train, val, _ = tiny
    run = bilevel_search(tiny_config(lr_alpha=1e-2), train, val)
    assert any(np.any(p.data != 0) for p in run.network.arch_parameters())


def test_bilevel_needs_validation(tiny):
    train, _, _ = tiny
    with pytest.raises(ConfigurationError):
        bilevel_search(tiny_config(), train, None)
    with pytest.raises(ConfigurationError):
        single_level_search(tiny_config(), Dataset([], "node-classify"), None)


def test_search_is_deterministic(tiny):
    train, val, _ = tiny
    a = bilevel_search(tiny_config(), train, val)
    b = bilevel_search(tiny_config(), train, val)
    assert [r.row() for r in a.records] == [r.row() for r in b.records]
    assert [r.alpha for r in a.records] == [r.alpha for r in b.records]
    assert a.genotypes == b.genotypes


def _fake_search(counts):
    """Replacement search whose derived cells keep aggregation in the first ``counts[i]`` cells."""
    calls = []

    def fake(config, train, val, depth=None, callback=None):
        c = counts[len(calls)]
        calls.append(depth)
        cells = [uniform_genotype(l_op=Op.SUM if k < c else Op.IDENTITY) for k in range(depth)]
        run = SearchRun(config)
        run.genotypes = cells
        return run

    return fake, calls


def _diameter_dataset(diameter):
    path = build_graph(diameter + 1, [(i, i + 1) for i in range(diameter)], np.zeros((diameter + 1, 1)),
                       node_labels=np.zeros(diameter + 1, dtype=int))
    return Dataset([path], "node-classify", 2)


def test_depth_trace_four_three_three(monkeypatch):
    fake, calls = _fake_search([3, 3])
    monkeypatch.setattr(search_mod, "run_search", fake)
    trace = depth_search(_diameter_dataset(8), None, SearchConfig())
    assert trace.initial_depth == 4
    assert calls == [4, 3]
    assert trace.depths() == [4, 3, 3]
    assert trace.converged and trace.final_depth == 3


def test_depth_trace_fixpoint_first_round(monkeypatch):
    fake, calls = _fake_search([3])
    monkeypatch.setattr(search_mod, "run_search", fake)
    trace = depth_search(_diameter_dataset(5), None, SearchConfig())
    assert calls == [3] and trace.converged and trace.final_depth == 3


def test_depth_trace_cap_and_clamps(monkeypatch):
    # the count can never exceed the searched depth, so only a slow descent hits the cap
    fake, calls = _fake_search([5, 4, 3, 2, 1])
    monkeypatch.setattr(search_mod, "run_search", fake)
    trace = depth_search(_diameter_dataset(20), None, SearchConfig(max_depth=6, max_outer_iters=4))
    assert trace.initial_depth == 6
    assert calls == [6, 5, 4, 3]
    assert len(trace.iterations) == 4 and not trace.converged

    fake, calls = _fake_search([0, 0])
    monkeypatch.setattr(search_mod, "run_search", fake)
    trace = depth_search(_diameter_dataset(1), None, SearchConfig())
    assert trace.depths() == [1, 1] and trace.converged


def test_reported_depth_is_aggregation_count(tiny):
    train, val, _ = tiny
    trace = depth_search(train, val, tiny_config(epochs=1, max_outer_iters=2))
    assert trace.final_depth == max(1, search_mod.aggregation_cells(trace.final_genotypes)) or not trace.converged
    assert 1 <= len(trace.iterations) <= 2


def neighbor_sum_task(seed, graphs=24, nodes=10):
    rng = np.random.default_rng(seed)
    w = np.array([1.0, -1.0])
    out = []
    for _ in range(graphs):
        g = random_graph(rng, nodes, 0.3, 2)
        labels = (g.adjacency @ g.node_features @ w > 0).astype(int)
        out.append(build_graph(nodes, g.edge_list(), g.node_features, undirected=False, node_labels=labels))
    return Dataset(out, "node-classify", 2)


@pytest.mark.slow
def test_neighbor_sum_task_finds_sum():
    found = 0
    for seed in range(4):
        train, val, _ = split(neighbor_sum_task(seed), (0.5, 0.25, 0.25), seed=seed)
        run = bilevel_search(SearchConfig(depth=1, hidden_dim=8, epochs=30, batch_size=4, seed=seed), train, val)
        found += any(op is Op.SUM for op in run.genotype.level2)
    assert found >= 3


@pytest.mark.slow
def test_sbm_train_loss_falls_over_windows():
    train, val, _ = split(gen_sbm(200, 40, seed=0), (0.5, 0.25, 0.25), seed=0)
    run = bilevel_search(SearchConfig(epochs=50, batch_size=64), train, val)
    windows = np.array([r.train_loss for r in run.records]).reshape(10, 5).mean(axis=1)
    assert np.all(np.diff(windows) < 0)
