import itertools

import numpy as np
import pytest

from gnas.autodiff import Tensor
from gnas.canonical import GapTree, TreeCell, canonical_cell, canonicalize_tree
from gnas.errors import ValidationError
from gnas.genotype import validate_genotype
from gnas.ops import Op

from conftest import random_graph

D = 3
FILTERS = (Op.IDENTITY, Op.SPARSE, Op.DENSE)
AGGREGATORS = (Op.SUM, Op.MEAN, Op.MAX)


def recursive_trees(n):
    """Every parent sequence with ``parents[v] < v``: all rooted trees on ``n`` labeled nodes."""
    for parents in itertools.product(*[range(v) for v in range(1, n)]):
        yield (None,) + parents


def valid_labelings(parents):
    """Filter/aggregation class per edge, keeping at most one aggregation per path."""
    n = len(parents)
    for classes in itertools.product("FL", repeat=n - 1):
        classes = (None,) + classes
        aggs = [0] * n
        for v in range(1, n):
            aggs[v] = aggs[parents[v]] + (classes[v] == "L")
        if max(aggs) <= 1:
            yield classes


def all_small_trees(max_nodes, rng):
    for n in range(1, max_nodes + 1):
        for parents in recursive_trees(n):
            for classes in valid_labelings(parents):
                ops = [None] + [rng.choice(AGGREGATORS if c == "L" else FILTERS) for c in classes[1:]]
                yield GapTree(parents, tuple(ops))


def forward_gap(tree, rng, graph, N_target=None, M_target=None):
    cell = TreeCell(tree, D, rng)
    for op in cell.ops.values():
        if op.post is not None:
            op.post.bias.data = rng.normal(size=D)
    cell.fusion.mlp.bias.data = rng.normal(size=D)
    form = canonicalize_tree(tree, N_target, M_target)
    x0 = Tensor(rng.normal(size=(graph.num_nodes, D)))
    a = cell(x0, graph).data
    b = canonical_cell(cell, form)(x0, graph).data
    return form, np.abs(a - b).max()


def split_aggregation_tree():
    return GapTree.from_edges([
        (0, 1, Op.SPARSE), (1, 2, Op.SUM), (1, 3, Op.MAX), (2, 4, Op.DENSE), (3, 5, Op.IDENTITY),
    ])


def test_enumeration_counts():
    assert [sum(1 for _ in recursive_trees(n)) for n in range(1, 7)] == [1, 1, 2, 6, 24, 120]
    assert sum(1 for _ in valid_labelings((None, 0, 1))) == 3


def test_exhaustive_small_trees_preserve_function():
    rng = np.random.default_rng(0)
    graph = random_graph(rng, 7, 0.4, D)
    count, worst = 0, 0.0
    for tree in all_small_trees(6, rng):
        form, gap = forward_gap(tree, rng, graph)
        worst = max(worst, gap)
        report = validate_genotype(form.genotype)
        assert report.ok, (tree, report.violations)
        assert report.slots == [1] * len(report.slots)
        assert all(a <= 1 for a in report.aggregations)
        count += 1
    assert count > 2000
    assert worst <= 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_padding_keeps_function(seed):
    rng = np.random.default_rng(seed)
    graph = random_graph(rng, 6, 0.5, D)
    tree = split_aggregation_tree()
    base = canonicalize_tree(tree).genotype
    form, gap = forward_gap(tree, rng, graph, base.N + seed % 3, base.M + 1)
    assert gap <= 1e-12
    assert validate_genotype(form.genotype).ok


def test_node_with_two_aggregations():
    form = canonicalize_tree(split_aggregation_tree())
    assert str(form.genotype) == "[0->1:sparse, 1->2:skip | 1->3:sum, 2->4:max | 3->5:dense, 4->6:identity]"
    assert form.added == [2]
    assert form.padding == []
    report = validate_genotype(form.genotype)
    assert report.aggregations == [1, 1]


def test_three_level_tree_is_a_fixpoint():
    tree = GapTree.from_edges([(0, 1, Op.DENSE), (1, 2, Op.MEAN), (2, 3, Op.SPARSE)])
    form = canonicalize_tree(tree)
    assert str(form.genotype) == "[0->1:dense | 1->2:mean | 2->3:sparse]"
    assert form.added == [] and form.node_map == {0: 0, 1: 1, 2: 2, 3: 3}


def test_root_only_tree():
    form = canonicalize_tree(GapTree((None,), (None,)))
    assert str(form.genotype) == "[0->1:skip | 1->2:skip | 2->3:skip]"


def test_multiple_aggregation_rejected_with_path():
    tree = GapTree.from_edges([(0, 1, Op.SUM), (1, 2, Op.IDENTITY), (2, 3, Op.MAX)])
    with pytest.raises(ValidationError, match=r"0->1->2->3"):
        canonicalize_tree(tree)


def test_targets_too_small():
    with pytest.raises(ValidationError):
        canonicalize_tree(split_aggregation_tree(), N_target=1)
    with pytest.raises(ValidationError):
        canonicalize_tree(split_aggregation_tree(), M_target=1)


@pytest.mark.parametrize("parents, ops", [
    ((0,), (None,)),
    ((None, 1), (None, Op.SUM)),
    ((None, 0), (None, Op.ZERO)),
    ((None, 0), (None,)),
])
def test_malformed_trees(parents, ops):
    with pytest.raises(ValidationError):
        GapTree(parents, ops)
