import json

import numpy as np
import pydot
import pytest

from gnas.errors import ParseError, ValidationError
from gnas.genotype import (
    ArchParams, CellGenotype, CellTopology, Edge, derive_genotype, genotypes_from_json,
    genotypes_to_dot, genotypes_to_json, validate_genotype,
)
from gnas.ops import Op


def random_arch(rng, N=3, M=3, scale=2.0):
    arch = ArchParams(CellTopology(N, M))
    for e in arch.topology.edges:
        arch.set_logits(e, rng.normal(scale=scale, size=4))
    return arch


def all_identity(N=3, M=3):
    return CellGenotype(N, M, [Edge(j - 1, j, Op.IDENTITY) for j in range(1, N + 1)],
                        [Op.SUM] * N, [Edge(N + 1, 2 * N + j, Op.IDENTITY) for j in range(1, M + 1)])


def test_topology_counts():
    topo = CellTopology(3, 3)
    assert len(topo.level1_edges) == 6
    assert topo.level2_edges == [(1, 4), (2, 5), (3, 6)]
    assert len(topo.level3_edges) == 3 + 4 + 5
    assert topo.sources(9) == [4, 5, 6, 7, 8]
    assert [topo.level(v) for v in range(10)] == [0, 1, 1, 1, 2, 2, 2, 3, 3, 3]


def test_logits_start_at_zero():
    arch = ArchParams(CellTopology(2, 2))
    assert all(np.all(v.data == 0) for v in arch.parameters())
    with pytest.raises(ValidationError):
        arch.set_logits((0, 1), [1.0, 2.0])


@pytest.mark.parametrize("logits, op", [
    ([0.1, 0.9, 0.3, 0.2], Op.IDENTITY),
    ([0.9, 0.2, 0.1, 0.05], Op.IDENTITY),
    ([5.0, 0.0, 0.0, 1.0], Op.DENSE),
])
def test_strongest_nonzero_op(logits, op):
    arch = ArchParams(CellTopology(1, 1))
    arch.set_logits((0, 1), logits)
    assert derive_genotype(arch).level1[0].op is op


def test_strongest_edge_kept():
    arch = ArchParams(CellTopology(2, 1))
    arch.set_logits((0, 2), np.log([0.1, 0.4, 0.3, 0.2]))
    arch.set_logits((1, 2), np.log([0.1, 0.1, 0.7, 0.1]))
    kept = derive_genotype(arch).level1[1]
    assert (kept.src, kept.op) == (1, Op.SPARSE)


def test_ties_go_to_lowest_indices():
    g = derive_genotype(ArchParams(CellTopology(3, 3)))
    assert all(e.op is Op.IDENTITY for e in g.level1 + g.level3)
    assert [e.src for e in g.level1] == [0, 0, 0]
    assert [e.src for e in g.level3] == [4, 4, 4]
    assert g.level2 == [Op.IDENTITY] * 3


@pytest.mark.parametrize("seed", range(5))
def test_shift_invariance(seed):
    rng = np.random.default_rng(seed)
    arch = random_arch(rng)
    before = derive_genotype(arch)
    for e in arch.topology.edges:
        arch.set_logits(e, arch.logits(e).data + rng.normal(scale=10))
    assert derive_genotype(arch) == before


def test_thousand_random_draws_validate():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        N, M = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        g = derive_genotype(random_arch(rng, N, M, scale=float(rng.uniform(0.1, 5))))
        report = validate_genotype(g)
        assert report.ok, report.violations
        assert len(g.level2) == N
        assert sorted(e.dst for e in g.level1) == list(range(1, N + 1))
        assert sorted(e.dst for e in g.level3) == list(range(2 * N + 1, 2 * N + M + 1))
        assert all(a <= 1 for a in report.aggregations)


def test_aggregation_on_first_level_reported():
    g = all_identity()
    g.level1[0] = Edge(0, 1, Op.SUM)
    assert not validate_genotype(g).ok


def test_zero_op_and_missing_edge_reported():
    g = all_identity()
    g.level3[0] = Edge(4, 7, Op.ZERO)
    report = validate_genotype(g)
    assert report.has_zero and not report.ok
    g = all_identity()
    g.level3.pop()
    assert any("0 incoming" in v for v in validate_genotype(g).violations)


def test_dangling_nodes():
    report = validate_genotype(all_identity())
    assert report.ok
    assert report.dangling == [2, 3, 5, 6]
    assert report.paths[0] == [0, 1, 4, 7]


def test_live_aggregation():
    g = all_identity()
    assert g.has_aggregation()
    g.level2 = [Op.IDENTITY, Op.SUM, Op.SUM]
    assert not g.has_aggregation(live_only=True)
    assert g.has_aggregation(live_only=False)


def test_json_roundtrip(rng):
    cells = [derive_genotype(random_arch(rng)) for _ in range(3)]
    text = genotypes_to_json(cells, meta={"seed": 1})
    assert genotypes_from_json(text) == cells
    doc = json.loads(text)
    assert set(doc["cells"][0]) == {"N", "M", "level1", "level2", "level3"}
    assert doc["cells"][0]["level1"][0].keys() == {"to", "from", "op"}


def test_single_cell_json_repeats():
    one = json.dumps(all_identity().to_dict())
    assert genotypes_from_json(one, depth=4) == [all_identity()] * 4
    with pytest.raises(ValidationError):
        genotypes_from_json(genotypes_to_json([all_identity()]), depth=2)


@pytest.mark.parametrize("text", ["{", "[]", '{"N": 1}', '{"cells": [{"N": 1, "M": 1, "level1": [], '
                                  '"level2": [{"op": "bogus"}], "level3": []}]}'])
def test_bad_json(text):
    with pytest.raises(ParseError):
        genotypes_from_json(text)


def test_dot_parses(rng):
    cells = [derive_genotype(random_arch(rng)) for _ in range(2)]
    (graph,) = pydot.graph_from_dot_data(genotypes_to_dot(cells))
    subgraphs = graph.get_subgraphs()
    assert len(subgraphs) == 2
    edges = subgraphs[0].get_edges()
    assert len(edges) == 3 + 3 + 3
    colors = sorted(e.get("color") for e in edges)
    assert colors.count("red") == 3


def test_dot_labels_skip_as_identity():
    g = all_identity()
    g.level1[0] = Edge(0, 1, Op.SKIP)
    text = genotypes_to_dot([g])
    assert '"Input_0" -> "0_1" [label="Identity"' in text
