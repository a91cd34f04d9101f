import json

import numpy as np
import pytest

from gnas.baselines import BaselineNetwork
from gnas.datasets import gen_sbm, gen_substructure_regression
from gnas.errors import ConfigurationError, ParseError
from gnas.genotype import ArchParams, CellTopology, derive_genotype
from gnas.search import SearchConfig, network_config_for
from gnas.supernet import GenotypeNetwork
from gnas.train import (
    TrainConfig, config_hash, evaluate, load_checkpoint, predict, save_checkpoint, train_model,
)


@pytest.fixture(scope="module")
def sbm():
    return gen_sbm(4, 10, seed=0)


def gin(ds, seed=0, depth=2, **kw):
    return BaselineNetwork(network_config_for(SearchConfig(depth=depth, hidden_dim=16, **kw), ds), "gin",
                           np.random.default_rng(seed))


def test_memorizes_tiny_dataset(sbm):
    net = gin(sbm)
    result = train_model(net, sbm, None, TrainConfig(epochs=150, lr=1e-2, batch_size=4))
    assert len(result.records) == 150
    assert evaluate(net, sbm)[1] == 1.0


def test_training_is_deterministic(sbm):
    runs = []
    for _ in range(2):
        net = gin(sbm)
        result = train_model(net, sbm, sbm, TrainConfig(epochs=5, batch_size=2))
        runs.append(([r.row() for r in result.records], predict(net, sbm)))
    assert runs[0][0] == runs[1][0]
    assert np.array_equal(runs[0][1], runs[1][1])


def test_plateau_halves_lr_column(sbm):
    # a vanishing lr and frozen running statistics keep the validation loss constant
    net = gin(sbm, bn_momentum=0.0)
    result = train_model(net, sbm, sbm, TrainConfig(epochs=9, lr=1e-30, patience=3, min_lr=0.0))
    assert [r.lr for r in result.records] == [1e-30] * 4 + [5e-31] * 3 + [2.5e-31] * 2


def test_empty_training_split(sbm):
    with pytest.raises(ConfigurationError):
        train_model(gin(sbm), sbm.subset([]), None)


def test_regression_metric_is_mae():
    ds = gen_substructure_regression(6, 8, seed=0)
    net = BaselineNetwork(network_config_for(SearchConfig(depth=1, hidden_dim=4), ds), "mlp",
                          np.random.default_rng(0))
    loss, mae = evaluate(net, ds)
    pred = predict(net, ds).ravel()
    assert mae == pytest.approx(np.mean(np.abs(pred - [g.graph_label for g in ds])))
    assert loss == pytest.approx(mae)


@pytest.mark.parametrize("kind", ["genotype", "baseline"])
def test_checkpoint_roundtrip(tmp_path, sbm, kind):
    rng = np.random.default_rng(1)
    if kind == "genotype":
        arch = ArchParams(CellTopology(3, 3))
        for e in arch.topology.edges:
            arch.set_logits(e, rng.normal(size=4))
        net = GenotypeNetwork(network_config_for(SearchConfig(depth=2, hidden_dim=4), sbm),
                              [derive_genotype(arch)], rng)
    else:
        net = gin(sbm)
    train_model(net, sbm, None, TrainConfig(epochs=2, batch_size=2))
    save_checkpoint(net, tmp_path / "ck.json", meta={"seed": 3})
    back, meta = load_checkpoint(tmp_path / "ck.json")
    assert meta == {"seed": 3}
    assert not back.training
    np.testing.assert_array_equal(predict(back, sbm), predict(net, sbm))
    save_checkpoint(back, tmp_path / "again.json", meta={"seed": 3})
    assert (tmp_path / "ck.json").read_bytes() == (tmp_path / "again.json").read_bytes()


def test_bad_checkpoint(tmp_path):
    (tmp_path / "ck.json").write_text(json.dumps({"kind": "baseline"}))
    with pytest.raises(ParseError):
        load_checkpoint(tmp_path / "ck.json")


def test_config_hash_ignores_key_order():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
    assert len(config_hash({})) == 12
