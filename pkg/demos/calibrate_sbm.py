"""
Fixed-genotype grid on the SBM community task
=============================================

Trains every uniform genotype (one filter op everywhere, one aggregation op
in every slot) plus the MLP baseline on the 200-graph, 40-node SBM set. The
spread between the best genotypes and the MLP tells how large a margin a
search can be expected to reach at this scale.

Usage: python demos/calibrate_sbm.py [--seeds 4] [--epochs 30]
"""

import argparse
import itertools
import time

import numpy as np

from gnas.baselines import BaselineNetwork
from gnas.datasets import gen_sbm, split
from gnas.genotype import CellGenotype, Edge
from gnas.ops import Op
from gnas.search import SearchConfig, network_config_for
from gnas.supernet import GenotypeNetwork
from gnas.train import TrainConfig, evaluate, train_model

parser = argparse.ArgumentParser()
parser.add_argument("--seeds", type=int, default=4)
parser.add_argument("--epochs", type=int, default=30)
args = parser.parse_args()


def uniform_genotype(f_op, l_op, N=3, M=3):
    # slot i reads filter node i and feeds level-3 node 2N+i
    level1 = [Edge(i - 1, i, f_op) for i in range(1, N + 1)]
    level3 = [Edge(N + j, 2 * N + j, f_op) for j in range(1, M + 1)]
    return CellGenotype(N, M, level1, [l_op] * N, level3)


ds = gen_sbm(200, 40, 2, 0.5, 0.05, seed=0)
config = SearchConfig(depth=4, hidden_dim=16)
train_config = dict(epochs=args.epochs, batch_size=32)

# %%
# One row per architecture, test accuracy averaged over the split seeds.

grid = {f"{f.value}/{l.value}": uniform_genotype(f, l)
        for f, l in itertools.product((Op.IDENTITY, Op.SPARSE, Op.DENSE), (Op.IDENTITY, Op.SUM, Op.MEAN, Op.MAX))}
grid["mlp"] = None

start = time.perf_counter()
print(f"{'architecture':<20} {'mean acc':>8}  per seed")
for name, genotype in grid.items():
    scores = []
    for seed in range(args.seeds):
        train, val, test = split(ds, (0.5, 0.25, 0.25), seed=seed)
        nc = network_config_for(config, train)
        rng = np.random.default_rng(seed)
        net = BaselineNetwork(nc, "mlp", rng) if genotype is None else GenotypeNetwork(nc, [genotype], rng)
        train_model(net, train, val, TrainConfig(seed=seed, **train_config))
        scores.append(evaluate(net, test)[1])
    print(f"{name:<20} {np.mean(scores):8.3f}  {np.round(scores, 3).tolist()}", flush=True)
print(f"total {time.perf_counter() - start:.0f}s")
