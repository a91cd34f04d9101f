"""
Depth discovery on k-hop tasks
==============================

Runs the outer depth search on the "any node within k hops carries a 1"
task for k = 1 and k = 3 and prints the depth trajectory of each seed.
Larger k needs a wider receptive field, so the search should settle on
more aggregation cells.

Usage: python demos/depth_discovery.py [--seeds 4]
"""

import argparse
import time

from gnas.datasets import gen_khop_task, split
from gnas.search import SearchConfig, depth_search

parser = argparse.ArgumentParser()
parser.add_argument("--seeds", type=int, default=4)
parser.add_argument("--graphs", type=int, default=60)
parser.add_argument("--nodes", type=int, default=20)
args = parser.parse_args()

for k in (1, 3):
    for seed in range(args.seeds):
        start = time.perf_counter()
        ds = gen_khop_task(k, args.graphs, args.nodes, seed=seed, rule="any")
        train, val, _ = split(ds, (0.5, 0.25, 0.25), seed=seed)
        config = SearchConfig(epochs=40, hidden_dim=8, batch_size=8, lr_alpha=1e-2, seed=seed)
        trace = depth_search(train, val, config, per_cell_alpha=True)
        status = "converged" if trace.converged else "hit the round cap"
        print(f"k={k} seed={seed} diameter {trace.avg_diameter:.2f} depths {trace.depths()}"
              f" -> {trace.final_depth} ({status}, {time.perf_counter() - start:.0f}s)", flush=True)
