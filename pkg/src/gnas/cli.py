"""Command line interface: ``gnas gen|search|train|eval|export``.

Exit codes: 0 on success, 2 for usage or configuration errors, 1 for
failures while running.
"""

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .baselines import BaselineKind, BaselineNetwork
from .datasets import (gen_khop_task, gen_sbm, gen_substructure_regression, load_dataset,
                       save_dataset, split)
from .errors import ConfigurationError, GnasError
from .genotype import genotypes_from_json, genotypes_to_dot, genotypes_to_json, validate_genotype
from .network import NetworkConfig
from .search import CSV_COLUMNS, SearchConfig, depth_search, network_config_for, run_search
from .supernet import GenotypeNetwork
from .train import (TRAIN_COLUMNS, TrainConfig, config_hash, evaluate, load_checkpoint,
                    save_checkpoint, train_model)

_NETWORK_KEYS = ("depth", "hidden_dim", "N", "M", "readout", "bn_momentum", "bn_eps")
_SPLIT_KEYS = ("fractions", "split_seed")


class UsageError(GnasError):
    pass


# ---------------------------------------------------------------------------
# config handling


def _coerce(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def read_config(path):
    """Flat ``key=value`` lines or a JSON object."""
    text = Path(path).read_text()
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            doc = json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc.msg})") from None
        return dict(doc)
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = _coerce(value)
    return out


def merge_config(allowed, file_values, flag_values):
    unknown = sorted(set(file_values) - set(allowed))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    merged = dict(file_values)
    merged.update({k: v for k, v in flag_values.items() if v is not None})
    return merged


def _pick(cls, values):
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in values.items() if k in names})


def _split(ds, values):
    fractions = values.get("fractions", (0.5, 0.25, 0.25))
    if isinstance(fractions, str):
        fractions = [float(s) for s in fractions.split(",")]
    return split(ds, fractions, int(values.get("split_seed", 0)))


def _seeds(args, values):
    if getattr(args, "seeds", None):
        try:
            return [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise UsageError(f"bad --seeds value {args.seeds!r}") from None
    return [int(values.get("seed", 0))]


def _workers(requested):
    cap = os.environ.get("GNAS_THREADS")
    n = requested or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise UsageError(f"GNAS_THREADS must be an integer, got {cap!r}") from None
    return n


def _map(func, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [func(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, *zip(*jobs)))


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, columns, rows, header):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("# " + ", ".join(f"{k}={v}" for k, v in header.items()) + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _seed_dir(out_dir, seed, many):
    path = Path(out_dir) / f"seed_{seed}" if many else Path(out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args):
    if args.generator == "sbm":
        ds = gen_sbm(args.graphs, args.nodes, args.communities, args.p_intra, args.p_inter, args.seed)
    elif args.generator == "khop":
        ds = gen_khop_task(args.k, args.graphs, args.nodes, args.seed, rule=args.rule)
    else:
        ds = gen_substructure_regression(args.graphs, args.nodes, args.seed)
    save_dataset(ds, args.output)
    print(f"wrote {len(ds)} graphs to {args.output}")
    return 0


_SEARCH_KEYS = tuple(SearchConfig.field_names()) + _SPLIT_KEYS


def _search_one(values, data_path, seed, out_dir, auto_depth, many):
    ds = load_dataset(data_path)
    train, val, _ = _split(ds, values)
    config = _pick(SearchConfig, {**values, "seed": seed})
    header = {"config_hash": config_hash({**config.to_dict(), "data": Path(data_path).name}), "seed": seed}
    out = _seed_dir(out_dir, seed, many)
    lines = []
    if auto_depth:
        trace = depth_search(train, val, config)
        for i, (d_i, d_o, _) in enumerate(trace.iterations, start=1):
            lines.append(f"outer {i}: searched depth {d_i}, aggregation cells {d_o}")
        status = "converged" if trace.converged else "not converged"
        lines.append(f"final depth: {trace.final_depth} ({status}, start {trace.initial_depth},"
                     f" avg diameter {trace.avg_diameter:.3f})")
        genotypes = trace.final_genotypes
        run = trace.runs[-1]
        write_csv(out / "depth_trace.csv", ("iteration", "searched_depth", "aggregation_cells"),
                  [(i, d_i, d_o) for i, (d_i, d_o, _) in enumerate(trace.iterations, start=1)], header)
        header = {**header, "final_depth": trace.final_depth, "converged": trace.converged}
    else:
        run = run_search(config, train, val)
        genotypes = run.genotypes
    for g in genotypes:
        report = validate_genotype(g)
        if not report.ok:
            raise GnasError(f"search produced an invalid genotype: {report.violations}")
    (out / "genotype.json").write_text(genotypes_to_json(genotypes, meta=header))
    (out / "arch.dot").write_text(genotypes_to_dot(genotypes))
    write_csv(out / "metrics.csv", CSV_COLUMNS, [r.row() for r in run.records], header)
    lines.append(f"seed {seed}: {genotypes[0]} -> {out / 'genotype.json'}")
    return lines


def cmd_search(args):
    flags = {"depth": args.depth, "epochs": args.epochs, "objective": args.objective,
             "hidden_dim": args.hidden_dim, "batch_size": args.batch_size,
             "max_outer_iters": args.max_outer, "max_depth": args.max_depth, "seed": args.seed}
    values = merge_config(_SEARCH_KEYS, read_config(args.config) if args.config else {}, flags)
    _pick(SearchConfig, values)  # validate before any work
    seeds = _seeds(args, values)
    jobs = [(values, args.data, s, args.out_dir, args.auto_depth, len(seeds) > 1) for s in seeds]
    for lines in _map(_search_one, jobs, _workers(args.workers)):
        print("\n".join(lines))
    return 0


_TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig)) + _NETWORK_KEYS + _SPLIT_KEYS


def _network_config(values, ds, depth):
    base = SearchConfig(depth=depth, **{k: values[k] for k in _NETWORK_KEYS if k in values and k != "depth"})
    return network_config_for(base, ds)


def _train_one(values, data_path, seed, out_dir, genotype_path, baseline, many):
    ds = load_dataset(data_path)
    train, val, test = _split(ds, values)
    config = _pick(TrainConfig, {**values, "seed": seed})
    rng = np.random.default_rng(seed)
    if genotype_path:
        text = Path(genotype_path).read_text()
        depth = values.get("depth")
        doc = json.loads(text)
        genotypes = genotypes_from_json(text, depth=None if "cells" in doc else depth)
        net = GenotypeNetwork(_network_config(values, ds, len(genotypes)), genotypes, rng)
    else:
        net = BaselineNetwork(_network_config(values, ds, int(values.get("depth", 4))), baseline, rng)
    header = {"config_hash": config_hash({**values, "seed": seed, "data": Path(data_path).name,
                                          "arch": genotype_path and Path(genotype_path).name,
                                          "baseline": baseline}), "seed": seed}
    result = train_model(net, train, val, config)
    out = _seed_dir(out_dir, seed, many)
    write_csv(out / "metrics.csv", TRAIN_COLUMNS, [r.row() for r in result.records], header)
    save_checkpoint(net, out / "checkpoint.json", meta={**header, "task": ds.task})
    _, metric = evaluate(net, test)
    name = "MAE" if ds.task == "graph-regress" else "Accuracy"
    return f"seed {seed}: test {name}: {metric!r} -> {out / 'checkpoint.json'}"


def cmd_train(args):
    if not args.genotype and not args.baseline:
        raise UsageError("train needs --genotype or --baseline")
    flags = {"epochs": args.epochs, "batch_size": args.batch_size, "lr": args.lr,
             "patience": args.patience, "depth": args.depth, "hidden_dim": args.hidden_dim,
             "seed": args.seed}
    values = merge_config(_TRAIN_KEYS, read_config(args.config) if args.config else {}, flags)
    _pick(TrainConfig, values)
    if args.genotype and not Path(args.genotype).exists():
        raise GnasError(f"genotype file {args.genotype} not found")
    seeds = _seeds(args, values)
    jobs = [(values, args.data, s, args.out_dir, args.genotype, args.baseline, len(seeds) > 1)
            for s in seeds]
    for line in _map(_train_one, jobs, _workers(args.workers)):
        print(line)
    return 0


def cmd_eval(args):
    ds = load_dataset(args.data)
    if args.split != "all":
        values = {"split_seed": args.split_seed}
        if args.fractions:
            values["fractions"] = args.fractions
        parts = dict(zip(("train", "val", "test"), _split(ds, values)))
        ds = parts[args.split]
    name = "MAE" if ds.task == "graph-regress" else "Accuracy"
    scores = []
    for path in args.checkpoint:
        net, meta = load_checkpoint(path)
        if net.config.task != ds.task:
            raise ConfigurationError(f"{path} was trained for {net.config.task}, data is {ds.task}")
        _, metric = evaluate(net, ds)
        scores.append(metric)
        seed = meta.get("seed", "?")
        print(f"{path} (seed {seed}) {name}: {metric!r}")
    if len(scores) > 1:
        print(f"{name}: {float(np.mean(scores))!r} ± {float(np.std(scores))!r} over {len(scores)} runs")
    else:
        print(f"{name}: {scores[0]!r}")
    return 0


def cmd_export(args):
    text = Path(args.genotype).read_text()
    genotypes = genotypes_from_json(text, depth=args.depth)
    for g in genotypes:
        report = validate_genotype(g)
        if not report.ok:
            raise ConfigurationError(f"invalid genotype: {'; '.join(report.violations)}")
    out = genotypes_to_dot(genotypes) if args.format == "dot" else genotypes_to_json(genotypes)
    if args.output:
        Path(args.output).write_text(out)
    else:
        sys.stdout.write(out)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="gnas", description="Differentiable graph architecture search.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("generator", choices=["sbm", "khop", "substructure"])
    g.add_argument("--graphs", type=int, required=True)
    g.add_argument("--nodes", type=int, required=True)
    g.add_argument("--communities", type=int, default=2)
    g.add_argument("--p-intra", type=float, default=0.5)
    g.add_argument("--p-inter", type=float, default=0.05)
    g.add_argument("--k", type=int, default=1)
    g.add_argument("--rule", choices=["parity", "any"], default="parity")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("-o", "--output", required=True)
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("search", help="search a cell genotype")
    s.add_argument("--data", required=True)
    s.add_argument("--depth", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--hidden-dim", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--objective", choices=["bilevel", "single_level"])
    s.add_argument("--auto-depth", action="store_true", help="run the outer depth search")
    s.add_argument("--max-outer", type=int)
    s.add_argument("--max-depth", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--seeds", help="comma-separated seeds, run one after another")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--config")
    s.add_argument("--out-dir", default=".")
    s.set_defaults(func=cmd_search)

    t = sub.add_parser("train", help="train a searched genotype or a baseline")
    t.add_argument("--data", required=True)
    t.add_argument("--genotype")
    t.add_argument("--baseline", choices=[k.value for k in BaselineKind])
    t.add_argument("--depth", type=int)
    t.add_argument("--hidden-dim", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--patience", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--seeds")
    t.add_argument("--workers", type=int, default=1)
    t.add_argument("--config")
    t.add_argument("--out-dir", default=".")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate checkpoints")
    e.add_argument("--checkpoint", nargs="+", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=["train", "val", "test", "all"], default="test")
    e.add_argument("--split-seed", type=int, default=0)
    e.add_argument("--fractions")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export", help="render a genotype as DOT or JSON")
    x.add_argument("--genotype", required=True)
    x.add_argument("--format", choices=["dot", "json"], default="dot")
    x.add_argument("--depth", type=int)
    x.add_argument("-o", "--output")
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"gnas {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (GnasError, OSError, ValueError) as exc:
        print(f"gnas {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
