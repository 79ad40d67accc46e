"""Command-line surface: run experiments, inspect partitions, evaluate
checkpoints, sweep hyperparameters, and print top-set selection histograms.

Exit codes: 0 ok, 2 config/usage error, 3 numeric divergence, 4 IO error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path


from . import nn, runner
from .attacks import AttackSpec
from .data import class_counts, partition, partition_unequal
from .errors import ConfigError, DivergenceError, FedslackError, FormatError
from .metrics import EvalAttack, evaluate
from .runner import ExperimentConfig, load_config, load_metrics
from .streams import stream

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedslack",
                                description="Federated adversarial training simulator")
    sub = p.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment from a config file")
    run_p.add_argument("--config", required=True)
    run_p.add_argument("--seed", type=int, default=None)
    run_p.add_argument("--out", default=None)

    part_p = sub.add_parser("partition", help="partition utilities")
    part_sub = part_p.add_subparsers(dest="action", required=True)
    inspect_p = part_sub.add_parser("inspect", help="print per-client class counts")
    inspect_p.add_argument("--config", required=True)

    eval_p = sub.add_parser("eval", help="evaluate a checkpoint on a test set")
    eval_p.add_argument("--checkpoint", required=True)
    eval_p.add_argument("--test", required=True, help="csv test set path")
    eval_p.add_argument("--attack", choices=["none", "fgsm", "pgd20"], default="none")
    eval_p.add_argument("--epsilon", type=float, default=8 / 255)
    eval_p.add_argument("--step-size", type=float, default=2 / 255)
    eval_p.add_argument("--seed", type=int, default=0)

    sweep_p = sub.add_parser("sweep", help="run a seeded grid over one parameter")
    sweep_p.add_argument("--config", required=True)
    sweep_p.add_argument("--param", required=True,
                         choices=["alpha", "khat", "epsilon", "clients", "ratio"])
    sweep_p.add_argument("--values", required=True, nargs="+", type=float)
    sweep_p.add_argument("--out", default=None)

    trace_p = sub.add_parser("trace-topk", help="print top-set selection histogram")
    trace_p.add_argument("--run", required=True, help="output directory of a run")
    return p


def _cmd_run(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.out is not None:
        config = replace(config, out_dir=args.out)
    artifact = runner.run(config)
    last = artifact.reports[-1]
    print(f"finished {config.rounds} rounds; final mean drift {last.mean_drift:.6f}"
          + (f", nat acc {last.nat_acc:.4f}, pgd20 acc {last.pgd20_acc:.4f}"
             if last.nat_acc is not None else ""))
    if config.out_dir is None:
        print("note: no --out directory given, metrics were not persisted")
    return EXIT_OK


def _cmd_partition_inspect(args) -> int:
    config = load_config(args.config)
    train_set, _ = runner.build_datasets(config)
    if config.partition.sample_counts is not None:
        shards = partition_unequal(train_set, config.partition)
    else:
        shards = partition(train_set, config.partition)
    table = class_counts(train_set, shards)
    header = "client  " + "  ".join(f"c{c:<5d}" for c in range(train_set.num_classes))
    print(header)
    for k, row in enumerate(table):
        print(f"{k:<6d}  " + "  ".join(f"{n:<6d}" for n in row) + f" total {row.sum()}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    model = nn.load_checkpoint(args.checkpoint)
    from .data import load_csv
    test_set = load_csv(args.test)
    spec = AttackSpec(args.epsilon, args.step_size,
                      steps=20 if args.attack == "pgd20" else 1)
    if args.attack == "none":
        acc = evaluate(model, test_set, EvalAttack.NONE)
    elif args.attack == "fgsm":
        acc = evaluate(model, test_set, EvalAttack.FGSM, spec)
    else:
        acc = evaluate(model, test_set, EvalAttack.PGD, spec,
                       stream(args.seed, "eval-attack"))
    print(f"accuracy: {acc:.4f}")
    return EXIT_OK


def _apply_sweep_value(config: ExperimentConfig, param: str,
                       value: float) -> ExperimentConfig:
    if param == "alpha":
        return replace(config, policy=replace(config.policy, alpha=value))
    if param == "khat":
        return replace(config, policy=replace(config.policy, k_hat=int(value)))
    if param == "epsilon":
        attack = replace(config.local.attack, epsilon=value)
        return replace(config, local=replace(config.local, attack=attack))
    if param == "clients":
        return replace(config, partition=replace(config.partition,
                                                 num_clients=int(value)))
    return replace(config, participation=value)


def _cmd_sweep(args) -> int:
    base = load_config(args.config)
    results = []
    for value in args.values:
        config = _apply_sweep_value(base, args.param, value)
        out = None
        if args.out:
            out = str(Path(args.out) / f"{args.param}_{value:g}")
        config = replace(config, out_dir=out)
        artifact = runner.run(config)
        last = artifact.reports[-1]
        results.append({"value": value, "mean_drift": last.mean_drift,
                        "nat_acc": last.nat_acc, "pgd20_acc": last.pgd20_acc})
        print(f"{args.param}={value:g}: drift {last.mean_drift:.6f}"
              + (f", nat {last.nat_acc:.4f}, pgd20 {last.pgd20_acc:.4f}"
                 if last.nat_acc is not None else ""))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "sweep.json").write_text(json.dumps(results, indent=2) + "\n")
    return EXIT_OK


def _cmd_trace_topk(args) -> int:
    path = Path(args.run) / "metrics.csv"
    rows = load_metrics(path)
    counts: dict[int, int] = {}
    rounds = set()
    for row in rows:
        if row["client_id"] >= 0:
            counts.setdefault(row["client_id"], 0)
            rounds.add(row["round"])
            if row["is_top"]:
                counts[row["client_id"]] += 1
    total_rounds = len(rounds)
    print(f"top-set selections over {total_rounds} rounds:")
    for cid in sorted(counts):
        n = counts[cid]
        frac = n / total_rounds if total_rounds else 0.0
        bar = "#" * round(40 * frac)
        print(f"client {cid}: {n:4d} ({100 * frac:5.1f}%) {bar}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "partition":
            return _cmd_partition_inspect(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "sweep":
            return _cmd_sweep(args)
        return _cmd_trace_topk(args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, FormatError, FedslackError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
