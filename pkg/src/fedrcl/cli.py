"""Command-line entry point.

    fedrcl run --config exp.yaml --loss rcl --rounds 60 --out runs/rcl
    fedrcl compare runs/ce/metrics.jsonl runs/rcl/metrics.jsonl --out table.csv
    fedrcl benchmark --out runs/bench

Flags override the config file, which overrides the defaults. Any key
can also be set with ``--set section.key=value`` (value parsed as YAML).
The ``FEDRCL_WORKERS`` environment variable caps client parallelism.
"""

from __future__ import annotations

import argparse
import logging
import sys

import yaml

from .config import LOSS_ALIASES, from_dict, load_raw, set_dotted
from .errors import FedRCLError

# flag dest -> dotted config key
FLAG_KEYS = {
    "seed": "seed",
    "dataset": "dataset.kind",
    "clients": "partition.num_clients",
    "participation": "train.participation",
    "alpha": "partition.alpha",
    "gamma": "partition.gamma",
    "rounds": "train.rounds",
    "local_epochs": "train.local_epochs",
    "loss": "loss.mode",
    "beta": "loss.beta",
    "lam": "loss.lam",
    "tau": "loss.tau",
    "levels": "loss.levels",
    "server_opt": "server.kind",
    "out": "out",
}


def _levels(text: str) -> list[int]:
    return [int(t) for t in text.replace(",", " ").split()]


def _assignment(text: str) -> tuple[str, object]:
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    return key, yaml.safe_load(value)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedrcl", description="Federated relaxed contrastive learning experiments.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("--config", help="YAML or JSON config file")
    run.add_argument("--seed", type=int)
    run.add_argument("--dataset", choices=["synthetic", "cifar10", "cifar100"])
    run.add_argument("--clients", type=int)
    run.add_argument("--participation", type=float)
    run.add_argument("--alpha", type=float)
    run.add_argument("--gamma", type=int)
    run.add_argument("--rounds", type=int)
    run.add_argument("--local-epochs", type=int)
    run.add_argument("--loss", choices=sorted(LOSS_ALIASES))
    run.add_argument("--beta", type=float)
    run.add_argument("--lambda", dest="lam", type=float)
    run.add_argument("--tau", type=float)
    run.add_argument("--levels", type=_levels, help="tap levels, e.g. 1,2")
    run.add_argument("--server-opt", choices=["fedavg", "fedavgm", "fedadam"])
    run.add_argument("--out")
    run.add_argument("--set", dest="overrides", type=_assignment, action="append", default=[],
                     metavar="KEY=VALUE", help="dotted config override, e.g. train.lr=0.05")
    run.add_argument("--dry-run", action="store_true", help="resolve and print the config only")

    cmp_ = sub.add_parser("compare", help="tabulate metric logs as CSV")
    cmp_.add_argument("logs", nargs="+")
    cmp_.add_argument("--out", help="CSV path (printed to stdout otherwise)")

    bench = sub.add_parser("benchmark", help="desk benchmark: ce, ce+scl and ce+rcl over several seeds")
    bench.add_argument("--out", default="runs/benchmark")
    bench.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    return ap


def resolve(args: argparse.Namespace):
    raw = load_raw(args.config) if args.config else {}
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest)
        if value is not None:
            set_dotted(raw, key, value)
    for key, value in args.overrides:
        set_dotted(raw, key, value)
    return from_dict(raw)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    # imported lazily so `--help` stays fast
    from .experiment import compare_runs, run_experiment

    try:
        if args.command == "run":
            config = resolve(args)
            if args.dry_run:
                print(yaml.safe_dump(config.to_dict(), sort_keys=False), end="")
                return 0
            return run_experiment(config)
        if args.command == "compare":
            text = compare_runs(args.logs, args.out)
            if args.out is None:
                print(text, end="")
            return 0
        from .benchmark import report, run_benchmark

        result = run_benchmark(args.out, seeds=args.seeds)
        print(report(result))
        return 0
    except FedRCLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
