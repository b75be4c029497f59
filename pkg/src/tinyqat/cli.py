"""Command-line surface.

Subcommands: gen-data, train-teacher, build-cache, train, sweep-sensitivity,
hwcost, report.  Every training-family command takes --config <json> and an
optional --seed override.  Exit codes: 0 success, 1 validation/usage error,
2 runtime abort.
"""

import argparse
import dataclasses
import json
import os
import sys

from . import harness, hwcost
from .data import generate_task, save_dataset
from .diagnostics import SensitivityGridSpec, run_sensitivity_grid
from .harness import ConfigError, RunAbort, load_config
from .losses import CacheMissError
from .tensor import NonFiniteError

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_VALIDATION)


def _add_config_args(sub):
    sub.add_argument("--config", required=True, help="experiment config JSON")
    sub.add_argument("--seed", type=int, default=None, help="override config seed")


def _load(args):
    config = load_config(args.config)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    return config


def build_parser():
    parser = _Parser(prog="tinyqat",
                     description="desk-scale transformer QAT experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic dataset as JSONL")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train-teacher", help="train the full-precision teacher")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="run directory")

    p = sub.add_parser("build-cache", help="cache teacher soft labels for crops")
    _add_config_args(p)
    p.add_argument("--teacher", required=True,
                   help="teacher checkpoint base path (without .bin/.json)")
    p.add_argument("--out", required=True, help="cache JSONL path")
    p.add_argument("--crops", type=int, default=None, help="crops per sample")
    p.add_argument("--crop-len", type=int, default=None, help="crop length")

    p = sub.add_parser("train", help="run quantization-aware training")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="run directory")

    p = sub.add_parser("sweep-sensitivity", help="grid of sensitivity runs")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="grid output directory")
    p.add_argument("--mode", default="leave-one-out",
                   choices=["leave-one-out", "only-one", "per-head"])
    p.add_argument("--targets", default="ffn,mhsa,query,key,value",
                   help="comma-separated target names (ignored for per-head)")
    p.add_argument("--bits", type=int, default=3, help="base bitwidth")
    p.add_argument("--target-bits", type=int, default=None,
                   help="bitwidth applied to targets (per-head default 2)")
    p.add_argument("--jobs", type=int, default=1, help="concurrent runs")

    p = sub.add_parser("hwcost", help="evaluate a bitwidth plan's MAC cost")
    p.add_argument("--assignment", required=True, help="plan JSON path")

    p = sub.add_parser("report", help="aggregate run metrics into a table")
    p.add_argument("runs_dir", help="directory containing run directories")
    p.add_argument("--out", default=None, help="write TSV here as well")
    return parser


def _cmd_gen_data(args):
    config = _load(args)
    os.makedirs(args.out, exist_ok=True)
    train, evalset = generate_task(config.data, config.seed)
    save_dataset(os.path.join(args.out, "train.jsonl"), train)
    save_dataset(os.path.join(args.out, "eval.jsonl"), evalset)
    print(f"wrote {len(train)} train / {len(evalset)} eval samples to {args.out}")
    return EXIT_OK


def _cmd_train_teacher(args):
    config = _load(args)
    metrics = harness.train_teacher(config, args.out)
    print(json.dumps(metrics))
    return EXIT_OK


def _cmd_build_cache(args):
    config = _load(args)
    cache = harness.build_soft_label_cache(config, args.teacher, args.out,
                                           crops=args.crops,
                                           crop_len=args.crop_len)
    print(f"wrote {len(cache)} soft-label entries to {args.out}")
    return EXIT_OK


def _cmd_train(args):
    config = _load(args)
    metrics = harness.run_qat(config, args.out)
    print(json.dumps(metrics))
    return EXIT_OK


def _cmd_sweep(args):
    config = _load(args)
    if args.mode == "per-head":
        from .diagnostics import per_head_targets
        targets = per_head_targets(config.model)
        target_bits = args.target_bits if args.target_bits is not None else 2
        base_bits = args.bits if args.bits != 3 else 8
    else:
        targets = [t.strip() for t in args.targets.split(",") if t.strip()]
        target_bits = args.target_bits if args.target_bits is not None else args.bits
        base_bits = args.bits
    grid = SensitivityGridSpec(mode=args.mode, targets=targets,
                               base_bits=base_bits, target_bits=target_bits)
    rows = run_sensitivity_grid(grid, config, args.out, jobs=args.jobs)
    for row in rows:
        print(f"{row['target']:>12}  bits={row['bitwidth']:>3}  "
              f"top1={row['top1']}  status={row['status']}")
    return EXIT_OK


def _cmd_hwcost(args):
    if not os.path.exists(args.assignment):
        raise ConfigError(f"assignment file not found: {args.assignment}")
    table = hwcost.MacCostTable.load()
    try:
        plan = hwcost.load_assignment(args.assignment)
        area, power = hwcost.aggregate(plan, table)
    except (hwcost.CostTableError, KeyError, ValueError) as exc:
        raise ConfigError(f"invalid assignment: {exc}") from exc
    print(json.dumps({"area": area, "power": power}))
    return EXIT_OK


def _cmd_report(args):
    if not os.path.isdir(args.runs_dir):
        raise ConfigError(f"not a directory: {args.runs_dir}")
    rows = harness.collect_report(args.runs_dir)
    text = harness.write_report(rows, args.out)
    print(text, end="")
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train-teacher": _cmd_train_teacher,
    "build-cache": _cmd_build_cache,
    "train": _cmd_train,
    "sweep-sensitivity": _cmd_sweep,
    "hwcost": _cmd_hwcost,
    "report": _cmd_report,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_VALIDATION
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (RunAbort, NonFiniteError, CacheMissError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
