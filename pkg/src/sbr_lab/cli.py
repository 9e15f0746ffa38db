"""Command-line entry point: ``sbr-lab <command> [--key=value ...]``.

Exit codes: 0 success, 1 usage/config error, 2 self-check failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields, replace
from types import SimpleNamespace

from . import benchmark
from .config import ConfigError, load_config, parse_overrides
from .data import (
    CSVParseError, DataError, InfeasiblePlanError, SyntheticTransferSpec,
    gen_synthetic_transfer, load_csv, save_csv, write_meta,
)
from .model import CorruptCheckpointError, SpecMismatchError, load_model, load_snapshot, save_checkpoint
from .selfcheck import selfcheck
from .sweep import AXES, format_table, sweep, write_table
from .train import dump_features, evaluate, finetune, pretrain, run_seeds

EXIT_OK, EXIT_USAGE, EXIT_SELFCHECK, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("sbr_lab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sbr-lab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write the synthetic source/target CSVs")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=0)

    def train_args(sp):
        sp.add_argument("--config", help="JSON file of TrainConfig keys")
        sp.add_argument("--seed", type=int, required=True)

    t = sub.add_parser("pretrain", help="train the source model")
    train_args(t)
    t.add_argument("--data", required=True, help="directory with source.csv")
    t.add_argument("--out", required=True, help="checkpoint path")

    f = sub.add_parser("finetune", help="fine-tune from a source checkpoint over several seeds")
    train_args(f)
    f.add_argument("--data", required=True, help="directory with target_train.csv and target_test.csv")
    f.add_argument("--source", required=True, help="source checkpoint")
    f.add_argument("--out", required=True, help="JSONL report path")
    f.add_argument("--save-model", help="write the first seed's fine-tuned model here")

    e = sub.add_parser("eval", help="accuracy of a checkpoint on a CSV dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="CSV file")

    s = sub.add_parser("sweep", help="multi-seed sweep over one axis")
    train_args(s)
    s.add_argument("--data", required=True)
    s.add_argument("--source", required=True)
    s.add_argument("--axis", required=True, choices=AXES)
    s.add_argument("--values", required=True, help="comma-separated axis values")
    s.add_argument("--tune-beta", action="store_true",
                   help="pick each measure's best beta from its built-in grid")
    s.add_argument("--out", required=True, help="JSONL table path")

    c = sub.add_parser("selfcheck", help="run the built-in identity checks")
    c.add_argument("--momentum", type=float, default=0.0,
                   help="momentum used in the kappa-equivalence check")

    d = sub.add_parser("dump-features", help="write raw extractor outputs as CSV")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True, help="CSV file")
    d.add_argument("--out", required=True)
    return p


def _spec_overrides(raw: dict, seed: int) -> SyntheticTransferSpec:
    known = {f.name: f for f in fields(SyntheticTransferSpec)}
    kw = {"seed": seed}
    for k, v in raw.items():
        if k not in known:
            raise ConfigError(f"unknown data key {k!r}")
        kw[k] = int(v) if known[k].type in ("int", int) else float(v)
    return replace(benchmark.DATA, **kw)


def _config(args, extra: dict, base: dict):
    file_keys = {}
    if args.config:
        with open(args.config) as fh:
            try:
                file_keys = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{args.config}: {exc}") from exc
        if not isinstance(file_keys, dict):
            raise ConfigError(f"{args.config}: expected a JSON object")
    return load_config(None, {**base, **file_keys, **extra, "seed": str(args.seed)})


def _target(data_dir: str):
    train = load_csv(os.path.join(data_dir, "target_train.csv"))
    test = load_csv(os.path.join(data_dir, "target_test.csv"), num_classes=train.num_classes)
    return train, test


def _run(argv) -> int:
    parser = _parser()
    args, rest = parser.parse_known_args(argv)
    extra = parse_overrides(rest)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    if args.command == "gen-data":
        spec = _spec_overrides(extra, args.seed)
        os.makedirs(args.out, exist_ok=True)
        for name, ds in zip(("source", "target_train", "target_test"), gen_synthetic_transfer(spec)):
            path = os.path.join(args.out, f"{name}.csv")
            save_csv(ds, path)
            write_meta(path + ".meta", spec, {"split": name, "rows": len(ds)})
        print(json.dumps({"out": args.out, "seed": spec.seed}))
        return EXIT_OK

    if args.command == "selfcheck":
        if extra:
            raise UsageError(f"unexpected arguments {sorted(extra)}")
        results = selfcheck(momentum=args.momentum)
        for r in results:
            print(r)
        return EXIT_OK if all(r.passed for r in results) else EXIT_SELFCHECK

    if args.command in ("eval", "dump-features"):
        if extra:
            raise UsageError(f"unexpected arguments {sorted(extra)}")
        model = load_model(args.checkpoint)
        ds = load_csv(args.data, num_classes=model.spec.num_classes)
        if args.command == "eval":
            print(json.dumps({"accuracy": evaluate(model, ds), "n": len(ds)}))
        else:
            dump_features(model, ds, args.out)
        return EXIT_OK

    if args.command == "pretrain":
        cfg = _config(args, extra, benchmark.pretrain_config().to_dict())
        source = load_csv(os.path.join(args.data, "source.csv"))
        model = pretrain(cfg, source, args.out)
        print(json.dumps({"checkpoint": args.out, "train_acc": evaluate(model, source)}))
        return EXIT_OK

    cfg = _config(args, extra, {})
    train, test = _target(args.data)
    snap = load_snapshot(args.source)

    if args.command == "finetune":
        if args.save_model:
            model, _ = finetune(cfg, snap, train, test)
            save_checkpoint(model, args.save_model)
        report = run_seeds(cfg, snap, train, test)
        report.write(args.out)
        print(json.dumps({"out": args.out, **report.final}))
        return EXIT_OK

    # sweep
    raw_values = [v for v in args.values.split(",") if v.strip()]
    values = raw_values if args.axis == "measure" else [float(v) for v in raw_values]
    bench = SimpleNamespace(source=snap, train=train, test=test)
    cells = sweep(cfg, args.axis, values, bench, beta_grids=benchmark.BETA_GRIDS if args.tune_beta else None)
    write_table(cells, args.out)
    print(format_table(cells))
    return EXIT_OK


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        return _run(argv)
    except (OSError, CorruptCheckpointError, CSVParseError) as exc:
        print(f"sbr-lab: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ConfigError, SpecMismatchError, InfeasiblePlanError, DataError, ValueError) as exc:
        print(f"sbr-lab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
