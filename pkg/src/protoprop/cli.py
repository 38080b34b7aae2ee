"""Command line entry points: gen-data, train, eval, ablate, export-embeddings."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import evalzsl
from .errors import ContractError, NumericalAbort
from .synthdata import SplitSpec, default_vocab, generate_dataset, load_dataset, save_dataset
from .trainer import Checkpoint, TrainConfig, ablation_suite, evaluate, export_embeddings, train

EXIT_OK = 0
EXIT_CONTRACT = 1
EXIT_NUMERICAL = 2


def _ratio(text: str) -> tuple[int, int]:
    try:
        unseen, seen = (int(x) for x in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"ratio must look like 2:8, got {text!r}") from None
    return unseen, seen


def _config_overrides(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("config overrides")
    for f in dataclasses.fields(TrainConfig):
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", default=None, metavar="VALUE")


def _load_config(args) -> TrainConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    if args.config:
        return TrainConfig.load(args.config, **overrides)
    return TrainConfig.from_mapping(overrides)


def cmd_gen_data(args) -> int:
    unseen, seen = args.ratio
    spec = SplitSpec(
        unseen,
        seen,
        seed=args.seed,
        n_train=args.n_train,
        n_val=args.n_val,
        n_test=args.n_test,
        bias_mode=args.bias_mode == "on",
    )
    ds = generate_dataset(default_vocab(args.attributes, args.objects), spec)
    out = save_dataset(ds, args.output)
    print(f"wrote {out}: {len(ds.seen)} seen, {len(ds.unseen)} unseen compositions")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_config(args)
    ckpt, record = train(config)
    print(f"best epoch {ckpt.epoch} val_harmonic {ckpt.val_harmonic!r}")
    print(json.dumps(record.test, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    ds = load_dataset(args.dataset or ckpt.config.dataset_path)
    rep = evaluate(ckpt, ds, args.split)
    sys.stdout.write(evalzsl.format_report(rep))
    if args.output:
        evalzsl.write_report(rep, args.output)
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = _load_config(args)
    table = ablation_suite(config, seeds=args.seeds)
    sys.stdout.write(table.format())
    if config.output_dir:
        path = Path(config.output_dir) / "ablation.json"
        path.write_text(json.dumps({"seeds": table.seeds, "runs": table.per_seed}, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_export(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    ds = load_dataset(args.dataset or ckpt.config.dataset_path)
    path = export_embeddings(ckpt, ds, args.split, args.output)
    print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protoprop", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    p.add_argument("--attributes", type=int, default=8, help="number of colors")
    p.add_argument("--objects", type=int, default=3, help="number of shapes")
    p.add_argument("--ratio", type=_ratio, default=(2, 8), help="unseen:seen ratio, e.g. 2:8")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=50)
    p.add_argument("--n-val", type=int, default=20)
    p.add_argument("--n-test", type=int, default=20)
    p.add_argument("--bias-mode", choices=("on", "off"), default="off")
    p.add_argument("--output", "-o", required=True, help="dataset directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train and keep the best validation checkpoint")
    p.add_argument("config", nargs="?", help="key = value config file")
    _config_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p.add_argument("checkpoint", help="checkpoint directory")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--dataset", help="dataset directory (default: the one recorded in the checkpoint)")
    p.add_argument("--output", help="also write the metrics as JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="independence x backbone ablation over several seeds")
    p.add_argument("config", nargs="?", help="key = value config file")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    _config_overrides(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-embeddings", help="dump softmax-pooled attribute embeddings")
    p.add_argument("checkpoint")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--dataset")
    p.add_argument("--output", "-o", required=True, help="output .ppt file")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ContractError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
