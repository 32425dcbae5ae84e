"""Command-line entry point.

One command = one process. Every command echoes the effective configuration
(defaults, then config file, then ``section.key=value`` overrides) as
line-oriented ``key=value`` pairs together with its hash, so any output can
be traced back to the exact settings that produced it.

Exit codes are stable: 0 ok, 2 usage/config, 3 training abort, 4 artifact
corruption, 5 input decode.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import config_hash, load_config, resolve_config
from .errors import (
    ArtifactError,
    ImageDecodeError,
    TrainingDivergedError,
    UsageError,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_TRAINING = 3
EXIT_ARTIFACT = 4
EXIT_DECODE = 5


def _flatten(config: dict, prefix: str = "") -> list:
    items = []
    for key in sorted(config):
        dotted = f"{prefix}.{key}" if prefix else key
        value = config[key]
        if isinstance(value, dict):
            items.extend(_flatten(value, dotted))
        else:
            items.append((dotted, value))
    return items


def _echo_config(config: dict, stream=None) -> None:
    stream = stream or sys.stdout
    for dotted, value in _flatten(config):
        print(f"{dotted}={json.dumps(value)}", file=stream)
    print(f"config_hash={config_hash(config)}", file=stream)


def _effective_config(args) -> dict:
    overrides = list(getattr(args, "overrides", ()) or ())
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    return resolve_config(load_config(getattr(args, "config", None), overrides))


# -- commands --------------------------------------------------------------------


def cmd_synth(args) -> int:
    from . import data

    full = data.generate_synthetic_confounders(args.n, args.seed)
    out = data.write_synthetic_dir(full, args.out,
                                   extra_meta={"n": args.n, "seed": args.seed})
    print(f"n={args.n}")
    print(f"seed={args.seed}")
    print(f"out={out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import train_all

    config = _effective_config(args)
    _echo_config(config)
    result = train_all(config, args.out, stage=args.stage)
    if result["stage1"] is not None:
        print(f"stage1={result['stage1']}")
    if result["final"] is not None:
        print(f"final={result['final']}")
    for entry in result["history"]:
        if "selected_epoch" in entry:
            print(f"selected_epoch={entry['selected_epoch']}")
            print(f"selection_auroc={entry['selection_auroc']}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .config import apply_overrides
    from .eval import emit_report, evaluate
    from .training import FeatureStore, load_checkpoint, load_splits

    model, manifest = load_checkpoint(args.checkpoint)
    config = resolve_config(apply_overrides(manifest["meta"]["config"],
                                            args.overrides))
    _echo_config(config)
    splits = load_splits(config)
    if args.split not in splits:
        raise UsageError(
            f"unknown split '{args.split}'; available: {', '.join(sorted(splits))}")
    store = FeatureStore(model, root=config["data"]["root"])
    feats = store.batch(splits[args.split].records)
    report = evaluate(model, feats, args.split, config_hash=config_hash(config))
    if args.out is not None:
        written = emit_report(report, args.format, args.out)
        print(f"report={written}")
    print(f"split={report.split}")
    print(f"n={report.n}")
    print(f"accuracy={report.accuracy:.6f}")
    print(f"auroc={report.auroc:.6f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    from .training import load_checkpoint

    model, _ = load_checkpoint(args.checkpoint)
    _, prob = model.score_pair(args.image, args.text)
    verdict = "hateful" if prob >= 0.5 else "not-hateful"
    print(f"score={prob} verdict={verdict}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .eval import run_ablation

    config = _effective_config(args)
    _echo_config(config)
    rows = run_ablation(config, args.out)
    for row in rows:
        print(f"row={row['row']} combiner={row['combiner']} "
              f"two_stage={row['two_stage']} textual_inversion={row['textual_inversion']} "
              f"accuracy={row['accuracy']:.6f} auroc={row['auroc']:.6f}")
    print(f"table={Path(args.out) / 'table.csv'}")
    return EXIT_OK


def cmd_baselines(args) -> int:
    from .eval import BASELINE_ORDER, run_baselines

    config = _effective_config(args)
    _echo_config(config)
    modes = tuple(args.modes) if args.modes else BASELINE_ORDER
    rows = run_baselines(config, args.out, modes=modes)
    for row in rows:
        print(f"mode={row['mode']} accuracy={row['accuracy']:.6f} "
              f"auroc={row['auroc']:.6f}")
    if args.out is not None:
        print(f"table={Path(args.out) / 'baselines.csv'}")
    return EXIT_OK


def cmd_convert_weights(args) -> int:
    from . import convert

    if args.kind == "backbone":
        if args.vocab is None:
            raise UsageError("--vocab is required when converting a backbone")
        out = convert.convert_clip(args.source, args.out, args.vocab,
                                   name=args.name, merge_limit=args.merge_limit)
    else:
        out = convert.convert_phi(args.source, args.out,
                                  activation=args.activation, name=args.name)
    print(f"kind={args.kind}")
    print(f"out={out}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def _add_config_args(sub, with_seed: bool = False) -> None:
    sub.add_argument("--config", metavar="PATH", default=None,
                     help="JSON config file merged over defaults")
    if with_seed:
        sub.add_argument("--seed", type=int, default=None,
                         help="shorthand for the train.seed override")
    sub.add_argument("overrides", nargs="*", metavar="KEY=VALUE",
                     help="dotted-key config overrides, e.g. train.lr=3e-5")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="memefusion",
        description="Train and evaluate multimodal hateful-meme classifiers.")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("synth", help="generate a synthetic confounder dataset")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--n", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = commands.add_parser("train", help="run the training pipeline")
    p.add_argument("--stage", choices=("1", "2", "all"), default="all")
    p.add_argument("--out", required=True, metavar="DIR")
    _add_config_args(p, with_seed=True)
    p.set_defaults(func=cmd_train)

    p = commands.add_parser("eval", help="evaluate a checkpoint on a labeled split")
    p.add_argument("--checkpoint", required=True, metavar="DIR")
    p.add_argument("--split", default="test")
    p.add_argument("--format", choices=("json", "csv", "markdown"), default="json")
    p.add_argument("--out", default=None, metavar="PATH")
    p.add_argument("overrides", nargs="*", metavar="KEY=VALUE",
                   help="overrides applied to the checkpoint's config (e.g. data.root=...)")
    p.set_defaults(func=cmd_eval)

    p = commands.add_parser("predict", help="score one image + text pair")
    p.add_argument("--checkpoint", required=True, metavar="DIR")
    p.add_argument("--image", required=True, metavar="PATH")
    p.add_argument("--text", default="")
    p.set_defaults(func=cmd_predict)

    p = commands.add_parser("ablate", help="run the four-row component ablation")
    p.add_argument("--out", required=True, metavar="DIR")
    _add_config_args(p, with_seed=True)
    p.set_defaults(func=cmd_ablate)

    p = commands.add_parser("baselines", help="train unimodal/fusion baseline heads")
    p.add_argument("--out", default=None, metavar="DIR")
    p.add_argument("--modes", nargs="*", default=None,
                   help="subset of baseline modes to run")
    _add_config_args(p, with_seed=True)
    p.set_defaults(func=cmd_baselines)

    p = commands.add_parser("convert-weights",
                            help="convert release checkpoints into weight archives")
    p.add_argument("--kind", choices=("backbone", "phi"), required=True)
    p.add_argument("--source", required=True, metavar="PATH")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--vocab", default=None, metavar="PATH",
                   help="BPE merge table (backbone only)")
    p.add_argument("--name", default=None)
    p.add_argument("--merge-limit", type=int, default=None)
    p.add_argument("--activation", choices=("gelu", "identity"), default="gelu")
    p.set_defaults(func=cmd_convert_weights)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    if args.command == "convert-weights":
        if args.name is None:
            args.name = "clip" if args.kind == "backbone" else "phi"
        if args.merge_limit is None:
            from .backbone.bpe import REFERENCE_MERGE_LIMIT

            args.merge_limit = REFERENCE_MERGE_LIMIT
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except ArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except ImageDecodeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DECODE


if __name__ == "__main__":
    sys.exit(main())
