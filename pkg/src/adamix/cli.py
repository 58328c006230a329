"""Command-line interface.

Verbs:

    adamix gen-data --config spec.json --out data/      export a dataset
    adamix train    --config run.json [--seed N] [--out DIR]
                    [--strategy S] [--paradigm P]       one training run
    adamix eval     --run DIR [--split test]            score a checkpoint
    adamix compare  --config run.json --seeds 0,1,2
                    --strategies cutmix,umix,adamix
                    [--paradigms self_training] --out DIR
    adamix plot     --curves FILE[,FILE...] --out DIR   render curve PNGs

``compare`` parallelizes across runs with ``ADAMIX_NUM_WORKERS`` workers
(default 1); ``--workers`` overrides the environment.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .data_synth import DatasetSpec, export_dataset, generate
from .runner import RunConfig, evaluate_run, mean_test_dsc, plot_curves, \
    run_compare, run_training
from .ssl import PARADIGMS, STRATEGY_CHOICES


def _load_run_config(args: argparse.Namespace) -> RunConfig:
    if args.config:
        config = RunConfig.from_json_file(args.config)
    else:
        config = RunConfig()
    if getattr(args, "seed", None) is not None:
        config = replace(config, seed=args.seed)
    if getattr(args, "out", None) is not None:
        config = replace(config, output_dir=args.out)
    paradigm = config.paradigm
    if getattr(args, "strategy", None) is not None:
        paradigm = replace(paradigm, strategy=args.strategy)
    if getattr(args, "paradigm", None) is not None:
        paradigm = replace(paradigm, paradigm=args.paradigm)
    config = replace(config, paradigm=paradigm)
    config.validate()
    return config


def _cmd_gen_data(args: argparse.Namespace) -> int:
    if args.config:
        raw = json.loads(Path(args.config).read_text())
        spec = DatasetSpec.from_json_dict(raw)
    else:
        spec = DatasetSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    spec.validate()
    records = generate(spec)
    export_dataset(records, spec, args.out)
    print(f"wrote dataset to {args.out} ({len(records)} samples)")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    config = _load_run_config(args)
    run_dir = run_training(config, progress=not args.quiet)
    print(f"run complete: {run_dir}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    reports, csv_path = evaluate_run(args.run, split=args.split)
    print(f"wrote {csv_path}")
    print(f"mean DSC over {len(reports)} samples: "
          f"{mean_test_dsc(reports):.4f}")
    return 0


def _parse_list(text: str) -> list[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


def _cmd_compare(args: argparse.Namespace) -> int:
    base = _load_run_config(args)
    seeds = [int(s) for s in _parse_list(args.seeds)]
    strategies = _parse_list(args.strategies) if args.strategies else \
        [base.paradigm.strategy]
    paradigms = _parse_list(args.paradigms) if args.paradigms else \
        [base.paradigm.paradigm]
    for strategy in strategies:
        if strategy not in STRATEGY_CHOICES:
            raise SystemExit(f"unknown strategy {strategy!r}")
    for paradigm in paradigms:
        if paradigm not in PARADIGMS:
            raise SystemExit(f"unknown paradigm {paradigm!r}")
    configs = [
        replace(base, paradigm=replace(base.paradigm, strategy=strategy,
                                       paradigm=paradigm))
        for paradigm in paradigms for strategy in strategies
    ]
    out = run_compare(configs, seeds, args.out, workers=args.workers)
    print(f"comparison complete: {out}")
    return 0


def _cmd_plot(args: argparse.Namespace) -> int:
    outputs = plot_curves(_parse_list(args.curves), args.out)
    for path in outputs:
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adamix",
        description="Self-paced adaptive patch mixing for semi-supervised "
                    "segmentation: synthetic data, training, evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and export a dataset")
    p.add_argument("--config", help="dataset spec JSON file")
    p.add_argument("--seed", type=int, help="override the dataset seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="run one training configuration")
    p.add_argument("--config", help="run config JSON file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("--strategy", choices=sorted(STRATEGY_CHOICES),
                   help="override the mix strategy")
    p.add_argument("--paradigm", choices=sorted(PARADIGMS),
                   help="override the learning paradigm")
    p.add_argument("--quiet", action="store_true",
                   help="suppress per-epoch progress lines")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a finished run")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--split", default="test",
                   help="dataset split to score (default: test)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("compare",
                       help="run a strategy/paradigm comparison grid")
    p.add_argument("--config", help="base run config JSON file")
    p.add_argument("--seeds", required=True,
                   help="comma-separated seeds, e.g. 0,1,2")
    p.add_argument("--strategies",
                   help="comma-separated mix strategies to compare")
    p.add_argument("--paradigms",
                   help="comma-separated paradigms to compare")
    p.add_argument("--out", required=True, help="comparison output directory")
    p.add_argument("--workers", type=int, default=None,
                   help="parallel runs (default: env ADAMIX_NUM_WORKERS)")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("plot", help="plot training curves")
    p.add_argument("--curves", required=True,
                   help="comma-separated curves.csv files or run dirs")
    p.add_argument("--out", required=True, help="directory for PNG output")
    p.set_defaults(func=_cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileExistsError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
