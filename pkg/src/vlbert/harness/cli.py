"""Command-line entry point: ``vlbert <command> [flags]``."""

from __future__ import annotations

import argparse
import sys
from typing import Optional, Sequence

from .config import ConfigError, RunConfig, load_config

COMMANDS = ("pretrain", "finetune", "ablate", "dump-attention", "gradcheck")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vlbert", description="Toy-scale visual-linguistic BERT runs.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value run configuration")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("--init", help="checkpoint to start from")
        p.add_argument("--task", help="vcr_qa, vcr_qar, vqa or ref (finetune)")
        p.add_argument("--precision", choices=("f32", "f64"))
        p.add_argument("--verbose", action="store_true", help="echo the run log")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out:
        changes["out_dir"] = args.out
    if args.precision:
        changes["precision"] = args.precision
    cfg = cfg.replace(**changes)
    cfg.validate()
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except (ConfigError, OSError) as exc:
        print(f"vlbert {args.command}: invalid configuration: {exc}", file=sys.stderr)
        return 2
    from . import runner

    if args.command == "pretrain":
        result = runner.pretrain(cfg, cfg.out_dir, init=args.init, echo=args.verbose)
        last = result.metrics[-1] if result.metrics else {}
        print(f"pretrained to step {result.step}; final total loss {last.get('total', float('nan')):.4f}")
    elif args.command == "finetune":
        if not args.task:
            print("vlbert finetune: --task is required", file=sys.stderr)
            return 2
        try:
            result = runner.finetune_task(cfg, args.task, init=args.init, out_dir=cfg.out_dir, echo=args.verbose)
        except ValueError as exc:
            print(f"vlbert finetune: {exc}", file=sys.stderr)
            return 2
        print(f"{args.task}\tval\t{result.accuracy:.4f}")
    elif args.command == "ablate":
        rows = runner.ablate(cfg, cfg.out_dir, echo=args.verbose)
        print(f"ablation grid with {len(rows)} settings written to {cfg.out_dir}/ablation.tsv")
    elif args.command == "dump-attention":
        if not args.init:
            print("vlbert dump-attention: --init CHECKPOINT is required", file=sys.stderr)
            return 2
        path = runner.dump_attention(cfg, args.init, cfg.out_dir)
        print(f"attention records written to {path}")
    elif args.command == "gradcheck":
        passed, worst = runner.gradcheck(cfg, cfg.out_dir)
        for name, err in worst.items():
            print(f"{name}\t{err:.3e}")
        if not passed:
            print("gradient check FAILED", file=sys.stderr)
            return 1
        print("gradient check passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
