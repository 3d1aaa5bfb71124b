"""Command line front end: train, eval, report."""
from __future__ import annotations

import argparse
import sys

from .goalspace import CONTINUOUS_CLASSES, SEMANTIC_CLASSES
from .harness import (MetricsParseError, RunConfig, evaluate, report, run)
from .numcore import ContractError
from .sac import SacAgent

_CLASS_BY_TAG = {cls.tag: cls
                 for cls in SEMANTIC_CLASSES + CONTINUOUS_CLASSES}


def _parse_classes(listing: str):
    picks = []
    for tag in listing.split(","):
        tag = tag.strip()
        if not tag:
            continue
        if tag not in _CLASS_BY_TAG:
            known = ", ".join(sorted(_CLASS_BY_TAG))
            raise ContractError(f"unknown class {tag!r}; choose from {known}")
        picks.append(_CLASS_BY_TAG[tag])
    if not picks:
        raise ContractError("no evaluation classes given")
    return picks


def _cmd_train(args) -> int:
    config = RunConfig.from_file(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.scenario is not None:
        changes["scenario"] = args.scenario
    if changes:
        config = config.replace(**changes)
    out = args.out or f"runs/{config.kind.lower()}-{config.goal_mode}" \
                      f"-seed{config.seed}"
    print(f"writing to {out}")
    run(config, out, resume=args.resume, log=print)
    return 0


def _cmd_eval(args) -> int:
    agent, extra = SacAgent.load(args.checkpoint)
    classes = _parse_classes(args.classes)
    want = all(not c.continuous for c in classes)
    if want != agent.semantic:
        raise ContractError("checkpoint goal mode does not match classes")
    rec = evaluate(agent, classes=classes, k=args.goals_per_class,
                   seed=args.seed, epoch=int(extra.get("epoch", 0)))
    for tag in sorted(rec.per_class):
        print(f"{tag}\t{rec.per_class[tag]:.4f}")
    print(f"global\t{rec.global_sr:.4f}")
    return 0


def _cmd_report(args) -> int:
    summary = report(args.metrics, csv_path=args.csv, json_path=args.json)
    for row in summary["rows"]:
        print(f"epoch {row['epoch']:>4}  {row['class']:<8} "
              f"sr={row['sr']:.4f} +/- {row['std']:.4f} "
              f"(n={row['n_seeds']})")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stackrl",
        description="train and evaluate goal-conditioned block agents")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run a training configuration")
    train.add_argument("--config", required=True,
                       help="JSON run configuration file")
    train.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
    train.add_argument("--scenario", type=int, choices=(1, 2, 3),
                       default=None, help="transfer scenario override")
    train.add_argument("--out", default=None, help="output directory")
    train.add_argument("--resume", default=None,
                       help="checkpoint to resume from")
    train.set_defaults(handler=_cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--classes", required=True,
                    help="comma separated class tags, e.g. S2,S3,P3")
    ev.add_argument("--goals-per-class", type=int, default=24)
    ev.add_argument("--seed", type=int, default=0)
    ev.set_defaults(handler=_cmd_eval)

    rep = sub.add_parser("report", help="aggregate metrics files")
    rep.add_argument("metrics", nargs="+", help="metrics.jsonl paths")
    rep.add_argument("--csv", default=None, help="write epoch,class,sr CSV")
    rep.add_argument("--json", default=None, help="write full summary JSON")
    rep.set_defaults(handler=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except (ContractError, MetricsParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
