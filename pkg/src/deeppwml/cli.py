"""Command line: ``deeppwml {generate,train,infer,ablate,evaluate}``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import ConfigError, load_config
from .networks import NetworkConfigError
from .training import STAGES, StagingError


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (.json or .toml)")
    common.add_argument("--seed", type=int, help="override the experiment seed")
    common.add_argument("--stride", type=int, help="sliding-window stride")
    common.add_argument("--threshold", type=float, help="lesion probability threshold")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="deeppwml", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write the synthetic cohort and manifest")
    p = sub.add_parser("train", parents=[common], help="train one stage")
    p.add_argument("stage", choices=STAGES)
    p.add_argument("--fusion", action="append", help="pseg only: fusion set(s) to train, e.g. sp,cf,t1")
    p = sub.add_parser("infer", parents=[common], help="predict test subjects with the primary fusion")
    p.add_argument("subjects", nargs="*", help="subject ids (default: the test split)")
    p = sub.add_parser("ablate", parents=[common], help="predict test subjects for every fusion set")
    p.add_argument("subjects", nargs="*")
    sub.add_parser("evaluate", parents=[common], help="score predictions and write the report table")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config).override(args.seed, args.stride, args.threshold).validate()
        if args.command == "generate":
            pipeline.generate(cfg)
        elif args.command == "train":
            pipeline.train(cfg, args.stage, args.fusion)
        elif args.command == "infer":
            pipeline.infer(cfg, args.subjects or None)
        elif args.command == "ablate":
            pipeline.ablate(cfg, args.subjects or None)
        elif args.command == "evaluate":
            result = pipeline.evaluate(cfg)
            sys.stdout.write(result["table"])
    except StagingError as exc:
        print(f"staging error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, NetworkConfigError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 5
    return 0


if __name__ == "__main__":
    sys.exit(main())
