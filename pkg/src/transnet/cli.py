"""Command-line entry point: ``transnet {generate,train,eval,ablate}``.

Exit status: 0 on success, 1 on validation errors (bad config, refused
overwrite, missing or incompatible inputs), 2 on runtime failures.
Logs go to standard error; results are written only to files.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import dataio, pipeline
from .config import ConfigError, RunConfig, load_config
from .pipeline import ValidationError
from .synth.categories import CategoryError

log = logging.getLogger("transnet")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="transnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, needs_out: bool = True) -> None:
        p.add_argument("--config", help="run configuration file (key = value); defaults apply when omitted")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", required=needs_out, help="output directory")
        p.add_argument("--overwrite", action="store_true", help="replace a non-empty output directory")
        p.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("generate", help="render the synthetic train/test dataset"))

    p = sub.add_parser("train", help="train stage 1 or stage 2")
    common(p)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--stage1", help="stage-1 checkpoint directory (required for --stage 2)")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    p.add_argument("--max-steps", type=int, help="stop after this many steps (per model)")

    p = sub.add_parser("eval", help="score checkpoints on the test split")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--stage1", help="stage-1 checkpoint directory")
    p.add_argument("--stage2", help="stage-2 checkpoint directory")
    p.add_argument("--oracle", action="store_true", help="score ground truth as the prediction")

    p = sub.add_parser("ablate", help="train and score the toggle grid")
    common(p)
    p.add_argument("--dataset", required=True)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def run(args) -> None:
    cfg = resolve_config(args)
    if args.command == "generate":
        pipeline.generate_dataset(cfg, args.out, args.overwrite)
    elif args.command == "train":
        if args.stage == 1:
            pipeline.train_stage1_run(cfg, args.dataset, args.out, args.overwrite, args.resume, args.max_steps)
        else:
            if not args.stage1:
                raise pipeline.DependencyError("stage-2 training needs a stage-1 checkpoint (--stage1)")
            pipeline.train_stage2_run(cfg, args.dataset, args.stage1, args.out, args.overwrite, args.resume,
                                      args.max_steps)
    elif args.command == "eval":
        if not args.oracle and not (args.stage1 and args.stage2):
            raise ValidationError("eval needs --stage1 and --stage2 (or --oracle)")
        pipeline.evaluate_run(cfg, args.dataset, args.stage1, args.stage2, args.out, args.overwrite, args.oracle)
    elif args.command == "ablate":
        pipeline.ablate_run(cfg, args.dataset, args.out, args.overwrite)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except (ConfigError, ValidationError, dataio.FormatError, dataio.LoadError, CategoryError) as exc:
        log.error("%s", exc)
        return 1
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        log.exception("runtime error: %s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
