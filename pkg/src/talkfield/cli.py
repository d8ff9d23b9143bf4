"""Command line entry point: ``talkfield {prepare,animate,iddiff,selftest}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .pipeline import (
    ConfigError,
    PipelineConfig,
    PipelineError,
    parse_config,
    prepare,
    run_internal_difference,
    run_pipeline,
)
from .selftest import run_selftest


def _config(args) -> PipelineConfig:
    cfg = parse_config(args.config) if args.config else PipelineConfig()
    changes = {}
    if args.out is not None:
        changes["out_dir"] = args.out
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "frames", None) is not None:
        changes["frames"] = args.frames
    if getattr(args, "dump_masks", False):
        changes["dump_masks"] = True
    return cfg.replace(**changes) if changes else cfg


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed must fit in 64 unsigned bits, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="talkfield", description="Audio-driven talking-head frames from a neural feature field.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("--seed", type=_u64, help="training seed (overrides seed)")

    p = sub.add_parser("prepare", help="build the face model, train the toy networks, invert the target")
    common(p)
    p.add_argument("--no-gan", action="store_true", help="train the mouth network without the adversarial term")
    p.add_argument("--disc-steps", type=int, default=300)

    for name, text in (("animate", "render the frame sequence"), ("iddiff", "mirrored-pose internal differences")):
        p = sub.add_parser(name, help=text)
        common(p)
        p.add_argument("--frames", type=int, help="emit at most this many frames")
        p.add_argument("--dump-masks", action="store_true", help="write the blend masks as grayscale PNGs")

    p = sub.add_parser("selftest", help="run the fast invariant checks")
    p.add_argument("--seed", type=_u64, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "selftest":
            results = run_selftest(args.seed)
            for name, ok, detail in results:
                print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
            return 0 if all(ok for _, ok, _ in results) else 1
        cfg = _config(args)
        if args.command == "prepare":
            prepare(cfg, cfg.out_dir, gan=not args.no_gan, disc_steps=args.disc_steps)
            print(f"prerequisites written to {cfg.out_dir}")
        elif args.command == "animate":
            report = run_pipeline(cfg)
            print(f"{report.summary['frames']} frames written to {cfg.out_dir}")
            if report.summary["envelope_correlation"] is not None:
                print(f"mouth opening vs RMS envelope r = {report.summary['envelope_correlation']:.4f}")
        elif args.command == "iddiff":
            print(json.dumps(run_internal_difference(cfg), indent=2, sort_keys=True))
    except (ConfigError, PipelineError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
