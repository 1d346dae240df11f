"""Command line entry point.

    goalback run --config exp.cfg --seed 3 --out runs/s3
    goalback report runs/*/stats.tsv

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import PipelineConfig, load_config
from .errors import ConfigError, StageError
from .pipeline import Pipeline, read_stats, report_table, run_pipeline

STAGE_VERBS = {
    "collect": "collect",
    "train": "train",
    "rollout": "rollout",
    "graph": "graph",
    "distill": "distill",
    "eval": "evaluate",
}


def build_config(args):
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if args.mode is not None:
        cfg.mode = args.mode
    for item in args.set or []:
        from .config import set_key

        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        set_key(cfg, key.strip(), value)
    return cfg.validate()


def make_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    parser = argparse.ArgumentParser(prog="goalback", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in list(STAGE_VERBS) + ["run"]:
        p = sub.add_parser(verb, parents=[common])
        p.add_argument("--config", type=Path)
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--mode", choices=("learned", "oracle"))
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    rp = sub.add_parser("report", parents=[common])
    rp.add_argument("stats", nargs="+", type=Path, help="stats.tsv files or run directories")
    return parser


def main(argv=None):
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "report":
            files = [p / "stats.tsv" if p.is_dir() else p for p in args.stats]
            missing = [str(f) for f in files if not f.exists()]
            if missing:
                raise ConfigError(f"missing stats files: {', '.join(missing)}")
            sys.stdout.write(report_table([read_stats(f) for f in files]))
            return 0
        cfg = build_config(args)
        if args.verb == "run":
            report = run_pipeline(cfg)
        else:
            pipe = Pipeline(cfg)
            result = getattr(pipe, STAGE_VERBS[args.verb])()
            report = result if args.verb == "eval" else None
        if report is not None:
            sys.stdout.write((Path(cfg.out) / "report.txt").read_text(encoding="utf-8"))
        else:
            print(f"{args.verb}: done ({cfg.out})")
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
