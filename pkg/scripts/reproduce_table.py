"""Run the learned pipeline over several seeds for the single-goal and four-goal tasks and print the table.

    python3 scripts/reproduce_table.py --seeds 5 --out runs/table
    python3 scripts/reproduce_table.py --seeds 2 --mode oracle --set wm.rollouts=500

All runs of one goal set share one trained world model (model_seed), only the master seed varies.
"""
import argparse
import logging
import sys
from pathlib import Path

from goalback.cli import build_config
from goalback.pipeline import Pipeline, read_stats, report_table


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--model-seed", type=int, default=0)
    ap.add_argument("--out", default="runs/table")
    ap.add_argument("--config", type=Path)
    ap.add_argument("--mode", choices=("learned", "oracle"))
    ap.add_argument("--set", action="append", metavar="KEY=VALUE")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    stats = []
    for goals in ("bottom-left", "corners"):
        for seed in range(args.seeds):
            ns = argparse.Namespace(config=args.config, seed=seed, out=args.out, mode=args.mode,
                                    set=(args.set or []) + [f"goals={goals}", f"model_seed={args.model_seed}"])
            cfg = build_config(ns)
            cfg.out = str(Path(args.out) / f"{goals}-s{seed}")
            rep = Pipeline(cfg.validate()).run()
            print(f"{goals} seed {seed}: return {rep.return_pct:.1f}% closest {rep.closest_pct:.1f}%",
                  file=sys.stderr)
            stats.append(read_stats(Path(cfg.out) / "stats.tsv"))
    sys.stdout.write(report_table(stats))


if __name__ == "__main__":
    main()
