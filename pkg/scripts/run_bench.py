"""Pruning comparison (magnitude / dare / apl-linear) across drop ratios; writes a CSV and prints a summary."""

import argparse
import logging
import warnings

from aplmerge import bench
from aplmerge.store import atomic_write_text


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--preset", choices=sorted(bench.PRESETS), default="default")
    ap.add_argument("--tasks", type=int, default=2)
    ap.add_argument("--ratios", type=float, nargs="+", default=list(bench.DEFAULT_RATIOS))
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--provider", choices=("causal", "gradient"), default="gradient")
    ap.add_argument("--level", choices=("layer", "hidden"), default="hidden")
    ap.add_argument("--csv", default="bench.csv")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    warnings.filterwarnings("ignore", "partitions differ in size")
    rows = bench.pruning_comparison(
        bench.PRESETS[args.preset], args.tasks, args.ratios, range(args.seeds), level=args.level, provider=args.provider
    )
    atomic_write_text(args.csv, bench.rows_to_csv(rows))
    print(bench.format_summary(bench.summarize(rows)))


if __name__ == "__main__":
    main()
