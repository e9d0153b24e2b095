"""Merge two toy fine-tunes (similar and dissimilar pairs) with mi-task-arithmetic + apl-tanh."""

import argparse
import json
import warnings

from aplmerge import bench


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--preset", choices=sorted(bench.PRESETS), default="default")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--ratio", type=float, default=0.9)
    ap.add_argument("--epsilon", type=float, default=0.05)
    ap.add_argument("--provider", choices=("causal", "gradient"), default="causal")
    ap.add_argument("--out", help="keep the run directory (checkpoints, data) here")
    args = ap.parse_args()
    warnings.filterwarnings("ignore", "partitions differ in size")
    for name, angles in (("similar", bench.SIMILAR_ANGLES), ("dissimilar", bench.DISSIMILAR_ANGLES)):
        res = bench.two_task_merge(
            bench.PRESETS[args.preset], args.seed, angles, args.ratio, args.epsilon, args.provider,
            directory=None if args.out is None else f"{args.out}/{name}",
        )
        print(name, json.dumps(res, indent=2))


if __name__ == "__main__":
    main()
