"""Sweep the voting IoU threshold on the synthetic jittered-detections benchmark.

    python scripts/voting_benchmark.py --seeds 0 1 2 --thresholds 0.3 0.5 0.7 0.854 0.95
"""
from __future__ import annotations

import argparse

import numpy as np

from ionlab.benchmark import VotingBenchConfig, voting_benchmark


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="*", default=[0, 1, 2, 3])
    p.add_argument("--thresholds", type=float, nargs="*", default=[0.3, 0.5, 0.6, 0.7, 0.8, 0.854, 0.9])
    p.add_argument("--images", type=int, default=300)
    args = p.parse_args(argv)

    votes = [None, *args.thresholds]
    rows = {v: [] for v in votes}
    for seed in args.seeds:
        r = voting_benchmark(VotingBenchConfig(seed=seed, n_images=args.images), votes)
        for v in votes:
            rows[v].append((r[v][0.5], r[v][0.85]))
    base = np.mean(rows[None], axis=0)
    print(f"{'vote IoU':<10}{'AP@0.5':>9}{'AP@0.85':>9}{'dAP@0.5':>10}{'dAP@0.85':>10}   (mean of {len(args.seeds)} seeds)")
    for v in votes:
        m = np.mean(rows[v], axis=0)
        label = "no vote" if v is None else f"{v:g}"
        print(f"{label:<10}{m[0]:>9.4f}{m[1]:>9.4f}{m[0] - base[0]:>+10.4f}{m[1] - base[1]:>+10.4f}")


if __name__ == "__main__":
    main()
