"""Train the toy ablation variants on shared data and print an AP table.

    python scripts/run_ablation.py                       # full toy budget, all variants
    python scripts/run_ablation.py --iters 200 --n-train 500 --variants ion conv5_only
"""
from __future__ import annotations

import argparse
import csv
import logging
import time
from pathlib import Path

from ionlab.experiments import VARIANTS, ToyBudget, final_loss, run_ablation, shrink
from ionlab.train import write_curve_csv

COLUMNS = ("map50", "map", "ar", "ap_small", "ap_medium")


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--variants", nargs="*", default=list(VARIANTS), choices=sorted(VARIANTS))
    p.add_argument("--iters", type=int, help="override the update count")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/ablation", help="directory for results.csv and per-variant curves")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    budget = ToyBudget(seed=args.seed)
    overrides = {k: v for k, v in dict(iters=args.iters, n_train=args.n_train, n_test=args.n_test).items()
                 if v is not None}
    budget = shrink(budget, **overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(name, r):
        m = r["metrics"]
        print(f"{name:<14} AP50 {m['map50']:.3f}  mAP {m['map']:.3f}  loss {final_loss(r['curve']):.3f}  "
              f"train {r['train_seconds'] / 60:.1f} min", flush=True)
        write_curve_csv(r["curve"], out / f"curve_{name}.csv")

    t0 = time.perf_counter()
    results = run_ablation(tuple(args.variants), budget, progress)
    with open(out / "results.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["variant", *COLUMNS, "final_loss", "train_seconds"])
        for name, r in results.items():
            w.writerow([name, *(f"{r['metrics'][c]:.4f}" for c in COLUMNS), f"{final_loss(r['curve']):.4f}",
                        f"{r['train_seconds']:.1f}"])
    print(f"\n{'variant':<14}" + "".join(f"{c:>11}" for c in COLUMNS))
    for name, r in results.items():
        print(f"{name:<14}" + "".join(f"{r['metrics'][c]:>11.3f}" for c in COLUMNS))
    print(f"\ntotal {(time.perf_counter() - t0) / 60:.1f} min; results in {out / 'results.csv'}")


if __name__ == "__main__":
    main()
