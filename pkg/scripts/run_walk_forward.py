"""Walk-forward comparison of SenDaL against its two branches on one or more profiles.

    python3 scripts/run_walk_forward.py --profiles env-a env-b env-c --core lstm --seeds 0 1 2
"""

import argparse
import csv
from pathlib import Path

import numpy as np

from sendal.evaluation import anchored_walk_forward, format_summary
from sendal.synth import gen_dataset, profile
from sendal.training import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--profiles", nargs="+", default=["env-a", "env-b", "env-c"])
    ap.add_argument("--core", default="lstm", choices=["lstm", "gru", "attention"])
    ap.add_argument("--seeds", nargs="+", type=int, default=[0])
    ap.add_argument("--hours", type=float, default=24.0)
    ap.add_argument("--folds", type=int, default=10)
    ap.add_argument("--epochs", type=int, default=20, help="epochs for each of the three phases")
    ap.add_argument("--xi", type=float, default=0.5)
    ap.add_argument("--out", type=Path, default=Path("walk_forward.csv"))
    args = ap.parse_args()

    cfg = TrainConfig(epochs_1=args.epochs, epochs_2=args.epochs, epochs_3=args.epochs, lr=3e-3, xi=args.xi)
    rows = []
    for prof in args.profiles:
        per_seed = []
        for seed in args.seeds:
            ds, _ = gen_dataset(profile(prof, seed=seed, duration_s=args.hours * 3600.0))
            res = anchored_walk_forward(ds, cfg, args.core, args.folds)
            print(f"\n{prof} seed {seed}\n{format_summary(res)}")
            per_seed.append(res.aggregate)
        for m in ("sendal", "linear", "component"):
            r = [a[m].rmse for a in per_seed]
            rows.append([prof, m, np.mean(r), np.std(r), np.mean([a[m].linear_fraction for a in per_seed])])
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["profile", "model", "rmse_mean", "rmse_std", "linear_fraction"])
        w.writerows(rows)
    print(f"\nwrote {args.out}")


if __name__ == "__main__":
    main()
