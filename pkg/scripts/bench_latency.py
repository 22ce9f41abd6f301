"""Median single-window latency and MACs for each core, routed vs forced-component.

    python3 scripts/bench_latency.py --profile env-a --hours 12
"""

import argparse

import numpy as np

from sendal.evaluation import latency_bench
from sendal.model import Branch, count_macs
from sendal.refine import make_windows
from sendal.synth import gen_dataset, profile, stable_fraction
from sendal.training import TrainConfig, train_full


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--profile", default="env-a")
    ap.add_argument("--seed", type=int, default=3)
    ap.add_argument("--hours", type=float, default=12.0)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--cores", nargs="+", default=["lstm", "gru", "attention"])
    args = ap.parse_args()

    cfg_s = profile(args.profile, seed=args.seed, duration_s=args.hours * 3600.0)
    ds, pair = gen_dataset(cfg_s)
    print(f"{args.profile}: stable fraction {stable_fraction(pair, cfg_s):.3f}")
    w = make_windows(ds, 20)
    cut = len(w) * 7 // 10
    train, test = w.subset(slice(0, cut)), w.subset(slice(cut, None))
    cfg = TrainConfig(epochs_1=args.epochs, epochs_2=args.epochs, epochs_3=args.epochs, lr=3e-3, xi=0.5)
    reps = -(-1000 // len(test))
    print(f"{'core':<10} {'lin%':>6} {'MACs':>9} {'comp MACs':>10} {'auto us':>8} {'comp us':>8} {'lin us':>7}")
    for core in args.cores:
        model = train_full(train, cfg, core).model
        _, mask = model.predict_batch(test.values)
        lf = float(np.mean(~mask))
        macs = lf * count_macs(model, Branch.LINEAR) + (1 - lf) * count_macs(model, Branch.COMPONENT)
        lat = {r: latency_bench(model, test.values, reps, r).median_us for r in ("auto", "component", "linear")}
        print(f"{core:<10} {100 * lf:>5.1f}% {macs:>9.0f} {model.component.macs():>10} "
              f"{lat['auto']:>8.1f} {lat['component']:>8.1f} {lat['linear']:>7.1f}")


if __name__ == "__main__":
    main()
