"""Effect of reusing the gate decision for p consecutive windows on accuracy and gate work.

    python3 scripts/sweep_skip_period.py --profile env-b
"""

import argparse

import numpy as np

from sendal.evaluation import rmse
from sendal.model import count_macs
from sendal.refine import make_windows
from sendal.synth import gen_dataset, profile
from sendal.training import TrainConfig, train_full


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--profile", default="env-b")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--hours", type=float, default=12.0)
    ap.add_argument("--periods", nargs="+", type=int, default=[1, 2, 4, 8, 16])
    args = ap.parse_args()

    ds, _ = gen_dataset(profile(args.profile, seed=args.seed, duration_s=args.hours * 3600.0))
    w = make_windows(ds, 20)
    cut = len(w) * 7 // 10
    cfg = TrainConfig(epochs_1=20, epochs_2=20, epochs_3=20, lr=3e-3, xi=0.5)
    model = train_full(w.subset(slice(0, cut)), cfg, "lstm").model
    test = w.subset(slice(cut, None))
    print(f"{'p':>3} {'rmse':>8} {'gate evals':>10} {'mean MACs':>10}")
    for p in args.periods:
        m = model.copy()
        out = m.infer_stream(list(test.values), p)
        pred = np.array([v for v, _ in out])
        macs = np.mean([count_macs(m, d) for _, d in out])
        print(f"{p:>3} {rmse(pred, test.targets):>8.4f} {m.counters['gate']:>10} {macs:>10.1f}")


if __name__ == "__main__":
    main()
