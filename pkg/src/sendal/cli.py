"""Command-line entry point: ``sendal {synth,refine,train,infer,eval,bench}``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .evaluation import anchored_walk_forward, format_summary, latency_bench, write_reports_csv
from .model import Branch, CheckpointError, count_macs, load_checkpoint, save_checkpoint
from .refine import (DEFAULT_INTERVAL_S, DEFAULT_LAMBDA_HP, DEFAULT_SMA_K, CsvParseError, load_csv,
                     load_refined_csv, make_windows, refine_pair, save_refined_csv)
from .synth import PROFILES, gen_dataset, profile
from .training import TrainConfig, train_full

CORE_CHOICES = ("lstm", "gru", "attention")


class CliError(Exception):
    pass


def _add_refine_flags(p):
    p.add_argument("--interval", type=float, default=DEFAULT_INTERVAL_S, help="grid step in seconds")
    p.add_argument("--sma-k", type=int, default=DEFAULT_SMA_K, help="trailing SMA window")
    p.add_argument("--lambda-hp", type=float, default=DEFAULT_LAMBDA_HP, help="HP smoothing weight")


def _add_train_flags(p):
    p.add_argument("--config", type=Path, help="key=value training config file")
    p.add_argument("--core", choices=CORE_CHOICES, default="lstm")
    p.add_argument("--window-n", type=int)
    p.add_argument("--xi", type=float)
    p.add_argument("--lambda-smooth", type=int)
    p.add_argument("--w", type=float)
    p.add_argument("--n-mag", type=float)
    p.add_argument("--theta", type=float)
    p.add_argument("--skip-period", type=int)
    p.add_argument("--epochs-1", type=int)
    p.add_argument("--epochs-2", type=int)
    p.add_argument("--epochs-3", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sendal", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic sensor pair")
    p.add_argument("--profile", choices=sorted(PROFILES), default="env-a")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration-h", type=float, default=48.0)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    _add_refine_flags(p)

    p = sub.add_parser("refine", help="refine two raw CSVs into a paired CSV")
    p.add_argument("--raw-x", type=Path, required=True, help="low-cost sensor raw CSV")
    p.add_argument("--raw-y", type=Path, required=True, help="reference sensor raw CSV")
    p.add_argument("--out", type=Path, required=True)
    _add_refine_flags(p)

    p = sub.add_parser("train", help="bottom-up training to a checkpoint")
    p.add_argument("--refined", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--log", type=Path, help="training log CSV (default <out>.log.csv)")
    p.add_argument("--labels", type=Path, help="label dump CSV (default <out>.labels.csv)")
    _add_train_flags(p)

    p = sub.add_parser("infer", help="routed inference over every window")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--refined", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--skip-period", type=int, help="override the checkpoint's gate period")

    p = sub.add_parser("eval", help="anchored walk-forward evaluation")
    p.add_argument("--refined", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="fold report CSV")
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--latency-repeats", type=int, default=0,
                   help="also time inference per fold (0 disables)")
    _add_train_flags(p)

    p = sub.add_parser("bench", help="latency and MAC report for a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--refined", type=Path, required=True)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--out", type=Path, help="optional CSV report")
    return parser


def _need_file(path: Path):
    if not path.is_file():
        raise CliError(f"input file not found: {path}")


def _need_parent(path: Path):
    parent = path.parent if str(path.parent) else Path(".")
    if not parent.is_dir():
        raise CliError(f"output directory does not exist: {parent}")


def _train_config(args) -> TrainConfig:
    overrides = {k: getattr(args, k) for k in ("window_n", "xi", "lambda_smooth", "w", "n_mag", "theta",
                                               "skip_period", "epochs_1", "epochs_2", "epochs_3", "lr",
                                               "batch_size", "seed")}
    if args.config is not None:
        _need_file(args.config)
        return TrainConfig.from_file(args.config, **overrides)
    return TrainConfig(**{k: v for k, v in overrides.items() if v is not None})


def cmd_synth(args):
    if not args.out.is_dir():
        _need_parent(args.out)  # a missing leaf directory is created
    cfg = profile(args.profile, seed=args.seed, duration_s=args.duration_h * 3600.0,
                  base_interval_s=args.interval)
    ds, pair = gen_dataset(cfg, out_dir=args.out, sma_k=args.sma_k, lambda_hp=args.lambda_hp)
    prov = (f"profile={args.profile} seed={args.seed} duration_h={args.duration_h!r} "
            f"sma_k={args.sma_k} lambda_hp={args.lambda_hp!r}")
    save_refined_csv(ds, args.out / "refined.csv", provenance=prov)
    print(f"wrote {args.out / 'raw_x.csv'}, {args.out / 'raw_y.csv'}, {args.out / 'refined.csv'} "
          f"({len(ds)} refined samples, {len(pair.event_log)} events)")


def cmd_refine(args):
    _need_file(args.raw_x)
    _need_file(args.raw_y)
    _need_parent(args.out)
    ds = refine_pair(load_csv(args.raw_x), load_csv(args.raw_y), interval_s=args.interval,
                     sma_k=args.sma_k, lambda_hp=args.lambda_hp)
    save_refined_csv(ds, args.out, provenance=f"sma_k={args.sma_k} lambda_hp={args.lambda_hp!r}")
    print(f"wrote {args.out} ({len(ds)} samples)")


def cmd_train(args):
    _need_file(args.refined)
    log_path = args.log or args.out.with_name(args.out.name + ".log.csv")
    label_path = args.labels or args.out.with_name(args.out.name + ".labels.csv")
    for p in (args.out, log_path, label_path):
        _need_parent(p)
    config = _train_config(args)
    ds = load_refined_csv(args.refined)
    windows = make_windows(ds, config.window_n)
    result = train_full(windows, config, args.core)
    save_checkpoint(result.model, args.out)
    prov = f"core={args.core} {config.provenance()}"
    result.write_log(log_path, provenance=prov)
    result.labels.to_csv(label_path, provenance=prov)
    print(f"wrote {args.out}, {log_path}, {label_path}")


def cmd_infer(args):
    _need_file(args.checkpoint)
    _need_file(args.refined)
    _need_parent(args.out)
    model = load_checkpoint(args.checkpoint)
    ds = load_refined_csv(args.refined)
    windows = make_windows(ds, model.window_n)
    outputs = model.infer_stream(windows.values, skip_period=args.skip_period)
    p = model.skip_period if args.skip_period is None else args.skip_period
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# core={model.core_kind} window_n={model.window_n} theta={model.theta!r} "
                 f"skip_period={p} h_lin={model.h_lin} hidden_size={model.hidden_size}\n")
        fh.write("i,x_hat,branch,gate,macs\n")
        for i, (value, dec) in zip(windows.target_index.tolist(), outputs):
            fh.write(f"{i},{value!r},{dec.branch.value},{dec.gate_value!r},{count_macs(model, dec)}\n")
    n_lin = sum(d.branch is Branch.LINEAR for _, d in outputs)
    print(f"wrote {args.out} ({len(outputs)} windows, linear fraction {n_lin / max(len(outputs), 1):.3f})")


def cmd_eval(args):
    _need_file(args.refined)
    _need_parent(args.out)
    config = _train_config(args)
    ds = load_refined_csv(args.refined)
    result = anchored_walk_forward(ds, config, args.core, args.folds, latency_repeats=args.latency_repeats)
    write_reports_csv(result, args.out, provenance=f"core={args.core} folds={args.folds} {config.provenance()}")
    print(format_summary(result))


def cmd_bench(args):
    _need_file(args.checkpoint)
    _need_file(args.refined)
    if args.out is not None:
        _need_parent(args.out)
    if args.repeats < 1:
        raise CliError("--repeats must be >= 1")
    model = load_checkpoint(args.checkpoint)
    windows = make_windows(load_refined_csv(args.refined), model.window_n)
    repeats = max(args.repeats, -(-1000 // len(windows)))
    rows = []
    _, comp = model.predict_batch(windows.values)
    lin_frac = float(np.mean(~comp))
    mac_lin = count_macs(model, Branch.LINEAR)
    mac_comp = count_macs(model, Branch.COMPONENT)
    macs = {"auto": lin_frac * mac_lin + (1 - lin_frac) * mac_comp,
            "linear": float(model.linear.macs()), "component": float(model.component.macs())}
    for route in ("auto", "linear", "component"):
        st = latency_bench(model, windows.values, repeats, route)
        rows.append((route, st.count, st.mean_us, st.median_us, st.p95_us, macs[route]))
    header = "route,count,mean_us,median_us,p95_us,mac_per_inference"
    print(f"{'route':<10} {'count':>7} {'mean_us':>9} {'median_us':>10} {'p95_us':>9} {'MACs':>10}")
    for r in rows:
        print(f"{r[0]:<10} {r[1]:>7} {r[2]:>9.2f} {r[3]:>10.2f} {r[4]:>9.2f} {r[5]:>10.1f}")
    print(f"linear fraction {lin_frac:.3f}")
    if args.out is not None:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"# core={model.core_kind} repeats={repeats} dtype=float32\n{header}\n")
            for r in rows:
                fh.write(",".join(str(v) if isinstance(v, (int, str)) else repr(v) for v in r) + "\n")


COMMANDS = {"synth": cmd_synth, "refine": cmd_refine, "train": cmd_train, "infer": cmd_infer,
            "eval": cmd_eval, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except (CliError, CsvParseError, CheckpointError, ValueError, OSError) as exc:
        print(f"sendal {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
