"""Accuracy, reliability and cost metrics, plus anchored walk-forward evaluation."""

from __future__ import annotations

import gc
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .model import Branch, RoutingDecision, SenDaLModel, count_macs
from .refine import SensorPairDataset, WindowSet, make_windows
from .training import TrainConfig, train_full

MISS_THRESHOLDS = (3.0, 5.0, 10.0, 30.0)
MODELS = ("sendal", "linear", "component")


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ValueError("pred and truth must be 1-d arrays of equal length")
    if pred.size == 0:
        raise ValueError("metrics need at least one prediction")
    return pred, truth


def rmse(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def miss_ratio(pred, truth, theta_m: float) -> float:
    """Fraction of predictions with ``|pred - truth| >= theta_m``."""
    pred, truth = _pair(pred, truth)
    if not theta_m > 0:
        raise ValueError("theta_m must be positive")
    return float(np.mean(np.abs(pred - truth) >= theta_m))


# -- latency ----------------------------------------------------------------------

@dataclass
class LatencyStats:
    count: int
    mean_us: float
    median_us: float
    p95_us: float


def latency_bench(model: SenDaLModel, windows: np.ndarray, repeats: int = 1, route: str = "auto",
                  warmup: int = 50) -> LatencyStats:
    """Single-window wall-clock latency in 32-bit mode.

    Must run alone on the machine's only benchmarking thread. ``route`` is
    ``"auto"`` (gate then one branch), ``"linear"`` or ``"component"``.
    """
    windows = np.asarray(windows)
    if windows.ndim != 2:
        raise ValueError("windows must be a (count, N) array")
    if len(windows) * repeats < 1000:
        raise ValueError("latency benchmarking needs at least 1000 window evaluations")
    m32 = model.astype(np.float32)
    w32 = windows.astype(np.float32)
    fn = {"auto": m32.top_down_infer, "linear": m32.infer_linear, "component": m32.infer_component}[route]
    for k in range(min(warmup, len(w32))):
        fn(w32[k])
    samples = np.empty(len(w32) * repeats)
    clock = time.perf_counter_ns
    enabled = gc.isenabled()
    gc.disable()
    try:
        j = 0
        for _ in range(repeats):
            for w in w32:
                t0 = clock()
                fn(w)
                samples[j] = clock() - t0
                j += 1
    finally:
        if enabled:
            gc.enable()
    us = samples / 1000.0
    return LatencyStats(int(us.size), float(us.mean()), float(np.median(us)), float(np.percentile(us, 95)))


# -- walk-forward -------------------------------------------------------------------

@dataclass(frozen=True)
class Fold:
    fold_id: int
    train: tuple[int, int]  # sample index range [start, stop)
    test: tuple[int, int]


@dataclass(frozen=True)
class FoldPlan:
    length: int
    folds: tuple[Fold, ...]

    @property
    def fold_count(self):
        return len(self.folds)


def plan_folds(length: int, fold_count: int = 10, window_n: int = 20) -> FoldPlan:
    """Split ``length`` samples into ``fold_count + 1`` contiguous segments.

    Fold ``k`` trains on segments ``1..k`` (anchored at 0) and tests on ``k + 1``.
    """
    if fold_count < 1:
        raise ValueError("fold_count must be >= 1")
    if length < fold_count * (window_n + 10):
        raise ValueError(f"need at least {fold_count * (window_n + 10)} samples, got {length}")
    bounds = [round(k * length / (fold_count + 1)) for k in range(fold_count + 2)]
    if bounds[1] < window_n + 1:
        raise ValueError("first training segment is shorter than one window plus a sample")
    folds = tuple(Fold(k, (0, bounds[k]), (bounds[k], bounds[k + 1])) for k in range(1, fold_count + 1))
    return FoldPlan(length, folds)


def split_windows(windows: WindowSet, fold: Fold) -> tuple[WindowSet, WindowSet]:
    """Training windows end before the test segment; test windows target it."""
    ti = windows.target_index
    train = windows.subset((ti >= fold.train[0]) & (ti < fold.train[1]))
    test = windows.subset((ti >= fold.test[0]) & (ti < fold.test[1]))
    return train, test


@dataclass
class EvalReport:
    model: str
    fold_id: int | str
    rmse: float
    miss_ratio: dict[float, float]
    mac_per_inference: float
    linear_fraction: float
    latency_us: LatencyStats | None = None

    @property
    def component_fraction(self) -> float:
        return 1.0 - self.linear_fraction


@dataclass
class FoldEvaluation:
    fold: Fold
    n_train: int
    n_test: int
    reports: dict[str, EvalReport]
    predictions: dict[str, np.ndarray] = field(default_factory=dict)  # includes "truth"
    train_index: np.ndarray | None = None
    test_index: np.ndarray | None = None
    result: object | None = None  # TrainResult when keep_models is set


@dataclass
class WalkForwardResult:
    plan: FoldPlan
    folds: list[FoldEvaluation]
    aggregate: dict[str, EvalReport] = field(default_factory=dict)
    thresholds: tuple[float, ...] = MISS_THRESHOLDS

    def pooled(self, name: str) -> np.ndarray:
        """Test predictions of ``name`` (or ``"truth"``) concatenated over folds."""
        return np.concatenate([f.predictions[name] for f in self.folds])


def _report(model_name, fold_id, pred, truth, macs, linear_fraction, thresholds, latency=None):
    return EvalReport(model_name, fold_id, rmse(pred, truth),
                      {t: miss_ratio(pred, truth, t) for t in thresholds},
                      float(macs), float(linear_fraction), latency)


def evaluate_fold(model: SenDaLModel, baseline: SenDaLModel, test: WindowSet, fold_id,
                  thresholds=MISS_THRESHOLDS, latency_repeats: int = 0
                  ) -> tuple[dict[str, EvalReport], dict[str, np.ndarray]]:
    """Score SenDaL and the two phase-1 branches alone on the same test windows.

    Returns the reports and the raw predictions (plus ``"truth"``) by model name.
    """
    truth = test.targets
    pred, comp = model.predict_batch(test.values)
    lin_frac = float(np.mean(~comp))
    mac_lin = count_macs(model, RoutingDecision(0.0, Branch.LINEAR))
    mac_comp = count_macs(model, RoutingDecision(1.0, Branch.COMPONENT))
    macs = lin_frac * mac_lin + (1.0 - lin_frac) * mac_comp
    pred_l, _ = baseline.predict_batch(test.values, route="linear")
    pred_c, _ = baseline.predict_batch(test.values, route="component")
    lat = {name: None for name in MODELS}
    if latency_repeats > 0:
        reps = max(latency_repeats, math.ceil(1000 / len(test)))
        lat = {"sendal": latency_bench(model, test.values, reps, "auto"),
               "linear": latency_bench(baseline, test.values, reps, "linear"),
               "component": latency_bench(baseline, test.values, reps, "component")}
    preds = {"truth": truth, "sendal": pred, "linear": pred_l, "component": pred_c}
    return {
        "sendal": _report("sendal", fold_id, pred, truth, macs, lin_frac, thresholds, lat["sendal"]),
        "linear": _report("linear", fold_id, pred_l, truth, baseline.linear.macs(), 1.0, thresholds,
                          lat["linear"]),
        "component": _report("component", fold_id, pred_c, truth, baseline.component.macs(), 0.0,
                             thresholds, lat["component"]),
    }, preds


def _mean_stats(stats: list[LatencyStats | None]) -> LatencyStats | None:
    if any(s is None for s in stats):
        return None
    return LatencyStats(int(round(np.mean([s.count for s in stats]))),
                        float(np.mean([s.mean_us for s in stats])),
                        float(np.mean([s.median_us for s in stats])),
                        float(np.mean([s.p95_us for s in stats])))


def aggregate_reports(folds: list[FoldEvaluation], thresholds=MISS_THRESHOLDS) -> dict[str, EvalReport]:
    """Arithmetic mean of every per-fold metric, per model."""
    out = {}
    for name in MODELS:
        reps = [f.reports[name] for f in folds]
        out[name] = EvalReport(
            name, "aggregate",
            float(np.mean([r.rmse for r in reps])),
            {t: float(np.mean([r.miss_ratio[t] for r in reps])) for t in thresholds},
            float(np.mean([r.mac_per_inference for r in reps])),
            float(np.mean([r.linear_fraction for r in reps])),
            _mean_stats([r.latency_us for r in reps]),
        )
    return out


def anchored_walk_forward(data: SensorPairDataset | WindowSet, config: TrainConfig | None = None,
                          core_kind: str = "lstm", fold_count: int = 10,
                          thresholds=MISS_THRESHOLDS, latency_repeats: int = 0,
                          keep_models: bool = False) -> WalkForwardResult:
    """Train the full pipeline on each expanding prefix and test on the next segment."""
    config = config or TrainConfig()
    if isinstance(data, WindowSet):
        windows = data
        length = int(windows.target_index[-1]) + 1
    else:
        length = len(data)
        if length < fold_count * (config.window_n + 10):
            raise ValueError(f"need at least {fold_count * (config.window_n + 10)} samples, got {length}")
        windows = make_windows(data, config.window_n)
    plan = plan_folds(length, fold_count, config.window_n)
    folds = []
    for fold in plan.folds:
        train, test = split_windows(windows, fold)
        result = train_full(train, config, core_kind)
        reports, preds = evaluate_fold(result.model, result.baseline, test, fold.fold_id, thresholds,
                                       latency_repeats)
        folds.append(FoldEvaluation(fold, len(train), len(test), reports, preds,
                                    train.target_index, test.target_index,
                                    result if keep_models else None))
    return WalkForwardResult(plan, folds, aggregate_reports(folds, thresholds), tuple(thresholds))


# -- output -------------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _tkey(t: float) -> str:
    return f"{t:g}"


def report_columns(thresholds=MISS_THRESHOLDS) -> list[str]:
    cols = ["fold", "n_train", "n_test"]
    for m in MODELS:
        cols += [f"rmse_{m}"] + [f"miss{_tkey(t)}_{m}" for t in thresholds]
        cols += [f"mac_{m}", f"linear_fraction_{m}", f"latency_median_us_{m}",
                 f"latency_mean_us_{m}", f"latency_p95_us_{m}"]
    return cols


def _row(fold_id, n_train, n_test, reports, thresholds) -> list:
    row = [fold_id, n_train, n_test]
    for m in MODELS:
        r = reports[m]
        lat = r.latency_us
        row += [r.rmse] + [r.miss_ratio[t] for t in thresholds]
        row += [r.mac_per_inference, r.linear_fraction,
                None if lat is None else lat.median_us,
                None if lat is None else lat.mean_us,
                None if lat is None else lat.p95_us]
    return row


def write_reports_csv(result: WalkForwardResult, path, provenance: str | None = None) -> None:
    th = result.thresholds
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if provenance:
            fh.write(f"# {provenance}\n")
        fh.write(",".join(report_columns(th)) + "\n")
        for f in result.folds:
            fh.write(",".join(_fmt(v) for v in _row(f.fold.fold_id, f.n_train, f.n_test, f.reports, th)) + "\n")
        n_train = float(np.mean([f.n_train for f in result.folds]))
        n_test = float(np.mean([f.n_test for f in result.folds]))
        fh.write(",".join(_fmt(v) for v in _row("aggregate", n_train, n_test, result.aggregate, th)) + "\n")


def format_summary(result: WalkForwardResult) -> str:
    th = result.thresholds
    head = f"{'model':<10} {'rmse':>8} " + " ".join(f"{'miss@' + _tkey(t):>9}" for t in th)
    head += f" {'MACs':>10} {'linear%':>8}"
    lines = [f"anchored walk-forward, {result.plan.fold_count} folds (aggregate)", head, "-" * len(head)]
    for m in MODELS:
        r = result.aggregate[m]
        line = f"{m:<10} {r.rmse:>8.4f} " + " ".join(f"{r.miss_ratio[t]:>9.4f}" for t in th)
        line += f" {r.mac_per_inference:>10.1f} {100 * r.linear_fraction:>7.1f}%"
        lines.append(line)
    return "\n".join(lines)
