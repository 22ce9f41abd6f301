"""Three-phase bottom-up training.

1. Train the linear and component branches independently on squared error.
2. Derive routing labels from their per-window errors and fit the gate with BCE.
3. Freeze the gate, the branch input layers and the core; fine-tune only the two
   output layers, each on the windows the frozen gate sends to it.
"""

from __future__ import annotations

import dataclasses
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .model import Scaler, SenDaLModel
from .nn import Adam, Dense
from .refine import WindowSet

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    xi: float = 0.0
    lambda_smooth: int = 10
    w: float = 0.25
    n_mag: float = 4.0
    theta: float = 0.5
    window_n: int = 20
    h_lin: int = 8
    hidden_size: int | None = None
    skip_period: int = 1
    epochs_1: int = 100
    epochs_2: int = 50
    epochs_3: int = 30
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.xi < 0:
            raise ValueError("xi must be >= 0")
        if int(self.lambda_smooth) != self.lambda_smooth or self.lambda_smooth < 1:
            raise ValueError("lambda_smooth must be an integer >= 1")
        if not self.n_mag > 0:
            raise ValueError("n_mag must be > 0")
        if self.w < 0:
            raise ValueError("w must be >= 0")
        if not 0 < self.theta < 1:
            raise ValueError("theta must lie in (0, 1)")
        if min(self.epochs_1, self.epochs_2, self.epochs_3) < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.batch_size < 1 or self.window_n < 1 or self.h_lin < 1 or self.skip_period < 1:
            raise ValueError("batch_size, window_n, h_lin and skip_period must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={'none' if v is None else v}")
        return "\n".join(lines) + "\n"

    def provenance(self) -> str:
        return " ".join(line for line in self.to_text().split("\n") if line)

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key=value")
            key, val = (part.strip() for part in line.split("=", 1))
            if key not in types:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            values[key] = _parse_value(types[key], val, lineno)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_text(fh.read(), **overrides)


def _parse_value(typ: str, val: str, lineno: int):
    try:
        if "None" in typ:
            return None if val.lower() == "none" else int(val)
        if typ == "int":
            return int(val)
        return float(val)
    except ValueError:
        raise ValueError(f"config line {lineno}: bad value {val!r}") from None


# -- routing labels ---------------------------------------------------------------

@dataclass
class LabelSet:
    hard: np.ndarray
    smoothed: np.ndarray
    instability: np.ndarray
    soft: np.ndarray

    def to_csv(self, path, provenance: str | None = None) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            if provenance:
                fh.write(f"# {provenance}\n")
            fh.write("i,hard,smoothed,instability,soft\n")
            for i, row in enumerate(zip(self.hard.tolist(), self.smoothed.tolist(),
                                        self.instability.tolist(), self.soft.tolist())):
                fh.write(f"{i},{row[0]},{row[1]},{row[2]},{row[3]!r}\n")


def _trailing_sum(v: np.ndarray, lam: int) -> np.ndarray:
    """``out[i] = sum(v[max(0, i-lam+1) .. i])``."""
    csum = np.concatenate(([0], np.cumsum(v)))
    idx = np.arange(v.size)
    return csum[idx + 1] - csum[np.maximum(0, idx - lam + 1)]


def hard_labels(y: np.ndarray, pred_linear: np.ndarray, pred_component: np.ndarray,
                xi: float = 0.0) -> np.ndarray:
    """1 where the linear branch is at least as good as the component up to margin ``xi``."""
    y = np.asarray(y, dtype=float)
    err_l = np.abs(y - pred_linear)
    err_c = np.abs(y - pred_component)
    return (err_l < err_c + xi).astype(np.int64)


def smoothed_labels(hard: np.ndarray, lambda_smooth: int) -> np.ndarray:
    """1 (prefer component) where fewer than half of the trailing hard labels are 1.

    The window holds ``lambda`` labels, or all labels so far during warm-up.
    """
    if lambda_smooth < 1:
        raise ValueError("lambda_smooth must be >= 1")
    hard = np.asarray(hard, dtype=np.int64)
    count = np.minimum(np.arange(1, hard.size + 1), lambda_smooth)
    return (_trailing_sum(hard, lambda_smooth) < count / 2).astype(np.int64)


def instability(hard: np.ndarray, lambda_smooth: int) -> np.ndarray:
    """Number of hard-label flips ``y[j] != y[j-1]`` for ``j`` in the trailing window."""
    if lambda_smooth < 1:
        raise ValueError("lambda_smooth must be >= 1")
    hard = np.asarray(hard, dtype=np.int64)
    flips = np.zeros_like(hard)
    flips[1:] = hard[1:] ^ hard[:-1]
    return _trailing_sum(flips, lambda_smooth)


def magnify(v, n_mag: float = 4.0):
    """``(n+1) v / (n v + 1)``: maps [0, 1] onto itself, lifting small values."""
    if not n_mag > 0:
        raise ValueError("n_mag must be > 0")
    arr = np.asarray(v, dtype=float)
    if np.any((arr < 0) | (arr > 1)) or np.any(np.isnan(arr)):
        raise ValueError("magnify expects values in [0, 1]")
    out = (n_mag + 1.0) * arr / (n_mag * arr + 1.0)
    return float(out) if out.ndim == 0 else out


def soft_labels(smoothed: np.ndarray, instab: np.ndarray, w: float = 0.25, n_mag: float = 4.0) -> np.ndarray:
    raw = np.asarray(smoothed, dtype=float) + w * np.asarray(instab, dtype=float)
    return magnify(np.clip(raw, 0.0, 1.0), n_mag)


def make_labels(y, pred_linear, pred_component, config: TrainConfig) -> LabelSet:
    hard = hard_labels(y, pred_linear, pred_component, config.xi)
    sm = smoothed_labels(hard, config.lambda_smooth)
    s = instability(hard, config.lambda_smooth)
    return LabelSet(hard, sm, s, np.atleast_1d(soft_labels(sm, s, config.w, config.n_mag)))


# -- optimisation loops -------------------------------------------------------------

def _batches(m: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(m)
    for start in range(0, m, batch_size):
        yield perm[start:start + batch_size]


def _fit_mse(branch, xn, yn, epochs, lr, batch_size, rng, y_scale=1.0) -> list[float]:
    """Minibatch Adam on mean squared error; returns mean epoch loss in sensor units^2."""
    params = branch.named_params()
    opt = Adam(lr)
    history = []
    for _ in range(epochs):
        total = 0.0
        for idx in _batches(len(yn), batch_size, rng):
            out, cache = branch.forward(xn[idx])
            resid = out - yn[idx]
            total += float(resid @ resid)
            grads = branch.backward(2.0 * resid / idx.size, cache)
            opt.step(params, grads)
        history.append(total / len(yn) * y_scale ** 2)
    return history


def _bce(z, target):
    return float(np.mean(np.logaddexp(0.0, z) - target * z))


def _fit_bce(embedding, xn, target, epochs, lr, batch_size, rng) -> list[float]:
    params = embedding.named_params()
    opt = Adam(lr)
    history = []
    for _ in range(epochs):
        total = 0.0
        for idx in _batches(len(target), batch_size, rng):
            z, cache = embedding.linear.forward(xn[idx])
            z = z[:, 0]
            total += _bce(z, target[idx]) * idx.size
            g = 1.0 / (1.0 + np.exp(-z))
            grads = embedding.backward_logits((g - target[idx]) / idx.size, (cache, g))
            opt.step(params, grads)
        history.append(total / len(target))
    return history


def _fine_tune_output(layer: Dense, features, yn, epochs, lr, batch_size, rng, y_scale) -> tuple[list[float], float, float]:
    """Adam on a single output layer over fixed features, keeping the best epoch.

    Returns the loss history and the partition MSE before and after (sensor units^2).
    """
    def full_loss():
        r = layer.forward(features)[0][:, 0] - yn
        return float(r @ r) / len(yn)

    opt = Adam(lr)
    best = full_loss()
    before = best
    best_params = {k: v.copy() for k, v in layer.params.items()}
    history = []
    for _ in range(epochs):
        for idx in _batches(len(yn), batch_size, rng):
            out, cache = layer.forward(features[idx])
            resid = out[:, 0] - yn[idx]
            _, grads = layer.backward((2.0 * resid / idx.size)[:, None], cache)
            opt.step(layer.params, grads)
        cur = full_loss()
        history.append(cur * y_scale ** 2)
        if cur < best:
            best = cur
            best_params = {k: v.copy() for k, v in layer.params.items()}
    for k, v in best_params.items():
        layer.params[k][...] = v
    return history, before * y_scale ** 2, best * y_scale ** 2


# -- phases -------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: SenDaLModel
    baseline: SenDaLModel  # branches as they were after phase 1
    labels: LabelSet
    log: list[tuple[str, int, float]] = field(default_factory=list)
    final_losses: dict[str, float] = field(default_factory=dict)

    def write_log(self, path, provenance: str | None = None) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            if provenance:
                fh.write(f"# {provenance}\n")
            fh.write("phase,epoch,loss\n")
            for phase, epoch, loss in self.log:
                fh.write(f"{phase},{epoch},{loss!r}\n")


def _check_windows(windows: WindowSet, config: TrainConfig):
    if len(windows) < 2:
        raise ValueError("training needs at least N+1 aligned samples (2 windows)")
    if windows.n != config.window_n:
        raise ValueError(f"windows have length {windows.n}, config expects {config.window_n}")


def new_model(config: TrainConfig, core_kind: str) -> SenDaLModel:
    return SenDaLModel(window_n=config.window_n, core_kind=core_kind, hidden_size=config.hidden_size,
                       h_lin=config.h_lin, theta=config.theta, skip_period=config.skip_period,
                       seed=config.seed)


def train_single_models(model: SenDaLModel, windows: WindowSet, config: TrainConfig,
                        log_rows: list | None = None) -> dict[str, float]:
    """Phase 1: fit the scaler, then each branch on its own squared-error objective."""
    _check_windows(windows, config)
    model.scaler = Scaler.fit(windows.values, windows.targets)
    xn = model.normalize(windows.values)
    yn = (windows.targets - model.scaler.y_mean) / model.scaler.y_scale
    ys = model.scaler.y_scale
    rng = np.random.default_rng([config.seed, 1])
    losses = {}
    for name, branch in (("linear", model.linear), ("component", model.component)):
        hist = _fit_mse(branch, xn, yn, config.epochs_1, config.lr, config.batch_size, rng, ys)
        if log_rows is not None:
            log_rows.extend((name, e, v) for e, v in enumerate(hist))
        r = branch.forward(xn)[0] - yn
        losses[name] = float(r @ r) / len(yn) * ys ** 2
    return losses


def train_classifier(model: SenDaLModel, windows: WindowSet, labels: LabelSet, config: TrainConfig,
                     log_rows: list | None = None) -> float:
    """Phase 2: fit the gate to the soft labels with binary cross-entropy."""
    xn = model.normalize(windows.values)
    target = np.asarray(labels.soft, dtype=float)
    rng = np.random.default_rng([config.seed, 2])
    hist = _fit_bce(model.embedding, xn, target, config.epochs_2, config.lr, config.batch_size, rng)
    if log_rows is not None:
        log_rows.extend(("classifier", e, v) for e, v in enumerate(hist))
    return _bce(model.embedding.logits(xn), target)


def unified_fine_tune(model: SenDaLModel, windows: WindowSet, config: TrainConfig,
                      log_rows: list | None = None) -> dict[str, float]:
    """Phase 3: fine-tune fc_out1 / fc_out2 on the partitions chosen by the frozen gate."""
    xn = model.normalize(windows.values)
    yn = (windows.targets - model.scaler.y_mean) / model.scaler.y_scale
    ys = model.scaler.y_scale
    comp = model.embedding.forward(xn)[0] > model.theta
    rng = np.random.default_rng([config.seed, 3])
    result = {}
    parts = (("linear", ~comp, model.linear.features, model.linear.fc_out1),
             ("component", comp, model.component.features, model.component.fc_out2))
    for name, mask, features, layer in parts:
        if not mask.any():
            warnings.warn(f"fine-tune: empty {name} partition, skipping", RuntimeWarning, stacklevel=2)
            continue
        feats = features(xn[mask])
        hist, before, after = _fine_tune_output(layer, feats, yn[mask], config.epochs_3, config.lr,
                                                config.batch_size, rng, ys)
        if log_rows is not None:
            log_rows.extend((f"finetune-{name}", e, v) for e, v in enumerate(hist))
        result[f"{name}_before"] = before
        result[f"{name}_after"] = after
        result[f"{name}_count"] = int(mask.sum())
    return result


def branch_predictions(model: SenDaLModel, windows: WindowSet) -> tuple[np.ndarray, np.ndarray]:
    lin, _ = model.predict_batch(windows.values, route="linear")
    comp, _ = model.predict_batch(windows.values, route="component")
    return lin, comp


def train_full(windows: WindowSet, config: TrainConfig | None = None, core_kind: str = "lstm") -> TrainResult:
    """Run all three phases on time-ordered training windows."""
    config = config or TrainConfig()
    _check_windows(windows, config)
    model = new_model(config, core_kind)
    rows: list = []
    losses = train_single_models(model, windows, config, rows)
    baseline = model.copy()
    pred_l, pred_c = branch_predictions(model, windows)
    labels = make_labels(windows.targets, pred_l, pred_c, config)
    losses["classifier"] = train_classifier(model, windows, labels, config, rows)
    losses.update({f"finetune_{k}": v for k, v in unified_fine_tune(model, windows, config, rows).items()})
    log.debug("trained %s model on %d windows: %s", core_kind, len(windows), losses)
    return TrainResult(model, baseline, labels, rows, losses)
