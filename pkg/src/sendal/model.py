"""The routed calibration model: gate, cheap linear branch, deep component branch.

Inference is top-down: the gate ``sigmoid(L(s))`` is evaluated first and only the
selected branch runs (component iff gate > theta). Windows are normalized with a
per-model scaler fitted on training data; outputs are mapped back to sensor units.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable

import numpy as np

from .nn import CORES, Dense, Layer, leaky_relu, leaky_relu_backward, sigmoid
from .refine import WindowView

CHECKPOINT_VERSION = 1
DEFAULT_HIDDEN = {"lstm": 16, "gru": 16, "attention": 8}


class Branch(str, Enum):
    LINEAR = "linear"
    COMPONENT = "component"


@dataclass(frozen=True)
class RoutingDecision:
    gate_value: float
    branch: Branch
    gate_evaluated: bool = True


@dataclass
class Scaler:
    x_mean: float = 0.0
    x_scale: float = 1.0
    y_mean: float = 0.0
    y_scale: float = 1.0

    @classmethod
    def fit(cls, windows: np.ndarray, targets: np.ndarray) -> "Scaler":
        xs = float(np.std(windows)) or 1.0
        ys = float(np.std(targets)) or 1.0
        return cls(float(np.mean(windows)), xs, float(np.mean(targets)), ys)


class _Module:
    """Named collection of layers with flat parameter access."""

    layers: dict[str, Layer]

    def named_params(self) -> dict[str, np.ndarray]:
        return {f"{ln}.{pn}": arr for ln, layer in self.layers.items() for pn, arr in layer.params.items()}

    @staticmethod
    def _flatten(grads_by_layer: dict[str, dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
        return {f"{ln}.{pn}": g for ln, gs in grads_by_layer.items() for pn, g in gs.items()}


class EmbeddingLayer(_Module):
    def __init__(self, n: int, rng=None):
        self.linear = Dense(n, 1, rng)

    @property
    def layers(self):
        return {"linear": self.linear}

    def logits(self, xn):
        return self.linear.forward(xn)[0][:, 0]

    def forward(self, xn):
        z, cache = self.linear.forward(xn)
        g = sigmoid(z[:, 0])
        return g, (cache, g)

    def backward_logits(self, dz, cache):
        lin_cache, _ = cache
        _, grads = self.linear.backward(dz[:, None], lin_cache)
        return self._flatten({"linear": grads})


class LinearBranch(_Module):
    """``fc_out1(leaky_relu(fc_in1(s)))``."""

    def __init__(self, n: int, h_lin: int = 8, rng=None):
        self.fc_in1 = Dense(n, h_lin, rng)
        self.fc_out1 = Dense(h_lin, 1, rng)

    @property
    def layers(self):
        return {"fc_in1": self.fc_in1, "fc_out1": self.fc_out1}

    def features(self, xn):
        return leaky_relu(self.fc_in1.forward(xn)[0])

    def forward(self, xn):
        a, c_in = self.fc_in1.forward(xn)
        h = leaky_relu(a)
        out, c_out = self.fc_out1.forward(h)
        return out[:, 0], (c_in, a, c_out)

    def backward(self, dout, cache):
        c_in, a, c_out = cache
        dh, g_out = self.fc_out1.backward(dout[:, None], c_out)
        _, g_in = self.fc_in1.backward(leaky_relu_backward(dh, a), c_in)
        return self._flatten({"fc_in1": g_in, "fc_out1": g_out})

    def macs(self) -> int:
        return self.fc_in1.macs() + self.fc_out1.macs()


class ComponentBranch(_Module):
    """``fc_out2(core(fc_in2(s)))``; fc_in2 lifts each scalar reading to the core width."""

    def __init__(self, n: int, core_kind: str = "lstm", hidden_size: int | None = None, rng=None):
        if core_kind not in CORES:
            raise ValueError(f"unknown core kind {core_kind!r}")
        hidden = hidden_size or DEFAULT_HIDDEN[core_kind]
        self.core_kind = core_kind
        self.n = n
        self.fc_in2 = Dense(1, hidden, rng)
        if core_kind == "attention":
            self.core = CORES[core_kind](hidden, n, rng)
        else:
            self.core = CORES[core_kind](hidden, hidden, rng)
        self.fc_out2 = Dense(self.core.output_size, 1, rng)

    @property
    def layers(self):
        return {"fc_in2": self.fc_in2, "core": self.core, "fc_out2": self.fc_out2}

    def features(self, xn):
        seq = self.fc_in2.forward(xn[:, :, None])[0]
        return self.core.forward(seq)[0]

    def forward(self, xn):
        seq, c_in = self.fc_in2.forward(xn[:, :, None])
        h, c_core = self.core.forward(seq)
        out, c_out = self.fc_out2.forward(h)
        return out[:, 0], (c_in, c_core, c_out)

    def backward(self, dout, cache):
        c_in, c_core, c_out = cache
        dh, g_out = self.fc_out2.backward(dout[:, None], c_out)
        dseq, g_core = self.core.backward(dh, c_core)
        _, g_in = self.fc_in2.backward(dseq, c_in)
        return self._flatten({"fc_in2": g_in, "core": g_core, "fc_out2": g_out})

    def macs(self) -> int:
        return self.fc_in2.macs(self.n) + self.core.macs(self.n) + self.fc_out2.macs()


class SenDaLModel(_Module):
    def __init__(self, window_n: int = 20, core_kind: str = "lstm", hidden_size: int | None = None,
                 h_lin: int = 8, theta: float = 0.5, skip_period: int = 1, seed: int = 0):
        if not 0.0 < theta < 1.0:
            raise ValueError("theta must lie in (0, 1)")
        if skip_period < 1:
            raise ValueError("skip_period must be >= 1")
        if window_n < 1:
            raise ValueError("window_n must be positive")
        rng = np.random.default_rng(seed)
        self.window_n = window_n
        self.theta = float(theta)
        self.skip_period = int(skip_period)
        self.h_lin = h_lin
        self.embedding = EmbeddingLayer(window_n, rng)
        self.linear = LinearBranch(window_n, h_lin, rng)
        self.component = ComponentBranch(window_n, core_kind, hidden_size, rng)
        self.scaler = Scaler()
        self.counters: Counter = Counter()

    @property
    def core_kind(self) -> str:
        return self.component.core_kind

    @property
    def hidden_size(self) -> int:
        return self.component.core.hidden_size

    @property
    def layers(self):
        out = {f"embedding.{k}": v for k, v in self.embedding.layers.items()}
        out.update({f"linear.{k}": v for k, v in self.linear.layers.items()})
        out.update({f"component.{k}": v for k, v in self.component.layers.items()})
        return out

    @property
    def dtype(self):
        return self.embedding.linear.dtype

    def astype(self, dtype) -> "SenDaLModel":
        """Copy with every parameter cast (e.g. float32 for benchmarking)."""
        other = self.copy()
        for mod, names in ((other.embedding, ["linear"]), (other.linear, ["fc_in1", "fc_out1"]),
                           (other.component, ["fc_in2", "core", "fc_out2"])):
            for name in names:
                setattr(mod, name, getattr(mod, name).astype(dtype))
        return other

    def copy(self) -> "SenDaLModel":
        import copy
        other = copy.deepcopy(self)
        other.counters = Counter()
        return other

    # -- single-window inference ------------------------------------------------

    def _prepare(self, s) -> np.ndarray:
        values = s.values if isinstance(s, WindowView) else s
        values = np.asarray(values)
        if values.ndim != 1 or values.shape[0] != self.window_n:
            raise ValueError(f"window must have exactly {self.window_n} values, got shape {values.shape}")
        if values.dtype != self.dtype:
            values = values.astype(self.dtype)
        sc = self.scaler
        return ((values - sc.x_mean) / sc.x_scale)[None, :]

    def _to_units(self, out) -> float:
        return float(self.scaler.y_mean + self.scaler.y_scale * out[0])

    def _gate_n(self, xn) -> float:
        self.counters["gate"] += 1
        return float(self.embedding.forward(xn)[0][0])

    def _linear_n(self, xn) -> float:
        self.counters["linear"] += 1
        return self._to_units(self.linear.forward(xn)[0])

    def _component_n(self, xn) -> float:
        self.counters["component"] += 1
        return self._to_units(self.component.forward(xn)[0])

    def gate(self, s) -> float:
        return self._gate_n(self._prepare(s))

    def infer_linear(self, s) -> float:
        return self._linear_n(self._prepare(s))

    def infer_component(self, s) -> float:
        return self._component_n(self._prepare(s))

    def route(self, gate_value: float) -> Branch:
        return Branch.COMPONENT if gate_value > self.theta else Branch.LINEAR

    def _run_n(self, xn, branch: Branch) -> float:
        return self._component_n(xn) if branch is Branch.COMPONENT else self._linear_n(xn)

    def top_down_infer(self, s) -> tuple[float, RoutingDecision]:
        xn = self._prepare(s)
        g = self._gate_n(xn)
        branch = self.route(g)
        return self._run_n(xn, branch), RoutingDecision(g, branch, True)

    def infer_stream(self, windows: Iterable, skip_period: int | None = None) -> list[tuple[float, RoutingDecision]]:
        """Routed inference over a stream, re-evaluating the gate every ``skip_period`` windows."""
        p = self.skip_period if skip_period is None else int(skip_period)
        if p < 1:
            raise ValueError("skip_period must be >= 1")
        out = []
        last = None
        for pos, s in enumerate(windows):
            if isinstance(s, tuple):
                s = s[0]
            if pos % p == 0:
                value, last = self.top_down_infer(s)
            else:
                value = self._run_n(self._prepare(s), last.branch)
                last = RoutingDecision(last.gate_value, last.branch, False)
            out.append((value, last))
        return out

    # -- batch evaluation -------------------------------------------------------

    def normalize(self, windows: np.ndarray) -> np.ndarray:
        return (np.asarray(windows, dtype=self.dtype) - self.scaler.x_mean) / self.scaler.x_scale

    def gates(self, windows: np.ndarray) -> np.ndarray:
        return self.embedding.forward(self.normalize(windows))[0]

    def predict_batch(self, windows: np.ndarray, route: str = "auto") -> tuple[np.ndarray, np.ndarray]:
        """Vectorised routing over many windows.

        Returns ``(values, component_mask)``. ``route`` forces a branch when set to
        ``"linear"`` or ``"component"``; in ``"auto"`` each branch only sees its
        own windows.
        """
        xn = self.normalize(windows)
        m = xn.shape[0]
        if route == "auto":
            mask = self.embedding.forward(xn)[0] > self.theta
        elif route in ("linear", "component"):
            mask = np.full(m, route == "component")
        else:
            raise ValueError(f"unknown route {route!r}")
        out = np.empty(m, dtype=xn.dtype)
        if (~mask).any():
            out[~mask] = self.linear.forward(xn[~mask])[0]
        if mask.any():
            out[mask] = self.component.forward(xn[mask])[0]
        return self.scaler.y_mean + self.scaler.y_scale * out, mask


def count_macs(model: SenDaLModel, decision: RoutingDecision | Branch | str) -> int:
    """Multiply-accumulates actually executed for one routed inference.

    Counts dense/matmul work and gating products; activations, the input scaler
    and bias additions are not counted.
    """
    if isinstance(decision, RoutingDecision):
        branch, evaluated = decision.branch, decision.gate_evaluated
    else:
        branch, evaluated = Branch(decision), True
    total = model.embedding.linear.macs() if evaluated else 0
    if branch is Branch.COMPONENT:
        total += model.component.macs()
    else:
        total += model.linear.macs()
    return total


# -- checkpoints ----------------------------------------------------------------

class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class UnknownCoreKindError(CheckpointError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


_TOP_FIELDS = ("version", "core_kind", "window_n", "theta", "skip_period", "h_lin",
               "hidden_size", "dtype", "scaler", "params")
_SCALER_FIELDS = ("x_mean", "x_scale", "y_mean", "y_scale")


def checkpoint_dict(model: SenDaLModel) -> dict:
    sc = model.scaler
    return {
        "version": CHECKPOINT_VERSION,
        "core_kind": model.core_kind,
        "window_n": model.window_n,
        "theta": model.theta,
        "skip_period": model.skip_period,
        "h_lin": model.h_lin,
        "hidden_size": model.hidden_size,
        "dtype": np.dtype(model.dtype).name,
        "scaler": {k: float(getattr(sc, k)) for k in _SCALER_FIELDS},
        "params": {name: {"shape": list(arr.shape), "data": [float(v) for v in arr.reshape(-1)]}
                   for name, arr in model.named_params().items()},
    }


def save_checkpoint(model: SenDaLModel, path) -> None:
    text = json.dumps(checkpoint_dict(model), indent=1)
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_checkpoint(path) -> SenDaLModel:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointTruncatedError(f"{path}: unreadable or truncated checkpoint ({exc})") from None
    return model_from_dict(doc, str(path))


def model_from_dict(doc: dict, where: str = "checkpoint") -> SenDaLModel:
    if not isinstance(doc, dict):
        raise CheckpointFormatError(f"{where}: top level must be an object")
    if "version" not in doc:
        raise CheckpointFormatError(f"{where}: missing version")
    if doc["version"] != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{where}: unsupported version {doc['version']!r} "
                                     f"(expected {CHECKPOINT_VERSION})")
    unknown = set(doc) - set(_TOP_FIELDS)
    missing = set(_TOP_FIELDS) - set(doc)
    if unknown:
        raise CheckpointFormatError(f"{where}: unknown fields {sorted(unknown)}")
    if missing:
        raise CheckpointFormatError(f"{where}: missing fields {sorted(missing)}")
    if doc["core_kind"] not in CORES:
        raise UnknownCoreKindError(f"{where}: unknown core kind {doc['core_kind']!r}")
    scaler = doc["scaler"]
    if not isinstance(scaler, dict) or set(scaler) != set(_SCALER_FIELDS):
        raise CheckpointFormatError(f"{where}: scaler must have exactly {list(_SCALER_FIELDS)}")
    try:
        model = SenDaLModel(window_n=int(doc["window_n"]), core_kind=doc["core_kind"],
                            hidden_size=int(doc["hidden_size"]), h_lin=int(doc["h_lin"]),
                            theta=float(doc["theta"]), skip_period=int(doc["skip_period"]))
    except (TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"{where}: bad hyperparameters ({exc})") from None
    dtype = np.dtype(doc["dtype"])
    model.scaler = Scaler(**{k: float(scaler[k]) for k in _SCALER_FIELDS})
    params = model.named_params()
    blocks = doc["params"]
    if not isinstance(blocks, dict) or set(blocks) != set(params):
        got = set(blocks) if isinstance(blocks, dict) else set()
        raise CheckpointFormatError(f"{where}: parameter blocks differ; unexpected "
                                    f"{sorted(got - set(params))}, missing {sorted(set(params) - got)}")
    for name, arr in params.items():
        block = blocks[name]
        if not isinstance(block, dict) or set(block) != {"shape", "data"}:
            raise CheckpointFormatError(f"{where}: block {name} must have shape and data only")
        if tuple(block["shape"]) != arr.shape or len(block["data"]) != arr.size:
            raise CheckpointFormatError(f"{where}: block {name} has wrong shape")
        arr[...] = np.asarray(block["data"], dtype=np.float64).reshape(arr.shape)
    if dtype != np.float64:
        model = model.astype(dtype)
    return model
