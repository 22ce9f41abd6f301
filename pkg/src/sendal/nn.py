"""Small numpy neural-network layers with hand-written backward passes.

Every layer keeps its trainable arrays in ``self.params`` (name -> ndarray) and
exposes ``forward(x) -> (out, cache)`` and ``backward(dout, cache) -> (dx, grads)``
where ``grads`` mirrors ``params``. Inputs carry a leading batch axis.
"""

from __future__ import annotations

import copy
import math
from typing import Callable

import numpy as np

LEAKY_SLOPE = 0.01


def sigmoid(x):
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(np.float64)
    # exp(-softplus(-x)) stays finite for any input
    return np.exp(-np.logaddexp(0.0, -x))


def sigmoid_backward(dout, y):
    """Gradient through a sigmoid given its output ``y``."""
    return dout * y * (1.0 - y)


def leaky_relu(x, slope=LEAKY_SLOPE):
    return np.where(x > 0, x, slope * x)


def leaky_relu_backward(dout, x, slope=LEAKY_SLOPE):
    return np.where(x > 0, dout, slope * dout)


def softmax(s, axis=-1):
    z = s - s.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _check_last_dim(x, expected, what):
    if x.ndim < 2 or x.shape[-1] != expected:
        raise ValueError(f"{what}: expected trailing dim {expected}, got shape {x.shape}")


class Layer:
    params: dict[str, np.ndarray]

    def copy(self):
        return copy.deepcopy(self)

    def astype(self, dtype):
        other = self.copy()
        other.params = {k: v.astype(dtype) for k, v in self.params.items()}
        return other

    def zero_params(self):
        for v in self.params.values():
            v[...] = 0.0
        return self

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype


class Dense(Layer):
    """Affine map ``x @ W.T + b`` over the last axis (any leading shape)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.n_out = n_in, n_out
        self.params = {
            "weight": _uniform(rng, n_in, (n_out, n_in)),
            "bias": _uniform(rng, n_in, (n_out,)),
        }

    def forward(self, x):
        _check_last_dim(x, self.n_in, "dense")
        return x @ self.params["weight"].T + self.params["bias"], x

    def backward(self, dout, cache):
        x = cache
        x2 = x.reshape(-1, self.n_in)
        d2 = dout.reshape(-1, self.n_out)
        grads = {"weight": d2.T @ x2, "bias": d2.sum(axis=0)}
        return dout @ self.params["weight"], grads

    def macs(self, rows: int = 1) -> int:
        return rows * self.n_in * self.n_out


class LSTM(Layer):
    """Single-layer LSTM returning the final hidden state; gate order i, f, g, o."""

    kind = "lstm"

    def __init__(self, input_size: int, hidden_size: int = 16, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_size, self.hidden_size = input_size, hidden_size
        h = hidden_size
        self.params = {
            "w_x": _uniform(rng, h, (4 * h, input_size)),
            "w_h": _uniform(rng, h, (4 * h, h)),
            "bias": _uniform(rng, h, (4 * h,)),
        }

    @property
    def output_size(self):
        return self.hidden_size

    def forward(self, seq):
        if seq.ndim != 3 or seq.shape[2] != self.input_size or seq.shape[1] < 1:
            raise ValueError(f"lstm: expected (batch, T>=1, {self.input_size}), got {seq.shape}")
        wx, wh, b = self.params["w_x"], self.params["w_h"], self.params["bias"]
        bsz, steps, _ = seq.shape
        h_dim = self.hidden_size
        h = np.zeros((bsz, h_dim), dtype=seq.dtype)
        c = np.zeros_like(h)
        xw = seq @ wx.T + b
        cache = []
        for t in range(steps):
            a = xw[:, t] + h @ wh.T
            i = sigmoid(a[:, :h_dim])
            f = sigmoid(a[:, h_dim:2 * h_dim])
            g = np.tanh(a[:, 2 * h_dim:3 * h_dim])
            o = sigmoid(a[:, 3 * h_dim:])
            c_prev, h_prev = c, h
            c = f * c_prev + i * g
            tc = np.tanh(c)
            h = o * tc
            cache.append((h_prev, c_prev, i, f, g, o, tc))
        return h, (seq, cache)

    def backward(self, dh, cache):
        seq, steps = cache
        wx, wh = self.params["w_x"], self.params["w_h"]
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        da_all = np.empty((seq.shape[0], seq.shape[1], 4 * self.hidden_size), dtype=dh.dtype)
        dc = np.zeros_like(dh)
        for t in range(len(steps) - 1, -1, -1):
            h_prev, c_prev, i, f, g, o, tc = steps[t]
            do = dh * tc
            dc = dc + dh * o * (1.0 - tc * tc)
            da = np.concatenate([
                dc * g * i * (1.0 - i),
                dc * c_prev * f * (1.0 - f),
                dc * i * (1.0 - g * g),
                do * o * (1.0 - o),
            ], axis=1)
            da_all[:, t] = da
            grads["w_h"] += da.T @ h_prev
            dh = da @ wh
            dc = dc * f
        flat = da_all.reshape(-1, da_all.shape[2])
        grads["w_x"] = flat.T @ seq.reshape(-1, self.input_size)
        grads["bias"] = flat.sum(axis=0)
        return da_all @ wx, grads

    def macs(self, steps: int) -> int:
        h, d = self.hidden_size, self.input_size
        # gate matmuls plus the three elementwise products of the cell update
        return steps * (4 * h * (d + h) + 3 * h)


class GRU(Layer):
    """Single-layer GRU returning the final hidden state; gate order r, z, n.

    The reset gate multiplies the hidden projection including its bias.
    """

    kind = "gru"

    def __init__(self, input_size: int, hidden_size: int = 16, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_size, self.hidden_size = input_size, hidden_size
        h = hidden_size
        self.params = {
            "w_x": _uniform(rng, h, (3 * h, input_size)),
            "w_h": _uniform(rng, h, (3 * h, h)),
            "b_x": _uniform(rng, h, (3 * h,)),
            "b_h": _uniform(rng, h, (3 * h,)),
        }

    @property
    def output_size(self):
        return self.hidden_size

    def forward(self, seq):
        if seq.ndim != 3 or seq.shape[2] != self.input_size or seq.shape[1] < 1:
            raise ValueError(f"gru: expected (batch, T>=1, {self.input_size}), got {seq.shape}")
        p = self.params
        bsz, steps, _ = seq.shape
        hd = self.hidden_size
        h = np.zeros((bsz, hd), dtype=seq.dtype)
        gx_all = seq @ p["w_x"].T + p["b_x"]
        cache = []
        for t in range(steps):
            gx = gx_all[:, t]
            gh = h @ p["w_h"].T + p["b_h"]
            r = sigmoid(gx[:, :hd] + gh[:, :hd])
            z = sigmoid(gx[:, hd:2 * hd] + gh[:, hd:2 * hd])
            n = np.tanh(gx[:, 2 * hd:] + r * gh[:, 2 * hd:])
            h_prev = h
            h = (1.0 - z) * n + z * h_prev
            cache.append((h_prev, r, z, n, gh[:, 2 * hd:]))
        return h, (seq, cache)

    def backward(self, dh, cache):
        seq, steps = cache
        p = self.params
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        dgx_all = np.empty((seq.shape[0], seq.shape[1], 3 * self.hidden_size), dtype=dh.dtype)
        for t in range(len(steps) - 1, -1, -1):
            h_prev, r, z, n, ghn = steps[t]
            dn = dh * (1.0 - z)
            dz = dh * (h_prev - n)
            dan = dn * (1.0 - n * n)
            dar = dan * ghn * r * (1.0 - r)
            daz = dz * z * (1.0 - z)
            dgx = np.concatenate([dar, daz, dan], axis=1)
            dgh = np.concatenate([dar, daz, dan * r], axis=1)
            dgx_all[:, t] = dgx
            grads["w_h"] += dgh.T @ h_prev
            grads["b_h"] += dgh.sum(axis=0)
            dh = dh * z + dgh @ p["w_h"]
        flat = dgx_all.reshape(-1, dgx_all.shape[2])
        grads["w_x"] = flat.T @ seq.reshape(-1, self.input_size)
        grads["b_x"] = flat.sum(axis=0)
        return dgx_all @ p["w_x"], grads

    def macs(self, steps: int) -> int:
        h, d = self.hidden_size, self.input_size
        # gate matmuls, r * (W h), and the two products of the interpolation
        return steps * (3 * h * (d + h) + 3 * h)


def sinusoidal_table(length: int, size: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(size)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / size)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class Attention(Layer):
    """Single-head self-attention block with sinusoidal positions and mean pooling.

    ``out = Wo @ mean_t(softmax(Q K^T / sqrt(d)) V) + bo`` with Q, K, V projected
    from the position-augmented input. The positional table is fixed, not trained.
    """

    kind = "attention"

    def __init__(self, model_size: int = 8, max_len: int = 20, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        d = model_size
        self.model_size = d
        self.input_size = d
        self.positions = sinusoidal_table(max_len, d)
        self.params = {
            "w_q": _uniform(rng, d, (d, d)),
            "w_k": _uniform(rng, d, (d, d)),
            "w_v": _uniform(rng, d, (d, d)),
            "w_o": _uniform(rng, d, (d, d)),
            "b_o": _uniform(rng, d, (d,)),
        }

    @property
    def output_size(self):
        return self.model_size

    @property
    def hidden_size(self):
        return self.model_size

    def astype(self, dtype):
        other = super().astype(dtype)
        other.positions = self.positions.astype(dtype)
        return other

    def forward(self, seq):
        d = self.model_size
        if seq.ndim != 3 or seq.shape[2] != d:
            raise ValueError(f"attention: expected (batch, T, {d}), got {seq.shape}")
        steps = seq.shape[1]
        if steps > self.positions.shape[0]:
            raise ValueError(f"attention: sequence length {steps} exceeds positional table")
        p = self.params
        xp = seq + self.positions[:steps]
        q = xp @ p["w_q"].T
        k = xp @ p["w_k"].T
        v = xp @ p["w_v"].T
        scale = 1.0 / math.sqrt(d)
        attn = softmax(q @ k.transpose(0, 2, 1) * scale, axis=-1)
        z = attn @ v
        pooled = z.mean(axis=1)
        out = pooled @ p["w_o"].T + p["b_o"]
        return out, (xp, q, k, v, attn, pooled)

    def backward(self, dout, cache):
        xp, q, k, v, attn, pooled = cache
        p = self.params
        steps, d = xp.shape[1], self.model_size
        grads = {"w_o": dout.T @ pooled, "b_o": dout.sum(axis=0)}
        dpooled = dout @ p["w_o"]
        dz = np.repeat(dpooled[:, None, :] / steps, steps, axis=1)
        dattn = dz @ v.transpose(0, 2, 1)
        dv = attn.transpose(0, 2, 1) @ dz
        ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        ds *= 1.0 / math.sqrt(d)
        dq = ds @ k
        dk = ds.transpose(0, 2, 1) @ q
        x2 = xp.reshape(-1, d)
        grads["w_q"] = dq.reshape(-1, d).T @ x2
        grads["w_k"] = dk.reshape(-1, d).T @ x2
        grads["w_v"] = dv.reshape(-1, d).T @ x2
        dx = dq @ p["w_q"] + dk @ p["w_k"] + dv @ p["w_v"]
        return dx, grads

    def macs(self, steps: int) -> int:
        d = self.model_size
        return (3 * steps * d * d      # q, k, v projections
                + 2 * steps * steps * d  # scores and weighted values
                + steps * d              # mean pooling
                + d * d)                 # output projection


CORES = {"lstm": LSTM, "gru": GRU, "attention": Attention}


class Adam:
    """Adam with bias correction, updating parameter dicts in place."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        if params.keys() != grads.keys():
            raise ValueError("params and grads must have the same keys")
        for key in params:
            if params[key].shape != grads[key].shape:
                raise ValueError(f"shape mismatch for {key}: {params[key].shape} vs {grads[key].shape}")
            if key in self.m and self.m[key].shape != params[key].shape:
                raise ValueError(f"optimizer state for {key} has shape {self.m[key].shape}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for key, p in params.items():
            g = grads[key]
            m = self.m.setdefault(key, np.zeros_like(p))
            v = self.v.setdefault(key, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params


def grad_check(layer: Layer, x: np.ndarray, eps: float = 1e-5, seed: int = 0,
               forward: Callable | None = None, backward: Callable | None = None) -> float:
    """Worst relative error between analytic and central-difference gradients.

    The scalar probed is ``sum(out * G)`` for a fixed random ``G``. Relative error
    is measured per block (each parameter array, plus the input) as
    ``|a - n| / (|a| + |n|)`` in the Euclidean norm.
    """
    forward = forward or layer.forward
    backward = backward or layer.backward
    out, cache = forward(x)
    upstream = np.random.default_rng(seed).standard_normal(out.shape)
    dx, grads = backward(upstream, cache)

    def loss():
        return float(np.sum(forward(x)[0] * upstream))

    def numeric(arr):
        num = np.zeros_like(arr)
        flat, nflat = arr.reshape(-1), num.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + eps
            up = loss()
            flat[j] = old - eps
            down = loss()
            flat[j] = old
            nflat[j] = (up - down) / (2 * eps)
        return num

    def rel(a, n):
        denom = np.linalg.norm(a) + np.linalg.norm(n)
        return 0.0 if denom == 0 else float(np.linalg.norm(a - n) / denom)

    worst = rel(dx, numeric(x))
    for name, arr in layer.params.items():
        worst = max(worst, rel(grads[name], numeric(arr)))
    return worst
