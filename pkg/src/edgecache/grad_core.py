"""Hand-rolled differentiable layers: dense, LSTM cell with BPTT, Huber loss,
Adam with coupled weight decay, Kaiming init, and a binary checkpoint format.

Gradients are derived analytically per layer; every backward pass is checked
against central finite differences in the test suite. float32 is the training
precision, float64 the gradient-check precision.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "TrainingError",
    "CheckpointError",
    "Param",
    "kaiming_init",
    "Dense",
    "Relu",
    "LstmCell",
    "huber_loss",
    "Adam",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = "EDGECKPT"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Raised when optimization hits non-finite values."""


class CheckpointError(ValueError):
    """Raised on malformed or incompatible checkpoint files."""


class Param:
    """A trainable array with its gradient accumulator."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = value
        self.grad = np.zeros_like(value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def kaiming_init(shape: Sequence[int], fan_in: int, rng: np.random.Generator,
                 dtype=np.float32) -> np.ndarray:
    """Zero-mean normal entries with std sqrt(2 / fan_in)."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


class Dense:
    """Affine layer y = x @ W.T + b for batched row vectors."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.w = Param(kaiming_init((out_dim, in_dim), in_dim, rng, dtype))
        self.b = Param(np.zeros(out_dim, dtype=dtype))
        self._x: np.ndarray | None = None

    def params(self) -> dict[str, Param]:
        return {"w": self.w, "b": self.b}

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"expected input width {self.in_dim}, got {x.shape[-1]}")
        self._x = x
        return x @ self.w.value.T + self.b.value

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise RuntimeError("backward called before forward")
        x = self._x
        self.w.grad += dy.T @ x
        self.b.grad += dy.sum(axis=0)
        return dy @ self.w.value


class Relu:
    def __init__(self):
        self._mask: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._mask is None:
            raise RuntimeError("backward called before forward")
        return np.where(self._mask, dy, 0.0)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # overflow-free: exp never sees a positive argument
    t = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


class LstmCell:
    """Standard LSTM cell; gate layout [input, forget, cell, output].

    The forget-gate bias initializes to 1 to keep the memory path open early in
    training.
    """

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.wx = Param(kaiming_init((4 * hidden_size, input_size), input_size, rng, dtype))
        self.wh = Param(kaiming_init((4 * hidden_size, hidden_size), hidden_size, rng, dtype))
        b = np.zeros(4 * hidden_size, dtype=dtype)
        b[hidden_size:2 * hidden_size] = 1.0
        self.b = Param(b)

    def params(self) -> dict[str, Param]:
        return {"wx": self.wx, "wh": self.wh, "b": self.b}

    def zero_state(self, batch: int, dtype=None) -> tuple[np.ndarray, np.ndarray]:
        dtype = dtype or self.wx.value.dtype
        return (np.zeros((batch, self.hidden_size), dtype=dtype),
                np.zeros((batch, self.hidden_size), dtype=dtype))

    def step(self, x: np.ndarray, h: np.ndarray, c: np.ndarray):
        """One time step; returns (h_next, c_next, cache) with cache kept for BPTT."""
        hs = self.hidden_size
        z = x @ self.wx.value.T + h @ self.wh.value.T + self.b.value
        i = _sigmoid(z[:, :hs])
        f = _sigmoid(z[:, hs:2 * hs])
        g = np.tanh(z[:, 2 * hs:3 * hs])
        o = _sigmoid(z[:, 3 * hs:])
        c_next = f * c + i * g
        h_next = o * np.tanh(c_next)
        cache = (x, h, c, i, f, g, o, c_next)
        return h_next, c_next, cache

    def step_backward(self, cache, dh_next: np.ndarray, dc_next: np.ndarray):
        """Backprop through one step; accumulates parameter grads, returns
        (dx, dh_prev, dc_prev)."""
        x, h, c, i, f, g, o, c_next = cache
        tc = np.tanh(c_next)
        do = dh_next * tc
        dc = dc_next + dh_next * o * (1.0 - tc * tc)
        di = dc * g
        df = dc * c
        dg = dc * i
        dc_prev = dc * f
        dz = np.concatenate([
            di * i * (1.0 - i),
            df * f * (1.0 - f),
            dg * (1.0 - g * g),
            do * o * (1.0 - o),
        ], axis=1)
        self.wx.grad += dz.T @ x
        self.wh.grad += dz.T @ h
        self.b.grad += dz.sum(axis=0)
        dx = dz @ self.wx.value
        dh_prev = dz @ self.wh.value
        return dx, dh_prev, dc_prev

    def unroll(self, xs: Sequence[np.ndarray], h0: np.ndarray, c0: np.ndarray):
        """Run the cell over a sequence; returns (hs, caches) with hs[t] = h_{t+1}."""
        h, c = h0, c0
        hs, caches = [], []
        for x in xs:
            h, c, cache = self.step(x, h, c)
            hs.append(h)
            caches.append(cache)
        return hs, caches

    def unroll_backward(self, caches, dh_last: np.ndarray,
                        dhs: Sequence[np.ndarray] | None = None):
        """BPTT over stored step caches.

        dh_last is the gradient flowing into the final hidden state; dhs adds
        optional per-step hidden-state gradients. Returns (dxs, dh0, dc0).
        """
        dh = dh_last.copy()
        dc = np.zeros_like(dh_last)
        dxs = [None] * len(caches)
        for t in range(len(caches) - 1, -1, -1):
            dx, dh, dc = self.step_backward(caches[t], dh, dc)
            if t > 0 and dhs is not None:
                dh = dh + dhs[t - 1]
            dxs[t] = dx
        return dxs, dh, dc


def huber_loss(prediction: np.ndarray, target: np.ndarray, delta: float = 1.0):
    """Elementwise Huber loss and its gradient w.r.t. the prediction.

    Quadratic for |error| <= delta, linear outside; the gradient saturates at
    +-delta.
    """
    err = np.asarray(prediction) - np.asarray(target)
    abs_err = np.abs(err)
    quad = abs_err <= delta
    loss = np.where(quad, 0.5 * err * err, delta * (abs_err - 0.5 * delta))
    grad = np.where(quad, err, delta * np.sign(err))
    return loss, grad


class Adam:
    """Adam with bias correction; weight decay enters as an L2 term added to the
    gradient (coupled form)."""

    def __init__(self, params: dict[str, Param], learning_rate: float,
                 weight_decay: float = 0.0, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {k: np.zeros_like(p.value) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.value) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for key in self.params:
            p = self.params[key]
            if not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient in parameter {key!r}")
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.value
            m = self._m[key]
            v = self._v[key]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1 ** t)
            v_hat = v / (1.0 - b2 ** t)
            p.value -= (self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)).astype(
                p.value.dtype, copy=False)


def _dtype_tag(dtype: np.dtype) -> str:
    return np.dtype(dtype).newbyteorder("<").str


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Versioned header plus raw little-endian arrays; round-trips bit-exactly."""
    specs = []
    blobs = []
    for name, arr in arrays.items():
        le = np.ascontiguousarray(arr).astype(np.dtype(arr.dtype).newbyteorder("<"), copy=False)
        specs.append({"name": name, "shape": list(arr.shape), "dtype": _dtype_tag(arr.dtype)})
        blobs.append(le.tobytes())
    header = json.dumps({"meta": meta, "arrays": specs}, sort_keys=True)
    with open(path, "wb") as fh:
        fh.write(f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n".encode("ascii"))
        fh.write(header.encode("ascii") + b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.readline().decode("ascii", errors="replace").strip()
        parts = magic.split()
        if len(parts) != 2 or parts[0] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"not a checkpoint file: bad magic {magic!r}")
        if int(parts[1]) != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {parts[1]}")
        try:
            header = json.loads(fh.readline().decode("ascii"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"malformed checkpoint header: {exc}") from exc
        arrays: dict[str, np.ndarray] = {}
        for spec in header["arrays"]:
            dtype = np.dtype(spec["dtype"])
            count = int(np.prod(spec["shape"])) if spec["shape"] else 1
            raw = fh.read(count * dtype.itemsize)
            if len(raw) != count * dtype.itemsize:
                raise CheckpointError(f"truncated array {spec['name']!r}")
            arrays[spec["name"]] = np.frombuffer(raw, dtype=dtype).reshape(spec["shape"]).copy()
        if fh.read(1):
            raise CheckpointError("trailing bytes after final array")
    return arrays, header["meta"]
