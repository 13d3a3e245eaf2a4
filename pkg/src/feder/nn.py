"""Small trainable conv/dense stack with exact backprop.

Everything is plain float64 numpy. Parameters are named tensors so the
federation layer can aggregate them one layer at a time; conv kernels use
the (k1, k2, in_channels, out_channels) index order shared with the
spectral tooling. Convolutions are valid-padding, stride 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError
from .rng import derive_rng


class ModelParams:
    """Ordered, named parameter tensors of one model replica."""

    __slots__ = ("layers",)

    def __init__(self, layers):
        self.layers = [(str(name), np.asarray(t, dtype=np.float64)) for name, t in layers]
        names = [n for n, _ in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("duplicate layer names")

    def names(self) -> list[str]:
        return [n for n, _ in self.layers]

    def tensor(self, name: str) -> np.ndarray:
        for n, t in self.layers:
            if n == name:
                return t
        raise KeyError(name)

    def copy(self) -> "ModelParams":
        return ModelParams([(n, t.copy()) for n, t in self.layers])

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(n, t.shape) for n, t in self.layers]

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def __repr__(self):
        inner = ", ".join(f"{n}{t.shape}" for n, t in self.layers)
        return f"ModelParams({inner})"


def check_congruent(a: ModelParams, b: ModelParams) -> None:
    if a.shapes() != b.shapes():
        raise ValueError(f"parameter structures differ: {a.shapes()} vs {b.shapes()}")


# ---------------------------------------------------------------------------
# layer primitives


def _im2col(x: np.ndarray, k1: int, k2: int) -> np.ndarray:
    win = sliding_window_view(x, (k1, k2), axis=(2, 3))  # (b, c, oh, ow, k1, k2)
    b, c, oh, ow = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, oh * ow, c * k1 * k2)


def conv2d_forward(x: np.ndarray, kernel: np.ndarray, bias=None) -> np.ndarray:
    """Valid-padding stride-1 cross-correlation.

    x: (batch, in_channels, h, w); kernel: (k1, k2, in_channels, out_channels).
    Returns (batch, out_channels, h - k1 + 1, w - k2 + 1).
    """
    k1, k2, cin, cout = kernel.shape
    b, c, h, w = x.shape
    if c != cin:
        raise ValueError(f"input has {c} channels, kernel expects {cin}")
    if h < k1 or w < k2:
        raise ValueError(f"input {h}x{w} is smaller than the {k1}x{k2} kernel")
    cols = _im2col(x, k1, k2)
    kmat = kernel.transpose(2, 0, 1, 3).reshape(cin * k1 * k2, cout)
    out = (cols @ kmat).reshape(b, h - k1 + 1, w - k2 + 1, cout).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return out


def conv2d_backward(x: np.ndarray, kernel: np.ndarray, dout: np.ndarray):
    """Gradients of conv2d_forward; returns (dx, dkernel, dbias)."""
    k1, k2, cin, cout = kernel.shape
    b, _, h, w = x.shape
    oh, ow = h - k1 + 1, w - k2 + 1
    dmat = dout.transpose(0, 2, 3, 1).reshape(b, oh * ow, cout)
    cols = _im2col(x, k1, k2)
    dk = np.matmul(cols.transpose(0, 2, 1), dmat).sum(axis=0)
    dkernel = dk.reshape(cin, k1, k2, cout).transpose(1, 2, 0, 3)
    dbias = dout.sum(axis=(0, 2, 3))
    kmat = kernel.transpose(2, 0, 1, 3).reshape(cin * k1 * k2, cout)
    dwin = (dmat @ kmat.T).reshape(b, oh, ow, cin, k1, k2)
    dx = np.zeros_like(x)
    for p in range(k1):
        for q in range(k2):
            dx[:, :, p:p + oh, q:q + ow] += dwin[:, :, :, :, p, q].transpose(0, 3, 1, 2)
    return dx, dkernel, dbias


def dense_forward(h: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    return h @ weight + bias


def softmax_cross_entropy(scores: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the scores."""
    labels = np.asarray(labels, dtype=np.int64)
    n, classes = scores.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= classes):
        raise ValueError(f"label out of class range [0, {classes})")
    shifted = scores - scores.max(axis=1, keepdims=True)
    log_z = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    log_p = shifted - log_z
    loss = float(-np.mean(log_p[np.arange(n), labels]))
    dscores = np.exp(log_p)
    dscores[np.arange(n), labels] -= 1.0
    dscores /= n
    return loss, dscores


def _fans(shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 4:
        receptive = shape[0] * shape[1]
        return receptive * shape[2], receptive * shape[3]
    return shape[0], shape[1]


# ---------------------------------------------------------------------------
# the fixed desk-scale architecture


@dataclass(frozen=True)
class MicroConvNet:
    """conv(in->c1) ReLU, conv(c1->c2) ReLU, global average pool, dense(c2->classes).

    Small enough to train in seconds while exercising both the 4-D (conv)
    and 2-D (dense) aggregation paths.
    """
    in_channels: int = 3
    classes: int = 10
    conv_channels: tuple[int, int] = (8, 16)
    kernel_size: int = 3

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        k = self.kernel_size
        c1, c2 = self.conv_channels
        return [
            ("conv1.weight", (k, k, self.in_channels, c1)),
            ("conv1.bias", (c1,)),
            ("conv2.weight", (k, k, c1, c2)),
            ("conv2.bias", (c2,)),
            ("dense.weight", (c2, self.classes)),
            ("dense.bias", (self.classes,)),
        ]

    def init_params(self, seed) -> ModelParams:
        """Weight tensors uniform in +-sqrt(6 / (fan_in + fan_out)), biases zero."""
        parts = seed if isinstance(seed, tuple) else (seed,)
        rng = derive_rng(*parts, "model-init")
        layers = []
        for name, shape in self.layer_shapes():
            if len(shape) == 1:
                layers.append((name, np.zeros(shape)))
                continue
            fan_in, fan_out = _fans(shape)
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            layers.append((name, rng.uniform(-bound, bound, size=shape)))
        return ModelParams(layers)

    def forward(self, params: ModelParams, inputs) -> tuple[np.ndarray, tuple]:
        """Class scores for a batch plus the cache backward needs."""
        x = np.asarray(inputs, dtype=np.float64)
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(
                f"inputs must be (batch, {self.in_channels}, h, w), got {x.shape}")
        z1 = conv2d_forward(x, params.tensor("conv1.weight"), params.tensor("conv1.bias"))
        a1 = np.maximum(z1, 0.0)
        z2 = conv2d_forward(a1, params.tensor("conv2.weight"), params.tensor("conv2.bias"))
        a2 = np.maximum(z2, 0.0)
        pooled = a2.mean(axis=(2, 3))
        scores = dense_forward(pooled, params.tensor("dense.weight"), params.tensor("dense.bias"))
        return scores, (x, z1, a1, z2, a2, pooled)

    def loss_and_gradient(self, params: ModelParams, inputs, labels):
        """Mean cross-entropy over the batch and exact parameter gradients."""
        scores, cache = self.forward(params, inputs)
        loss, dscores = softmax_cross_entropy(scores, labels)
        x, z1, a1, z2, a2, pooled = cache
        d_dense_w = pooled.T @ dscores
        d_dense_b = dscores.sum(axis=0)
        dpooled = dscores @ params.tensor("dense.weight").T
        spatial = a2.shape[2] * a2.shape[3]
        dz2 = (dpooled / spatial)[:, :, None, None] * (z2 > 0.0)
        da1, d_w2, d_b2 = conv2d_backward(a1, params.tensor("conv2.weight"), dz2)
        dz1 = da1 * (z1 > 0.0)
        _, d_w1, d_b1 = conv2d_backward(x, params.tensor("conv1.weight"), dz1)
        grads = {
            "conv1.weight": d_w1, "conv1.bias": d_b1,
            "conv2.weight": d_w2, "conv2.bias": d_b2,
            "dense.weight": d_dense_w, "dense.bias": d_dense_b,
        }
        if not math.isfinite(loss):
            raise FloatingPointError("non-finite loss")
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in {name}")
        return loss, grads

    def evaluate(self, params: ModelParams, inputs, labels, batch_size: int = 256):
        """Mean loss and top-1 accuracy, computed in batches."""
        labels = np.asarray(labels, dtype=np.int64)
        n = len(labels)
        total_loss = 0.0
        correct = 0
        for start in range(0, n, batch_size):
            sl = slice(start, start + batch_size)
            scores, _ = self.forward(params, inputs[sl])
            loss, _ = softmax_cross_entropy(scores, labels[sl])
            total_loss += loss * len(labels[sl])
            correct += int(np.sum(np.argmax(scores, axis=1) == labels[sl]))
        return total_loss / n, correct / n


# ---------------------------------------------------------------------------
# optimizers and schedule


@dataclass
class OptimizerState:
    """SGD or Adam with per-tensor moment accumulators."""
    kind: str = "sgd"
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigError("kind", f"unknown optimizer {self.kind!r}")
        if not 0.0 < self.adam_beta1 < 1.0:
            raise ConfigError("adam_beta1", "must be in (0, 1)")
        if not 0.0 < self.adam_beta2 < 1.0:
            raise ConfigError("adam_beta2", "must be in (0, 1)")
        if self.adam_epsilon <= 0.0:
            raise ConfigError("adam_epsilon", "must be > 0")
        if self.learning_rate < 0.0:
            raise ConfigError("learning_rate", "must be >= 0")
        if self.weight_decay < 0.0:
            raise ConfigError("weight_decay", "must be >= 0")

    def reset(self) -> None:
        self.step_count = 0
        self.first_moment.clear()
        self.second_moment.clear()

    def clone(self) -> "OptimizerState":
        """Fresh state with the same hyper-parameters and empty accumulators."""
        return OptimizerState(
            kind=self.kind, learning_rate=self.learning_rate,
            weight_decay=self.weight_decay, adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2, adam_epsilon=self.adam_epsilon)


def optimizer_step(state: OptimizerState, params: ModelParams, grads: dict):
    """One in-place update over every parameter tensor.

    SGD: w -= lr * (g + wd * w). Adam: bias-corrected moment update of
    (g + wd * w) with the configured betas and epsilon. Returns
    (params, state) for chaining; both are mutated.
    """
    lr = state.learning_rate
    state.step_count += 1
    for name, w in params:
        g = grads[name]
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {w.shape} for {name}")
        if state.weight_decay != 0.0:
            g = g + state.weight_decay * w
        if state.kind == "sgd":
            w -= lr * g
        else:
            t = state.step_count
            m = state.first_moment.get(name)
            if m is None:
                m = state.first_moment[name] = np.zeros_like(w)
                v = state.second_moment[name] = np.zeros_like(w)
            else:
                v = state.second_moment[name]
            m *= state.adam_beta1
            m += (1.0 - state.adam_beta1) * g
            v *= state.adam_beta2
            v += (1.0 - state.adam_beta2) * (g * g)
            m_hat = m / (1.0 - state.adam_beta1 ** t)
            v_hat = v / (1.0 - state.adam_beta2 ** t)
            w -= lr * m_hat / (np.sqrt(v_hat) + state.adam_epsilon)
    return params, state


@dataclass(frozen=True)
class LrSchedule:
    """'none' keeps base_lr; 'steplr' multiplies by decay every step_size epochs."""
    kind: str = "none"
    step_size: int = 25
    decay: float = 0.5

    def __post_init__(self):
        if self.kind not in ("none", "steplr"):
            raise ConfigError("scheduler", f"unknown schedule {self.kind!r}")
        if self.step_size < 1:
            raise ConfigError("scheduler_step_size", "must be >= 1")
        if not 0.0 < self.decay <= 1.0:
            raise ConfigError("scheduler_decay", "must be in (0, 1]")


def schedule_lr(schedule: LrSchedule | None, epoch: int, base_lr: float) -> float:
    """Effective learning rate at a given (0-based) epoch."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if schedule is None or schedule.kind == "none":
        return base_lr
    return base_lr * schedule.decay ** (epoch // schedule.step_size)
