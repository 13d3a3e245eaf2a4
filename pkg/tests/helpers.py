"""Independent brute-force oracles and small fixtures shared across tests.

The oracles deliberately avoid the library's vectorized code paths: direct
loops for convolution and unfolding, central finite differences for
gradients. Tests freeze expected values computed by these.
"""
from __future__ import annotations

import numpy as np

from feder.data import Dataset
from feder.federation import ClientState
from feder.nn import MicroConvNet, ModelParams, OptimizerState
from feder.rng import derive_rng


def direct_conv(x: np.ndarray, kernel: np.ndarray, bias=None) -> np.ndarray:
    """Valid cross-correlation by explicit loops."""
    b, cin, h, w = x.shape
    k1, k2, _, cout = kernel.shape
    oh, ow = h - k1 + 1, w - k2 + 1
    out = np.zeros((b, cout, oh, ow))
    for bi in range(b):
        for o in range(cout):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for c in range(cin):
                        for p in range(k1):
                            for q in range(k2):
                                acc += x[bi, c, i + p, j + q] * kernel[p, q, c, o]
                    out[bi, o, i, j] = acc
            if bias is not None:
                out[bi, o] += bias[o]
    return out


def direct_unfold(values: np.ndarray, mode: int) -> np.ndarray:
    """Mode unfolding by enumerating every index tuple."""
    dims = values.shape
    rest = [i for i in range(4) if i != mode - 1]
    rest_dims = [dims[i] for i in rest]
    out = np.zeros((dims[mode - 1], int(np.prod(rest_dims))))
    for idx in np.ndindex(*dims):
        col = 0
        for axis, size in zip(rest, rest_dims):
            col = col * size + idx[axis]
        out[idx[mode - 1], col] = values[idx]
    return out


def fd_gradient_check(model, params: ModelParams, x, y, rng,
                      coords_per_tensor: int = 10, h: float = 1e-5) -> float:
    """Worst per-tensor relative error between analytic and central-difference
    gradients, sampled over random coordinates."""
    _, grads = model.loss_and_gradient(params, x, y)
    worst = 0.0
    for name, w in params:
        flat = w.reshape(-1)
        count = min(coords_per_tensor, flat.size)
        coords = rng.choice(flat.size, size=count, replace=False)
        analytic = np.empty(count)
        numeric = np.empty(count)
        for pos, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + h
            up = model.loss_and_gradient(params, x, y)[0]
            flat[i] = orig - h
            down = model.loss_and_gradient(params, x, y)[0]
            flat[i] = orig
            numeric[pos] = (up - down) / (2.0 * h)
            analytic[pos] = grads[name].reshape(-1)[i]
        denom = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-6)
        worst = max(worst, float(np.linalg.norm(analytic - numeric)) / denom)
    return worst


def tiny_model() -> MicroConvNet:
    return MicroConvNet(in_channels=2, classes=4, conv_channels=(3, 4), kernel_size=3)


def tiny_dataset(seed: int = 0, per_class: int = 12) -> Dataset:
    rng = derive_rng(seed, "tiny-data")
    n = 4 * per_class
    inputs = rng.normal(0.0, 1.0, (n, 2, 6, 6))
    labels = np.repeat(np.arange(4), per_class)
    return Dataset(inputs, labels, 4)


def dummy_dataset() -> Dataset:
    return Dataset(np.zeros((1, 1, 1, 1)), np.zeros(1, dtype=np.int64), 1)


def make_test_clients(model, count: int, seed: int = 0, shard=None,
                      lr: float = 1e-2) -> list[ClientState]:
    """Clients with distinct random params sharing one small shard."""
    shard = shard if shard is not None else tiny_dataset(seed)
    return [ClientState(k, model.init_params((seed, "test-client", k)), shard,
                        OptimizerState(kind="sgd", learning_rate=lr))
            for k in range(count)]


def scalar_clients(values: list[tuple[float, float, float]]) -> list[ClientState]:
    """Clients whose model is one scalar conv kernel, one scalar dense weight
    and one scalar bias, for hand-checkable aggregation arithmetic."""
    clients = []
    for k, (conv, dense, bias) in enumerate(values):
        params = ModelParams([
            ("conv.weight", np.full((1, 1, 1, 1), conv)),
            ("dense.weight", np.full((1, 1), dense)),
            ("dense.bias", np.full(1, bias)),
        ])
        clients.append(ClientState(k, params, dummy_dataset(),
                                   OptimizerState(kind="sgd", learning_rate=0.0)))
    return clients


class QuadraticModel:
    """Convex 1-parameter stand-in: loss = 0.5 * curvature * (w - target)^2.

    Ignores its inputs, which lets client-update code paths run against a
    loss whose minimizer and gradients are known in closed form.
    """

    def __init__(self, curvature: float = 2.0, target: float = 3.0):
        self.curvature = curvature
        self.target = target

    def init_params(self, seed) -> ModelParams:
        return ModelParams([("w", np.zeros(1))])

    def loss_and_gradient(self, params, inputs, labels):
        w = params.tensor("w")
        loss = float(0.5 * self.curvature * (w[0] - self.target) ** 2)
        return loss, {"w": self.curvature * (w - self.target)}

    def evaluate(self, params, inputs, labels):
        return self.loss_and_gradient(params, inputs, labels)[0], 0.0


def max_param_diff(a: ModelParams, b: ModelParams) -> float:
    return max(float(np.max(np.abs(ta - b.tensor(name)))) for name, ta in a)
