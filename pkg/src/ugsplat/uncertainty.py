"""Per-Gaussian uncertainty MLP: ReLU hidden layers, sigmoid output."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ugsplat.errors import ShapeError
from ugsplat.scene import sigmoid


@dataclass
class UncertaintyBatch:
    values: np.ndarray
    view_id: int | None = None

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class MLPCache:
    inputs: np.ndarray
    pre: list[np.ndarray]       # pre-activations of every layer
    post: list[np.ndarray]      # activations fed into the next layer (inputs first)
    out: np.ndarray


class UncertaintyNet:
    """``u = sigmoid(MLP(x))`` with analytic gradients for weights and inputs.

    Hidden layers use He-uniform init.  The output layer starts at zero weight
    and bias (scaled by ``final_init_scale``) so every Gaussian begins at u = 0.5.
    """

    def __init__(self, widths=(34, 64, 64, 1), seed: int = 0, final_init_scale: float = 0.0,
                 weights=None, biases=None):
        self.widths = tuple(int(w) for w in widths)
        if len(self.widths) < 2 or self.widths[-1] != 1:
            raise ValueError("widths must run from the input width to a single output")
        self.frozen = False
        if weights is not None:
            self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
            self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
            return
        rng = np.random.default_rng(seed)
        self.weights, self.biases = [], []
        n_layers = len(self.widths) - 1
        for k, (fan_in, fan_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            limit = np.sqrt(6.0 / fan_in)
            if k == n_layers - 1:
                limit *= final_init_scale
            self.weights.append(rng.uniform(-limit, limit, (fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{k}"] = w
            out[f"b{k}"] = b
        return out

    def load_parameters(self, params: dict[str, np.ndarray]) -> None:
        n = len(self.weights)
        self.weights = [np.asarray(params[f"W{k}"], dtype=np.float64) for k in range(n)]
        self.biases = [np.asarray(params[f"b{k}"], dtype=np.float64) for k in range(n)]

    def forward(self, inputs) -> tuple[np.ndarray, MLPCache]:
        x = np.asarray(inputs, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"expected inputs of shape (N, {self.input_dim}), got {x.shape}")
        pre, post = [], [x]
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            pre.append(z)
            h = np.maximum(z, 0.0) if k < last else z
            if k < last:
                post.append(h)
        u = sigmoid(h[:, 0])
        return u, MLPCache(x, pre, post, u)

    def predict(self, inputs, view_id: int | None = None) -> UncertaintyBatch:
        return UncertaintyBatch(self.forward(inputs)[0], view_id)

    def backward(self, cache: MLPCache, upstream) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Gradients ``(param_grads, input_grads)`` for dL/du = ``upstream``.

        A frozen net reports all-zero parameter gradients but still returns the
        input gradient.
        """
        g_u = np.asarray(upstream, dtype=np.float64).reshape(-1)
        u = cache.out
        delta = (g_u * u * (1.0 - u))[:, None]
        grads = {}
        for k in range(len(self.weights) - 1, -1, -1):
            a = cache.post[k]
            grads[f"W{k}"] = a.T @ delta
            grads[f"b{k}"] = delta.sum(axis=0)
            delta = delta @ self.weights[k].T
            if k > 0:
                delta = delta * (cache.pre[k - 1] > 0)
        if self.frozen:
            grads = {name: np.zeros_like(g) for name, g in grads.items()}
        return grads, delta


def freeze(net: UncertaintyNet) -> UncertaintyNet:
    net.frozen = True
    return net
