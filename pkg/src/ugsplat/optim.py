"""Adam with named parameter groups and row-wise pruning of its moments."""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _adam_kernel(p, g, m, v, upd, lr, b1, b2, bc1, bc2, eps):
    # fused elementwise update over flat views
    step = lr / bc1
    inv_sqrt_bc2 = 1.0 / np.sqrt(bc2)
    for i in range(p.size):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        u = step * mi / (np.sqrt(vi) * inv_sqrt_bc2 + eps)
        upd[i] = u
        p[i] -= u


class Adam:
    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-15):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}

    def step(self, name: str, param: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        """Update ``param`` in place; returns the applied update."""
        if name not in self.m:
            self.m[name] = np.zeros_like(param)
            self.v[name] = np.zeros_like(param)
            self.steps[name] = 0
        m, v = self.m[name], self.v[name]
        if m.shape != param.shape:
            raise ValueError(f"moment shape {m.shape} does not match parameter {param.shape}")
        self.steps[name] += 1
        t = self.steps[name]
        if not (param.flags.c_contiguous and m.flags.c_contiguous and v.flags.c_contiguous):
            raise ValueError("Adam state and parameters must be C-contiguous")
        grad = np.ascontiguousarray(grad, dtype=np.float64)
        update = np.empty_like(param)
        _adam_kernel(param.reshape(-1), grad.reshape(-1), m.reshape(-1), v.reshape(-1),
                     update.reshape(-1), float(lr), self.beta1, self.beta2,
                     1.0 - self.beta1 ** t, 1.0 - self.beta2 ** t, self.eps)
        return update

    def keep_rows(self, name: str, keep: np.ndarray) -> None:
        if name in self.m:
            self.m[name] = self.m[name][keep]
            self.v[name] = self.v[name][keep]

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state(self, arrays: dict[str, np.ndarray], steps: dict[str, int]) -> None:
        self.m, self.v = {}, {}
        for key, arr in arrays.items():
            if key.startswith("adam.m."):
                self.m[key[len("adam.m."):]] = np.array(arr, dtype=np.float64)
            elif key.startswith("adam.v."):
                self.v[key[len("adam.v."):]] = np.array(arr, dtype=np.float64)
        self.steps = {k: int(v) for k, v in steps.items()}
