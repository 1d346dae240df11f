"""MLP used by every learned component: Linear -> LayerNorm -> SiLU blocks, linear head."""
from __future__ import annotations

import numpy as np

from . import tensor as T


class MLP:
    def __init__(self, sizes, rng, prefix="", zero_last=False):
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        self.sizes = list(sizes)
        self.prefix = prefix
        self.params = {}
        last = len(sizes) - 2
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            if i == last and zero_last:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
            self.params[f"{prefix}l{i}.w"] = T.parameter(w)
            self.params[f"{prefix}l{i}.b"] = T.parameter(np.zeros(fan_out))
            if i != last:
                self.params[f"{prefix}l{i}.ln_g"] = T.parameter(np.ones(fan_out))
                self.params[f"{prefix}l{i}.ln_b"] = T.parameter(np.zeros(fan_out))

    def __call__(self, x):
        p, h = self.params, T.as_tensor(x)
        last = len(self.sizes) - 2
        for i in range(last + 1):
            h = T.matmul(h, p[f"{self.prefix}l{i}.w"]) + p[f"{self.prefix}l{i}.b"]
            if i != last:
                h = T.silu(T.layer_norm(h, p[f"{self.prefix}l{i}.ln_g"], p[f"{self.prefix}l{i}.ln_b"]))
        return h

    def forward_np(self, x):
        """Untracked forward pass on raw arrays; skips graph bookkeeping."""
        p, h = self.params, np.asarray(x, dtype=np.float64)
        last = len(self.sizes) - 2
        for i in range(last + 1):
            h = h @ p[f"{self.prefix}l{i}.w"].data + p[f"{self.prefix}l{i}.b"].data
            if i != last:
                mu = h.mean(axis=-1, keepdims=True)
                c = h - mu
                h = c / np.sqrt((c * c).mean(axis=-1, keepdims=True) + 1e-5)
                h = h * p[f"{self.prefix}l{i}.ln_g"].data + p[f"{self.prefix}l{i}.ln_b"].data
                h = h * T.sigmoid_np(h)
        return h


def mlp_sizes(n_in, hidden, layers, n_out):
    return [n_in] + [hidden] * layers + [n_out]


def collect_grads(params):
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}


def zero_grads(params):
    for p in params.values():
        p.grad = None


def load_into(params, arrays):
    for k, p in params.items():
        if k not in arrays:
            raise KeyError(f"missing weight '{k}'")
        if arrays[k].shape != p.shape:
            raise ValueError(f"weight '{k}' has shape {arrays[k].shape}, expected {p.shape}")
        p.data = arrays[k].copy()
