"""Parameterized building blocks: linear maps, small MLPs, attention.

Weights are float64 Tensors with requires_grad=True, initialized
N(0, 1/sqrt(fan_in)) from a caller-supplied numpy Generator so the whole
model is reproducible from one seed. Naming follows "<prefix>.<local>" and
iteration order is definition order, which fixes the canonical parameter
ordering used by the optimizer and checkpoints.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, multi_head_attention, relu, tanh


def _init_weight(rng, d_in, d_out):
    return Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_out)),
                  requires_grad=True)


class Linear:
    def __init__(self, rng, d_in, d_out, bias=True):
        self.w = _init_weight(rng, d_in, d_out)
        self.b = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x):
        y = x @ self.w
        return y + self.b if self.b is not None else y

    def named_parameters(self, prefix):
        yield f"{prefix}.w", self.w
        if self.b is not None:
            yield f"{prefix}.b", self.b


class MLP:
    """Two-layer perceptron with a configurable hidden nonlinearity."""

    def __init__(self, rng, d_in, d_hidden, d_out, activation="tanh"):
        if activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {activation!r}")
        self.fc1 = Linear(rng, d_in, d_hidden)
        self.fc2 = Linear(rng, d_hidden, d_out)
        self._act = tanh if activation == "tanh" else relu

    def __call__(self, x):
        return self.fc2(self._act(self.fc1(x)))

    def named_parameters(self, prefix):
        yield from self.fc1.named_parameters(f"{prefix}.fc1")
        yield from self.fc2.named_parameters(f"{prefix}.fc2")


class MultiHeadAttention:
    """Projection weights for scaled dot-product attention; no biases."""

    def __init__(self, rng, d_model, heads):
        if d_model % heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by heads {heads}")
        self.heads = heads
        self.wq = _init_weight(rng, d_model, d_model)
        self.wk = _init_weight(rng, d_model, d_model)
        self.wv = _init_weight(rng, d_model, d_model)
        self.wo = _init_weight(rng, d_model, d_model)

    def __call__(self, q, k, v, additive_mask=None):
        return multi_head_attention(q, k, v, self.wq, self.wk, self.wv, self.wo,
                                    self.heads, additive_mask=additive_mask)

    def named_parameters(self, prefix):
        yield f"{prefix}.wq", self.wq
        yield f"{prefix}.wk", self.wk
        yield f"{prefix}.wv", self.wv
        yield f"{prefix}.wo", self.wo
