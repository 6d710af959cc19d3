"""Reusable neural building blocks: linear maps, multi-head attention, MLP."""

from __future__ import annotations

import math

import numpy as np

from .rng import Rng
from .tensor import (
    Tensor,
    ShapeError,
    masked_fill,
    matmul,
    relu,
    reshape,
    softmax,
    transpose,
)

__all__ = ["xavier_uniform", "Linear", "MultiHeadAttention", "FeedForward"]


def xavier_uniform(rng: Rng, fan_in: int, fan_out: int, shape, dtype: str) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), dtype=dtype, requires_grad=True)


class Linear:
    """Affine map applied to the last axis: y = x W + b."""

    def __init__(self, in_dim: int, out_dim: int, rng: Rng, dtype: str):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = xavier_uniform(rng, in_dim, out_dim, (in_dim, out_dim), dtype)
        self.bias = Tensor(np.zeros(out_dim), dtype=dtype, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


class MultiHeadAttention:
    """Scaled dot-product self-attention over a [L, width] sequence.

    With `causal=True` a strict upper-triangular -inf mask is applied to
    the score matrix before softmax, so position t attends only to
    positions <= t.
    """

    def __init__(self, width: int, num_heads: int, causal: bool, rng: Rng, dtype: str):
        if width % num_heads != 0:
            raise ShapeError(f"attention width {width} not divisible by {num_heads} heads")
        self.width = width
        self.num_heads = num_heads
        self.head_dim = width // num_heads
        self.causal = causal
        self.q_proj = Linear(width, width, rng.split("q"), dtype)
        self.k_proj = Linear(width, width, rng.split("k"), dtype)
        self.v_proj = Linear(width, width, rng.split("v"), dtype)
        self.out_proj = Linear(width, width, rng.split("o"), dtype)

    def __call__(self, x: Tensor, collect_weights: bool = False):
        """Returns (output [L, width], per-head weights [H, L, L] or None)."""
        length = x.shape[0]

        def split_heads(t: Tensor) -> Tensor:
            return transpose(reshape(t, (length, self.num_heads, self.head_dim)), (1, 0, 2))

        q = split_heads(self.q_proj(x))
        k = split_heads(self.k_proj(x))
        v = split_heads(self.v_proj(x))
        scores = matmul(q, transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(self.head_dim))
        if self.causal:
            future = np.triu(np.ones((length, length), dtype=bool), k=1)
            scores = masked_fill(scores, future[None, :, :], -np.inf)
        weights = softmax(scores, axis=-1)
        ctx = matmul(weights, v)
        out = self.out_proj(reshape(transpose(ctx, (1, 0, 2)), (length, self.width)))
        recorded = weights.data.copy() if collect_weights else None
        return out, recorded

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for name, lin in (("q", self.q_proj), ("k", self.k_proj), ("v", self.v_proj), ("o", self.out_proj)):
            for pname, p in lin.parameters().items():
                out[f"{name}.{pname}"] = p
        return out

    @staticmethod
    def param_count(width: int) -> int:
        return 4 * (width * width + width)


class FeedForward:
    """Position-wise Linear -> ReLU -> Linear."""

    def __init__(self, width: int, hidden_dim: int, rng: Rng, dtype: str):
        self.lin1 = Linear(width, hidden_dim, rng.split("lin1"), dtype)
        self.lin2 = Linear(hidden_dim, width, rng.split("lin2"), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(relu(self.lin1(x)))

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for name, lin in (("lin1", self.lin1), ("lin2", self.lin2)):
            for pname, p in lin.parameters().items():
                out[f"{name}.{pname}"] = p
        return out

    @staticmethod
    def param_count(width: int, hidden_dim: int) -> int:
        return width * hidden_dim + hidden_dim + hidden_dim * width + width
