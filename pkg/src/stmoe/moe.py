"""Soft mixture-of-experts feed-forward block.

Tokens are never routed discretely.  A learned slot-embedding matrix
produces logits L = tokens @ phi; softmax over the token axis yields
dispatch weights (each slot is a convex combination of tokens), softmax
over the slot axis yields combine weights (each token output is a convex
combination of slot outputs).  Every expert is a two-layer MLP that
processes only its own slots, so compute scales with the slot count
rather than with tokens x experts, while the whole block stays
differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import xavier_uniform
from .rng import Rng
from .tensor import Tensor, matmul, relu, reshape, softmax, transpose

__all__ = ["SoftMoEConfig", "RoutingRecord", "SoftMoELayer", "moe_param_count", "soft_moe_flops"]


@dataclass(frozen=True)
class SoftMoEConfig:
    input_width: int
    num_experts: int
    slots_per_expert: int = 1
    expert_hidden_dim: int = 64

    def __post_init__(self):
        if self.num_experts < 1 or self.slots_per_expert < 1:
            raise ValueError("num_experts and slots_per_expert must be >= 1")
        if self.input_width < 1 or self.expert_hidden_dim < 1:
            raise ValueError("input_width and expert_hidden_dim must be >= 1")

    @property
    def total_slots(self) -> int:
        return self.num_experts * self.slots_per_expert


def moe_param_count(cfg: SoftMoEConfig) -> int:
    """Exact parameter count: slot embeddings plus per-expert MLPs."""
    d, h = cfg.input_width, cfg.expert_hidden_dim
    return d * cfg.total_slots + cfg.num_experts * (d * h + h + h * d + d)


def soft_moe_flops(cfg: SoftMoEConfig, num_tokens: int) -> int:
    """Matmul flops for one forward pass; expert term is token-count free."""
    d, h, s = cfg.input_width, cfg.expert_hidden_dim, cfg.total_slots
    logits = 2 * num_tokens * d * s
    gather = 2 * s * num_tokens * d
    experts = 2 * s * d * h + 2 * s * h * d
    scatter = 2 * num_tokens * s * d
    return logits + gather + experts + scatter


@dataclass
class RoutingRecord:
    """Dispatch/combine weights captured from one forward pass."""

    dispatch: np.ndarray  # [num_tokens, total_slots], columns sum to 1
    combine: np.ndarray   # [num_tokens, total_slots], rows sum to 1
    layer_index: int = -1
    path: str = ""


class SoftMoELayer:
    """Drop-in replacement for a dense feed-forward over [num_tokens, d]."""

    def __init__(self, cfg: SoftMoEConfig, rng: Rng, dtype: str):
        self.cfg = cfg
        d, h, n = cfg.input_width, cfg.expert_hidden_dim, cfg.num_experts
        self.phi = xavier_uniform(rng.split("phi"), d, cfg.total_slots, (d, cfg.total_slots), dtype)
        # experts stored stacked for one batched matmul per layer
        self.w1 = xavier_uniform(rng.split("w1"), d, h, (n, d, h), dtype)
        self.b1 = Tensor(np.zeros((n, 1, h)), dtype=dtype, requires_grad=True)
        self.w2 = xavier_uniform(rng.split("w2"), h, d, (n, h, d), dtype)
        self.b2 = Tensor(np.zeros((n, 1, d)), dtype=dtype, requires_grad=True)

    def __call__(self, tokens: Tensor, collect_record: bool = False):
        """Returns (output [num_tokens, d], RoutingRecord or None)."""
        cfg = self.cfg
        if tokens.ndim != 2 or tokens.shape[1] != cfg.input_width:
            raise ValueError(
                f"soft-moe expects [num_tokens, {cfg.input_width}] tokens, got {tokens.shape}"
            )
        logits = matmul(tokens, self.phi)                  # [m, slots]
        dispatch = softmax(logits, axis=0)                 # convex over tokens, per slot
        combine = softmax(logits, axis=1)                  # convex over slots, per token
        slot_in = matmul(transpose(dispatch, (1, 0)), tokens)  # [slots, d]
        grouped = reshape(slot_in, (cfg.num_experts, cfg.slots_per_expert, cfg.input_width))
        hidden = relu(matmul(grouped, self.w1) + self.b1)
        slot_out = matmul(hidden, self.w2) + self.b2
        slot_out = reshape(slot_out, (cfg.total_slots, cfg.input_width))
        out = matmul(combine, slot_out)
        record = None
        if collect_record:
            record = RoutingRecord(dispatch=dispatch.data.copy(), combine=combine.data.copy())
        return out, record

    def parameters(self) -> dict[str, Tensor]:
        return {"phi": self.phi, "w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}
