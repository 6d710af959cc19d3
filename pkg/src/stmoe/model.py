"""Spatio-temporal transformer for next-frame pose prediction.

A pose window [T, S, M] (frames x joints x axis-angle dims) is embedded
per joint to width E, tagged with sinusoidal positional encodings, and
passed through blocks that each run two parallel paths from the same
input:

  temporal path: frames as tokens of width S*E, causally-masked attention
  spatial path:  joints as tokens of width T*E, unmasked attention

Each path applies attention -> dropout -> residual -> layer-norm ->
feed-forward -> dropout -> residual -> layer-norm; the two path outputs
are summed.  Two projection heads then map E back to M per position and
collapse the T axis, yielding one predicted frame [1, S, M].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .layers import FeedForward, Linear, MultiHeadAttention, xavier_uniform
from .moe import RoutingRecord, SoftMoEConfig, SoftMoELayer, moe_param_count
from .rng import Rng
from .tensor import Tensor, dropout, layer_norm, matmul, reshape, transpose

__all__ = [
    "ModelConfig",
    "ConfigError",
    "AttentionRecord",
    "ForwardOutput",
    "STBlock",
    "STTransformer",
    "positional_encoding",
    "analytic_param_count",
]

LAYER_NORM_EPS = 1e-5


class ConfigError(ValueError):
    """Invalid model or training configuration."""


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    `input_window` is the number of frames the model conditions on (the
    rolling window length during autoregressive inference).
    """

    input_window: int = 120       # frames per input window
    num_joints: int = 24
    joint_dim: int = 3            # axis-angle components per joint
    embed_dim: int = 128
    num_layers: int = 2
    num_heads_temporal: int = 1
    num_heads_spatial: int = 1
    hidden_dim: int = 512
    dropout_rate: float = 0.1
    ffn_kind: str = "dense"       # "dense" | "soft_moe"
    num_experts: int = 4
    slots_per_expert: int = 1
    expert_hidden_dim: Optional[int] = None  # defaults to hidden_dim
    dtype: str = "f32"

    @property
    def temporal_width(self) -> int:
        return self.num_joints * self.embed_dim

    @property
    def spatial_width(self) -> int:
        return self.input_window * self.embed_dim

    @property
    def expert_hidden(self) -> int:
        return self.hidden_dim if self.expert_hidden_dim is None else self.expert_hidden_dim

    def validation_errors(self) -> list[str]:
        errs = []
        for name in ("input_window", "num_joints", "joint_dim", "embed_dim", "num_layers", "hidden_dim"):
            if getattr(self, name) < 1:
                errs.append(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.embed_dim % 2 != 0:
            errs.append(f"embed_dim must be even for the sinusoidal encoding, got {self.embed_dim}")
        if not 0.0 <= self.dropout_rate < 1.0:
            errs.append(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.ffn_kind not in ("dense", "soft_moe"):
            errs.append(f"ffn_kind must be 'dense' or 'soft_moe', got {self.ffn_kind!r}")
        if self.dtype not in ("f32", "f64"):
            errs.append(f"dtype must be 'f32' or 'f64', got {self.dtype!r}")
        if self.num_heads_temporal < 1 or self.num_heads_spatial < 1:
            errs.append("head counts must be >= 1")
        elif self.embed_dim > 0:
            if self.temporal_width % self.num_heads_temporal != 0:
                errs.append(
                    f"temporal width {self.temporal_width} not divisible by "
                    f"{self.num_heads_temporal} heads"
                )
            if self.spatial_width % self.num_heads_spatial != 0:
                errs.append(
                    f"spatial width {self.spatial_width} not divisible by "
                    f"{self.num_heads_spatial} heads"
                )
        if self.ffn_kind == "soft_moe":
            if self.num_experts < 1:
                errs.append(f"num_experts must be >= 1, got {self.num_experts}")
            if self.slots_per_expert < 1:
                errs.append(f"slots_per_expert must be >= 1, got {self.slots_per_expert}")
            if self.expert_hidden < 1:
                errs.append(f"expert hidden dim must be >= 1, got {self.expert_hidden}")
        return errs

    def validate(self) -> "ModelConfig":
        errs = self.validation_errors()
        if errs:
            raise ConfigError("; ".join(errs))
        return self


def positional_encoding(num_positions: int, width: int) -> np.ndarray:
    """Sinusoidal position table: sin at even columns, cos at odd ones.

    entry(pos, 2i)   = sin(pos / 10000^(2i/width))
    entry(pos, 2i+1) = cos(pos / 10000^(2i/width))
    """
    if width % 2 != 0:
        raise ConfigError(f"positional encoding width must be even, got {width}")
    pos = np.arange(num_positions, dtype=np.float64)[:, None]
    i2 = np.arange(0, width, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i2 / width)
    pe = np.zeros((num_positions, width), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


@dataclass
class AttentionRecord:
    """Per-head attention weights captured from one block."""

    temporal: np.ndarray  # [heads, T, T]; zero strictly above the diagonal
    spatial: np.ndarray   # [heads, S, S]
    layer_index: int


@dataclass
class ForwardOutput:
    prediction: Tensor                       # [1, S, M]
    attention_records: list[AttentionRecord] = field(default_factory=list)
    routing_records: list[RoutingRecord] = field(default_factory=list)


class _PathNorm:
    """gamma/beta pair for one layer-norm site."""

    def __init__(self, width: int, dtype: str):
        self.gamma = Tensor(np.ones(width), dtype=dtype, requires_grad=True)
        self.beta = Tensor(np.zeros(width), dtype=dtype, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, axis=-1, eps=LAYER_NORM_EPS)

    def parameters(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}


class _AttentionPath:
    """attention -> dropout -> residual -> norm -> ffn -> dropout -> residual -> norm."""

    def __init__(self, width: int, num_heads: int, causal: bool, cfg: ModelConfig, rng: Rng):
        self.width = width
        self.dropout_rate = cfg.dropout_rate
        self.attn = MultiHeadAttention(width, num_heads, causal, rng.split("attn"), cfg.dtype)
        self.norm1 = _PathNorm(width, cfg.dtype)
        self.norm2 = _PathNorm(width, cfg.dtype)
        if cfg.ffn_kind == "soft_moe":
            moe_cfg = SoftMoEConfig(
                input_width=width,
                num_experts=cfg.num_experts,
                slots_per_expert=cfg.slots_per_expert,
                expert_hidden_dim=cfg.expert_hidden,
            )
            self.ffn = SoftMoELayer(moe_cfg, rng.split("moe"), cfg.dtype)
        else:
            self.ffn = FeedForward(width, cfg.hidden_dim, rng.split("ffn"), cfg.dtype)

    def __call__(self, tokens: Tensor, training: bool, rng: Optional[Rng], collect: bool):
        attn_out, attn_weights = self.attn(tokens, collect_weights=collect)
        h = self.norm1(tokens + dropout(attn_out, self.dropout_rate, rng, training))
        routing = None
        if isinstance(self.ffn, SoftMoELayer):
            ffn_out, routing = self.ffn(h, collect_record=collect)
        else:
            ffn_out = self.ffn(h)
        out = self.norm2(h + dropout(ffn_out, self.dropout_rate, rng, training))
        return out, attn_weights, routing

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for prefix, mod in (("attn", self.attn), ("norm1", self.norm1), ("norm2", self.norm2), ("ffn", self.ffn)):
            for name, p in mod.parameters().items():
                out[f"{prefix}.{name}"] = p
        return out


class STBlock:
    """One spatio-temporal layer: parallel temporal and spatial paths, summed."""

    def __init__(self, cfg: ModelConfig, rng: Rng):
        self.cfg = cfg
        self.temporal = _AttentionPath(
            cfg.temporal_width, cfg.num_heads_temporal, causal=True, cfg=cfg, rng=rng.split("temporal")
        )
        self.spatial = _AttentionPath(
            cfg.spatial_width, cfg.num_heads_spatial, causal=False, cfg=cfg, rng=rng.split("spatial")
        )

    def __call__(self, x: Tensor, training: bool = False, rng: Optional[Rng] = None, collect: bool = False):
        """x: [T, S, E] -> ([T, S, E], temporal weights, spatial weights, routing records)."""
        t_frames, s_joints, e_dim = x.shape
        tokens_t = reshape(x, (t_frames, s_joints * e_dim))
        out_t, w_t, routing_t = self.temporal(tokens_t, training, rng, collect)
        out_t = reshape(out_t, (t_frames, s_joints, e_dim))

        tokens_s = reshape(transpose(x, (1, 0, 2)), (s_joints, t_frames * e_dim))
        out_s, w_s, routing_s = self.spatial(tokens_s, training, rng, collect)
        out_s = transpose(reshape(out_s, (s_joints, t_frames, e_dim)), (1, 0, 2))

        routings = []
        if routing_t is not None:
            routing_t.path = "temporal"
            routings.append(routing_t)
        if routing_s is not None:
            routing_s.path = "spatial"
            routings.append(routing_s)
        return out_t + out_s, w_t, w_s, routings

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for prefix, path in (("temporal", self.temporal), ("spatial", self.spatial)):
            for name, p in path.parameters().items():
                out[f"{prefix}.{name}"] = p
        return out


class STTransformer:
    """Full model: joint embedding, positional encoding, ST blocks, projections."""

    def __init__(self, cfg: ModelConfig, rng: Rng):
        cfg.validate()
        self.cfg = cfg
        init_rng = rng.split("init")
        self.embed = Linear(cfg.joint_dim, cfg.embed_dim, init_rng.split("embed"), cfg.dtype)
        self.pos_encoding = Tensor(
            positional_encoding(cfg.input_window, cfg.embed_dim)[:, None, :], dtype=cfg.dtype
        )
        self.blocks = [STBlock(cfg, init_rng.split(f"block{i}")) for i in range(cfg.num_layers)]
        self.project1 = Linear(cfg.embed_dim, cfg.joint_dim, init_rng.split("project1"), cfg.dtype)
        # collapses the window axis T -> 1 with learned weights
        self.project2_weight = xavier_uniform(
            init_rng.split("project2"), cfg.input_window, 1, (cfg.input_window, 1), cfg.dtype
        )
        self.project2_bias = Tensor(np.zeros(1), dtype=cfg.dtype, requires_grad=True)

    # -- parameter plumbing ---------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for name, p in self.embed.parameters().items():
            out[f"embed.{name}"] = p
        for i, block in enumerate(self.blocks):
            for name, p in block.parameters().items():
                out[f"block{i}.{name}"] = p
        for name, p in self.project1.parameters().items():
            out[f"project1.{name}"] = p
        out["project2.weight"] = self.project2_weight
        out["project2.bias"] = self.project2_bias
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    # -- forward pieces ---------------------------------------------------------

    def embed_joints(self, window: Tensor) -> Tensor:
        """Shared per-joint linear map M -> E at every (frame, joint) position."""
        t_frames, s_joints, m_dim = window.shape
        flat = reshape(window, (t_frames * s_joints, m_dim))
        return reshape(self.embed(flat), (t_frames, s_joints, self.cfg.embed_dim))

    def project_output(self, h: Tensor) -> Tensor:
        """E -> M per position, then collapse the window axis to one frame."""
        t_frames, s_joints, _ = h.shape
        flat = reshape(h, (t_frames * s_joints, self.cfg.embed_dim))
        per_frame = reshape(self.project1(flat), (t_frames, s_joints, self.cfg.joint_dim))
        stacked = transpose(per_frame, (1, 2, 0))            # [S, M, T]
        collapsed = matmul(stacked, self.project2_weight) + self.project2_bias
        return transpose(collapsed, (2, 0, 1))               # [1, S, M]

    def forward(
        self,
        window: Union[np.ndarray, Tensor],
        training: bool = False,
        rng: Optional[Rng] = None,
        collect_records: bool = False,
    ) -> ForwardOutput:
        cfg = self.cfg
        x = window if isinstance(window, Tensor) else Tensor(np.asarray(window), dtype=cfg.dtype)
        if x.shape != (cfg.input_window, cfg.num_joints, cfg.joint_dim):
            raise ValueError(
                f"window must be [{cfg.input_window}, {cfg.num_joints}, {cfg.joint_dim}], got {x.shape}"
            )
        if training and cfg.dropout_rate > 0 and rng is None:
            raise ValueError("training forward with dropout needs an rng")
        h = self.embed_joints(x) + self.pos_encoding
        attn_records: list[AttentionRecord] = []
        routing_records: list[RoutingRecord] = []
        for i, block in enumerate(self.blocks):
            h, w_t, w_s, routings = block(h, training=training, rng=rng, collect=collect_records)
            if collect_records:
                attn_records.append(AttentionRecord(temporal=w_t, spatial=w_s, layer_index=i))
                for r in routings:
                    r.layer_index = i
                routing_records.extend(routings)
        return ForwardOutput(self.project_output(h), attn_records, routing_records)

    __call__ = forward


def analytic_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count; must agree exactly with the built model."""
    e, m, t, s = cfg.embed_dim, cfg.joint_dim, cfg.input_window, cfg.num_joints
    total = m * e + e                       # joint embedding
    for width in (cfg.temporal_width, cfg.spatial_width):
        per_path = MultiHeadAttention.param_count(width)
        per_path += 2 * (2 * width)         # two layer-norms (gamma, beta)
        if cfg.ffn_kind == "soft_moe":
            per_path += moe_param_count(
                SoftMoEConfig(
                    input_width=width,
                    num_experts=cfg.num_experts,
                    slots_per_expert=cfg.slots_per_expert,
                    expert_hidden_dim=cfg.expert_hidden,
                )
            )
        else:
            per_path += FeedForward.param_count(width, cfg.hidden_dim)
        total += cfg.num_layers * per_path
    total += e * m + m                      # project_1
    total += t + 1                          # project_2
    return total
