"""Spatio-temporal transformer for 3D human-motion prediction.

Dependency-light implementation (numpy only) covering model training,
autoregressive inference, Euler-angle evaluation, soft mixture-of-experts
routing, and an inference-time scaling benchmark.
"""

from .data import PoseSequence, SplitManifest, generate_synthetic, make_windows, read_motion, write_motion
from .inference import BenchReport, PredictionRequest, SweepSpec, bench_inference, predict
from .metrics import EvalResult, axis_angle_to_matrix, euler_from_matrix, euler_mae
from .model import AttentionRecord, ModelConfig, STTransformer, positional_encoding
from .moe import RoutingRecord, SoftMoEConfig, SoftMoELayer, moe_param_count
from .rng import Rng
from .tensor import Tensor, count_flops, no_grad
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AttentionRecord",
    "BenchReport",
    "EvalResult",
    "ModelConfig",
    "PoseSequence",
    "PredictionRequest",
    "Rng",
    "RoutingRecord",
    "STTransformer",
    "SoftMoEConfig",
    "SoftMoELayer",
    "SplitManifest",
    "SweepSpec",
    "Tensor",
    "TrainConfig",
    "__version__",
    "axis_angle_to_matrix",
    "bench_inference",
    "count_flops",
    "euler_from_matrix",
    "euler_mae",
    "evaluate",
    "generate_synthetic",
    "make_windows",
    "moe_param_count",
    "no_grad",
    "positional_encoding",
    "predict",
    "read_motion",
    "train",
    "write_motion",
]
