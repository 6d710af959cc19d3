"""Autoregressive prediction and the dense-vs-MoE inference-time benchmark."""

from __future__ import annotations

import csv
import json
import platform
import time
from dataclasses import dataclass
from pathlib import Path
from statistics import median
from typing import Callable, Optional

import numpy as np

from .data import FRAME_RATE_HZ, PoseSequence
from .model import ModelConfig, STTransformer, analytic_param_count
from .rng import Rng
from .tensor import no_grad

__all__ = [
    "PredictionRequest",
    "NumericFailure",
    "predict",
    "BenchRow",
    "BenchReport",
    "SweepSpec",
    "bench_inference",
    "scaling_summary",
]


class NumericFailure(FloatingPointError):
    """A forward pass produced NaN/Inf where finite values are required."""


@dataclass
class PredictionRequest:
    seed_window: np.ndarray          # [input_window, joints, dims]
    horizon: int = 24

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        if isinstance(self.seed_window, PoseSequence):
            self.seed_window = self.seed_window.frames
        self.seed_window = np.asarray(self.seed_window)


def predict(
    model: STTransformer,
    request: PredictionRequest,
    on_window: Optional[Callable[[int, np.ndarray], None]] = None,
) -> PoseSequence:
    """Roll the window forward `horizon` times, feeding back each prediction.

    Each step drops the oldest frame and appends the newly predicted one.
    `on_window` (if given) observes the window contents before each step.
    """
    cfg = model.cfg
    window = np.ascontiguousarray(request.seed_window, dtype=np.dtype("float32" if cfg.dtype == "f32" else "float64"))
    expected = (cfg.input_window, cfg.num_joints, cfg.joint_dim)
    if window.shape != expected:
        raise ValueError(f"seed window must be {expected}, got {window.shape}")
    frames = []
    with no_grad():
        for step in range(request.horizon):
            if on_window is not None:
                on_window(step, window.copy())
            pred = model.forward(window).prediction.data
            if not np.all(np.isfinite(pred)):
                raise NumericFailure(f"non-finite prediction at step {step}")
            frames.append(pred[0])
            window = np.concatenate([window[1:], pred], axis=0)
    return PoseSequence(frames=np.stack(frames), frame_rate_hz=FRAME_RATE_HZ)


# -- benchmark ---------------------------------------------------------------


@dataclass
class BenchRow:
    kind: str          # "dense" | "soft_moe"
    param: int         # swept value: hidden dim or expert count
    total_params: int
    seconds: float
    preds_per_sec: float


@dataclass
class BenchReport:
    rows: list[BenchRow]
    metadata: dict

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["kind", "param", "total_params", "seconds", "preds_per_sec"])
            for r in self.rows:
                writer.writerow([r.kind, r.param, r.total_params, f"{r.seconds:.6f}", f"{r.preds_per_sec:.3f}"])

    def write_metadata(self, path) -> None:
        Path(path).write_text(json.dumps(self.metadata, indent=2) + "\n")


@dataclass
class SweepSpec:
    """Dense hidden-dim sweep vs MoE expert-count sweep on a shared backbone.

    The backbone is deliberately small so the swept component dominates
    parameter growth; `moe_expert_hidden` sets the per-expert width, which
    stays fixed while the expert count grows.
    """

    dense_hidden: tuple[int, ...] = (64, 128, 256, 512, 1024, 2048)
    moe_experts: tuple[int, ...] = (2, 4, 8, 16, 32)
    moe_expert_hidden: int = 192
    input_window: int = 56
    num_joints: int = 24
    joint_dim: int = 3
    embed_dim: int = 2
    num_layers: int = 1
    reps: int = 7
    warmup: int = 2
    num_windows: int = 8
    horizon: int = 24
    dtype: str = "f32"
    seed: int = 0
    multi_threaded: bool = False

    def base_config(self, **overrides) -> ModelConfig:
        kw = dict(
            input_window=self.input_window,
            num_joints=self.num_joints,
            joint_dim=self.joint_dim,
            embed_dim=self.embed_dim,
            num_layers=self.num_layers,
            dropout_rate=0.0,
            dtype=self.dtype,
        )
        kw.update(overrides)
        return ModelConfig(**kw)


def _thread_limiter(single: bool):
    """Limit BLAS pools to one thread when available; report what happened."""
    if not single:
        return None, "unlimited"
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=1), "threadpoolctl"
    except ImportError:
        return None, "not-enforced (threadpoolctl unavailable)"


def _time_test_pass(model: STTransformer, windows: list[np.ndarray], horizon: int, reps: int, warmup: int) -> float:
    """Median wall time of the full autoregressive pass; excludes construction."""
    def one_pass():
        for w in windows:
            predict(model, PredictionRequest(seed_window=w, horizon=horizon))

    for _ in range(warmup):
        one_pass()
    times = []
    for _ in range(reps):
        start = time.perf_counter()
        one_pass()
        times.append(time.perf_counter() - start)
    return median(times)


def bench_inference(spec: SweepSpec) -> BenchReport:
    rng = Rng(spec.seed)
    windows = [
        rng.split(f"window{i}").normal(scale=0.5, size=(spec.input_window, spec.num_joints, spec.joint_dim))
        for i in range(spec.num_windows)
    ]
    preds_per_pass = spec.num_windows * spec.horizon
    limiter, thread_mode = _thread_limiter(single=not spec.multi_threaded)
    rows = []
    try:
        for hidden in spec.dense_hidden:
            cfg = spec.base_config(ffn_kind="dense", hidden_dim=hidden)
            model = STTransformer(cfg, rng.split(f"dense{hidden}"))
            seconds = _time_test_pass(model, windows, spec.horizon, spec.reps, spec.warmup)
            rows.append(
                BenchRow("dense", hidden, analytic_param_count(cfg), seconds, preds_per_pass / seconds)
            )
        for experts in spec.moe_experts:
            cfg = spec.base_config(
                ffn_kind="soft_moe",
                num_experts=experts,
                slots_per_expert=1,
                expert_hidden_dim=spec.moe_expert_hidden,
            )
            model = STTransformer(cfg, rng.split(f"moe{experts}"))
            seconds = _time_test_pass(model, windows, spec.horizon, spec.reps, spec.warmup)
            rows.append(
                BenchRow("soft_moe", experts, analytic_param_count(cfg), seconds, preds_per_pass / seconds)
            )
    finally:
        if limiter is not None:
            limiter.unregister()
    metadata = {
        "hardware": platform.processor() or platform.machine(),
        "platform": platform.platform(),
        "dtype": spec.dtype,
        "threads": "unlimited" if spec.multi_threaded else 1,
        "thread_mode": thread_mode,
        "reps": spec.reps,
        "warmup": spec.warmup,
        "num_windows": spec.num_windows,
        "horizon": spec.horizon,
        "backbone": {
            "input_window": spec.input_window,
            "num_joints": spec.num_joints,
            "embed_dim": spec.embed_dim,
            "num_layers": spec.num_layers,
            "moe_expert_hidden": spec.moe_expert_hidden,
        },
    }
    return BenchReport(rows=rows, metadata=metadata)


def scaling_summary(report: BenchReport) -> dict:
    """Max/min time and parameter ratios per sweep kind."""
    out = {}
    for kind in ("dense", "soft_moe"):
        rows = sorted((r for r in report.rows if r.kind == kind), key=lambda r: r.param)
        if len(rows) < 2:
            continue
        out[f"{kind}_time_ratio"] = rows[-1].seconds / rows[0].seconds
        out[f"{kind}_param_ratio"] = rows[-1].total_params / rows[0].total_params
    return out
