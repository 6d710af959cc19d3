"""Training loop: MSE loss, optimizers, warmup schedule, teacher forcing,
checkpoint save/resume.

Each training step unrolls the model over the 24-frame target horizon.
At every unroll step the window is advanced either with the ground-truth
frame (probability = teacher forcing ratio) or with the model's own
prediction; gradients flow through fed-back predictions.  The teacher
forcing ratio decays linearly with epoch and is floored at a small
epsilon so it never reaches zero, which destabilized training otherwise.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import CheckpointData, CheckpointError, config_fingerprint, load_checkpoint, save_checkpoint
from .data import WindowedSample
from .inference import PredictionRequest, predict
from .metrics import MAE_HORIZONS, euler_mae
from .model import ConfigError, ModelConfig, STTransformer
from .rng import Rng
from .tensor import Tensor, concat, mean, mul, sub

__all__ = [
    "TrainConfig",
    "NanLossError",
    "mse_loss",
    "noam_lr",
    "teacher_forcing_ratio",
    "make_optimizer",
    "train_step",
    "evaluate",
    "train",
    "TrainResult",
    "METRICS_HEADER",
]

OPTIMIZERS = ("sgd", "adam", "noamopt")
METRICS_HEADER = ["epoch", "train_loss", "val_loss", "mae6", "mae12", "mae18", "mae24"]


class NanLossError(FloatingPointError):
    """Training loss collapsed to NaN/Inf; aborted with diagnostics."""


@dataclass
class TrainConfig:
    batch_size: int = 32
    optimizer: str = "noamopt"
    base_lr: float = 1e-3                       # sgd / adam
    warmup_steps: int = 4000                    # noamopt
    epochs: int = 20
    total_effective_epochs: Optional[int] = None  # teacher-forcing horizon; defaults to epochs
    tf_epsilon: float = 1e-3
    seed: int = 0
    checkpoint_dir: Optional[str] = None
    save_every_n_epochs: int = 1
    horizon: int = 24
    grad_clip_norm: Optional[float] = 1.0       # None disables clipping
    train_stride: int = 1
    eval_stride: Optional[int] = None           # defaults to the input window (non-overlapping)

    @property
    def effective_epochs(self) -> int:
        return self.epochs if self.total_effective_epochs is None else self.total_effective_epochs

    def validation_errors(self) -> list[str]:
        errs = []
        if self.batch_size < 1:
            errs.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.warmup_steps < 1:
            errs.append(f"warmup_steps must be >= 1, got {self.warmup_steps}")
        if self.tf_epsilon <= 0:
            errs.append(f"tf_epsilon must be > 0, got {self.tf_epsilon}")
        if self.optimizer not in OPTIMIZERS:
            errs.append(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.epochs < 1:
            errs.append(f"epochs must be >= 1, got {self.epochs}")
        if self.horizon < 1:
            errs.append(f"horizon must be >= 1, got {self.horizon}")
        return errs

    def validate(self) -> "TrainConfig":
        errs = self.validation_errors()
        if errs:
            raise ConfigError("; ".join(errs))
        return self


# -- loss and schedules -------------------------------------------------------


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error over every (frame, joint, component) entry."""
    tgt = target if isinstance(target, Tensor) else Tensor(np.asarray(target), dtype=pred.dtype_name)
    if pred.shape != tgt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {tgt.shape}")
    diff = sub(pred, tgt)
    return mean(mul(diff, diff))


def noam_lr(step: int, model_dim: int, warmup: int) -> float:
    """Warmup-then-decay schedule: D^-0.5 * min(step^-0.5, step * warmup^-1.5)."""
    if step < 1:
        raise ValueError(f"noam schedule is undefined for step {step}; steps start at 1")
    return model_dim ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def teacher_forcing_ratio(epoch: int, total_effective_epochs: int, tf_epsilon: float) -> float:
    """Linear decay from 1 toward 0, floored at tf_epsilon for stability."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return max(max(0.0, 1.0 - epoch / total_effective_epochs), tf_epsilon)


# -- optimizers ------------------------------------------------------------------


class SGD:
    kind = "sgd"

    def __init__(self, params: dict[str, Tensor]):
        self.params = params

    def step(self, lr: float) -> None:
        for p in self.params.values():
            if p.grad is not None:
                p.data -= np.asarray(lr, dtype=p.data.dtype) * p.grad

    def state_dict(self) -> dict:
        return {"kind": self.kind}

    def load_state_dict(self, state: dict) -> None:
        pass


class Adam:
    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.999), eps=1e-8, kind="adam"):
        self.params = params
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.kind = kind
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * (g * g)
            m_hat = self.m[name] / bias1
            v_hat = self.v[name] / bias2
            p.data -= np.asarray(lr, dtype=p.data.dtype) * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict:
        return {
            "kind": self.kind,
            "t": self.t,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for name, p in self.params.items():
            self.m[name] = np.asarray(state["m"][name], dtype=p.data.dtype).reshape(p.shape)
            self.v[name] = np.asarray(state["v"][name], dtype=p.data.dtype).reshape(p.shape)


def make_optimizer(name: str, params: dict[str, Tensor], model_cfg: ModelConfig, train_cfg: TrainConfig):
    """Returns (optimizer, lr_for_step) for the named scheme.

    noamopt pairs Adam (betas 0.9/0.98, eps 1e-9) with the warmup schedule,
    using the joint embedding width as the model dimensionality.
    """
    if name == "sgd":
        return SGD(params), lambda step: train_cfg.base_lr
    if name == "adam":
        return Adam(params, betas=(0.9, 0.999), eps=1e-8, kind="adam"), lambda step: train_cfg.base_lr
    if name == "noamopt":
        opt = Adam(params, betas=(0.9, 0.98), eps=1e-9, kind="noamopt")
        dim = model_cfg.embed_dim
        return opt, lambda step: noam_lr(step, dim, train_cfg.warmup_steps)
    raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {name!r}")


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Global-norm clipping; returns the pre-clip norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= np.asarray(factor, dtype=p.grad.dtype)
    return norm


# -- training step ------------------------------------------------------------------


def _unroll_loss(model: STTransformer, sample: WindowedSample, tf_ratio: float,
                 dropout_rng: Optional[Rng], tf_rng: Rng, horizon: int) -> Tensor:
    cfg = model.cfg
    window = Tensor(sample.input, dtype=cfg.dtype)
    preds = []
    for step in range(horizon):
        out = model.forward(window, training=True, rng=dropout_rng)
        preds.append(out.prediction)
        if step < horizon - 1:
            if float(tf_rng.random()) < tf_ratio:
                next_frame = Tensor(sample.target[step : step + 1], dtype=cfg.dtype)
            else:
                next_frame = out.prediction
            window = concat([window[1:], next_frame], axis=0)
    return mse_loss(concat(preds, axis=0), sample.target[:horizon])


def train_step(
    model: STTransformer,
    batch: list[WindowedSample],
    optimizer,
    lr: float,
    tf_ratio: float,
    dropout_rng: Optional[Rng],
    tf_rng: Rng,
    grad_clip_norm: Optional[float] = 1.0,
    horizon: int = 24,
) -> float:
    """One optimizer update on a batch of teacher-forced unrolls."""
    model.zero_grad()
    total = None
    for sample in batch:
        loss = _unroll_loss(model, sample, tf_ratio, dropout_rng, tf_rng, horizon)
        total = loss if total is None else total + loss
    batch_loss = total * (1.0 / len(batch))
    value = batch_loss.item()
    if not math.isfinite(value):
        raise NanLossError(
            f"loss is {value} before the optimizer step; gradients likely exploded "
            f"(tf_ratio={tf_ratio:.4f}, lr={lr:.3e})"
        )
    batch_loss.backward()
    if grad_clip_norm is not None:
        clip_grad_norm(model.parameters(), grad_clip_norm)
    optimizer.step(lr)
    return value


# -- evaluation ----------------------------------------------------------------------


@dataclass
class EvalSummary:
    loss: float
    mae_at: dict[int, float]
    num_windows: int
    per_frame: Optional[np.ndarray] = None  # mean Euler error per predicted frame


def evaluate(model: STTransformer, windows: list[WindowedSample], horizon: int = 24) -> EvalSummary:
    """Fully autoregressive evaluation (no teacher forcing), matching inference."""
    if not windows:
        return EvalSummary(loss=float("nan"), mae_at={n: float("nan") for n in MAE_HORIZONS}, num_windows=0)
    losses = []
    mae_acc = {n: [] for n in MAE_HORIZONS if n <= horizon}
    frame_curves = []
    for sample in windows:
        pred = predict(model, PredictionRequest(seed_window=sample.input, horizon=horizon))
        target = sample.target[:horizon].astype(np.float64)
        losses.append(float(((pred.frames.astype(np.float64) - target) ** 2).mean()))
        result = euler_mae(pred.frames, target)
        frame_curves.append(result.per_frame)
        for n in mae_acc:
            mae_acc[n].append(result.mae_at[n])
    return EvalSummary(
        loss=float(np.mean(losses)),
        mae_at={n: float(np.mean(v)) for n, v in mae_acc.items()},
        num_windows=len(windows),
        per_frame=np.mean(frame_curves, axis=0),
    )


# -- full training loop -----------------------------------------------------------------


@dataclass
class TrainResult:
    model: STTransformer
    metrics: list[dict]
    checkpoint_path: Optional[Path]
    resumed_from_epoch: Optional[int] = None


def _checkpoint_paths(ckpt_dir: Path) -> list[Path]:
    return sorted(ckpt_dir.glob("ckpt_epoch*.stmc"))


def write_metrics_csv(path, rows: list[dict]) -> None:
    with Path(path).open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_HEADER)
        for row in rows:
            writer.writerow([row[k] for k in METRICS_HEADER])


def train(
    train_windows: list[WindowedSample],
    val_windows: list[WindowedSample],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    resume: bool = False,
    log: Optional[callable] = None,
    stop_after_epoch: Optional[int] = None,
) -> TrainResult:
    """Run the configured number of epochs; saves and resumes checkpoints.

    With `resume=True` and a valid checkpoint in `checkpoint_dir`, training
    continues bit-exactly from the last saved epoch (parameters, optimizer
    moments, RNG streams, and batch order are all restored).
    `stop_after_epoch` interrupts the run after that epoch completes,
    force-saving a checkpoint; it models walltime preemption and is not
    part of the config fingerprint.
    """
    model_cfg.validate()
    train_cfg.validate()
    if not train_windows:
        raise ValueError("no training windows")
    say = log or (lambda msg: None)
    fingerprint = config_fingerprint(_fingerprint_dict(model_cfg), _fingerprint_dict(train_cfg))

    root_rng = Rng(train_cfg.seed)
    model = STTransformer(model_cfg, root_rng.split("model"))
    params = model.parameters()
    optimizer, lr_for_step = make_optimizer(train_cfg.optimizer, params, model_cfg, train_cfg)
    dropout_rng = root_rng.split("dropout")
    tf_rng = root_rng.split("teacher-forcing")
    shuffle_rng = root_rng.split("shuffle")

    ckpt_dir = Path(train_cfg.checkpoint_dir) if train_cfg.checkpoint_dir else None
    start_epoch = 0
    global_step = 0
    metrics: list[dict] = []
    resumed_from = None
    if resume and ckpt_dir is not None and ckpt_dir.exists() and _checkpoint_paths(ckpt_dir):
        latest = _checkpoint_paths(ckpt_dir)[-1]
        data = load_checkpoint(latest, expected_fingerprint=fingerprint)
        for name, p in params.items():
            p.data[:] = data.params[name].astype(p.data.dtype)
        optimizer.load_state_dict(data.optimizer_state)
        dropout_rng.set_state(data.rng_states["dropout"])
        tf_rng.set_state(data.rng_states["teacher-forcing"])
        shuffle_rng.set_state(data.rng_states["shuffle"])
        start_epoch = data.epoch + 1
        global_step = data.global_step
        metrics = list(data.metrics)
        resumed_from = data.epoch
        say(f"resumed from {latest} (epoch {data.epoch})")
    elif resume:
        say("no checkpoint found; starting fresh")

    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    last_ckpt = None

    def save(epoch: int) -> Path:
        data = CheckpointData(
            model_config=_fingerprint_dict(model_cfg),
            train_config=_fingerprint_dict(train_cfg),
            fingerprint=fingerprint,
            epoch=epoch,
            global_step=global_step,
            params={name: p.data for name, p in params.items()},
            optimizer_state=optimizer.state_dict(),
            rng_states={
                "dropout": dropout_rng.get_state(),
                "teacher-forcing": tf_rng.get_state(),
                "shuffle": shuffle_rng.get_state(),
            },
            metrics=metrics,
        )
        path = ckpt_dir / f"ckpt_epoch{epoch:05d}.stmc"
        save_checkpoint(path, data)
        return path

    n = len(train_windows)
    for epoch in range(start_epoch, train_cfg.epochs):
        tf_ratio = teacher_forcing_ratio(epoch, train_cfg.effective_epochs, train_cfg.tf_epsilon)
        order = shuffle_rng.permutation(n)
        loss_sum = 0.0
        for lo in range(0, n, train_cfg.batch_size):
            batch = [train_windows[i] for i in order[lo : lo + train_cfg.batch_size]]
            global_step += 1
            try:
                loss = train_step(
                    model,
                    batch,
                    optimizer,
                    lr_for_step(global_step),
                    tf_ratio,
                    dropout_rng if model_cfg.dropout_rate > 0 else None,
                    tf_rng,
                    train_cfg.grad_clip_norm,
                    train_cfg.horizon,
                )
            except NanLossError as exc:
                raise NanLossError(f"epoch {epoch}, step {global_step}: {exc}") from exc
            loss_sum += loss * len(batch)
        train_loss = loss_sum / n
        summary = evaluate(model, val_windows, train_cfg.horizon)
        row = {
            "epoch": epoch,
            "train_loss": train_loss,
            "val_loss": summary.loss,
            "mae6": summary.mae_at.get(6, float("nan")),
            "mae12": summary.mae_at.get(12, float("nan")),
            "mae18": summary.mae_at.get(18, float("nan")),
            "mae24": summary.mae_at.get(24, float("nan")),
        }
        metrics.append(row)
        say(
            f"epoch {epoch}: train_loss={train_loss:.6f} val_loss={summary.loss:.6f} "
            f"mae24={row['mae24']:.4f} tf={tf_ratio:.3f}"
        )
        interrupted = stop_after_epoch is not None and epoch >= stop_after_epoch
        if ckpt_dir is not None and (
            (epoch + 1) % train_cfg.save_every_n_epochs == 0
            or epoch == train_cfg.epochs - 1
            or interrupted
        ):
            last_ckpt = save(epoch)
        if ckpt_dir is not None:
            write_metrics_csv(ckpt_dir / "metrics.csv", metrics)
        if interrupted:
            say(f"interrupted after epoch {epoch}")
            break

    return TrainResult(model=model, metrics=metrics, checkpoint_path=last_ckpt, resumed_from_epoch=resumed_from)


def _fingerprint_dict(cfg) -> dict:
    """Config as a dict, minus fields that do not affect the trajectory."""
    d = asdict(cfg)
    d.pop("checkpoint_dir", None)
    d.pop("save_every_n_epochs", None)
    return d


def load_model_from_checkpoint(path) -> tuple[STTransformer, CheckpointData]:
    """Rebuild a model purely from a checkpoint file (for eval/predict)."""
    data = load_checkpoint(path)
    cfg = ModelConfig(**data.model_config)
    model = STTransformer(cfg, Rng(0))
    for name, p in model.parameters().items():
        if name not in data.params:
            raise CheckpointError(f"checkpoint missing parameter {name}")
        p.data[:] = data.params[name].astype(p.data.dtype)
    return model, data
