"""Euler-angle error metrics for predicted pose sequences.

Joint rotations arrive as axis-angle 3-vectors (direction = axis, norm =
angle in radians).  They are converted to rotation matrices via the
Rodrigues formula and decomposed as intrinsic z-y-x Euler angles: the
returned triple (a, b, c) satisfies R = Rz(a) @ Ry(b) @ Rx(c).  At the
gimbal-lock singularity (b = +/-pi/2) the free angle is assigned to z
and the x angle is set to zero.

All angles are radians.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "axis_angle_to_matrix",
    "euler_from_matrix",
    "euler_mae",
    "EvalResult",
    "write_eval_csv",
    "MAE_HORIZONS",
]

MAE_HORIZONS = (6, 12, 18, 24)

_GIMBAL_TOL = 1e-12


def axis_angle_to_matrix(v: np.ndarray) -> np.ndarray:
    """Rodrigues rotation for axis-angle vectors, batched over leading dims.

    v: [..., 3] -> [..., 3, 3].  The zero vector maps to the identity; the
    small-angle regime uses series expansions of sin(t)/t and
    (1-cos(t))/t^2 so the result stays smooth through t = 0.
    """
    v = np.asarray(v, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1)
    t2 = theta * theta
    small = theta < 1e-8
    with np.errstate(invalid="ignore", divide="ignore"):
        sinc = np.where(small, 1.0 - t2 / 6.0, np.sin(theta) / np.where(small, 1.0, theta))
        versine = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(theta)) / np.where(small, 1.0, t2))
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    zero = np.zeros_like(x)
    k = np.stack(
        [
            np.stack([zero, -z, y], axis=-1),
            np.stack([z, zero, -x], axis=-1),
            np.stack([-y, x, zero], axis=-1),
        ],
        axis=-2,
    )
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + sinc[..., None, None] * k + versine[..., None, None] * (k @ k)


def euler_from_matrix(rot: np.ndarray) -> np.ndarray:
    """Intrinsic z-y-x decomposition, batched: [..., 3, 3] -> [..., 3]."""
    rot = np.asarray(rot, dtype=np.float64)
    r11, r21, r31 = rot[..., 0, 0], rot[..., 1, 0], rot[..., 2, 0]
    r12, r13 = rot[..., 0, 1], rot[..., 0, 2]
    r32, r33 = rot[..., 2, 1], rot[..., 2, 2]
    b = np.arcsin(np.clip(-r31, -1.0, 1.0))
    locked = 1.0 - np.abs(r31) < _GIMBAL_TOL
    a_regular = np.arctan2(r21, r11)
    c_regular = np.arctan2(r32, r33)
    # at b = +pi/2 (r31 = -1): a = atan2(-r12, r13); at b = -pi/2: a = atan2(-r12, -r13)
    a_locked = np.arctan2(-r12, np.sign(-r31) * r13)
    a = np.where(locked, a_locked, a_regular)
    c = np.where(locked, 0.0, c_regular)
    return np.stack([a, b, c], axis=-1)


@dataclass
class EvalResult:
    """Per-frame Euler error and its aggregation over prediction horizons."""

    per_frame: np.ndarray                 # E_t, one value per predicted frame
    mae_at: dict[int, float]              # horizon -> mean of E over frames 1..n
    selected_joints: np.ndarray           # indices of joints above the std threshold
    no_moving_joints: bool = False        # True when the threshold excluded everything


def euler_mae(
    pred_seq: np.ndarray,
    tgt_seq: np.ndarray,
    std_threshold: float = 1e-4,
    horizons: tuple[int, ...] = MAE_HORIZONS,
) -> EvalResult:
    """Euler-angle error between predicted and target pose sequences.

    Per frame, E = sqrt(sum over selected joints of |euler_tgt - euler_pred|^2),
    where a joint is selected when any of its target Euler components has a
    standard deviation over the sequence above `std_threshold` (static
    joints carry no signal and are excluded).  MAE@n is the mean of E over
    the first n frames.
    """
    pred_seq = np.asarray(pred_seq, dtype=np.float64)
    tgt_seq = np.asarray(tgt_seq, dtype=np.float64)
    if pred_seq.shape != tgt_seq.shape:
        raise ValueError(f"shape mismatch: pred {pred_seq.shape} vs target {tgt_seq.shape}")
    if pred_seq.ndim != 3 or pred_seq.shape[-1] != 3:
        raise ValueError(f"expected [frames, joints, 3], got {pred_seq.shape}")

    euler_tgt = euler_from_matrix(axis_angle_to_matrix(tgt_seq))
    euler_pred = euler_from_matrix(axis_angle_to_matrix(pred_seq))

    stds = euler_tgt.std(axis=0)                       # [joints, 3]
    selected = np.where(stds.max(axis=-1) > std_threshold)[0]
    if selected.size == 0:
        per_frame = np.zeros(pred_seq.shape[0])
        mae = {n: 0.0 for n in horizons if n <= pred_seq.shape[0]}
        return EvalResult(per_frame, mae, selected, no_moving_joints=True)

    diff = euler_tgt[:, selected, :] - euler_pred[:, selected, :]
    per_frame = np.sqrt((diff ** 2).sum(axis=(1, 2)))
    mae = {n: float(per_frame[:n].mean()) for n in horizons if n <= pred_seq.shape[0]}
    return EvalResult(per_frame, mae, selected)


def write_eval_csv(result: EvalResult, path) -> None:
    """`frame,E` rows followed by one summary row per horizon."""
    path = Path(path)
    with path.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame", "E"])
        for i, e in enumerate(result.per_frame, start=1):
            writer.writerow([i, repr(float(e))])
        for n in sorted(result.mae_at):
            writer.writerow([f"mae@{n}", repr(result.mae_at[n])])
