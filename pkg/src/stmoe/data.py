"""Pose-sequence file format, dataset splits, windowing, synthetic motion.

Sequences are stored in a small binary container:

    magic 'MOTN' | u32 version | u32 frames | u32 joints | u32 joint_dim
    | u8 dtype flag (0=f32, 1=f64) | u32 frame rate | payload | u32 CRC32

All integers little-endian; the CRC covers header and payload.  Bad
magic, payload truncation, and checksum mismatch raise distinct errors
so corruption is never read as data.
"""

from __future__ import annotations

import json
import struct
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import Rng

__all__ = [
    "FRAME_RATE_HZ",
    "PoseSequence",
    "WindowedSample",
    "SplitManifest",
    "MotionFileError",
    "BadMagicError",
    "TruncatedFileError",
    "ChecksumError",
    "write_motion",
    "read_motion",
    "make_windows",
    "generate_synthetic",
]

FRAME_RATE_HZ = 60

_MAGIC = b"MOTN"
_VERSION = 1
_HEADER = struct.Struct("<4sIIIIBI")
_DTYPE_FLAGS = {"f32": 0, "f64": 1}
_FLAG_DTYPES = {0: np.float32, 1: np.float64}


class MotionFileError(Exception):
    """Base class for motion-file read failures."""


class BadMagicError(MotionFileError):
    pass


class TruncatedFileError(MotionFileError):
    pass


class ChecksumError(MotionFileError):
    pass


@dataclass
class PoseSequence:
    """Frames of axis-angle joint rotations: [frames, joints, 3], radians."""

    frames: np.ndarray
    frame_rate_hz: int = FRAME_RATE_HZ

    def __len__(self) -> int:
        return self.frames.shape[0]


def write_motion(path, seq: PoseSequence, dtype: str = "f32") -> None:
    if dtype not in _DTYPE_FLAGS:
        raise ValueError(f"dtype must be 'f32' or 'f64', got {dtype!r}")
    frames = np.ascontiguousarray(seq.frames, dtype=_FLAG_DTYPES[_DTYPE_FLAGS[dtype]])
    if frames.ndim != 3:
        raise ValueError(f"expected [frames, joints, dims], got shape {frames.shape}")
    header = _HEADER.pack(
        _MAGIC,
        _VERSION,
        frames.shape[0],
        frames.shape[1],
        frames.shape[2],
        _DTYPE_FLAGS[dtype],
        seq.frame_rate_hz,
    )
    payload = frames.astype("<" + frames.dtype.str[1:]).tobytes()
    crc = zlib.crc32(header + payload) & 0xFFFFFFFF
    Path(path).write_bytes(header + payload + struct.pack("<I", crc))


def read_motion(path) -> PoseSequence:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size + 4:
        raise TruncatedFileError(f"{path}: shorter than header")
    magic, version, n_frames, n_joints, joint_dim, dtype_flag, rate = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise MotionFileError(f"{path}: unsupported version {version}")
    if dtype_flag not in _FLAG_DTYPES:
        raise MotionFileError(f"{path}: unknown dtype flag {dtype_flag}")
    scalar = np.dtype(_FLAG_DTYPES[dtype_flag])
    expected_payload = n_frames * n_joints * joint_dim * scalar.itemsize
    if len(raw) != _HEADER.size + expected_payload + 4:
        raise TruncatedFileError(
            f"{path}: expected {_HEADER.size + expected_payload + 4} bytes, got {len(raw)}"
        )
    body, (stored_crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise ChecksumError(f"{path}: CRC mismatch")
    frames = np.frombuffer(raw, dtype=scalar.newbyteorder("<"), count=n_frames * n_joints * joint_dim,
                           offset=_HEADER.size)
    frames = frames.astype(scalar).reshape(n_frames, n_joints, joint_dim)
    return PoseSequence(frames=frames, frame_rate_hz=rate)


@dataclass
class WindowedSample:
    """Model input window and the target frames that immediately follow it."""

    input: np.ndarray   # [input_window, joints, dims]
    target: np.ndarray  # [horizon, joints, dims]


def make_windows(seq: PoseSequence, input_window: int, horizon: int = 24, stride: int = 1) -> list[WindowedSample]:
    """All contiguous (input, target) pairs from one sequence; never crosses it."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    n = len(seq)
    span = input_window + horizon
    if n < span:
        warnings.warn(f"sequence of {n} frames too short for window span {span}; no windows")
        return []
    out = []
    for start in range(0, n - span + 1, stride):
        out.append(
            WindowedSample(
                input=seq.frames[start : start + input_window],
                target=seq.frames[start + input_window : start + span],
            )
        )
    return out


@dataclass
class SplitManifest:
    """File lists per split, all paths relative to the dataset root."""

    train: list[str] = field(default_factory=list)
    validation: list[str] = field(default_factory=list)
    test: list[str] = field(default_factory=list)
    seed: int = 0

    def save(self, path) -> None:
        Path(path).write_text(
            json.dumps(
                {"seed": self.seed, "train": self.train, "validation": self.validation, "test": self.test},
                indent=2,
            )
            + "\n"
        )

    @classmethod
    def load(cls, path) -> "SplitManifest":
        raw = json.loads(Path(path).read_text())
        return cls(
            train=list(raw["train"]),
            validation=list(raw["validation"]),
            test=list(raw["test"]),
            seed=int(raw["seed"]),
        )

    def files(self, split: str) -> list[str]:
        if split not in ("train", "validation", "test"):
            raise ValueError(f"unknown split {split!r}")
        return getattr(self, split)

    def load_sequences(self, root, split: str) -> list[PoseSequence]:
        root = Path(root)
        return [read_motion(root / rel) for rel in self.files(split)]


def _synthetic_sequence(rng: Rng, length: int, num_joints: int, joint_dim: int,
                        noise_bound: float) -> tuple[np.ndarray, float]:
    """Sum of shared band-limited sinusoids with per-joint phase offsets."""
    num_waves = int(rng.integers(2, 5))                     # 2..4 sinusoids
    freqs = rng.uniform(0.1, 2.0, size=num_waves)           # Hz
    raw = rng.uniform(0.2, 1.0, size=num_waves)
    total_amp = rng.uniform(0.3, np.pi / 2)
    amps = raw / raw.sum() * total_amp                       # sum of amplitudes <= pi/2
    phases = rng.uniform(0.0, 2 * np.pi, size=num_waves)
    joint_offsets = rng.uniform(0.0, 2 * np.pi, size=(num_joints, joint_dim, num_waves))
    t = np.arange(length) / FRAME_RATE_HZ
    # [length, joints, dims, waves] phase argument; shared bank couples joints
    arg = (
        2 * np.pi * freqs * t[:, None, None, None]
        + phases
        + joint_offsets[None, :, :, :]
    )
    signal = (amps * np.sin(arg)).sum(axis=-1)
    noise = rng.uniform(-noise_bound, noise_bound, size=signal.shape)
    return signal + noise, float(amps.sum())


def generate_synthetic(
    out_dir,
    num_sequences: int,
    length: int,
    num_joints: int = 24,
    joint_dim: int = 3,
    seed: int = 0,
    dtype: str = "f32",
    noise_bound: float = 0.01,
) -> SplitManifest:
    """Write `num_sequences` synthetic motion files plus an 80/10/10 manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root_rng = Rng(seed)
    names = []
    for i in range(num_sequences):
        frames, _ = _synthetic_sequence(
            root_rng.split(f"seq{i}"), length, num_joints, joint_dim, noise_bound
        )
        name = f"seq_{i:05d}.motn"
        write_motion(out_dir / name, PoseSequence(frames=frames), dtype=dtype)
        names.append(name)
    n_train = int(num_sequences * 0.8)
    n_val = int(num_sequences * 0.1)
    manifest = SplitManifest(
        train=names[:n_train],
        validation=names[n_train : n_train + n_val],
        test=names[n_train + n_val :],
        seed=seed,
    )
    manifest.save(out_dir / "manifest.json")
    return manifest
