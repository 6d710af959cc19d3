"""Binary checkpoint container for resumable training.

Layout:

    magic 'STMC' | u32 version | u32 manifest length | manifest JSON
    | f64 little-endian blobs (parameters, then optimizer moments) | u32 CRC32

The manifest is canonical JSON (sorted keys, no whitespace) naming every
blob with its offset and shape, plus the config fingerprint, epoch/step
counters, RNG stream states, metrics history, and both configs.  Because
the manifest is canonical and blob order follows it, save -> load ->
save reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

__all__ = ["CheckpointError", "CheckpointData", "config_fingerprint", "save_checkpoint", "load_checkpoint"]

_MAGIC = b"STMC"
_VERSION = 1
_HEAD = struct.Struct("<4sII")


class CheckpointError(Exception):
    pass


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_fingerprint(model_cfg_dict: dict, train_cfg_dict: dict) -> str:
    blob = _canonical({"model": model_cfg_dict, "train": train_cfg_dict})
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class CheckpointData:
    """Everything needed to reconstruct a training run mid-flight."""

    model_config: dict
    train_config: dict
    fingerprint: str
    epoch: int
    global_step: int
    params: dict[str, np.ndarray]
    optimizer_state: dict
    rng_states: dict
    metrics: list = field(default_factory=list)


def save_checkpoint(path, data: CheckpointData) -> None:
    blobs: list[np.ndarray] = []
    offsets = {}
    cursor = 0

    def register(name: str, arr: np.ndarray) -> dict:
        nonlocal cursor
        arr64 = np.ascontiguousarray(arr, dtype="<f8")
        blobs.append(arr64)
        entry = {"offset": cursor, "shape": list(arr.shape)}
        cursor += arr64.size
        return entry

# blobs registered in sorted-name order so offsets are reproducible
    # regardless of the input dicts' insertion order
    param_index = {name: register(name, data.params[name]) for name in sorted(data.params)}
    opt_meta = {k: v for k, v in data.optimizer_state.items() if k not in ("m", "v")}
    opt_index = {}
    for slot in ("m", "v"):
        if slot in data.optimizer_state:
            moments = data.optimizer_state[slot]
            opt_index[slot] = {name: register(f"opt.{slot}.{name}", moments[name]) for name in sorted(moments)}
    manifest = {
        "fingerprint": data.fingerprint,
        "epoch": data.epoch,
        "global_step": data.global_step,
        "model_config": data.model_config,
        "train_config": data.train_config,
        "params": param_index,
        "optimizer": {"meta": opt_meta, "moments": opt_index},
        "rng": data.rng_states,
        "metrics": data.metrics,
    }
    manifest_bytes = _canonical(manifest).encode()
    body = _HEAD.pack(_MAGIC, _VERSION, len(manifest_bytes)) + manifest_bytes
    body += b"".join(b.tobytes() for b in blobs)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    Path(path).write_bytes(body + struct.pack("<I", crc))


def load_checkpoint(path, expected_fingerprint: Optional[str] = None) -> CheckpointData:
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size + 4:
        raise CheckpointError(f"{path}: file shorter than header")
    magic, version, manifest_len = _HEAD.unpack_from(raw)
    if magic != _MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    body, (stored_crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError(f"{path}: CRC mismatch")
    manifest_start = _HEAD.size
    manifest = json.loads(body[manifest_start : manifest_start + manifest_len].decode())
    if expected_fingerprint is not None and manifest["fingerprint"] != expected_fingerprint:
        raise CheckpointError(
            f"{path}: config fingerprint mismatch (checkpoint {manifest['fingerprint'][:12]}..., "
            f"requested {expected_fingerprint[:12]}...)"
        )
    blob_region = body[manifest_start + manifest_len :]
    floats = np.frombuffer(blob_region, dtype="<f8")

    def extract(entry: dict) -> np.ndarray:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = floats[entry["offset"] : entry["offset"] + count].astype(np.float64)
        return arr.reshape(shape)

    params = {name: extract(e) for name, e in manifest["params"].items()}
    opt_state = dict(manifest["optimizer"]["meta"])
    for slot, index in manifest["optimizer"]["moments"].items():
        opt_state[slot] = {name: extract(e) for name, e in index.items()}
    return CheckpointData(
        model_config=manifest["model_config"],
        train_config=manifest["train_config"],
        fingerprint=manifest["fingerprint"],
        epoch=manifest["epoch"],
        global_step=manifest["global_step"],
        params=params,
        optimizer_state=opt_state,
        rng_states=manifest["rng"],
        metrics=manifest["metrics"],
    )
