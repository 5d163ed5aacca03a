"""Bit-exact binary checkpoints.

Layout:

    magic "TIE1"
    u32 LE format version
    u32 LE header length
    UTF-8 JSON header: run metadata plus a tensor manifest of
        {"name", "dtype", "dims", "offset"} entries, offsets relative to the
        start of the payload region
    payload: raw little-endian float64 tensor data, in manifest order
    u32 LE CRC32 of the payload region

The payload carries model parameters, Adam moments, and the gate's previous
batch gradients, so a loaded checkpoint resumes the exact training
trajectory.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Vocabulary
from .model import ModelConfig, Parameters
from .trainer import Adam, GradientSnapshot, TrainState

__all__ = ["CheckpointError", "Checkpoint", "save_checkpoint", "load_checkpoint"]

MAGIC = b"TIE1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Corrupt or incompatible checkpoint file."""


@dataclass
class Checkpoint:
    config: ModelConfig
    num_channels: int
    seed: int
    step: int
    vocab: Vocabulary
    state: TrainState


def _payload_tensors(state: TrainState) -> list:
    items = [(f"param/{n}", t.data) for n, t in state.params.tensors.items()]
    items += [(f"adam.m/{n}", a) for n, a in state.optimizer.m.items()]
    items += [(f"adam.v/{n}", a) for n, a in state.optimizer.v.items()]
    items += [(f"snapshot/{g}", a) for g, a in state.snapshot.prev.items()]
    return items


def save_checkpoint(path, checkpoint: Checkpoint):
    state = checkpoint.state
    tensors = _payload_tensors(state)
    manifest = []
    offset = 0
    blobs = []
    for name, arr in tensors:
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        manifest.append({
            "name": name,
            "dtype": "f8",
            "dims": list(arr.shape),
            "offset": offset,
        })
        blobs.append(blob)
        offset += len(blob)

    header = {
        "format_version": FORMAT_VERSION,
        "model_config": checkpoint.config.to_json(),
        "num_channels": checkpoint.num_channels,
        "seed": checkpoint.seed,
        "step": checkpoint.step,
        "vocab": checkpoint.vocab.to_json(),
        "adam": {
            "lr": state.optimizer.lr,
            "beta1": state.optimizer.beta1,
            "beta2": state.optimizer.beta2,
            "eps": state.optimizer.eps,
            "t": dict(state.optimizer.t),
        },
        "manifest": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(blobs)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, header_len = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header_end = 12 + header_len
    try:
        header = json.loads(raw[12:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed header ({exc})") from None

    payload = raw[header_end:-4]
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) != crc:
        raise CheckpointError(f"{path}: payload CRC mismatch")

    arrays = {}
    for entry in header["manifest"]:
        dims = tuple(entry["dims"])
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(dims).astype(np.float64)

    config = ModelConfig.from_json(header["model_config"])
    num_channels = int(header["num_channels"])
    params = Parameters(config, num_channels, np.random.default_rng(0))
    for name in params.names():
        key = f"param/{name}"
        if key not in arrays:
            raise CheckpointError(f"{path}: missing tensor {key}")
        params.tensors[name].data[...] = arrays[key]

    adam_meta = header["adam"]
    optimizer = Adam(params, lr=adam_meta["lr"], beta1=adam_meta["beta1"],
                     beta2=adam_meta["beta2"], eps=adam_meta["eps"])
    optimizer.t = {g: int(v) for g, v in adam_meta["t"].items()}
    for name in params.names():
        optimizer.m[name][...] = arrays[f"adam.m/{name}"]
        optimizer.v[name][...] = arrays[f"adam.v/{name}"]

    snapshot = GradientSnapshot()
    snapshot.prev = {
        entry["name"][len("snapshot/"):]: arrays[entry["name"]].copy()
        for entry in header["manifest"] if entry["name"].startswith("snapshot/")
    }

    state = TrainState(params=params, optimizer=optimizer, snapshot=snapshot,
                       step=int(header["step"]))
    return Checkpoint(
        config=config,
        num_channels=num_channels,
        seed=int(header["seed"]),
        step=int(header["step"]),
        vocab=Vocabulary.from_json(header["vocab"]),
        state=state,
    )
