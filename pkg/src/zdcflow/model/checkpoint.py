"""Versioned binary checkpoint format.

Layout (all integers little-endian)::

    b"ZDCK"            magic
    u32                format version
    u64                header length in bytes
    header             UTF-8 JSON: kind, config, stats, seed, metadata, tensor directory
    payload            raw little-endian tensors at the directory offsets
    u64                checksum (blake2b, 8-byte digest) of everything above
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"ZDCK"
FORMAT_VERSION = 1
MODEL_KINDS = ("unet_pixel", "unet_latent", "vae", "mlp_channels", "fm_channels")


class CheckpointError(ValueError):
    pass


class IntegrityError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


@dataclass
class ModelCheckpoint:
    model_kind: str
    config: dict
    params: dict[str, np.ndarray]
    stats: dict = field(default_factory=dict)
    seed: int = 0
    metadata: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def to_bytes(ckpt: ModelCheckpoint) -> bytes:
    if ckpt.model_kind not in MODEL_KINDS:
        raise CheckpointError(f"unknown model kind {ckpt.model_kind!r}")
    directory, chunks, offset = [], [], 0
    for name, arr in ckpt.params.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = arr.tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "dtype": "<f4", "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "model_kind": ckpt.model_kind,
        "config": _json_safe(ckpt.config),
        "stats": _json_safe(ckpt.stats),
        "seed": int(ckpt.seed),
        "metadata": _json_safe(ckpt.metadata),
        "tensors": directory,
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hb)) + hb + b"".join(chunks)
    return body + checksum(body)


def from_bytes(blob: bytes) -> ModelCheckpoint:
    if len(blob) < len(MAGIC) + 12 + 8 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic or truncated)")
    version, hlen = struct.unpack_from("<IQ", blob, 4)
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported checkpoint format version {version} (expected {FORMAT_VERSION})")
    body, digest = blob[:-8], blob[-8:]
    if checksum(body) != digest:
        raise IntegrityError("checkpoint checksum mismatch (file corrupt or truncated)")
    start = 16
    try:
        header = json.loads(body[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"malformed checkpoint header: {exc}") from exc
    payload = body[start + hlen :]
    params = {}
    for entry in header["tensors"]:
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        if hi > len(payload):
            raise IntegrityError(f"tensor {entry['name']} extends past end of payload")
        arr = np.frombuffer(payload[lo:hi], dtype=entry["dtype"]).reshape(entry["shape"])
        params[entry["name"]] = arr.astype(np.float32)
    return ModelCheckpoint(
        model_kind=header["model_kind"],
        config=header["config"],
        params=params,
        stats=header["stats"],
        seed=header["seed"],
        metadata=header["metadata"],
        format_version=version,
    )


def save_checkpoint(path, ckpt: ModelCheckpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> ModelCheckpoint:
    return from_bytes(Path(path).read_bytes())
