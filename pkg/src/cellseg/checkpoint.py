"""Bit-exact weight checkpoints.

Layout: magic "NCAW" | u32 version (LE) | u64 JSON length (LE) | JSON
metadata (UTF-8) | payload of little-endian float32 in manifest order.
"""
from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .model import ArchConfig, UpdateRuleParams
from .tensor import parameter

MAGIC = b"NCAW"
VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


def save_checkpoint(params: UpdateRuleParams, cfg: ArchConfig,
                    metadata: Optional[dict], path) -> None:
    manifest = []
    offset = 0
    chunks = []
    for name, t in params.manifest():
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape),
                         "offset": offset, "trainable": bool(t.requires_grad)})
        offset += arr.size
        chunks.append(arr.tobytes())
    meta = {
        "arch": dataclasses.asdict(cfg),
        "manifest": manifest,
        "extra": metadata or {},
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for c in chunks:
            f.write(c)


def load_checkpoint(path) -> tuple[UpdateRuleParams, ArchConfig, dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != VERSION:
        raise VersionError(f"{path}: version {version}, expected {VERSION}")
    (jlen,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + jlen:
        raise TruncatedPayloadError(f"{path}: truncated metadata")
    try:
        meta = json.loads(raw[16:16 + jlen].decode("utf-8"))
        cfg = ArchConfig(**meta["arch"])
        manifest = meta["manifest"]
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: corrupt metadata ({e})") from e

    payload = raw[16 + jlen:]
    total = sum(int(np.prod(m["shape"])) for m in manifest)
    if len(payload) < 4 * total:
        raise TruncatedPayloadError(
            f"{path}: truncated payload ({len(payload)} bytes, need {4 * total})")

    tensors = {}
    for m in manifest:
        n = int(np.prod(m["shape"]))
        arr = np.frombuffer(payload, dtype="<f4", count=n,
                            offset=4 * m["offset"]).reshape(m["shape"]).copy()
        t = parameter(arr)
        t.requires_grad = bool(m.get("trainable", True))
        tensors[m["name"]] = t
    return UpdateRuleParams(tensors, cfg), cfg, meta.get("extra", {})
