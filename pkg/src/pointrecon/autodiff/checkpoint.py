"""Versioned binary checkpoints: magic, version, JSON manifest, raw little-endian float64."""

from __future__ import annotations

import json
import struct

import numpy as np

from ..fileio import atomic_write_bytes

MAGIC = b"PRCK"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


def dumps(params: dict, layers: dict | None = None, extra: dict | None = None) -> bytes:
    """Serialize ``params`` (name -> array or Tensor) with optional layer specs / metadata."""
    names = sorted(params)
    arrays = [np.asarray(getattr(params[n], "data", params[n]), dtype="<f8") for n in names]
    manifest = {
        "layers": layers or {},
        "params": [{"name": n, "shape": list(a.shape)} for n, a in zip(names, arrays)],
        "extra": extra or {},
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(a).tobytes() for a in arrays)
    return _PREFIX.pack(MAGIC, VERSION, len(blob)) + blob + body


def loads(buf: bytes):
    """Returns ``(params, manifest)`` with params as name -> float64 array."""
    if len(buf) < _PREFIX.size:
        raise ValueError("checkpoint truncated before header")
    magic, version, n = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise ValueError(f"not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    manifest = json.loads(buf[_PREFIX.size : _PREFIX.size + n])
    off = _PREFIX.size + n
    params = {}
    for entry in manifest["params"]:
        count = int(np.prod(entry["shape"]))
        if off + 8 * count > len(buf):
            raise ValueError(f"checkpoint truncated inside parameter {entry['name']!r} at byte {off}")
        params[entry["name"]] = np.frombuffer(buf, "<f8", count, off).reshape(entry["shape"]).copy()
        off += 8 * count
    if off != len(buf):
        raise ValueError(f"checkpoint has {len(buf) - off} trailing bytes")
    return params, manifest


def save(path, params: dict, layers: dict | None = None, extra: dict | None = None) -> None:
    atomic_write_bytes(path, dumps(params, layers, extra))


def load(path):
    with open(path, "rb") as f:
        return loads(f.read())
