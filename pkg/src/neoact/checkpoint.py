"""Named-tensor container files.

Layout: 8-byte magic, uint32 format version, uint64 header length, a UTF-8
JSON header (kind, config, tensor index), then raw little-endian float64
payloads in index order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"NEOACKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: dict[str, np.ndarray], kind: str, config: dict | None = None) -> None:
    index = []
    offset = 0
    blobs = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype="<f8"))
        blob = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"kind": kind, "config": config or {}, "tensors": index},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_tensors(path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(tensors, header)``; checks magic, version and optionally kind."""
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: file too short")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    header = json.loads(raw[_PREFIX.size:_PREFIX.size + hlen].decode("utf-8"))
    if kind is not None and header["kind"] != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {header['kind']!r}")
    base = _PREFIX.size + hlen
    out = {}
    for rec in header["tensors"]:
        start = base + rec["offset"]
        buf = raw[start:start + rec["nbytes"]]
        if len(buf) != rec["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {rec['name']}")
        out[rec["name"]] = np.frombuffer(buf, dtype="<f8").reshape(rec["shape"]).astype(np.float64)
    return out, header
