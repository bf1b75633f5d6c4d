"""Binary checkpoint format.

Layout: 8-byte ASCII magic "BITCKPT1", a 4-byte little-endian manifest
length, the UTF-8 JSON manifest, then the raw little-endian f64 parameter
buffers concatenated in manifest order. The manifest records the format
version, the training stage, the full run configuration, and each
parameter's name and shape. Round trips are bit-exact.
"""

from __future__ import annotations

import json
import math
import struct

import numpy as np

from . import diffcore as dc
from .config import RunConfig, from_dict

MAGIC = b"BITCKPT1"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def save_checkpoint(path: str, params: dict[str, dc.Tensor],
                    config: RunConfig, stage: int):
    """Write parameters (name -> Tensor, insertion-ordered) and metadata."""
    manifest = {
        "version": VERSION,
        "stage": int(stage),
        "config": config.raw,
        "params": [{"name": name, "shape": list(t.shape)}
                   for name, t in params.items()],
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for t in params.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path: str):
    """Read a checkpoint; returns (param dict, RunConfig, stage).

    Any corruption raises before partial state is visible to the caller.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 4:
        raise CheckpointError("checkpoint file truncated before manifest")
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointVersionError(
            f"bad magic {raw[:len(MAGIC)]!r}, expected {MAGIC!r}")
    (manifest_len,) = struct.unpack("<I", raw[8:12])
    manifest_end = 12 + manifest_len
    if len(raw) < manifest_end:
        raise CheckpointError("checkpoint file truncated inside manifest")
    try:
        manifest = json.loads(raw[12:manifest_end].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest: {exc}") from exc
    if manifest.get("version") != VERSION:
        raise CheckpointVersionError(
            f"unsupported checkpoint version {manifest.get('version')!r}")

    params: dict[str, dc.Tensor] = {}
    offset = manifest_end
    for entry in manifest["params"]:
        name, shape = entry["name"], tuple(entry["shape"])
        count = math.prod(shape) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(raw):
            raise CheckpointError(
                f"checkpoint data truncated at parameter {name!r}")
        data = np.frombuffer(raw[offset:offset + nbytes],
                             dtype="<f8").reshape(shape).copy()
        params[name] = dc.Tensor(data)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(
            f"{len(raw) - offset} trailing bytes after last parameter")
    config = from_dict(manifest["config"])
    return params, config, int(manifest["stage"])


def params_bytes(params: dict[str, dc.Tensor]) -> bytes:
    """Canonical byte string of a parameter dict, for equality checks."""
    chunks = []
    for name, t in params.items():
        chunks.append(name.encode("utf-8"))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(chunks)
