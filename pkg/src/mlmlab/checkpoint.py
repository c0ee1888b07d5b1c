"""Binary checkpoint serialization.

Layout: 4 magic bytes, little-endian uint32 version, little-endian uint64
metadata length, a JSON metadata block (config snapshot, step, and a tensor
manifest of name/shape/dtype/offset), then the raw little-endian tensor
payloads in manifest order.  Tensor names are sorted and the JSON is emitted
with sorted keys and fixed separators, so save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError

__all__ = ["Checkpoint", "MAGIC", "VERSION", "save_checkpoint",
           "load_checkpoint"]

MAGIC = b"TACO"
VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    step: int
    tensors: dict


def _little_endian(arr):
    arr = np.ascontiguousarray(arr)
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def save_checkpoint(path, config, step, tensors):
    """Write a checkpoint; ``tensors`` maps names to arrays."""
    arrays = {name: _little_endian(a) for name, a in tensors.items()}
    manifest = []
    offset = 0
    for name in sorted(arrays):
        arr = arrays[name]
        manifest.append({"name": name, "shape": list(arr.shape),
                         "dtype": arr.dtype.str, "offset": offset})
        offset += arr.nbytes
    meta = json.dumps({"config": config, "step": int(step),
                       "tensors": manifest},
                      sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(meta)))
        fh.write(meta)
        for entry in manifest:
            fh.write(arrays[entry["name"]].tobytes())
    return Path(path)


def load_checkpoint(path):
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:4] != MAGIC:
        raise CheckpointError(
            f"{path} is not a checkpoint (bad magic {blob[:4]!r})")
    version, = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(
            f"{path} has unsupported checkpoint version {version} "
            f"(expected {VERSION})")
    meta_len, = struct.unpack_from("<Q", blob, 8)
    header_end = 16 + meta_len
    try:
        meta = json.loads(blob[16:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path} metadata is corrupt: {exc}") from exc
    tensors = {}
    for entry in meta["tensors"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        start = header_end + entry["offset"]
        end = start + count * dtype.itemsize
        if end > len(blob):
            raise CheckpointError(
                f"{path} is truncated: tensor {entry['name']} needs bytes "
                f"up to {end}, file has {len(blob)}")
        tensors[entry["name"]] = np.frombuffer(
            blob[start:end], dtype=dtype).reshape(entry["shape"]).copy()
    return Checkpoint(config=meta["config"], step=int(meta["step"]),
                      tensors=tensors)
