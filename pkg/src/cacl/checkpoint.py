"""Checkpoint container: JSON manifest followed by raw little-endian arrays.

Layout::

    b"CACLCKPT"            8 bytes magic
    uint32 LE              schema version
    uint64 LE              manifest length in bytes
    manifest               UTF-8 JSON, sorted keys
    payload                arrays back to back, in manifest order

Each manifest entry under ``"tensors"`` records ``name``, ``shape``,
``dtype`` (``"<f8"`` or ``"<f4"``), ``offset`` into the payload and
``nbytes``. Identical state always serializes to identical bytes.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"CACLCKPT"
SCHEMA_VERSION = 1
_DTYPES = {"float64": "<f8", "float32": "<f4"}


class CheckpointError(IOError):
    pass


def save(path, tensors: "OrderedDict[str, np.ndarray]", meta: dict | None = None) -> None:
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _DTYPES.get(arr.dtype.name)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=code).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": code,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"schema_version": SCHEMA_VERSION, "meta": meta or {}, "tensors": entries}
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", SCHEMA_VERSION, len(blob)))
        fh.write(blob)
        for raw in chunks:
            fh.write(raw)


def load(path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    """Returns ``(tensors, manifest)``."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, length = struct.unpack("<IQ", data[8:20])
    if version != SCHEMA_VERSION:
        raise CheckpointError(f"{path}: schema version {version} not supported")
    manifest = json.loads(data[20:20 + length].decode("utf-8"))
    payload = memoryview(data)[20 + length:]
    tensors = OrderedDict()
    for e in manifest["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated payload for {e['name']}")
        arr = np.frombuffer(payload[e["offset"]:end], dtype=e["dtype"]).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return tensors, manifest


def read_manifest(path) -> dict:
    return load(path)[1]
