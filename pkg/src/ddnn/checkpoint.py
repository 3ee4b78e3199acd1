"""Named-tensor checkpoint container.

Layout: an 8-byte magic, a little-endian u64 manifest length, a canonical
JSON manifest (sorted keys, entries sorted by tensor name), then the payload
of concatenated raw float32 little-endian tensor bytes. The per-tensor
compute dtype is recorded in the manifest and restored on load; the payload
itself is always float32, so training checkpoints round-trip bit-exactly and
save -> load -> save is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"DDNNCKP\x01"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Malformed or inconsistent checkpoint file."""


def save_checkpoint(path, tensors: dict, meta: Optional[dict] = None) -> None:
    """Write named arrays plus JSON-serializable metadata."""
    names = sorted(tensors)
    if len(names) != len(set(names)):
        raise CheckpointError("duplicate tensor names")
    entries = []
    chunks = []
    offset = 0
    for name in names:
        arr = np.asarray(tensors[name])
        raw = arr.astype("<f4").tobytes()
        entries.append({
            "name": name,
            "dtype": arr.dtype.name,
            "shape": list(arr.shape),
            "offset": offset,
            "length": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "meta": meta or {},
        "tensors": entries,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for raw in chunks:
            fh.write(raw)


def load_checkpoint(path) -> tuple:
    """Read a checkpoint; returns (name -> array at recorded dtype, meta dict)."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 8 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    blob_len = int.from_bytes(data[len(MAGIC):len(MAGIC) + 8], "little")
    header_end = len(MAGIC) + 8 + blob_len
    if header_end > len(data):
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[len(MAGIC) + 8:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: bad manifest: {e}") from e
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version "
                              f"{manifest.get('format_version')!r}")
    payload = data[header_end:]
    tensors = {}
    for entry in manifest.get("tensors", []):
        name = entry["name"]
        if name in tensors:
            raise CheckpointError(f"{path}: duplicate tensor {name!r}")
        off, length = entry["offset"], entry["length"]
        if off < 0 or length < 0 or off + length > len(payload):
            raise CheckpointError(f"{path}: tensor {name!r} spans bytes "
                                  f"[{off}, {off + length}) outside payload of {len(payload)}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if count * 4 != length:
            raise CheckpointError(f"{path}: tensor {name!r} shape {shape} "
                                  f"does not match {length} payload bytes")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=off).reshape(shape)
        tensors[name] = arr.astype(entry["dtype"])
    return tensors, manifest.get("meta", {})


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]
