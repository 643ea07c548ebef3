"""Checkpoint container.

Layout: the 8-byte magic ``AMDCKPT1``, a u64 little-endian length prefix,
one UTF-8 JSON header, then raw little-endian tensor payloads back to
back in manifest order. The header carries free-form run metadata plus a
manifest entry per tensor: name, shape, dtype, byte offset (relative to
the end of the header), and a sha256 of the payload bytes.

Load failures are distinguished: a bad magic or unparseable header, a
payload shorter than the manifest promises, a per-tensor hash mismatch,
and (at the consumer's request) a shape that disagrees with what the
caller expected.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"AMDCKPT1"


class CheckpointError(Exception):
    """Base class for container failures."""


class CheckpointHeaderError(CheckpointError):
    """Missing magic, truncated prefix, or undecodable header."""


class CheckpointTruncatedError(CheckpointError):
    """Payload ends before the manifest says it should."""


class CheckpointHashError(CheckpointError):
    """A tensor's payload does not match its recorded content hash."""


class CheckpointShapeError(CheckpointError):
    """A loaded tensor's shape disagrees with the expected manifest."""


def _le_dtype(arr: np.ndarray) -> str:
    dt = arr.dtype.newbyteorder("<")
    if dt.kind not in ("f", "i", "u"):
        raise ValueError(f"unsupported tensor dtype {arr.dtype}")
    return dt.str


def save_checkpoint(path: str | Path, meta: dict, tensors: Mapping[str, np.ndarray]) -> None:
    """Write meta + tensors; manifest order is sorted tensor name."""
    path = Path(path)
    names = sorted(tensors)
    manifest = []
    payloads = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(tensors[name])
        dt = _le_dtype(arr)
        raw = arr.astype(dt, copy=False).tobytes()
        manifest.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": dt,
                "offset": offset,
                "sha256": hashlib.sha256(raw).hexdigest(),
            }
        )
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "manifest": manifest}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in payloads:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read and verify a container; returns (meta, name->array)."""
    path = Path(path)
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 8 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointHeaderError(f"{path}: not a checkpoint container (bad magic)")
    (header_len,) = struct.unpack("<Q", blob[len(MAGIC) : len(MAGIC) + 8])
    header_end = len(MAGIC) + 8 + header_len
    if len(blob) < header_end:
        raise CheckpointHeaderError(f"{path}: header truncated")
    try:
        header = json.loads(blob[len(MAGIC) + 8 : header_end].decode("utf-8"))
        meta = header["meta"]
        manifest = header["manifest"]
    except (ValueError, KeyError, UnicodeDecodeError) as e:
        raise CheckpointHeaderError(f"{path}: corrupt header ({e})") from e
    payload = blob[header_end:]
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest:
        name = entry["name"]
        dt = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        start = entry["offset"]
        end = start + nbytes
        if end > len(payload):
            raise CheckpointTruncatedError(
                f"{path}: payload for tensor {name!r} ends at byte {end}, file has {len(payload)}"
            )
        raw = payload[start:end]
        if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise CheckpointHashError(f"{path}: content hash mismatch for tensor {name!r}")
        tensors[name] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
    return meta, tensors


def check_shapes(tensors: Mapping[str, np.ndarray], expected: Mapping[str, tuple[int, ...]], context: str) -> None:
    """Compare loaded tensors against an expected shape manifest."""
    for name, shape in expected.items():
        if name not in tensors:
            raise CheckpointShapeError(f"{context}: tensor {name!r} missing from checkpoint")
        got = tuple(tensors[name].shape)
        if got != tuple(shape):
            raise CheckpointShapeError(
                f"{context}: tensor {name!r} has shape {got}, expected {tuple(shape)}"
            )
    for name in tensors:
        if name not in expected:
            raise CheckpointShapeError(f"{context}: unexpected tensor {name!r} in checkpoint")


def content_hash(tensors: Mapping[str, np.ndarray]) -> str:
    """Order-independent digest of named tensors (sorted-name traversal)."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode("ascii"))
        h.update(str(arr.dtype).encode("ascii"))
        h.update(arr.tobytes())
    return h.hexdigest()
