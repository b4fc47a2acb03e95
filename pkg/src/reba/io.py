"""Binary containers for volumes, atlases and model checkpoints.

Volume / atlas layout::

    16 bytes   magic b"REBAVOL\\0" + u16 version + 6 reserved zero bytes
    1 line     JSON header, e.g. {"shape":[D,H,W],"dtype":"f32le"}
    rest       raw little-endian samples, D-major, W-fastest (C order)

Checkpoint layout::

    16 bytes   magic b"REBACKPT" + u16 version + 6 reserved zero bytes
    1 line     JSON header: architecture descriptor, parameter index, sha256
    rest       all parameters concatenated as f32le

The checkpoint sha256 covers the raw parameter bytes and is checked on load.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

VOLUME_MAGIC = b"REBAVOL\x00"
CHECKPOINT_MAGIC = b"REBACKPT"
FORMAT_VERSION = 1

_DTYPES = {"f32le": np.dtype("<f4"), "i32le": np.dtype("<i4")}


class ContainerError(ValueError):
    """Raised for malformed or corrupted container files."""


def _prefix(magic: bytes) -> bytes:
    return magic + struct.pack("<H", FORMAT_VERSION) + b"\x00" * 6


def _split(raw: bytes, magic: bytes, path: Path) -> tuple[dict[str, Any], bytes]:
    if len(raw) < 16 or raw[:8] != magic:
        raise ContainerError(f"{path}: bad magic")
    (version,) = struct.unpack("<H", raw[8:10])
    if version != FORMAT_VERSION:
        raise ContainerError(f"{path}: unsupported version {version}")
    newline = raw.find(b"\n", 16)
    if newline < 0:
        raise ContainerError(f"{path}: missing JSON header line")
    header = json.loads(raw[16:newline].decode("utf-8"))
    return header, raw[newline + 1 :]


def write_volume(path: str | Path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.ndim != 3:
        raise ContainerError(f"volume must be 3-D, got shape {array.shape}")
    if np.issubdtype(array.dtype, np.integer):
        dtype_name = "i32le"
    else:
        dtype_name = "f32le"
    data = np.ascontiguousarray(array, dtype=_DTYPES[dtype_name])
    header = json.dumps({"shape": list(array.shape), "dtype": dtype_name}, separators=(",", ":"))
    Path(path).write_bytes(_prefix(VOLUME_MAGIC) + header.encode() + b"\n" + data.tobytes())


def read_volume(path: str | Path) -> np.ndarray:
    path = Path(path)
    header, payload = _split(path.read_bytes(), VOLUME_MAGIC, path)
    dtype = _DTYPES.get(header.get("dtype"))
    if dtype is None:
        raise ContainerError(f"{path}: unknown dtype {header.get('dtype')!r}")
    shape = tuple(int(s) for s in header["shape"])
    if len(payload) != int(np.prod(shape)) * dtype.itemsize:
        raise ContainerError(f"{path}: payload size does not match shape {shape}")
    out = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return out.astype(np.float32 if dtype.kind == "f" else np.int32)


def write_checkpoint(path: str | Path, descriptor: dict[str, Any], params: dict[str, np.ndarray]) -> str:
    """Write named parameter arrays; returns the content hash."""
    index = []
    chunks = []
    for name, value in params.items():
        arr = np.ascontiguousarray(value, dtype="<f4")
        index.append({"name": name, "shape": list(arr.shape)})
        chunks.append(arr.tobytes())
    blob = b"".join(chunks)
    digest = hashlib.sha256(blob).hexdigest()
    header = {"descriptor": descriptor, "params": index, "sha256": digest}
    line = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    Path(path).write_bytes(_prefix(CHECKPOINT_MAGIC) + line + b"\n" + blob)
    return digest


def read_checkpoint(path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    path = Path(path)
    header, blob = _split(path.read_bytes(), CHECKPOINT_MAGIC, path)
    if hashlib.sha256(blob).hexdigest() != header["sha256"]:
        raise ContainerError(f"{path}: parameter hash mismatch (file corrupted or tampered)")
    params: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        params[entry["name"]] = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(shape).copy()
        offset += 4 * n
    if offset != len(blob):
        raise ContainerError(f"{path}: trailing bytes after parameters")
    return header["descriptor"], params


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
