"""``BBR1`` container: JSON header + named tensors + trailing SHA-256.

Layout (little endian)::

    b"BBR1" | u32 version | u32 header_len | header JSON (utf-8)
    u32 n_tensors | per tensor: u32 name_len, name, u8 dtype (0=f32, 1=f64),
                                u32 ndim, u64 dims..., raw data
    32-byte SHA-256 over everything above
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .kg import DataError

MAGIC = b"BBR1"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(DataError):
    pass


def pack(header: Mapping, tensors: Mapping[str, np.ndarray]) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(head)), head, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<BI", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def unpack(blob: bytes) -> tuple[dict, dict[str, np.ndarray], str]:
    if len(blob) < 4 + 8 + 32 or blob[:4] != MAGIC:
        raise CheckpointError("not a BBR1 checkpoint")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("content hash mismatch (file corrupted or truncated)")
    version, hlen = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    header = json.loads(body[pos : pos + hlen].decode("utf-8"))
    pos += hlen
    (n,) = struct.unpack_from("<I", body, pos)
    pos += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n):
        (nl,) = struct.unpack_from("<I", body, pos)
        pos += 4
        name = body[pos : pos + nl].decode("utf-8")
        pos += nl
        code, ndim = struct.unpack_from("<BI", body, pos)
        pos += 5
        shape = struct.unpack_from(f"<{ndim}Q", body, pos)
        pos += 8 * ndim
        dt = _DTYPES[code]
        size = int(np.prod(shape)) * dt.itemsize
        tensors[name] = np.frombuffer(body[pos : pos + size], dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        pos += size
    if pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint body")
    return header, tensors, digest.hex()


def write(path: str | os.PathLike, header: Mapping, tensors: Mapping[str, np.ndarray]) -> str:
    blob = pack(header, tensors)
    Path(path).write_bytes(blob)
    return blob[-32:].hex()


def read(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray], str]:
    return unpack(Path(path).read_bytes())
