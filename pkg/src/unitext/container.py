"""Named-tensor container used for model and optimizer checkpoints.

Layout (little-endian)::

    magic[4] | u32 version | u32 meta_len | meta JSON (sorted keys)
    u32 n_tensors
    n_tensors x { u32 name_len | name utf-8 | u8 dtype | u32 ndim | u32 dims[ndim] | u64 offset }
    data blob; each tensor's offset is relative to the blob start

dtype codes: 0 = float32, 1 = float64.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def write_container(path, magic: bytes, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    head = [struct.pack("<4sII", magic, VERSION, len(meta_bytes)), meta_bytes,
            struct.pack("<I", len(tensors))]
    blobs, offset = [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise ValueError(f"{name}: unsupported dtype {arr.dtype}")
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        nb = name.encode()
        head.append(struct.pack("<I", len(nb)) + nb
                    + struct.pack(f"<BI{arr.ndim}IQ", code, arr.ndim, *arr.shape, offset))
        blobs.append(data)
        offset += len(data)
    with open(path, "wb") as fh:
        fh.write(b"".join(head))
        fh.write(b"".join(blobs))


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    pos = 0

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise FormatError(f"{path}: truncated at byte offset {pos}")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    got, version, meta_len = take("<4sII")
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r} at byte offset 0, expected {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte offset 4")
    if pos + meta_len > len(raw):
        raise FormatError(f"{path}: truncated metadata at byte offset {pos}")
    meta = json.loads(raw[pos:pos + meta_len].decode())
    pos += meta_len
    (count,) = take("<I")
    index = []
    for _ in range(count):
        (name_len,) = take("<I")
        name = raw[pos:pos + name_len].decode()
        pos += name_len
        code, ndim = take("<BI")
        if code not in _DTYPES:
            raise FormatError(f"{path}: unknown dtype code {code} at byte offset {pos - 5}")
        dims = take(f"<{ndim}I") if ndim else ()
        (offset,) = take("<Q")
        index.append((name, _DTYPES[code], tuple(dims), offset))
    blob_start = pos
    tensors = {}
    for name, dtype, dims, offset in index:
        start = blob_start + offset
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        if start + nbytes > len(raw):
            raise FormatError(f"{path}: tensor {name!r} truncated at byte offset {len(raw)}")
        tensors[name] = np.frombuffer(raw, dtype=dtype, count=nbytes // dtype.itemsize,
                                      offset=start).reshape(dims).astype(dtype.newbyteorder("="))
    return meta, tensors
