"""Versioned named-tensor container used for dataset samples and checkpoints.

Byte layout (all integers little-endian), version 1::

    magic        8 bytes   b"DRPTNSR\\0"
    version      u32       1
    meta_len     u32       length of the JSON metadata blob
    meta         meta_len bytes of UTF-8 JSON (keys sorted)
    count        u32       number of tensors
    count x directory entry:
        name_len u16, name (UTF-8), dtype u8 (0=float64, 1=int64),
        ndim u8, shape u64 * ndim, offset u64 (from start of data), nbytes u64
    data         concatenated raw C-order arrays
"""
from __future__ import annotations

import json
import struct
from os import PathLike

import numpy as np

MAGIC = b"DRPTNSR\0"
VERSION = 1
DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}
CODES = {np.dtype("<f8"): 0, np.dtype("<i8"): 1}


class FormatError(ValueError):
    pass


def dumps(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    meta_blob = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode()
    header = [MAGIC, struct.pack("<II", VERSION, len(meta_blob)), meta_blob, struct.pack("<I", len(tensors))]
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            arr = arr.astype("<f8")
        elif arr.dtype.kind in "iub":
            arr = arr.astype("<i8")
        else:
            raise FormatError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr).tobytes()
        nb = name.encode()
        header.append(struct.pack("<H", len(nb)) + nb)
        header.append(struct.pack("<BB", CODES[arr.dtype], arr.ndim))
        header.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        header.append(struct.pack("<QQ", offset, len(raw)))
        blobs.append(raw)
        offset += len(raw)
    return b"".join(header + blobs)


def loads(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if buf[:8] != MAGIC:
        raise FormatError("not a drapenet tensor file (bad magic)")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise FormatError("truncated tensor file")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, meta_len = take("<II")
    if version != VERSION:
        raise FormatError(f"unsupported tensor file version {version}")
    meta = json.loads(buf[pos:pos + meta_len].decode())
    pos += meta_len
    (count,) = take("<I")
    entries = []
    for _ in range(count):
        (nlen,) = take("<H")
        name = buf[pos:pos + nlen].decode()
        pos += nlen
        code, ndim = take("<BB")
        shape = take(f"<{ndim}Q") if ndim else ()
        offset, nbytes = take("<QQ")
        if code not in DTYPES:
            raise FormatError(f"tensor {name!r}: unknown dtype code {code}")
        if nbytes != int(np.prod(shape)) * DTYPES[code].itemsize:
            raise FormatError(f"tensor {name!r}: size does not match shape {shape}")
        entries.append((name, DTYPES[code], shape, offset, nbytes))
    data_start = pos
    out = {}
    for name, dtype, shape, offset, nbytes in entries:
        start = data_start + offset
        if start + nbytes > len(buf):
            raise FormatError(f"tensor {name!r} runs past end of file")
        out[name] = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=start).reshape(shape).copy()
    return out, meta


def save(path: str | PathLike, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(tensors, meta))


def load(path: str | PathLike) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        return loads(fh.read())
