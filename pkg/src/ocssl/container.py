"""Versioned binary container for named arrays plus a JSON metadata block.

Layout (all integers little-endian)::

    magic        4 bytes
    version      u16
    meta_len     u32, followed by meta_len bytes of UTF-8 JSON
    n_arrays     u32
    shape table  per array: name_len u16, name, dtype u8 (0=f64, 1=i64), ndim u8, ndim x u64
    payload      arrays in table order, row-major, 8-byte little-endian elements
    crc32        u32 over every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import IntegrityError

VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}
_CODES = {"f": 0, "i": 1, "u": 1, "b": 1}


def dumps(magic: bytes, arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    head = [magic, struct.pack("<HI", VERSION, len(meta_bytes)), meta_bytes,
            struct.pack("<I", len(arrays))]
    payload = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype.kind)
        if code is None:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        enc = name.encode()
        head.append(struct.pack("<HBB", len(enc), code, arr.ndim) + enc)
        head.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        payload.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = b"".join(head + payload)
    return body + struct.pack("<I", zlib.crc32(body))


def loads(blob: bytes, magic: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < 14:
        raise IntegrityError("file too short")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if blob[:4] != magic:
        raise IntegrityError(f"bad magic {blob[:4]!r}, expected {magic!r}")
    if zlib.crc32(body) != crc:
        raise IntegrityError("checksum mismatch (truncated or corrupt file)")
    try:
        version, meta_len = struct.unpack_from("<HI", body, 4)
        if version != VERSION:
            raise IntegrityError(f"unsupported container version {version}")
        pos = 10
        meta = json.loads(body[pos:pos + meta_len].decode())
        pos += meta_len
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        table = []
        for _ in range(count):
            name_len, code, ndim = struct.unpack_from("<HBB", body, pos)
            pos += 4
            name = body[pos:pos + name_len].decode()
            pos += name_len
            shape = struct.unpack_from(f"<{ndim}Q", body, pos)
            pos += 8 * ndim
            table.append((name, _DTYPES[code], shape))
        arrays = {}
        for name, dtype, shape in table:
            n = int(np.prod(shape, dtype=np.int64))
            chunk = body[pos:pos + 8 * n]
            if len(chunk) != 8 * n:
                raise IntegrityError(f"payload for {name} is truncated")
            arrays[name] = np.frombuffer(chunk, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
            pos += 8 * n
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"malformed container: {exc}") from exc
    if pos != len(body):
        raise IntegrityError("trailing bytes after payload")
    return arrays, meta


def save(path, magic: bytes, arrays: dict[str, np.ndarray], meta: dict | None = None):
    Path(path).write_bytes(dumps(magic, arrays, meta))


def load(path, magic: bytes):
    return loads(Path(path).read_bytes(), magic)
