"""Versioned binary container shared by weight, quantized-model and descriptor files.

Layout::

    magic     4 bytes (file kind, e.g. b"LPWS")
    version   uint32 little-endian
    hlen      uint32 little-endian, byte length of the header
    header    UTF-8 JSON: {"meta": {...}, "tensors": [{"key", "dtype", "shape", "offset", "nbytes"}]}
    payload   raw little-endian tensor bytes, concatenated in header order

Offsets are relative to the start of the payload. Only fixed-width
little-endian dtypes are allowed, so a save/load cycle is bit-exact.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

VERSION = 1
_DTYPES = {"f8": "<f8", "f4": "<f4", "f2": "<f2", "i1": "i1", "i4": "<i4", "i8": "<i8", "u1": "u1"}


def _code(dtype):
    dt = np.dtype(dtype)
    code = dt.kind + str(dt.itemsize)
    if code not in _DTYPES:
        raise FormatError(f"dtype {dt} not storable")
    return code


def dumps(magic: bytes, meta: dict, tensors: dict) -> bytes:
    entries, chunks, offset = [], [], 0
    for key, arr in tensors.items():
        arr = np.asarray(arr)
        code = _code(arr.dtype)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entries.append({"key": key, "dtype": code, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True).encode()
    return magic + struct.pack("<II", VERSION, len(header)) + header + b"".join(chunks)


def loads(magic: bytes, blob: bytes):
    """Returns (meta, {key: array})."""
    if blob[:4] != magic:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {magic!r}")
    if len(blob) < 12:
        raise FormatError("truncated header")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    try:
        header = json.loads(blob[12:12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}") from exc
    base = 12 + hlen
    tensors = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        raw = blob[start:start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise FormatError(f"tensor {e['key']!r} truncated")
        arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        tensors[e["key"]] = arr.astype(arr.dtype.newbyteorder("="))
    return header["meta"], tensors


def save(path, magic, meta, tensors):
    Path(path).write_bytes(dumps(magic, meta, tensors))


def load(path, magic):
    return loads(magic, Path(path).read_bytes())
