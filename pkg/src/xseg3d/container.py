"""Binary container shared by checkpoints, volume caches and attribution maps.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"XSEG3DBC"
    8       4     uint32 format_version (currently 1)
    12      8     uint64 header_length H
    20      H     UTF-8 JSON header:
                    {"meta": {...},
                     "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    20+H    ...   payload; each tensor's raw C-order little-endian bytes at
                  ``offset`` bytes from the start of the payload

``dtype`` uses numpy's array-protocol strings ("<f4", "<f8", "|b1", "<u2").
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, TruncatedFileError, VersionError, WeightShapeError

MAGIC = b"XSEG3DBC"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def _le(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    if arr.dtype.byteorder == ">" or (arr.dtype.byteorder == "=" and np.little_endian is False):
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def dumps(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries = []
    payload = []
    offset = 0
    for name, arr in tensors.items():
        arr = _le(np.asarray(arr))
        raw = arr.tobytes(order="C")
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        payload.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(payload)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < _PREFIX.size:
        if not MAGIC.startswith(blob[: len(MAGIC)]):
            raise FormatError("not an xseg3d container (bad magic bytes)")
        raise TruncatedFileError("file ends inside the fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError("not an xseg3d container (bad magic bytes)")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
    start = _PREFIX.size + hlen
    if len(blob) < start:
        raise TruncatedFileError("file ends inside the header")
    try:
        header = json.loads(blob[_PREFIX.size : start].decode("utf-8"))
        entries = header["tensors"]
        meta = header["meta"]
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise FormatError(f"malformed header: {exc}") from None
    tensors = {}
    for e in entries:
        dtype = np.dtype(e["dtype"])
        shape = tuple(int(s) for s in e["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if expected != e["nbytes"]:
            raise WeightShapeError(e["name"], (e["nbytes"] // dtype.itemsize,), shape)
        lo = start + e["offset"]
        hi = lo + e["nbytes"]
        if hi > len(blob):
            raise TruncatedFileError(f"payload for {e['name']!r} is truncated")
        arr = np.frombuffer(blob, dtype=dtype, count=expected // dtype.itemsize, offset=lo)
        tensors[e["name"]] = arr.reshape(shape).astype(dtype.newbyteorder("="), copy=True)
    return tensors, meta


def save(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
