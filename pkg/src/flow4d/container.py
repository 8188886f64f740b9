"""Versioned binary container for named arrays.

Layout (all integers little-endian)::

    b"F4D1"                  magic / format version
    uint64                   header length in bytes
    header                   UTF-8 JSON: {"meta": {...}, "arrays": [...]}
    payload                  row-major little-endian array data, 8-byte aligned

Each entry of ``arrays`` holds ``name``, ``dtype`` (numpy dtype string),
``shape`` and ``offset`` (relative to the start of the payload).
Used both for dataset sequences and for model checkpoints.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"F4D1"
_ALIGN = 8


class ContainerError(ValueError):
    pass


def _le(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    if arr.dtype.byteorder == ">" or (arr.dtype.byteorder == "=" and not np.little_endian):
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def dumps(arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = _le(np.asarray(arr))
        raw = arr.tobytes(order="C")
        entries.append(
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset}
        )
        pad = (-len(raw)) % _ALIGN
        chunks.append(raw + b"\0" * pad)
        offset += len(raw) + pad
    header = json.dumps(
        {"meta": dict(meta or {}), "arrays": entries}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    header += b" " * ((-len(header) - 12) % _ALIGN)
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if blob[:4] != MAGIC:
        raise ContainerError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    (hlen,) = struct.unpack("<Q", blob[4:12])
    header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    base = 12 + hlen
    arrays = {}
    for e in header["arrays"]:
        dtype = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        start = base + e["offset"]
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=start)
        arrays[e["name"]] = arr.reshape(e["shape"]).copy()
    return arrays, header["meta"]


def save(path: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    Path(path).write_bytes(dumps(arrays, meta))


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return loads(Path(path).read_bytes())
