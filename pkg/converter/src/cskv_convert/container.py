"""Standalone writer/reader for the cskv weight container.

This module implements the engine's documented byte format independently
(it is the interop contract between the two packages):

    bytes 0..3    magic ``CSKV``
    bytes 4..7    version u32 little-endian (currently 1)
    bytes 8..15   header length u64 little-endian
    header        UTF-8 JSON array of {name, dtype, shape, offset, nbytes},
                  space-padded so the data region starts 64-byte aligned
    data region   little-endian IEEE-754 tensor data in header order, each
                  offset (relative to the data region) 64-byte aligned

dtype is ``f32`` or ``f16``; nbytes must equal prod(shape) * dtype size.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

MAGIC = b"CSKV"
VERSION = 1
ALIGNMENT = 64
DTYPES = {"f32": np.dtype("<f4"), "f16": np.dtype("<f2")}
_PREFIX = struct.Struct("<4sIQ")


class ContainerError(ValueError):
    pass


@dataclass
class TensorRecord:
    name: str
    dtype: str
    shape: tuple[int, ...]
    offset: int
    nbytes: int


def _align(n: int) -> int:
    return (n + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT


def write_container(tensors: dict[str, np.ndarray], path, dtype: str = "f32") -> None:
    """Write float arrays in mapping order; deterministic byte output."""
    if dtype not in DTYPES:
        raise ContainerError(f"unsupported dtype {dtype!r}")
    records: list[TensorRecord] = []
    payloads: list[bytes] = []
    offset = 0
    for name, value in tensors.items():
        arr = np.ascontiguousarray(np.asarray(value), dtype=DTYPES[dtype])
        raw = arr.tobytes()
        offset = _align(offset)
        records.append(TensorRecord(name, dtype, tuple(arr.shape), offset, len(raw)))
        payloads.append(raw)
        offset += len(raw)

    header = json.dumps([asdict(r) for r in records], separators=(",", ":"),
                        sort_keys=True).encode("utf-8")
    header_len = _align(_PREFIX.size + len(header)) - _PREFIX.size
    header = header.ljust(header_len, b" ")

    blob = bytearray(_PREFIX.pack(MAGIC, VERSION, header_len))
    blob += header
    data_start = len(blob)
    for rec, raw in zip(records, payloads):
        blob += b"\x00" * (data_start + rec.offset - len(blob))
        blob += raw
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def read_container(path) -> dict[str, np.ndarray]:
    """Read tensors back as float64 arrays (values exactly as stored)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _PREFIX.size:
        raise ContainerError("file too short")
    magic, version, header_len = _PREFIX.unpack(blob[:_PREFIX.size])
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ContainerError(f"unsupported version {version}")
    records = json.loads(blob[_PREFIX.size:_PREFIX.size + header_len].decode("utf-8"))

    data_start = _PREFIX.size + header_len
    out: dict[str, np.ndarray] = {}
    for rec in records:
        dtype = DTYPES[rec["dtype"]]
        start = data_start + rec["offset"]
        end = start + rec["nbytes"]
        if end > len(blob):
            raise ContainerError(f"tensor {rec['name']!r} truncated")
        arr = np.frombuffer(blob[start:end], dtype=dtype)
        out[rec["name"]] = arr.reshape(rec["shape"]).astype(np.float64)
    return out
