"""Asymmetric 4-bit group quantization for compressed cache latents.

Grouping follows the cache layout: key latents are quantized per channel
(groups run down the token axis inside one channel), value latents per
token (groups run across the channel axis inside one row). Group scale and
zero-point are stored as float16; codes are uint4 packed two per byte.

Only the compressed branch is ever quantized. Recency-window rows and the
trailing latent rows that have not yet filled a complete token group (the
residual) stay at full storage precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Matrix

PER_CHANNEL = "per_channel"
PER_TOKEN = "per_token"
_LEVELS = 15  # 2**4 - 1


@dataclass(frozen=True)
class QuantSpec:
    axis: str
    bits: int = 4
    group_size: int = 32

    def __post_init__(self) -> None:
        if self.bits != 4:
            raise ValueError(f"only 4-bit quantization is supported, got {self.bits}")
        if self.group_size < 1:
            raise ValueError(f"group_size must be >= 1, got {self.group_size}")
        if self.axis not in (PER_CHANNEL, PER_TOKEN):
            raise ValueError(f"unknown grouping axis {self.axis!r}")


@dataclass(frozen=True)
class CacheQuant:
    """Cache-wide quantization choice: KIVI-style axes for keys and values."""

    mode: str  # "ptq4" or "qat4": same runtime behavior, different calibration
    key_spec: QuantSpec = field(default_factory=lambda: QuantSpec(PER_CHANNEL))
    value_spec: QuantSpec = field(default_factory=lambda: QuantSpec(PER_TOKEN))

    def __post_init__(self) -> None:
        if self.mode not in ("ptq4", "qat4"):
            raise ValueError(f"unknown quant mode {self.mode!r}")


@dataclass
class QuantizedTensor:
    codes: np.ndarray    # packed uint8, two 4-bit codes per byte, row-major
    scales: np.ndarray   # float16, one per group
    zeros: np.ndarray    # float16, one per group
    shape: tuple[int, int]
    spec: QuantSpec


def pack_codes(codes: np.ndarray) -> np.ndarray:
    """Pack flat uint4 codes two per byte (low nibble first)."""
    flat = np.asarray(codes, dtype=np.uint8).reshape(-1)
    if flat.size % 2:
        flat = np.concatenate([flat, np.zeros(1, dtype=np.uint8)])
    return (flat[0::2] | (flat[1::2] << 4)).astype(np.uint8)


def unpack_codes(packed: np.ndarray, count: int) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.uint8)
    flat = np.empty(packed.size * 2, dtype=np.uint8)
    flat[0::2] = packed & 0x0F
    flat[1::2] = packed >> 4
    return flat[:count]


def _group_edges(length: int, group: int) -> np.ndarray:
    return np.arange(0, length, group)


def _rowwise_minmax(m: Matrix, group: int) -> tuple[np.ndarray, np.ndarray]:
    edges = _group_edges(m.shape[1], group)
    mins = np.minimum.reduceat(m, edges, axis=1)
    maxs = np.maximum.reduceat(m, edges, axis=1)
    return mins, maxs


def quantize(m: Matrix, spec: QuantSpec) -> QuantizedTensor:
    """Group-quantize a matrix to uint4 codes with f16 scale/zero per group."""
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0:
        raise ValueError("cannot quantize an empty matrix")
    work = m if spec.axis == PER_TOKEN else m.T
    mins, maxs = _rowwise_minmax(work, spec.group_size)

    scale = (maxs - mins) / _LEVELS
    scale[maxs == mins] = 1.0
    scales = scale.astype(np.float16)
    # f16 underflow would poison the divide; such groups are near-constant.
    scales[scales == 0] = np.float16(1.0)
    zeros = mins.astype(np.float16)

    sc = np.repeat(scales.astype(np.float64), _group_sizes(work.shape[1], spec.group_size), axis=1)
    zp = np.repeat(zeros.astype(np.float64), _group_sizes(work.shape[1], spec.group_size), axis=1)
    codes = np.clip(np.rint((work - zp) / sc), 0, _LEVELS).astype(np.uint8)
    if spec.axis == PER_CHANNEL:
        codes = codes.T  # store codes in the matrix's own row-major layout
    return QuantizedTensor(pack_codes(codes), scales, zeros, m.shape, spec)


def _group_sizes(length: int, group: int) -> np.ndarray:
    edges = _group_edges(length, group)
    return np.diff(np.append(edges, length))


def dequantize(q: QuantizedTensor) -> Matrix:
    rows, cols = q.shape
    codes = unpack_codes(q.codes, rows * cols).reshape(rows, cols).astype(np.float64)
    work = codes if q.spec.axis == PER_TOKEN else codes.T
    length = work.shape[1]
    sc = np.repeat(q.scales.astype(np.float64), _group_sizes(length, q.spec.group_size), axis=1)
    zp = np.repeat(q.zeros.astype(np.float64), _group_sizes(length, q.spec.group_size), axis=1)
    out = work * sc + zp
    return out if q.spec.axis == PER_TOKEN else out.T


def fake_quant(m: Matrix, spec: QuantSpec) -> Matrix:
    """Round-trip through the quantizer; projection onto the code grid."""
    return dequantize(quantize(m, spec))


def fake_quant_with_mask(m: Matrix, spec: QuantSpec) -> tuple[Matrix, np.ndarray]:
    """fake_quant plus the straight-through mask.

    The mask is True where the value fell inside the representable range
    (gradient passes through unchanged) and False where the code clamped.
    With scales computed from the same batch nothing clamps, so the mask is
    all-True in that regime; it matters when scales come from elsewhere.
    """
    m = np.asarray(m, dtype=np.float64)
    q = quantize(m, spec)
    work = m if spec.axis == PER_TOKEN else m.T
    length = work.shape[1]
    sc = np.repeat(q.scales.astype(np.float64), _group_sizes(length, spec.group_size), axis=1)
    zp = np.repeat(q.zeros.astype(np.float64), _group_sizes(length, spec.group_size), axis=1)
    raw = (work - zp) / sc
    mask = (raw > -0.5) & (raw < _LEVELS + 0.5)
    if spec.axis == PER_CHANNEL:
        mask = mask.T
    return dequantize(q), mask


def group_count(shape: tuple[int, int], spec: QuantSpec) -> int:
    """Number of (scale, zero) pairs a matrix of this shape needs."""
    n, c = shape
    if spec.axis == PER_TOKEN:
        return n * -(-c // spec.group_size)
    return c * -(-n // spec.group_size)
