"""Named-tensor binary container and the model configuration file.

Container layout (all integers little-endian):

    bytes 0..3    magic ``CSKV``
    bytes 4..7    format version, u32 (currently 1)
    bytes 8..15   header length in bytes, u64
    header        UTF-8 JSON array of tensor records, padded with trailing
                  spaces so the data region starts on a 64-byte boundary
    data region   raw little-endian IEEE-754 tensor data, in header order,
                  each tensor's offset 64-byte aligned, zero padding between

Each header record is an object with keys ``name``, ``dtype`` (``f32`` or
``f16``), ``shape`` (list of ints, 2-D matrices), ``offset`` (bytes from the
start of the data region) and ``nbytes``. ``nbytes`` must equal
``prod(shape) * dtype_size`` and tensor regions must not overlap. This
layout is the byte-exact interop contract with external exporters.

Tensor naming convention for transformer checkpoints:

    embed, lm_head, final_norm
    layers.{i}.{wq|wk|wv|wo|w_mlp_in|w_mlp_out|norm1|norm2}
    layers.{i}.w_mlp_gate            (optional; gated MLP when present)
    layers.{i}.{ak|bk|av|bv}         (low-rank factor checkpoints)

The model configuration is a separate human-editable JSON file with the
fields of :class:`ModelConfig`.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .numerics import Matrix, as_matrix

MAGIC = b"CSKV"
VERSION = 1
ALIGNMENT = 64

_DTYPES = {"f32": np.dtype("<f4"), "f16": np.dtype("<f2")}
_HEADER_PREFIX = struct.Struct("<4sIQ")  # magic, version, header length


class ContainerFormatError(ValueError):
    """The file is not a valid container (bad magic, version, layout)."""


class ContainerValidationError(ValueError):
    """The container parses but its contents violate an invariant."""


@dataclass
class TensorMeta:
    name: str
    dtype: str
    shape: tuple[int, ...]
    offset: int
    nbytes: int


@dataclass
class ModelConfig:
    """Transformer dimensions; ``d_kv`` is the per-token K (and V) width."""

    n_layers: int
    n_heads: int
    d_head: int
    d_model: int
    d_kv: int
    vocab_size: int
    max_position: int
    rope_theta: float = 10000.0

    def __post_init__(self) -> None:
        counts = (self.n_layers, self.n_heads, self.d_head, self.d_model,
                  self.d_kv, self.vocab_size, self.max_position)
        if any(int(c) < 1 for c in counts):
            raise ContainerValidationError(f"all counts must be >= 1, got {self}")
        if self.d_kv != self.n_heads * self.d_head:
            raise ContainerValidationError(
                f"d_kv={self.d_kv} must equal n_heads*d_head="
                f"{self.n_heads * self.d_head}")

    @property
    def d_ff(self) -> int:
        # MLP hidden width is fixed at 4x the model width.
        return 4 * self.d_model

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


def save_config(cfg: ModelConfig, path) -> None:
    Path(path).write_text(cfg.to_json() + "\n", encoding="utf-8")


def load_config(path) -> ModelConfig:
    return ModelConfig.from_json(Path(path).read_text(encoding="utf-8"))


def _align(n: int) -> int:
    return (n + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT


def _normalize_entry(name: str, value) -> tuple[np.ndarray, str]:
    if isinstance(value, tuple):
        matrix, dtype = value
    else:
        matrix, dtype = value, "f32"
    if dtype not in _DTYPES:
        raise ContainerValidationError(f"tensor {name!r}: unsupported dtype {dtype!r}")
    return as_matrix(matrix), dtype


def write_container(tensors: Mapping[str, Matrix | tuple[Matrix, str]], path) -> None:
    """Write tensors to ``path``.

    Values are matrices or ``(matrix, dtype)`` pairs with dtype ``f32``
    (default) or ``f16``. Entries are written in mapping order; rewriting
    the same mapping produces a byte-identical file.
    """
    names = list(tensors)
    if len(set(names)) != len(names):
        raise ContainerValidationError("duplicate tensor names")

    metas: list[TensorMeta] = []
    payloads: list[bytes] = []
    offset = 0
    for name in names:
        if not name:
            raise ContainerValidationError("empty tensor name")
        matrix, dtype = _normalize_entry(name, tensors[name])
        raw = np.ascontiguousarray(matrix.astype(_DTYPES[dtype])).tobytes()
        offset = _align(offset)
        metas.append(TensorMeta(name, dtype, tuple(matrix.shape), offset, len(raw)))
        payloads.append(raw)
        offset += len(raw)

    header = json.dumps([asdict(m) for m in metas], separators=(",", ":"),
                        sort_keys=True).encode("utf-8")
    # Pad the header with spaces (legal trailing whitespace for JSON
    # parsers) so the data region starts 64-byte aligned.
    header_len = _align(_HEADER_PREFIX.size + len(header)) - _HEADER_PREFIX.size
    header = header.ljust(header_len, b" ")

    blob = bytearray(_HEADER_PREFIX.pack(MAGIC, VERSION, header_len))
    blob += header
    data_start = len(blob)
    for meta, raw in zip(metas, payloads):
        pad = data_start + meta.offset - len(blob)
        blob += b"\x00" * pad
        blob += raw
    Path(path).write_bytes(bytes(blob))


def read_header(path) -> list[TensorMeta]:
    """Parse and validate the container header without touching tensor data."""
    with open(path, "rb") as fh:
        prefix = fh.read(_HEADER_PREFIX.size)
        if len(prefix) < _HEADER_PREFIX.size:
            raise ContainerFormatError("file too short for container prefix")
        magic, version, header_len = _HEADER_PREFIX.unpack(prefix)
        if magic != MAGIC:
            raise ContainerFormatError(f"bad magic {magic!r}")
        if version != VERSION:
            raise ContainerFormatError(f"unsupported container version {version}")
        header = fh.read(header_len)
    if len(header) < header_len:
        raise ContainerFormatError("truncated header")
    try:
        records = json.loads(header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerFormatError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(records, list):
        raise ContainerFormatError("header must be a JSON array")

    metas = []
    for rec in records:
        try:
            meta = TensorMeta(rec["name"], rec["dtype"], tuple(rec["shape"]),
                              int(rec["offset"]), int(rec["nbytes"]))
        except (KeyError, TypeError) as exc:
            raise ContainerFormatError(f"malformed tensor record {rec!r}") from exc
        if meta.dtype not in _DTYPES:
            raise ContainerValidationError(
                f"tensor {meta.name!r}: unsupported dtype {meta.dtype!r}")
        expected = int(np.prod(meta.shape, dtype=np.int64)) * _DTYPES[meta.dtype].itemsize
        if meta.nbytes != expected:
            raise ContainerValidationError(
                f"tensor {meta.name!r}: nbytes {meta.nbytes} != shape-implied {expected}")
        metas.append(meta)

    spans = sorted((m.offset, m.offset + m.nbytes, m.name) for m in metas)
    for (a0, a1, an), (b0, _, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise ContainerValidationError(f"tensors {an!r} and {bn!r} overlap")
    return metas


def read_container(path) -> dict[str, Matrix]:
    """Read every tensor back as a float64 matrix (inverse of write up to cast)."""
    metas = read_header(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    data_start = _HEADER_PREFIX.size + _HEADER_PREFIX.unpack(blob[:_HEADER_PREFIX.size])[2]
    out: dict[str, Matrix] = {}
    for meta in metas:
        start = data_start + meta.offset
        end = start + meta.nbytes
        if end > len(blob):
            raise ContainerFormatError(f"tensor {meta.name!r}: data truncated")
        arr = np.frombuffer(blob[start:end], dtype=_DTYPES[meta.dtype])
        out[meta.name] = arr.reshape(meta.shape).astype(np.float64)
    return out


def layer_name(layer: int, part: str) -> str:
    return f"layers.{layer}.{part}"


def expected_tensor_shapes(cfg: ModelConfig, gated_mlp: bool = False,
                           d_ff: int | None = None) -> dict[str, tuple[int, int]]:
    """Tensor name -> shape implied by the config.

    Norm scales are stored as single-row matrices. The MLP hidden width is
    not part of the config; pass ``d_ff`` when known (defaults to
    ``cfg.d_ff``). With ``gated_mlp`` the per-layer ``w_mlp_gate`` tensor is
    expected as well.
    """
    ff = cfg.d_ff if d_ff is None else d_ff
    shapes: dict[str, tuple[int, int]] = {
        "embed": (cfg.vocab_size, cfg.d_model),
        "lm_head": (cfg.d_model, cfg.vocab_size),
        "final_norm": (1, cfg.d_model),
    }
    for i in range(cfg.n_layers):
        shapes[layer_name(i, "wq")] = (cfg.d_model, cfg.d_kv)
        shapes[layer_name(i, "wk")] = (cfg.d_model, cfg.d_kv)
        shapes[layer_name(i, "wv")] = (cfg.d_model, cfg.d_kv)
        shapes[layer_name(i, "wo")] = (cfg.d_kv, cfg.d_model)
        shapes[layer_name(i, "w_mlp_in")] = (cfg.d_model, ff)
        shapes[layer_name(i, "w_mlp_out")] = (ff, cfg.d_model)
        if gated_mlp:
            shapes[layer_name(i, "w_mlp_gate")] = (cfg.d_model, ff)
        shapes[layer_name(i, "norm1")] = (1, cfg.d_model)
        shapes[layer_name(i, "norm2")] = (1, cfg.d_model)
    return shapes


def validate_config(cfg: ModelConfig, tensors: Mapping[str, Matrix]) -> None:
    """Check that every expected tensor exists with the implied shape.

    The MLP hidden width is inferred from ``layers.0.w_mlp_in`` (the same
    width is then required in every layer). Raises one
    :class:`ContainerValidationError` listing all problems.
    """
    gated = any(layer_name(i, "w_mlp_gate") in tensors for i in range(cfg.n_layers))
    mlp_in0 = tensors.get(layer_name(0, "w_mlp_in"))
    d_ff = None
    if mlp_in0 is not None and getattr(mlp_in0, "ndim", 0) == 2:
        d_ff = int(mlp_in0.shape[1])
    expected = expected_tensor_shapes(cfg, gated_mlp=gated, d_ff=d_ff)
    problems = []
    for name, shape in expected.items():
        if name not in tensors:
            problems.append(f"missing tensor {name!r} (expected shape {shape})")
        elif tuple(tensors[name].shape) != shape:
            problems.append(
                f"tensor {name!r}: expected shape {shape}, "
                f"actual {tuple(tensors[name].shape)}")
    if problems:
        raise ContainerValidationError("; ".join(problems))
