"""Export decoder-only hub checkpoints into the cskv container format.

Supported sources are standard-attention (MHA) decoder-only checkpoints in
the public model-hub layout: a directory with ``config.json`` and weights
in ``model.safetensors`` (or ``pytorch_model.bin``, which needs torch).
Grouped-query checkpoints are rejected explicitly.

The converter never reshapes or fuses tensors. The only layout
normalizations (transposing (out, in) linear weights to the engine's
(in, out) convention, and storing 1-D norm scales as single-row matrices)
are recorded per tensor in the manifest. Rotary embeddings use the same
split-half pair layout in both worlds, so no normalization applies.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .container import DTYPES, read_container, write_container


class ExportError(ValueError):
    pass


@dataclass
class TensorMapEntry:
    source: str
    target: str
    shape: tuple[int, ...]
    transposed: bool = False
    reshaped: str | None = None
    sha256: str = ""


@dataclass
class ExportManifest:
    source: str
    dtype: str
    rope_layout: str
    tensors: list[TensorMapEntry] = field(default_factory=list)
    absent: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


@dataclass
class VerifyEntry:
    max_abs_diff: float      # exported value vs cast source (0 when intact)
    cast_loss: float         # cast source vs original source
    ok: bool


@dataclass
class VerifyReport:
    tensors: dict[str, VerifyEntry] = field(default_factory=dict)
    missing: list[str] = field(default_factory=list)
    unexpected: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.missing and not self.unexpected and \
            all(e.ok for e in self.tensors.values())


def _load_source_config(source: Path) -> dict:
    cfg_path = source / "config.json"
    if not cfg_path.exists():
        raise ExportError(f"no config.json under {source}")
    return json.loads(cfg_path.read_text(encoding="utf-8"))


def _load_source_tensors(source: Path) -> dict[str, np.ndarray]:
    st = source / "model.safetensors"
    if st.exists():
        from safetensors.numpy import load_file
        return {k: np.asarray(v) for k, v in load_file(str(st)).items()}
    bin_path = source / "pytorch_model.bin"
    if bin_path.exists():
        import torch
        state = torch.load(bin_path, map_location="cpu", weights_only=True)
        return {k: v.detach().to(torch.float32).numpy() for k, v in state.items()}
    raise ExportError(f"no model.safetensors or pytorch_model.bin under {source}")


def _check_architecture(cfg: dict, tensors: dict[str, np.ndarray]) -> None:
    n_heads = cfg.get("num_attention_heads")
    kv_heads = cfg.get("num_key_value_heads", n_heads)
    if n_heads is None:
        raise ExportError("config lacks num_attention_heads")
    if kv_heads != n_heads:
        raise ExportError(
            f"grouped-query checkpoints are unsupported: num_key_value_heads="
            f"{kv_heads} != num_attention_heads={n_heads}")
    scaling = cfg.get("rope_scaling")
    if scaling not in (None, {}) and scaling.get("rope_type", scaling.get("type")) != "default":
        raise ExportError(f"rope_scaling {scaling!r} is unsupported")
    biases = sorted(k for k in tensors if k.endswith(".bias"))
    if biases:
        raise ExportError(f"bias tensors are unsupported: {biases[:3]}")


def _engine_config(cfg: dict) -> dict:
    hidden = cfg["hidden_size"]
    n_heads = cfg["num_attention_heads"]
    d_head = cfg.get("head_dim") or hidden // n_heads
    return {
        "n_layers": cfg["num_hidden_layers"],
        "n_heads": n_heads,
        "d_head": d_head,
        "d_model": hidden,
        "d_kv": n_heads * d_head,
        "vocab_size": cfg["vocab_size"],
        "max_position": cfg.get("max_position_embeddings", 4096),
        "rope_theta": float(cfg.get("rope_theta", 10000.0)),
    }


def _tensor_map(n_layers: int) -> list[tuple[str, str, bool, str | None]]:
    """(source, target, transpose, reshape-note) in container order."""
    entries: list[tuple[str, str, bool, str | None]] = [
        ("model.embed_tokens.weight", "embed", False, None),
        ("lm_head.weight", "lm_head", True, None),
        ("model.norm.weight", "final_norm", False, "row_matrix"),
    ]
    for i in range(n_layers):
        p = f"model.layers.{i}."
        t = f"layers.{i}."
        entries += [
            (p + "self_attn.q_proj.weight", t + "wq", True, None),
            (p + "self_attn.k_proj.weight", t + "wk", True, None),
            (p + "self_attn.v_proj.weight", t + "wv", True, None),
            (p + "self_attn.o_proj.weight", t + "wo", True, None),
            (p + "mlp.gate_proj.weight", t + "w_mlp_gate", True, None),
            (p + "mlp.up_proj.weight", t + "w_mlp_in", True, None),
            (p + "mlp.down_proj.weight", t + "w_mlp_out", True, None),
            (p + "input_layernorm.weight", t + "norm1", False, "row_matrix"),
            (p + "post_attention_layernorm.weight", t + "norm2", False, "row_matrix"),
        ]
    return entries


def _apply_layout(value: np.ndarray, transpose: bool, reshape: str | None) -> np.ndarray:
    out = value.T if transpose else value
    if reshape == "row_matrix":
        out = out.reshape(1, -1)
    return np.ascontiguousarray(out)


def export_checkpoint(source, out_dir, dtype: str = "f32") -> ExportManifest:
    """Write ``model.cskv``, ``model.json`` and ``manifest.json`` to out_dir."""
    source = Path(source)
    out_dir = Path(out_dir)
    if dtype not in DTYPES:
        raise ExportError(f"unsupported dtype policy {dtype!r}")
    cfg = _load_source_config(source)
    tensors = _load_source_tensors(source)
    _check_architecture(cfg, tensors)
    engine_cfg = _engine_config(cfg)

    manifest = ExportManifest(source=str(source), dtype=dtype,
                              rope_layout="split_half (same as source; no normalization)")
    eps = cfg.get("rms_norm_eps", 1e-6)
    if eps != 1e-6:
        manifest.warnings.append(
            f"source rms_norm_eps={eps} differs from the engine's fixed 1e-6")

    tied = cfg.get("tie_word_embeddings", False) and "lm_head.weight" not in tensors
    exported: dict[str, np.ndarray] = {}
    for src_name, target, transpose, reshape in _tensor_map(engine_cfg["n_layers"]):
        if src_name == "lm_head.weight" and tied:
            src_name = "model.embed_tokens.weight"
            manifest.warnings.append("tied embeddings: lm_head exported from "
                                     "model.embed_tokens.weight (transposed)")
        if src_name not in tensors:
            raise ExportError(f"source tensor {src_name!r} is missing")
        value = _apply_layout(tensors[src_name].astype(np.float64), transpose, reshape)
        exported[target] = value
        raw = value.astype(DTYPES[dtype]).tobytes()
        manifest.tensors.append(TensorMapEntry(
            source=src_name, target=target, shape=tuple(value.shape),
            transposed=transpose, reshaped=reshape,
            sha256=hashlib.sha256(raw).hexdigest()))

    out_dir.mkdir(parents=True, exist_ok=True)
    write_container(exported, out_dir / "model.cskv", dtype=dtype)
    (out_dir / "model.json").write_text(
        json.dumps(engine_cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    manifest.save(out_dir / "manifest.json")
    return manifest


def verify_container(source, container_path) -> VerifyReport:
    """Compare every exported tensor against the source within cast tolerance.

    The stored values must equal the dtype-cast source exactly; the report
    also carries the cast loss against the uncast source for reference.
    """
    source = Path(source)
    cfg = _load_source_config(source)
    tensors = _load_source_tensors(source)
    engine_cfg = _engine_config(cfg)
    stored = read_container(container_path)

    report = VerifyReport()
    tied = cfg.get("tie_word_embeddings", False) and "lm_head.weight" not in tensors
    expected_names = set()
    for src_name, target, transpose, reshape in _tensor_map(engine_cfg["n_layers"]):
        if src_name == "lm_head.weight" and tied:
            src_name = "model.embed_tokens.weight"
        expected_names.add(target)
        if target not in stored:
            report.missing.append(target)
            continue
        got = stored[target]
        dtype = DTYPES["f16"] if got.size and _is_f16(container_path, target) else None
        reference = _apply_layout(tensors[src_name].astype(np.float64), transpose, reshape)
        cast = reference.astype(dtype or DTYPES["f32"]).astype(np.float64)
        if got.shape != cast.shape:
            report.tensors[target] = VerifyEntry(float("inf"), 0.0, False)
            continue
        diff = float(np.max(np.abs(got - cast))) if got.size else 0.0
        loss = float(np.max(np.abs(cast - reference))) if got.size else 0.0
        report.tensors[target] = VerifyEntry(diff, loss, diff == 0.0)
    report.unexpected = sorted(set(stored) - expected_names)
    return report


def _is_f16(container_path, name: str) -> bool:
    import struct as _struct
    with open(container_path, "rb") as fh:
        prefix = fh.read(16)
        header_len = _struct.unpack("<Q", prefix[8:])[0]
        records = json.loads(fh.read(header_len).decode("utf-8"))
    for rec in records:
        if rec["name"] == name:
            return rec["dtype"] == "f16"
    return False


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="cskv-convert",
        description="Export a decoder-only hub checkpoint into the cskv container")
    parser.add_argument("source", help="checkpoint directory (config.json + weights)")
    parser.add_argument("out_dir", help="output directory")
    parser.add_argument("--dtype", choices=["f32", "f16"], default="f32",
                        help="container storage dtype (default f32)")
    parser.add_argument("--verify", action="store_true",
                        help="verify the written container against the source")
    args = parser.parse_args(argv)
    try:
        manifest = export_checkpoint(args.source, args.out_dir, args.dtype)
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"exported {len(manifest.tensors)} tensors to {args.out_dir}")
    for w in manifest.warnings:
        print(f"warning: {w}", file=sys.stderr)
    if args.verify:
        report = verify_container(args.source, Path(args.out_dir) / "model.cskv")
        worst = max((e.max_abs_diff for e in report.tensors.values()), default=0.0)
        print(f"verify: {'ok' if report.ok else 'FAILED'} "
              f"(max abs diff vs cast source: {worst:g})")
        if not report.ok:
            return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
