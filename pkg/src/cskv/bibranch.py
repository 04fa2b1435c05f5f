"""Bi-branch KV cache: compressed latents for all history plus a
full-precision window over the most recent tokens.

Prefill computes attention from the full-precision projections (identical
to the baseline engine) while also storing every token's latent X @ A.
During decode, tokens older than the window are served by reconstructing
K-hat = latent @ B_K (rotary encoding is applied after reconstruction,
since latents hold pre-rotation projections), and the newest tokens come
from the window untouched. Latents exist for windowed tokens too, so
eviction is a pure drop.

Latents are stored at a configurable precision (f32 default, f16
optional); window rows keep the compute precision of the baseline cache so
a window covering the whole sequence reproduces baseline generation
token-for-token. With a quantized plan, reconstruction reads latent
history through the 4-bit quantizer in complete token groups; the trailing
partial group (the residual) and the window stay unquantized.

Each cache belongs to a single generation session and is mutated only by
that session's steps; weights and factors are shared read-only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lowrank import CompressionPlan, FactorSet
from .numerics import Matrix
from .quant import CacheQuant, QuantSpec, fake_quant, group_count
from .tensorio import ModelConfig
from .transformer import (ForwardTrace, TransformerWeights, _check_tokens, _mlp,
                          attention_forward, prefill_baseline, rmsnorm, rope_rotate,
                          _rotate_flat)

STORAGE_DTYPES = {"f32": np.float32, "f16": np.float16}


def _store(x: np.ndarray, dtype: str) -> np.ndarray:
    """Round values to the storage precision, keeping float64 for compute."""
    return x.astype(STORAGE_DTYPES[dtype]).astype(np.float64)


@dataclass
class LayerBiBranch:
    latent_k: Matrix   # (n, rank_k) X @ A_K for every token seen
    latent_v: Matrix   # (n, rank_v)
    window_k: Matrix   # (min(n, m), d_kv) full-precision recent rows
    window_v: Matrix


@dataclass
class BiBranchCache:
    layers: list[LayerBiBranch]
    window_size: int
    n: int = 0

    @property
    def window_len(self) -> int:
        return self.layers[0].window_k.shape[0] if self.layers else 0

    @property
    def window_positions(self) -> np.ndarray:
        return np.arange(self.n - self.window_len, self.n)


@dataclass
class CacheStats:
    bytes_latent: int
    bytes_window: int
    bytes_total: int
    baseline_bytes: int
    achieved_ratio: float
    headline_ratio: float


def memory_bytes(n: int, m: int, d_kv: int, rank_k: int, rank_v: int,
                 element_bytes: int = 2, quant: CacheQuant | None = None) -> CacheStats:
    """Byte accounting for a bi-branch cache of n tokens.

    ``achieved_ratio`` counts everything actually stored (window, and group
    scale/zero metadata under quantization). ``headline_ratio`` is the
    window-free, overhead-free per-token channel arithmetic: channel
    shrinking and bit-width reduction compose multiplicatively.
    """
    if min(n, m, d_kv, rank_k, rank_v, element_bytes) < 0:
        raise ValueError("counts must be non-negative")
    window_rows = min(n, m)
    bytes_window = window_rows * 2 * d_kv * element_bytes
    baseline = n * 2 * d_kv * element_bytes

    if quant is None:
        bytes_latent = n * (rank_k + rank_v) * element_bytes
        stored_bits = 8 * element_bytes
    else:
        codes = -(-n * rank_k // 2) + (-(-n * rank_v // 2))
        groups = group_count((n, rank_k), quant.key_spec) + \
            group_count((n, rank_v), quant.value_spec)
        bytes_latent = codes + groups * 4  # f16 scale + f16 zero per group
        stored_bits = 4

    total = bytes_latent + bytes_window
    achieved = 1.0 - total / baseline if baseline else 0.0
    headline = 1.0 - (rank_k + rank_v) * stored_bits / (2 * d_kv * 8 * element_bytes)
    return CacheStats(bytes_latent, bytes_window, total, baseline, achieved, headline)


def cache_stats(cache: BiBranchCache, plan: CompressionPlan,
                element_bytes: int = 2) -> CacheStats:
    return memory_bytes(cache.n, plan.window_size, plan.d_kv,
                        plan.rank_k, plan.rank_v, element_bytes, plan.quant)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def prefill(weights: TransformerWeights, factors: FactorSet, plan: CompressionPlan,
            tokens, trace: ForwardTrace | None = None) -> tuple[Matrix, BiBranchCache]:
    """Prompt pass. Attention runs on the full-precision branch, so logits
    equal the baseline engine's exactly; latents are stored for all tokens."""
    cfg = weights.config
    _require_compatible(cfg, factors, plan)
    own_trace = trace if trace is not None else ForwardTrace(cfg.n_layers)
    logits, base = prefill_baseline(weights, tokens, trace=own_trace)
    n = base.n
    w = min(n, plan.window_size)
    layers = []
    for li in range(cfg.n_layers):
        # Latent rows are the recorded projection inputs through A.
        xn = own_trace.kv_input(li)
        layers.append(LayerBiBranch(
            latent_k=_store(xn @ factors.key[li].A, plan.storage_dtype),
            latent_v=_store(xn @ factors.value[li].A, plan.storage_dtype),
            window_k=base.k[li][n - w:].copy(),
            window_v=base.v[li][n - w:].copy(),
        ))
    return logits, BiBranchCache(layers, plan.window_size, n)


def decode_step(weights: TransformerWeights, factors: FactorSet, plan: CompressionPlan,
                cache: BiBranchCache, token: int,
                trace: ForwardTrace | None = None) -> tuple[np.ndarray, BiBranchCache]:
    """One decode step: update both branches, attend over reconstructed
    history plus the window, then evict the oldest window row."""
    cfg = weights.config
    token = int(_check_tokens(cfg, [token])[0])
    pos = cache.n
    if pos == 0:
        raise ValueError("decode_step requires a prefilled cache")
    if pos + 1 > cfg.max_position:
        raise ValueError(f"sequence length {pos + 1} exceeds max_position {cfg.max_position}")

    x = weights.embed[token]
    for li, lw in enumerate(weights.layers):
        lc = cache.layers[li]
        xn = rmsnorm(x, lw.norm1)
        q = xn @ lw.wq
        k_full = xn @ lw.wk
        v_full = xn @ lw.wv

        lc.latent_k = np.vstack([lc.latent_k, _store(xn @ factors.key[li].A, plan.storage_dtype)])
        lc.latent_v = np.vstack([lc.latent_v, _store(xn @ factors.value[li].A, plan.storage_dtype)])
        lc.window_k = np.vstack([lc.window_k, k_full])
        lc.window_v = np.vstack([lc.window_v, v_full])

        n_total = pos + 1
        w_len = lc.window_k.shape[0]
        hist = n_total - w_len
        k_hat = _latent_matmul(lc.latent_k[:hist], factors.key[li].B,
                               plan.quant.key_spec if plan.quant else None)
        v_hat = _latent_matmul(lc.latent_v[:hist], factors.value[li].B,
                               plan.quant.value_spec if plan.quant else None)

        k_all = np.vstack([k_hat, lc.window_k])
        v_all = np.vstack([v_hat, lc.window_v])
        k_rot = _rotate_flat(k_all, np.arange(n_total), cfg.n_heads, cfg.rope_theta)
        q_rot = rope_rotate(q.reshape(cfg.n_heads, cfg.d_head), pos, cfg.rope_theta).reshape(-1)
        attn_out = attention_forward(q_rot, k_rot, v_all, cfg.n_heads) @ lw.wo
        x = x + attn_out
        x = x + _mlp(lw, rmsnorm(x, lw.norm2))

        if w_len > plan.window_size:
            lc.window_k = lc.window_k[1:]
            lc.window_v = lc.window_v[1:]
        if trace is not None:
            trace.record(li, xn, k_full, v_full, attn_out)
    cache.n = pos + 1

    logits = rmsnorm(x, weights.final_norm) @ weights.lm_head
    return logits, cache


def _latent_matmul(latent: Matrix, b: Matrix, spec: QuantSpec | None) -> Matrix:
    """Reconstruct history rows, reading quantized complete token groups."""
    if latent.shape[0] == 0:
        return np.zeros((0, b.shape[1]))
    if spec is None:
        return latent @ b
    boundary = latent.shape[0] // spec.group_size * spec.group_size
    if boundary == 0:
        return latent @ b
    head = fake_quant(latent[:boundary], spec)
    return np.vstack([head, latent[boundary:]]) @ b


def reconstruct_history(cache: BiBranchCache, factors: FactorSet,
                        upto: int) -> list[tuple[Matrix, Matrix]]:
    """Pre-rotation (K-hat, V-hat) for the oldest ``upto`` tokens, per layer."""
    if upto > cache.n - cache.window_len:
        raise ValueError(f"upto={upto} exceeds compressed history "
                         f"{cache.n - cache.window_len}")
    out = []
    for li, lc in enumerate(cache.layers):
        k_hat = lc.latent_k[:upto] @ factors.key[li].B
        v_hat = lc.latent_v[:upto] @ factors.value[li].B
        out.append((k_hat, v_hat))
    return out


def greedy_generate(weights: TransformerWeights, factors: FactorSet,
                    plan: CompressionPlan, prompt, max_new: int) -> np.ndarray:
    """Greedy continuation through the bi-branch cache; new tokens only."""
    logits, cache = prefill(weights, factors, plan, prompt)
    out = []
    next_token = int(np.argmax(logits[-1]))
    for _ in range(max_new):
        out.append(next_token)
        if len(out) == max_new:
            break
        row, cache = decode_step(weights, factors, plan, cache, next_token)
        next_token = int(np.argmax(row))
    return np.asarray(out, dtype=np.int64)


def _require_compatible(cfg: ModelConfig, factors: FactorSet, plan: CompressionPlan) -> None:
    if factors.n_layers != cfg.n_layers:
        raise ValueError(f"factor set covers {factors.n_layers} layers, model has {cfg.n_layers}")
    if plan.d_kv != cfg.d_kv:
        raise ValueError(f"plan d_kv {plan.d_kv} != model d_kv {cfg.d_kv}")
    for li in range(cfg.n_layers):
        if factors.key[li].rank != plan.rank_k or factors.value[li].rank != plan.rank_v:
            raise ValueError(f"layer {li} factor ranks ({factors.key[li].rank}, "
                             f"{factors.value[li].rank}) do not match plan "
                             f"({plan.rank_k}, {plan.rank_v})")
