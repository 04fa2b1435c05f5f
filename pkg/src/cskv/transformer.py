"""Decoder-only transformer forward pass with an uncompressed KV cache.

This is the reference path every compressed variant is measured against:
RMSNorm, rotary position encoding, multi-head attention, two-matrix MLP
(optionally gated). All compute is float64.

Cache convention: K rows are stored *pre-rotation*; the rotary transform is
applied at attention time from each row's absolute position. Reconstructed
keys from compressed latents then live in the same space as cached keys,
and full-rank factorizations reproduce the baseline bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Matrix
from .tensorio import ModelConfig, layer_name

RMS_EPS = 1e-6


@dataclass
class LayerWeights:
    wq: Matrix
    wk: Matrix
    wv: Matrix
    wo: Matrix
    w_mlp_in: Matrix
    w_mlp_out: Matrix
    norm1: np.ndarray
    norm2: np.ndarray
    w_mlp_gate: Matrix | None = None


@dataclass
class TransformerWeights:
    config: ModelConfig
    embed: Matrix
    lm_head: Matrix
    final_norm: np.ndarray
    layers: list[LayerWeights]

    @classmethod
    def from_tensors(cls, cfg: ModelConfig, tensors: dict[str, Matrix]) -> "TransformerWeights":
        from .tensorio import validate_config
        validate_config(cfg, tensors)
        layers = []
        for i in range(cfg.n_layers):
            gate = tensors.get(layer_name(i, "w_mlp_gate"))
            layers.append(LayerWeights(
                wq=tensors[layer_name(i, "wq")],
                wk=tensors[layer_name(i, "wk")],
                wv=tensors[layer_name(i, "wv")],
                wo=tensors[layer_name(i, "wo")],
                w_mlp_in=tensors[layer_name(i, "w_mlp_in")],
                w_mlp_out=tensors[layer_name(i, "w_mlp_out")],
                norm1=tensors[layer_name(i, "norm1")].reshape(-1),
                norm2=tensors[layer_name(i, "norm2")].reshape(-1),
                w_mlp_gate=gate,
            ))
        return cls(cfg, tensors["embed"], tensors["lm_head"],
                   tensors["final_norm"].reshape(-1), layers)

    def to_tensors(self) -> dict[str, Matrix]:
        out: dict[str, Matrix] = {
            "embed": self.embed,
            "lm_head": self.lm_head,
            "final_norm": self.final_norm.reshape(1, -1),
        }
        for i, lw in enumerate(self.layers):
            out[layer_name(i, "wq")] = lw.wq
            out[layer_name(i, "wk")] = lw.wk
            out[layer_name(i, "wv")] = lw.wv
            out[layer_name(i, "wo")] = lw.wo
            out[layer_name(i, "w_mlp_in")] = lw.w_mlp_in
            out[layer_name(i, "w_mlp_out")] = lw.w_mlp_out
            if lw.w_mlp_gate is not None:
                out[layer_name(i, "w_mlp_gate")] = lw.w_mlp_gate
            out[layer_name(i, "norm1")] = lw.norm1.reshape(1, -1)
            out[layer_name(i, "norm2")] = lw.norm2.reshape(1, -1)
        return out


def longtail_matrix(rng: np.random.Generator, rows: int, cols: int,
                    std: float = 0.02, decay: float = 1.0) -> Matrix:
    """Random matrix whose singular values decay like 1/i^decay.

    Key/value projections of trained models concentrate their energy in a
    small leading fraction of the spectrum; iid Gaussian weights do not.
    Desk-scale models use this to get realistically compressible layers.
    Total Frobenius energy matches an iid Gaussian matrix of std `std`.
    """
    k = min(rows, cols)
    u, _ = np.linalg.qr(rng.standard_normal((rows, k)))
    v, _ = np.linalg.qr(rng.standard_normal((cols, k)))
    s = np.arange(1, k + 1, dtype=np.float64) ** (-decay)
    s *= std * np.sqrt(rows * cols / np.sum(s**2))
    return (u * s) @ v.T


def make_random_weights(cfg: ModelConfig, seed: int, std: float = 0.02,
                        kv_spectrum: str = "longtail") -> TransformerWeights:
    """Deterministic random model. ``kv_spectrum`` is ``longtail`` or ``iid``
    and controls the K/V projections only."""
    rng = np.random.default_rng(seed)

    def gauss(rows, cols):
        return rng.normal(0.0, std, (rows, cols))

    def kv(rows, cols):
        if kv_spectrum == "longtail":
            return longtail_matrix(rng, rows, cols, std=std)
        return gauss(rows, cols)

    layers = []
    for _ in range(cfg.n_layers):
        layers.append(LayerWeights(
            wq=gauss(cfg.d_model, cfg.d_kv),
            wk=kv(cfg.d_model, cfg.d_kv),
            wv=kv(cfg.d_model, cfg.d_kv),
            wo=gauss(cfg.d_kv, cfg.d_model),
            w_mlp_in=gauss(cfg.d_model, cfg.d_ff),
            w_mlp_out=gauss(cfg.d_ff, cfg.d_model),
            norm1=np.ones(cfg.d_model),
            norm2=np.ones(cfg.d_model),
        ))
    return TransformerWeights(
        config=cfg,
        embed=gauss(cfg.vocab_size, cfg.d_model),
        lm_head=gauss(cfg.d_model, cfg.vocab_size),
        final_norm=np.ones(cfg.d_model),
        layers=layers,
    )


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def rmsnorm(x: np.ndarray, scale: np.ndarray, eps: float = RMS_EPS) -> np.ndarray:
    """x / sqrt(mean(x^2) + eps) * scale, over the last axis."""
    ms = np.mean(np.square(x), axis=-1, keepdims=True)
    return x / np.sqrt(ms + eps) * scale


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def _silu(x: np.ndarray) -> np.ndarray:
    return x * np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def rope_angles(positions: np.ndarray, d_head: int, theta: float) -> tuple[np.ndarray, np.ndarray]:
    """(cos, sin) tables of shape (len(positions), d_head // 2)."""
    if d_head % 2 != 0:
        raise ValueError(f"rotary encoding needs an even head dim, got {d_head}")
    inv_freq = theta ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(ang), np.sin(ang)


def apply_rope(x: np.ndarray, positions: np.ndarray, theta: float) -> np.ndarray:
    """Rotate head vectors by their absolute positions.

    ``x`` has shape (n, n_heads, d_head); pairs are (j, j + d_head/2),
    i.e. the split-half layout.
    """
    d_head = x.shape[-1]
    cos, sin = rope_angles(positions, d_head, theta)
    cos = cos[:, None, :]
    sin = sin[:, None, :]
    lo, hi = x[..., : d_head // 2], x[..., d_head // 2:]
    return np.concatenate([lo * cos - hi * sin, lo * sin + hi * cos], axis=-1)


def rope_rotate(k_or_q: np.ndarray, position: int, theta: float) -> np.ndarray:
    """Rotate one token's head row(s): shape (d_head,) or (n_heads, d_head)."""
    row = np.asarray(k_or_q, dtype=np.float64)
    squeeze = row.ndim == 1
    heads = row[None, None, :] if squeeze else row[None, :, :]
    out = apply_rope(heads, np.array([position]), theta)[0]
    return out[0] if squeeze else out


def _rotate_flat(k: np.ndarray, positions: np.ndarray, n_heads: int, theta: float) -> np.ndarray:
    """Rotate (n, d_kv) rows laid out as concatenated heads."""
    n = k.shape[0]
    if n == 0:
        return k
    d_head = k.shape[1] // n_heads
    return apply_rope(k.reshape(n, n_heads, d_head), positions, theta).reshape(n, -1)


def attention_forward(q_token: np.ndarray, K: Matrix, V: Matrix, n_heads: int) -> np.ndarray:
    """Single-query multi-head attention over already position-encoded keys.

    Returns the concatenated per-head mix of V rows. The caller guarantees
    K/V hold only positions at or before the query (causality).
    """
    if K.shape[0] == 0:
        raise ValueError("attention over an empty cache")
    n, d_kv = K.shape
    d_head = d_kv // n_heads
    q = q_token.reshape(n_heads, d_head)
    k = K.reshape(n, n_heads, d_head)
    v = V.reshape(n, n_heads, d_head)
    scores = np.einsum("hd,nhd->hn", q, k) / np.sqrt(d_head)
    w = softmax(scores, axis=-1)
    return np.einsum("hn,nhd->hd", w, v).reshape(-1)


# ---------------------------------------------------------------------------
# caches and traces
# ---------------------------------------------------------------------------

@dataclass
class BaselineKvCache:
    """Per-layer pre-rotation K and V rows; ``n`` tokens seen so far."""

    k: list[Matrix]
    v: list[Matrix]
    n: int = 0

    @classmethod
    def empty(cls, n_layers: int, d_kv: int) -> "BaselineKvCache":
        return cls(k=[np.zeros((0, d_kv)) for _ in range(n_layers)],
                   v=[np.zeros((0, d_kv)) for _ in range(n_layers)])


@dataclass
class ForwardTrace:
    """Optional per-layer activation capture for calibration and fidelity.

    ``kv_inputs`` holds the post-norm hidden states feeding the K/V
    projections; ``attn_outputs`` the attention block outputs (after the
    output projection, before the residual add).
    """

    n_layers: int
    kv_inputs: list[list[np.ndarray]] = field(default_factory=list)
    keys: list[list[np.ndarray]] = field(default_factory=list)
    values: list[list[np.ndarray]] = field(default_factory=list)
    attn_outputs: list[list[np.ndarray]] = field(default_factory=list)

    def __post_init__(self) -> None:
        for store in (self.kv_inputs, self.keys, self.values, self.attn_outputs):
            store.extend([] for _ in range(self.n_layers))

    def record(self, layer: int, kv_input, k, v, attn_out) -> None:
        self.kv_inputs[layer].append(np.atleast_2d(kv_input))
        self.keys[layer].append(np.atleast_2d(k))
        self.values[layer].append(np.atleast_2d(v))
        self.attn_outputs[layer].append(np.atleast_2d(attn_out))

    def kv_input(self, layer: int) -> Matrix:
        return np.vstack(self.kv_inputs[layer])

    def key(self, layer: int) -> Matrix:
        return np.vstack(self.keys[layer])

    def value(self, layer: int) -> Matrix:
        return np.vstack(self.values[layer])

    def attn_output(self, layer: int) -> Matrix:
        return np.vstack(self.attn_outputs[layer])


def _check_tokens(cfg: ModelConfig, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if tokens.size == 0:
        raise ValueError("empty token sequence")
    if np.any(tokens < 0) or np.any(tokens >= cfg.vocab_size):
        bad = tokens[(tokens < 0) | (tokens >= cfg.vocab_size)][0]
        raise ValueError(f"token id {bad} out of range [0, {cfg.vocab_size})")
    return tokens


def _mlp(lw: LayerWeights, x: np.ndarray) -> np.ndarray:
    if lw.w_mlp_gate is not None:
        return (_silu(x @ lw.w_mlp_gate) * (x @ lw.w_mlp_in)) @ lw.w_mlp_out
    return _silu(x @ lw.w_mlp_in) @ lw.w_mlp_out


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def prefill_baseline(weights: TransformerWeights, tokens,
                     trace: ForwardTrace | None = None) -> tuple[Matrix, BaselineKvCache]:
    """Process a whole prompt; returns per-position logits and the cache."""
    cfg = weights.config
    tokens = _check_tokens(cfg, tokens)
    n = tokens.size
    if n > cfg.max_position:
        raise ValueError(f"sequence length {n} exceeds max_position {cfg.max_position}")
    positions = np.arange(n)
    cache = BaselineKvCache.empty(cfg.n_layers, cfg.d_kv)

    x = weights.embed[tokens]
    for li, lw in enumerate(weights.layers):
        xn = rmsnorm(x, lw.norm1)
        q = xn @ lw.wq
        k = xn @ lw.wk
        v = xn @ lw.wv
        qh = apply_rope(q.reshape(n, cfg.n_heads, cfg.d_head), positions, cfg.rope_theta)
        kh = apply_rope(k.reshape(n, cfg.n_heads, cfg.d_head), positions, cfg.rope_theta)
        vh = v.reshape(n, cfg.n_heads, cfg.d_head)

        scores = np.einsum("nhd,mhd->hnm", qh, kh) / np.sqrt(cfg.d_head)
        mask = np.triu(np.ones((n, n), dtype=bool), k=1)
        scores = np.where(mask[None, :, :], -np.inf, scores)
        w = softmax(scores, axis=-1)
        ctx = np.einsum("hnm,mhd->nhd", w, vh).reshape(n, cfg.d_kv)
        attn_out = ctx @ lw.wo
        x = x + attn_out

        x = x + _mlp(lw, rmsnorm(x, lw.norm2))

        cache.k[li] = k
        cache.v[li] = v
        if trace is not None:
            trace.record(li, xn, k, v, attn_out)
    cache.n = n

    logits = rmsnorm(x, weights.final_norm) @ weights.lm_head
    return logits, cache


def decode_step_baseline(weights: TransformerWeights, cache: BaselineKvCache, token: int,
                         trace: ForwardTrace | None = None) -> tuple[np.ndarray, BaselineKvCache]:
    """Append one token to the cache; returns its logits and the cache."""
    cfg = weights.config
    token = int(_check_tokens(cfg, [token])[0])
    pos = cache.n
    if pos + 1 > cfg.max_position:
        raise ValueError(f"sequence length {pos + 1} exceeds max_position {cfg.max_position}")

    x = weights.embed[token]
    for li, lw in enumerate(weights.layers):
        xn = rmsnorm(x, lw.norm1)
        q = xn @ lw.wq
        k = xn @ lw.wk
        v = xn @ lw.wv
        cache.k[li] = np.vstack([cache.k[li], k])
        cache.v[li] = np.vstack([cache.v[li], v])

        positions = np.arange(pos + 1)
        k_rot = _rotate_flat(cache.k[li], positions, cfg.n_heads, cfg.rope_theta)
        q_rot = rope_rotate(q.reshape(cfg.n_heads, cfg.d_head), pos, cfg.rope_theta).reshape(-1)
        attn_out = attention_forward(q_rot, k_rot, cache.v[li], cfg.n_heads) @ lw.wo
        x = x + attn_out

        x = x + _mlp(lw, rmsnorm(x, lw.norm2))
        if trace is not None:
            trace.record(li, xn, k, v, attn_out)
    cache.n = pos + 1

    logits = rmsnorm(x, weights.final_norm) @ weights.lm_head
    return logits, cache


def greedy_generate(weights: TransformerWeights, prompt, max_new: int) -> np.ndarray:
    """Greedy continuation of ``prompt``; returns the new tokens only.

    Argmax ties break toward the lowest token id.
    """
    logits, cache = prefill_baseline(weights, prompt)
    out = []
    next_token = int(np.argmax(logits[-1]))
    for _ in range(max_new):
        out.append(next_token)
        if len(out) == max_new:
            break
        logits_row, cache = decode_step_baseline(weights, cache, next_token)
        next_token = int(np.argmax(logits_row))
    return np.asarray(out, dtype=np.int64)
