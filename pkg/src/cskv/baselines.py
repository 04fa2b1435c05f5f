"""Token-pruning comparators at matched memory budgets.

Two eviction families:

  * streaming: keep the first ``sink_count`` tokens (attention sinks) plus
    the most recent ``window_count`` tokens; evict the oldest non-sink row.
  * heavy-hitter: track each kept token's cumulative received attention;
    when over budget, evict the lowest-scoring token outside a recency
    reserve (half the budget), ties going against the older token.

Both caches store pre-rotation K rows with absolute positions, like the
rest of the engine, so decoding restricted to kept rows stays exact when
nothing has been evicted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Matrix
from .transformer import (TransformerWeights, _check_tokens, _mlp, _rotate_flat,
                          rmsnorm, rope_rotate, softmax)


@dataclass
class StreamingPolicy:
    sink_count: int = 4
    window_count: int = 28


@dataclass
class H2OPolicy:
    budget: int = 32

    @property
    def recency_reserve(self) -> int:
        return self.budget // 2


@dataclass
class StreamingCache:
    sink_count: int
    window_count: int
    k: Matrix
    v: Matrix
    positions: np.ndarray

    @classmethod
    def empty(cls, policy: StreamingPolicy, d_kv: int) -> "StreamingCache":
        return cls(policy.sink_count, policy.window_count,
                   np.zeros((0, d_kv)), np.zeros((0, d_kv)),
                   np.zeros(0, dtype=np.int64))


@dataclass
class H2OCache:
    budget: int
    k: Matrix
    v: Matrix
    positions: np.ndarray
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def empty(cls, policy: H2OPolicy, d_kv: int) -> "H2OCache":
        return cls(policy.budget, np.zeros((0, d_kv)), np.zeros((0, d_kv)),
                   np.zeros(0, dtype=np.int64))


def streaming_kept_positions(sinks: int, window: int, n: int) -> list[int]:
    """Closed-form kept set after n appends: first sinks plus last window."""
    if n <= sinks + window:
        return list(range(n))
    return list(range(sinks)) + list(range(n - window, n))


def streaming_evict(cache: StreamingCache, k_row: np.ndarray, v_row: np.ndarray,
                    position: int) -> StreamingCache:
    """Append one row; evict the oldest non-sink row if over budget."""
    cache.k = np.vstack([cache.k, k_row])
    cache.v = np.vstack([cache.v, v_row])
    cache.positions = np.append(cache.positions, position)
    budget = cache.sink_count + cache.window_count
    if cache.positions.size > budget:
        keep = np.ones(cache.positions.size, dtype=bool)
        keep[cache.sink_count] = False  # oldest non-sink row
        cache.k, cache.v = cache.k[keep], cache.v[keep]
        cache.positions = cache.positions[keep]
    return cache


def h2o_append(cache: H2OCache, k_row: np.ndarray, v_row: np.ndarray,
               position: int) -> H2OCache:
    cache.k = np.vstack([cache.k, k_row])
    cache.v = np.vstack([cache.v, v_row])
    cache.positions = np.append(cache.positions, position)
    cache.scores = np.append(cache.scores, 0.0)
    return cache


def h2o_evict(cache: H2OCache, attention_row: np.ndarray) -> H2OCache:
    """Accumulate one attention row over the kept tokens, then enforce the
    budget by evicting the weakest non-recent token (ties evict older)."""
    row = np.asarray(attention_row, dtype=np.float64).reshape(-1)
    if row.size != cache.scores.size:
        raise ValueError(f"attention row covers {row.size} tokens, cache holds "
                         f"{cache.scores.size}")
    cache.scores = cache.scores + row
    if cache.positions.size > cache.budget:
        reserve = cache.budget // 2
        n_candidates = cache.positions.size - reserve
        victim = int(np.argmin(cache.scores[:n_candidates]))  # first min = oldest
        keep = np.ones(cache.positions.size, dtype=bool)
        keep[victim] = False
        cache.k, cache.v = cache.k[keep], cache.v[keep]
        cache.positions = cache.positions[keep]
        cache.scores = cache.scores[keep]
    return cache


def _attention_with_weights(q_rot: np.ndarray, k_rot: Matrix, v: Matrix,
                            n_heads: int) -> tuple[np.ndarray, np.ndarray]:
    n, d_kv = k_rot.shape
    d_head = d_kv // n_heads
    qh = q_rot.reshape(n_heads, d_head)
    kh = k_rot.reshape(n, n_heads, d_head)
    vh = v.reshape(n, n_heads, d_head)
    w = softmax(np.einsum("hd,nhd->hn", qh, kh) / np.sqrt(d_head), axis=-1)
    out = np.einsum("hn,nhd->hd", w, vh).reshape(-1)
    return out, w.mean(axis=0)


def _pruned_step(weights: TransformerWeights, caches: list, token: int, pos: int,
                 policy) -> np.ndarray:
    """One token through every layer with the pruning policy applied."""
    cfg = weights.config
    x = weights.embed[token]
    for li, lw in enumerate(weights.layers):
        xn = rmsnorm(x, lw.norm1)
        q = xn @ lw.wq
        k = xn @ lw.wk
        v = xn @ lw.wv
        cache = caches[li]
        if isinstance(policy, StreamingPolicy):
            streaming_evict(cache, k, v, pos)
        else:
            h2o_append(cache, k, v, pos)

        k_rot = _rotate_flat(cache.k, cache.positions, cfg.n_heads, cfg.rope_theta)
        q_rot = rope_rotate(q.reshape(cfg.n_heads, cfg.d_head), pos, cfg.rope_theta).reshape(-1)
        attn, mean_w = _attention_with_weights(q_rot, k_rot, cache.v, cfg.n_heads)
        x = x + attn @ lw.wo
        x = x + _mlp(lw, rmsnorm(x, lw.norm2))

        if isinstance(policy, H2OPolicy):
            h2o_evict(cache, mean_w)
    return rmsnorm(x, weights.final_norm) @ weights.lm_head


def decode_with_pruned_cache(weights: TransformerWeights, policy, tokens,
                             max_new: int) -> np.ndarray:
    """Greedy generation with per-layer token pruning; returns new tokens.

    The prompt is fed sequentially so eviction applies during the prompt
    phase as well (heavy-hitter scores need the prompt's attention rows).
    """
    cfg = weights.config
    tokens = _check_tokens(cfg, tokens)
    if isinstance(policy, StreamingPolicy):
        caches = [StreamingCache.empty(policy, cfg.d_kv) for _ in range(cfg.n_layers)]
    elif isinstance(policy, H2OPolicy):
        caches = [H2OCache.empty(policy, cfg.d_kv) for _ in range(cfg.n_layers)]
    else:
        raise TypeError(f"unknown pruning policy {policy!r}")

    logits = None
    for pos, token in enumerate(tokens):
        logits = _pruned_step(weights, caches, int(token), pos, policy)
    out = []
    next_token = int(np.argmax(logits))
    pos = tokens.size
    for _ in range(max_new):
        out.append(next_token)
        if len(out) == max_new:
            break
        logits = _pruned_step(weights, caches, next_token, pos, policy)
        next_token = int(np.argmax(logits))
        pos += 1
    return np.asarray(out, dtype=np.int64)


def equal_budget_tokens(n: int, rank_k: int, rank_v: int, window: int, d_kv: int) -> int:
    """Pruning budget (kept tokens) matching a compressed cache's bytes.

    A compressed cache stores n*(rank_k+rank_v) latent values plus
    2*window*d_kv window values; a pruned cache stores 2*b*d_kv. Solving
    for b gives the byte-fair token budget.
    """
    return max(1, round((n * (rank_k + rank_v) + 2 * window * d_kv) / (2 * d_kv)))
