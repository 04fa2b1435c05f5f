"""Low-rank factor construction for K/V projections.

A projection W (h_in x h_out) is replaced by A (h_in x h_comp) times
B (h_comp x h_out). The cache then stores the narrow latent X @ A instead
of the full X @ W, and B reconstructs history on demand.

Initializers:
  * init_random: Gaussian factors (ablation arm; destroys W's information)
  * init_svd:    truncated SVD of W, balanced sqrt-singular-value split
  * init_asvd:   activation-scaled SVD of diag(s) @ W, where s_i is
                  the per-input-channel absolute-mean of calibration
                  activations raised to an exponent alpha

weighted_lowrank_oracle computes the exact minimizer of
||X W - X A B||_F at a given rank, which upper-bounds what any
calibration run can achieve and anchors the convergence tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorio
from .numerics import Matrix, ShapeError, thin_svd, qr_factor

ZERO_CHANNEL_SCALE = 1e-6
RIDGE = 1e-8


@dataclass
class LowRankFactors:
    """The (A, B) pair replacing one projection; target is 'key' or 'value'."""

    A: Matrix
    B: Matrix
    target: str = "key"
    layer: int = 0

    def __post_init__(self) -> None:
        h_in, rank = self.A.shape
        rank_b, h_out = self.B.shape
        if rank != rank_b:
            raise ShapeError(f"factor ranks differ: A is {self.A.shape}, B is {self.B.shape}")
        if not 1 <= rank <= min(h_in, h_out):
            raise ShapeError(f"rank {rank} outside [1, min({h_in}, {h_out})]")
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.B))):
            raise ValueError("factors contain NaN or Inf")

    @property
    def rank(self) -> int:
        return self.A.shape[1]


@dataclass
class AsvdScaling:
    """Per-input-channel scales s (> 0) and the exponent they were raised to."""

    s: np.ndarray
    alpha: float

    def __post_init__(self) -> None:
        self.s = np.asarray(self.s, dtype=np.float64).reshape(-1)
        if np.any(self.s <= 0):
            raise ValueError("activation scales must be positive")


def ratio_to_rank(ratio: float, h_out: int) -> int:
    """Rank keeping per-token memory at (1 - ratio) of the original width.

    Floor rounding never exceeds the memory budget; minimum rank is 1. The
    epsilon absorbs float noise so exact products (0.8 * 640 = 128) do not
    floor one short.
    """
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"compression ratio must be in [0, 1), got {ratio}")
    return max(1, int(np.floor((1.0 - ratio) * h_out + 1e-9)))


def init_random(seed: int, h_in: int, h_out: int, rank: int,
                target: str = "key", layer: int = 0) -> LowRankFactors:
    """Gaussian factors, std 0.02, deterministic per seed."""
    rng = np.random.default_rng(seed)
    a = rng.normal(0.0, 0.02, (h_in, rank))
    b = rng.normal(0.0, 0.02, (rank, h_out))
    return LowRankFactors(a, b, target, layer)


def _split_balanced(u: Matrix, s: np.ndarray, vt: Matrix,
                    target: str, layer: int) -> LowRankFactors:
    root = np.sqrt(s)
    return LowRankFactors(u * root, root[:, None] * vt, target, layer)


def init_svd(W: Matrix, rank: int, target: str = "key", layer: int = 0) -> LowRankFactors:
    """Truncated SVD of W with the sqrt-singular-value split between A and B."""
    if rank > min(W.shape):
        raise ShapeError(f"rank {rank} exceeds min dimension of {W.shape}")
    t = thin_svd(W).truncate(rank)
    return _split_balanced(t.U, t.S, t.Vt, target, layer)


def compute_asvd_scaling(X: Matrix, alpha: float = 0.5) -> AsvdScaling:
    """Absolute-mean activation scales: s_i = mean(|X[:, i]|) ** alpha.

    Channels that are identically zero in the calibration data get a small
    positive scale so diag(s) stays invertible.
    """
    if X.size == 0:
        raise ShapeError("empty activation matrix")
    abs_mean = np.mean(np.abs(X), axis=0)
    nonzero = abs_mean > 0
    s = np.full_like(abs_mean, ZERO_CHANNEL_SCALE)
    s[nonzero] = abs_mean[nonzero] ** alpha
    return AsvdScaling(s, alpha)


def init_asvd(W: Matrix, scaling: AsvdScaling, rank: int,
              target: str = "key", layer: int = 0) -> LowRankFactors:
    """Truncated SVD of diag(s) @ W; the left factor is unscaled afterwards.

    With s constant this reduces to init_svd (the scaling cancels exactly).
    """
    s = scaling.s
    if s.size != W.shape[0]:
        raise ShapeError(f"scaling length {s.size} != h_in {W.shape[0]}")
    t = thin_svd(s[:, None] * W).truncate(rank)
    root = np.sqrt(t.S)
    a = (t.U * root) / s[:, None]
    b = root[:, None] * t.Vt
    return LowRankFactors(a, b, target, layer)


def weighted_lowrank_oracle(X: Matrix, W: Matrix, rank: int,
                            target: str = "key", layer: int = 0) -> LowRankFactors:
    """Closed-form minimizer of ||X W - X A B||_F over rank-limited A, B.

    QR-factor X = QR, truncate the SVD of R @ W, and map the left factor
    back through R. For ill-conditioned R the solve is regularized with a
    small ridge. When X has fewer rows than columns the triangular factor
    comes from the Cholesky of X'X + ridge instead.
    """
    if X.shape[1] != W.shape[0]:
        raise ShapeError(f"X cols {X.shape[1]} != W rows {W.shape[0]}")
    h_in = X.shape[1]
    if X.shape[0] >= h_in:
        _, r = qr_factor(X)
    else:
        r = np.linalg.cholesky(X.T @ X + RIDGE * np.eye(h_in)).T

    t = thin_svd(r @ W).truncate(rank)
    root = np.sqrt(t.S)
    a_scaled = t.U * root
    b = root[:, None] * t.Vt

    diag = np.abs(np.diag(r))
    if diag.min() > 1e-12 * max(diag.max(), 1.0):
        a = np.linalg.solve(r, a_scaled)
    else:
        a = np.linalg.solve(r.T @ r + RIDGE * np.eye(h_in), r.T @ a_scaled)
    return LowRankFactors(a, b, target, layer)


def reconstruct_weight(f: LowRankFactors) -> Matrix:
    return f.A @ f.B


# ---------------------------------------------------------------------------
# whole-model plans and factor sets
# ---------------------------------------------------------------------------

@dataclass
class CompressionPlan:
    """Ranks, recency window, and optional quantization for a whole model.

    Ratios are the fraction of per-token cache memory removed before any
    quantization; ranks follow via ratio_to_rank against d_kv.
    """

    ratio_k: float
    ratio_v: float
    rank_k: int
    rank_v: int
    d_kv: int
    window_size: int = 32
    quant: "object | None" = None      # CacheQuant, see cskv.quant
    storage_dtype: str = "f32"         # latent storage precision: f32 | f16

    def __post_init__(self) -> None:
        if self.window_size < 1:
            raise ValueError(f"window size must be >= 1, got {self.window_size}")
        if self.storage_dtype not in ("f32", "f16"):
            raise ValueError(f"unknown storage dtype {self.storage_dtype!r}")
        if self.rank_k != ratio_to_rank(self.ratio_k, self.d_kv):
            raise ValueError(f"rank_k {self.rank_k} inconsistent with ratio {self.ratio_k}")
        if self.rank_v != ratio_to_rank(self.ratio_v, self.d_kv):
            raise ValueError(f"rank_v {self.rank_v} inconsistent with ratio {self.ratio_v}")

    @classmethod
    def build(cls, ratio_k: float, ratio_v: float, d_kv: int,
              window_size: int = 32, quant=None,
              storage_dtype: str = "f32") -> "CompressionPlan":
        return cls(ratio_k, ratio_v,
                   ratio_to_rank(ratio_k, d_kv), ratio_to_rank(ratio_v, d_kv),
                   d_kv, window_size, quant, storage_dtype)


@dataclass
class FactorSet:
    """Per-layer key/value factors for a model; serializes to a container."""

    key: list[LowRankFactors] = field(default_factory=list)
    value: list[LowRankFactors] = field(default_factory=list)

    @property
    def n_layers(self) -> int:
        return len(self.key)

    def get(self, layer: int, target: str) -> LowRankFactors:
        return (self.key if target == "key" else self.value)[layer]

    def to_tensors(self) -> dict[str, Matrix]:
        out: dict[str, Matrix] = {}
        for i, (fk, fv) in enumerate(zip(self.key, self.value)):
            out[tensorio.layer_name(i, "ak")] = fk.A
            out[tensorio.layer_name(i, "bk")] = fk.B
            out[tensorio.layer_name(i, "av")] = fv.A
            out[tensorio.layer_name(i, "bv")] = fv.B
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, Matrix]) -> "FactorSet":
        fs = cls()
        i = 0
        while tensorio.layer_name(i, "ak") in tensors:
            fs.key.append(LowRankFactors(tensors[tensorio.layer_name(i, "ak")],
                                         tensors[tensorio.layer_name(i, "bk")],
                                         "key", i))
            fs.value.append(LowRankFactors(tensors[tensorio.layer_name(i, "av")],
                                           tensors[tensorio.layer_name(i, "bv")],
                                           "value", i))
            i += 1
        if not fs.key:
            raise ValueError("no factor tensors found (expected layers.0.ak etc.)")
        return fs

    def save(self, path) -> None:
        tensorio.write_container(self.to_tensors(), path)

    @classmethod
    def load(cls, path) -> "FactorSet":
        return cls.from_tensors(tensorio.read_container(path))
