"""Activation capture and layer-wise reconstruction fine-tuning.

Each layer's factors are trained independently against the frozen model:
minimize the mean squared error between the true projection X @ W and the
factorized X @ A @ B, where X is that layer's post-norm hidden states
captured from a baseline forward pass over calibration streams.

Two optimizers are offered. ``gradient`` runs Adam (decoupled weight decay
zero) on the analytic gradients of the MSE; ``als`` alternates exact
least-squares solves for B given A and A given B, which is monotone and
lands at the bilinear problem's fixed point, doubling as the convergence
oracle for the gradient path. The quantization-aware variant computes the
loss through a fake-quantized latent with a straight-through gradient.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lowrank import CompressionPlan, FactorSet, LowRankFactors, compute_asvd_scaling, \
    init_asvd, init_random, init_svd, weighted_lowrank_oracle
from .numerics import Matrix, NumericError, solve_least_squares
from .quant import QuantSpec, fake_quant_with_mask
from .transformer import ForwardTrace, TransformerWeights, prefill_baseline


@dataclass
class ActivationBatch:
    """Input rows to one layer's K/V projections (same X feeds both)."""

    layer: int
    X: Matrix


@dataclass
class CalibConfig:
    mode: str = "gradient"           # "gradient" or "als"
    steps: int = 100
    learning_rate: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_rows: int | None = None    # rows sampled per gradient step; None = all
    quant_aware: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if self.mode not in ("gradient", "als"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class LayerReport:
    layer: int
    loss_k_before: float
    loss_k_after: float
    loss_v_before: float
    loss_v_after: float
    curve_k: list[float] = field(default_factory=list)
    curve_v: list[float] = field(default_factory=list)


@dataclass
class CalibReport:
    """Per-layer before/after losses; the model loss is their plain sum."""

    layers: list[LayerReport] = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def total_before(self) -> float:
        return float(sum(l.loss_k_before + l.loss_v_before for l in self.layers))

    @property
    def total_after(self) -> float:
        return float(sum(l.loss_k_after + l.loss_v_after for l in self.layers))

    def to_json(self) -> str:
        body = {
            "layers": [{
                "layer": l.layer,
                "loss_k_before": l.loss_k_before,
                "loss_k_after": l.loss_k_after,
                "loss_v_before": l.loss_v_before,
                "loss_v_after": l.loss_v_after,
                "curve_k": l.curve_k,
                "curve_v": l.curve_v,
            } for l in self.layers],
            "total_before": self.total_before,
            "total_after": self.total_after,
            "wall_time": self.wall_time,
        }
        return json.dumps(body, indent=2)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


def total_loss(report: CalibReport) -> float:
    """Sum of key and value losses over all layers (current factors)."""
    return report.total_after


def load_token_streams(path) -> list[np.ndarray]:
    """Calibration streams: one line per stream, space-separated token ids."""
    streams = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line:
            streams.append(np.array([int(t) for t in line.split()], dtype=np.int64))
    if not streams:
        raise ValueError(f"no token streams found in {path}")
    return streams


def capture_activations(weights: TransformerWeights, token_streams,
                        layer_indices) -> list[ActivationBatch]:
    """Record the K/V projection inputs of the requested layers.

    Runs a baseline forward pass over every stream and stacks the post-norm
    hidden states; row count equals the total token count.
    """
    streams = [np.asarray(s, dtype=np.int64).reshape(-1) for s in token_streams]
    if not streams or any(s.size == 0 for s in streams):
        raise ValueError("calibration streams must be non-empty")
    layer_indices = list(layer_indices)
    traces = []
    for stream in streams:
        trace = ForwardTrace(weights.config.n_layers)
        prefill_baseline(weights, stream, trace=trace)
        traces.append(trace)
    return [ActivationBatch(li, np.vstack([t.kv_input(li) for t in traces]))
            for li in layer_indices]


def layer_loss(X: Matrix, W: Matrix, factors: LowRankFactors) -> float:
    """Mean over all elements of (X W - X A B)^2."""
    err = X @ (W - factors.A @ factors.B)
    return float(np.mean(np.square(err)))


def _quant_latent_loss(X: Matrix, W: Matrix, a: Matrix, b: Matrix,
                       spec: QuantSpec) -> float:
    zq, _ = fake_quant_with_mask(X @ a, spec)
    return float(np.mean(np.square(zq @ b - X @ W)))


class _Adam:
    def __init__(self, shape, cfg: CalibConfig):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0
        self.cfg = cfg

    def step(self, param, grad):
        c = self.cfg
        self.t += 1
        # Divergent runs overflow here on purpose; the caller detects the
        # non-finite loss and reports the failing step.
        with np.errstate(over="ignore", invalid="ignore"):
            self.m = c.beta1 * self.m + (1 - c.beta1) * grad
            self.v = c.beta2 * self.v + (1 - c.beta2) * np.square(grad)
            mhat = self.m / (1 - c.beta1 ** self.t)
            vhat = self.v / (1 - c.beta2 ** self.t)
            return param - c.learning_rate * mhat / (np.sqrt(vhat) + c.adam_eps)


def _finetune_gradient(X: Matrix, W: Matrix, factors: LowRankFactors,
                       cfg: CalibConfig, quant: QuantSpec | None) -> tuple[LowRankFactors, list[float]]:
    a, b = factors.A.copy(), factors.B.copy()
    rng = np.random.default_rng(cfg.seed)
    opt_a, opt_b = _Adam(a.shape, cfg), _Adam(b.shape, cfg)

    def full_loss(a_, b_):
        if quant is None:
            return float(np.mean(np.square(X @ a_ @ b_ - X @ W)))
        return _quant_latent_loss(X, W, a_, b_, quant)

    curve = [full_loss(a, b)]
    best = (curve[0], a.copy(), b.copy())
    for step in range(cfg.steps):
        if cfg.batch_rows is not None and cfg.batch_rows < X.shape[0]:
            idx = rng.choice(X.shape[0], size=cfg.batch_rows, replace=False)
            xb = X[idx]
        else:
            xb = X
        y = xb @ W
        z = xb @ a
        n_elem = y.size
        if quant is None:
            err = z @ b - y
            grad_b = (2.0 / n_elem) * z.T @ err
            grad_z = (2.0 / n_elem) * err @ b.T
        else:
            zq, mask = fake_quant_with_mask(z, quant)
            err = zq @ b - y
            grad_b = (2.0 / n_elem) * zq.T @ err
            grad_z = ((2.0 / n_elem) * err @ b.T) * mask  # straight-through
        grad_a = xb.T @ grad_z
        a = opt_a.step(a, grad_a)
        b = opt_b.step(b, grad_b)

        loss = full_loss(a, b)
        if not np.isfinite(loss):
            raise NumericError(f"loss diverged (NaN/Inf) at step {step + 1}")
        curve.append(loss)
        if loss < best[0]:
            best = (loss, a.copy(), b.copy())
    out = LowRankFactors(best[1], best[2], factors.target, factors.layer)
    return out, curve


def _finetune_als(X: Matrix, W: Matrix, factors: LowRankFactors,
                  cfg: CalibConfig) -> tuple[LowRankFactors, list[float]]:
    a, b = factors.A.copy(), factors.B.copy()
    y = X @ W
    c1 = solve_least_squares(X, y)  # X-pseudoinverse applied to Y; fixed

    def loss(a_, b_):
        return float(np.mean(np.square(X @ a_ @ b_ - y)))

    curve = [loss(a, b)]
    best = (curve[0], a.copy(), b.copy())
    for step in range(cfg.steps):
        b = solve_least_squares(X @ a, y)
        a = solve_least_squares(b.T, c1.T).T
        val = loss(a, b)
        if not np.isfinite(val):
            raise NumericError(f"loss diverged (NaN/Inf) at step {step + 1}")
        curve.append(val)
        if val < best[0]:
            best = (val, a.copy(), b.copy())
    out = LowRankFactors(best[1], best[2], factors.target, factors.layer)
    return out, curve


def finetune_layer(X: Matrix, W: Matrix, factors: LowRankFactors,
                   cfg: CalibConfig) -> tuple[LowRankFactors, list[float]]:
    """Fine-tune one layer's factors; returns the best-seen factors and the
    full-data loss curve (entry 0 is the initial loss)."""
    if cfg.mode == "als":
        return _finetune_als(X, W, factors, cfg)
    return _finetune_gradient(X, W, factors, cfg, None)


def finetune_layer_quant_aware(X: Matrix, W: Matrix, factors: LowRankFactors,
                               quant: QuantSpec, cfg: CalibConfig) -> tuple[LowRankFactors, list[float]]:
    """Gradient fine-tune with the latent fake-quantized inside the loss.

    Quantizer scales are recomputed from each step's batch; the gradient
    passes straight through the quantizer inside its clip range. Best-seen
    factors are returned, so the result never scores worse on the quantized
    objective than its starting point.
    """
    return _finetune_gradient(X, W, factors, cfg, quant)


def init_factors(W: Matrix, X: Matrix, rank: int, method: str, alpha: float = 0.5,
                 target: str = "key", layer: int = 0, seed: int = 0) -> LowRankFactors:
    """Build initial factors by name: random | svd | asvd | oracle."""
    if method == "random":
        return init_random(seed, W.shape[0], W.shape[1], rank, target, layer)
    if method == "svd":
        return init_svd(W, rank, target, layer)
    if method == "asvd":
        return init_asvd(W, compute_asvd_scaling(X, alpha), rank, target, layer)
    if method == "oracle":
        return weighted_lowrank_oracle(X, W, rank, target, layer)
    raise ValueError(f"unknown init method {method!r}")


def finetune_model(weights: TransformerWeights, activations, plan: CompressionPlan,
                   cfg: CalibConfig, init: str = "asvd", alpha: float = 0.5,
                   initial: FactorSet | None = None) -> tuple[FactorSet, CalibReport]:
    """Fine-tune every layer's key and value factors independently.

    Layers are decoupled: each gets its own derived seed, so processing
    order cannot change results. When the plan carries a ``qat4`` quant
    mode, each layer is first fine-tuned plain and then refined with the
    quantization-aware loss starting from the plain solution.
    """
    start = time.perf_counter()
    acts = {a.layer: a.X for a in activations}
    factors = FactorSet()
    report = CalibReport()
    qat = plan.quant is not None and getattr(plan.quant, "mode", None) == "qat4"

    for li, lw in enumerate(weights.layers):
        if li not in acts:
            raise ValueError(f"no activations captured for layer {li}")
        X = acts[li]
        entry = {}
        for target, W in (("key", lw.wk), ("value", lw.wv)):
            rank = plan.rank_k if target == "key" else plan.rank_v
            seed = cfg.seed + 2 * li + (0 if target == "key" else 1)
            if initial is not None:
                f0 = initial.get(li, target)
            else:
                f0 = init_factors(W, X, rank, init, alpha, target, li, seed)
            layer_cfg = CalibConfig(cfg.mode, cfg.steps, cfg.learning_rate,
                                    cfg.beta1, cfg.beta2, cfg.adam_eps,
                                    cfg.batch_rows, cfg.quant_aware, seed)
            f1, curve = finetune_layer(X, W, f0, layer_cfg)
            if qat:
                spec = plan.quant.key_spec if target == "key" else plan.quant.value_spec
                f1, qat_curve = finetune_layer_quant_aware(X, W, f1, spec, layer_cfg)
                curve = curve + qat_curve[1:]
            entry[target] = (f1, curve)
        fk, curve_k = entry["key"]
        fv, curve_v = entry["value"]
        factors.key.append(fk)
        factors.value.append(fv)
        report.layers.append(LayerReport(
            layer=li,
            loss_k_before=curve_k[0], loss_k_after=layer_loss(X, lw.wk, fk),
            loss_v_before=curve_v[0], loss_v_after=layer_loss(X, lw.wv, fv),
            curve_k=curve_k, curve_v=curve_v,
        ))
    report.wall_time = time.perf_counter() - start
    return factors, report
