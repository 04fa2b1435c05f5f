"""Synthetic retrieval tasks, fidelity metrics, and the ablation sweep driver.

Desk-scale models carry random weights, so benchmark accuracy is
meaningless on them; the gate metrics are fidelity measurements against the
uncompressed engine (per-position logit error, attention-output cosine,
reconstruction residuals) plus exact byte accounting. Retrieval scoring is
still provided for runs against converted pretrained checkpoints.

All functions are deterministic per seed; sweep output is byte-stable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bibranch, transformer
from .bibranch import CacheStats
from .calibrate import capture_activations, CalibConfig, finetune_layer_quant_aware
from .lowrank import CompressionPlan, FactorSet, weighted_lowrank_oracle
from .numerics import Matrix
from .quant import CacheQuant
from .transformer import ForwardTrace, TransformerWeights

# Fixed token ids of the synthetic vocabulary (ids 10..19 are digits 0..9).
T_LINE, T_REG, T_IS, T_SEP, T_QUERY = 1, 2, 3, 4, 5
DIGIT_BASE = 10
SYNTH_VOCAB = 1024
VALUE_DIGITS = 5


@dataclass
class RetrievalTask:
    """One needle-retrieval prompt: numbered lines, one queried at the end."""

    n_lines: int
    key_line: int
    prompt: np.ndarray
    answer: np.ndarray
    seed: int


def _digits(value: int) -> list[int]:
    return [DIGIT_BASE + int(c) for c in str(value)]


def gen_lines_task(n_lines: int, seed: int, vocab_size: int = SYNTH_VOCAB) -> RetrievalTask:
    """Deterministic lines task: ``line <i> REGISTER_CONTENT is <value>``
    rendered as token-id patterns, with one line queried at the end."""
    if n_lines < 1:
        raise ValueError(f"need at least one line, got {n_lines}")
    rng = np.random.default_rng(seed)
    lo, hi = 10 ** (VALUE_DIGITS - 1), 10 ** VALUE_DIGITS
    values = rng.choice(np.arange(lo, hi), size=n_lines, replace=False)
    key_line = int(rng.integers(n_lines))

    prompt: list[int] = []
    for i, value in enumerate(values):
        prompt += [T_LINE] + _digits(i + 1) + [T_REG, T_IS] + _digits(int(value)) + [T_SEP]
    prompt += [T_QUERY] + _digits(key_line + 1) + [T_REG, T_IS]

    task = RetrievalTask(n_lines, key_line, np.array(prompt, dtype=np.int64),
                         np.array(_digits(int(values[key_line])), dtype=np.int64), seed)
    if _count_span(task.prompt, task.answer) != 1:
        raise AssertionError("answer span must occur exactly once in the prompt")
    if np.any(task.prompt >= vocab_size):
        raise ValueError(f"task tokens exceed vocab size {vocab_size}")
    return task


def _count_span(haystack: np.ndarray, needle: np.ndarray) -> int:
    n, k = haystack.size, needle.size
    if k == 0 or k > n:
        return 0
    windows = np.lib.stride_tricks.sliding_window_view(haystack, k)
    return int(np.sum(np.all(windows == needle, axis=1)))


def score_retrieval(transcript: np.ndarray, task: RetrievalTask) -> str:
    """'exact' when the full answer span appears; 'partial' when a proper
    prefix or suffix covering at least half of it does; else 'miss'."""
    transcript = np.asarray(transcript, dtype=np.int64).reshape(-1)
    if _count_span(transcript, task.answer) > 0:
        return "exact"
    full = task.answer.size
    for k in range(full - 1, 0, -1):
        if 2 * k < full:
            break
        if _count_span(transcript, task.answer[:k]) > 0 or \
           _count_span(transcript, task.answer[full - k:]) > 0:
            return "partial"
    return "miss"


# ---------------------------------------------------------------------------
# fidelity
# ---------------------------------------------------------------------------

@dataclass
class RunTrace:
    """Per-position logits and attention outputs of one teacher-forced run."""

    logits: Matrix
    attn_outputs: list[Matrix]
    recon_residuals: list[tuple[float, float]] | None = None


@dataclass
class FidelityReport:
    logit_err: np.ndarray
    cosine: np.ndarray
    recon_residuals: list[tuple[float, float]]

    @property
    def mean_logit_err(self) -> float:
        return float(np.mean(self.logit_err))

    @property
    def mean_cosine(self) -> float:
        return float(np.mean(self.cosine))


def trace_run(weights: TransformerWeights, tokens, prefill_len: int,
              factors: FactorSet | None = None,
              plan: CompressionPlan | None = None) -> RunTrace:
    """Run ``tokens`` through the engine (baseline when no factors are given,
    bi-branch otherwise): prefill the first ``prefill_len``, then force-feed
    the rest one token at a time, recording logits at every position."""
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if not 1 <= prefill_len <= tokens.size:
        raise ValueError(f"prefill_len {prefill_len} outside [1, {tokens.size}]")
    cfg = weights.config
    trace = ForwardTrace(cfg.n_layers)
    compressed = factors is not None
    if compressed:
        logits, cache = bibranch.prefill(weights, factors, plan, tokens[:prefill_len],
                                         trace=trace)
    else:
        logits, cache = transformer.prefill_baseline(weights, tokens[:prefill_len],
                                                     trace=trace)
    rows = [logits]
    for token in tokens[prefill_len:]:
        if compressed:
            row, cache = bibranch.decode_step(weights, factors, plan, cache,
                                              int(token), trace=trace)
        else:
            row, cache = transformer.decode_step_baseline(weights, cache, int(token),
                                                          trace=trace)
        rows.append(row.reshape(1, -1))

    residuals = None
    if compressed:
        residuals = []
        hist = cache.n - cache.window_len
        recon = bibranch.reconstruct_history(cache, factors, hist)
        for li in range(cfg.n_layers):
            k_true = trace.key(li)[:hist]
            v_true = trace.value(li)[:hist]
            k_hat, v_hat = recon[li]
            residuals.append((float(np.linalg.norm(k_hat - k_true)),
                              float(np.linalg.norm(v_hat - v_true))))
    return RunTrace(np.vstack(rows),
                    [trace.attn_output(li) for li in range(cfg.n_layers)],
                    residuals)


def output_fidelity(baseline_run: RunTrace, compressed_run: RunTrace) -> FidelityReport:
    """Per-position metrics between two runs over the same token sequence."""
    if baseline_run.logits.shape != compressed_run.logits.shape:
        raise ValueError("runs cover different shapes; compare equal-length runs")
    diff = np.linalg.norm(compressed_run.logits - baseline_run.logits, axis=1)
    ref = np.linalg.norm(baseline_run.logits, axis=1)
    logit_err = diff / np.maximum(ref, 1e-30)

    base = np.hstack(baseline_run.attn_outputs)
    comp = np.hstack(compressed_run.attn_outputs)
    num = np.sum(base * comp, axis=1)
    den = np.linalg.norm(base, axis=1) * np.linalg.norm(comp, axis=1)
    cosine = np.where(den > 0, num / np.maximum(den, 1e-30), 1.0)
    residuals = compressed_run.recon_residuals or []
    return FidelityReport(logit_err, np.clip(cosine, -1.0, 1.0), residuals)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

@dataclass
class SweepCell:
    ratio_k: float
    ratio_v: float
    window: int
    quant_mode: str
    seed: int
    report: FidelityReport | None = None
    stats: CacheStats | None = None
    score: str | None = None
    error: str | None = None


@dataclass
class SweepResult:
    cells: list[SweepCell] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.error is None for c in self.cells)


def _quant_for(mode: str) -> CacheQuant | None:
    return None if mode == "none" else CacheQuant(mode)


def default_calib_streams(seed: int, n_lines: int = 6,
                          vocab_size: int = SYNTH_VOCAB) -> list[np.ndarray]:
    """Two task-shaped streams plus one broad-coverage random stream.

    The random stream keeps the stacked activations well-conditioned even
    when the task template reuses a narrow token set. ``vocab_size`` caps
    the ids so streams fit the target model.
    """
    streams = [gen_lines_task(n_lines, seed + i).prompt for i in range(2)]
    rng = np.random.default_rng(seed)
    streams.append(rng.integers(0, vocab_size, size=160))
    return streams


def build_factors(weights: TransformerWeights, plan: CompressionPlan,
                  calib_streams, qat_steps: int = 30, seed: int = 0) -> FactorSet:
    """Oracle-calibrated factors for a plan (QAT-refined under qat4)."""
    acts = capture_activations(weights, calib_streams, range(weights.config.n_layers))
    fs = FactorSet()
    qat = plan.quant is not None and plan.quant.mode == "qat4"
    for batch, lw in zip(acts, weights.layers):
        fk = weighted_lowrank_oracle(batch.X, lw.wk, plan.rank_k, "key", batch.layer)
        fv = weighted_lowrank_oracle(batch.X, lw.wv, plan.rank_v, "value", batch.layer)
        if qat:
            cfg = CalibConfig(steps=qat_steps, learning_rate=1e-3, seed=seed + batch.layer)
            fk, _ = finetune_layer_quant_aware(batch.X, lw.wk, fk, plan.quant.key_spec, cfg)
            fv, _ = finetune_layer_quant_aware(batch.X, lw.wv, fv, plan.quant.value_spec, cfg)
        fs.key.append(fk)
        fs.value.append(fv)
    return fs


def evaluate_cell(weights: TransformerWeights, plan: CompressionPlan,
                  factors: FactorSet, seed: int, n_lines: int = 6,
                  max_new: int = 8, element_bytes: int = 2) -> tuple[FidelityReport, CacheStats, str]:
    """Fidelity + accounting + retrieval score of one configuration."""
    task = gen_lines_task(n_lines, seed)
    continuation = transformer.greedy_generate(weights, task.prompt, max_new)
    sequence = np.concatenate([task.prompt, continuation])
    base_run = trace_run(weights, sequence, task.prompt.size)
    comp_run = trace_run(weights, sequence, task.prompt.size, factors, plan)
    report = output_fidelity(base_run, comp_run)

    transcript = bibranch.greedy_generate(weights, factors, plan, task.prompt, max_new)
    stats = memory_for(plan, sequence.size, element_bytes)
    return report, stats, score_retrieval(transcript, task)


def memory_for(plan: CompressionPlan, n: int, element_bytes: int = 2) -> CacheStats:
    return bibranch.memory_bytes(n, plan.window_size, plan.d_kv, plan.rank_k,
                                 plan.rank_v, element_bytes, plan.quant)


def run_sweep(weights: TransformerWeights, ratio_pairs, windows, quant_modes, seeds,
              n_lines: int = 6, max_new: int = 8, calib_seed: int = 9001,
              qat_steps: int = 30, element_bytes: int = 2) -> SweepResult:
    """Cartesian sweep over (ratio pair, window, quant mode, seed) cells.

    Per-cell failures are recorded in the cell, never aborting the sweep.
    Factors are calibrated once per (ratio pair, quant family) on fixed
    streams (task-shaped plus broad-coverage) shared across windows/seeds.
    """
    calib_streams = default_calib_streams(calib_seed, n_lines,
                                          weights.config.vocab_size)
    factor_cache: dict = {}
    result = SweepResult()
    for ratio_k, ratio_v in ratio_pairs:
        for window in windows:
            for qmode in quant_modes:
                for seed in seeds:
                    cell = SweepCell(ratio_k, ratio_v, int(window), qmode, int(seed))
                    try:
                        plan = CompressionPlan.build(ratio_k, ratio_v,
                                                     weights.config.d_kv,
                                                     int(window), _quant_for(qmode))
                        fkey = (ratio_k, ratio_v, "qat4" if qmode == "qat4" else "plain")
                        if fkey not in factor_cache:
                            factor_cache[fkey] = build_factors(
                                weights, plan, calib_streams, qat_steps, calib_seed)
                        cell.report, cell.stats, cell.score = evaluate_cell(
                            weights, plan, factor_cache[fkey], int(seed),
                            n_lines, max_new, element_bytes)
                    except Exception as exc:  # isolate the failing cell
                        cell.error = f"{type(exc).__name__}: {exc}"
                    result.cells.append(cell)
    return result


# ---------------------------------------------------------------------------
# emission
# ---------------------------------------------------------------------------

CSV_COLUMNS = ("ratio_k", "ratio_v", "window", "quant_mode", "seed",
               "mean_logit_err", "cosine", "bytes_total", "achieved_ratio",
               "exact_rate")

_SCORE_RATE = {"exact": 1.0, "partial": 0.5, "miss": 0.0}


def _fmt(x: float) -> str:
    return format(float(x), ".10g")


def emit_csv(result: SweepResult, path) -> None:
    lines = [",".join(CSV_COLUMNS)]
    for c in result.cells:
        if c.error is None:
            metrics = [_fmt(c.report.mean_logit_err), _fmt(c.report.mean_cosine),
                       str(c.stats.bytes_total), _fmt(c.stats.achieved_ratio),
                       _fmt(_SCORE_RATE[c.score])]
        else:
            metrics = ["nan"] * 5
        lines.append(",".join([_fmt(c.ratio_k), _fmt(c.ratio_v), str(c.window),
                               c.quant_mode, str(c.seed)] + metrics))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def emit_plot_data(result: SweepResult, path) -> None:
    """Window-axis series of mean logit error, one per (ratios, quant mode)."""
    series: dict[tuple, dict] = {}
    for c in result.cells:
        if c.error is not None:
            continue
        key = (c.ratio_k, c.ratio_v, c.quant_mode)
        entry = series.setdefault(key, {})
        entry.setdefault(c.window, []).append(c.report.mean_logit_err)
    body = []
    for (rk, rv, qm), per_window in sorted(series.items()):
        xs = sorted(per_window)
        body.append({
            "name": f"ratio_k={_fmt(rk)} ratio_v={_fmt(rv)} quant={qm}",
            "x": xs,
            "y": [float(np.mean(per_window[w])) for w in xs],
        })
    Path(path).write_text(json.dumps({"series": body}, indent=2) + "\n",
                          encoding="utf-8")
