"""Command-line entry point.

Subcommands:
  calibrate  build + fine-tune factors, write a factor container and report
  generate   greedy generation with a chosen cache (token ids on stdout)
  eval       single-configuration fidelity evaluation to CSV
  sweep      grid evaluation over ratios / windows / quant modes / seeds
  report     render a CSV produced by eval/sweep as a table

The engine speaks token ids only; prompts are space-separated id lists.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import baselines, bench, bibranch, calibrate, tensorio, transformer
from .lowrank import CompressionPlan, FactorSet
from .quant import CacheQuant

USAGE_ERROR = 2


def _ratio(text: str) -> float:
    try:
        value = float(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from exc
    if not 0.0 <= value < 1.0:
        raise argparse.ArgumentTypeError(f"compression ratio must be in [0, 1), got {value}")
    return value


def _ratio_list(text: str) -> list[float]:
    return [_ratio(part) for part in text.split(",")]


def _int_list(text: str) -> list[int]:
    return [int(part) for part in text.split(",")]


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise argparse.ArgumentTypeError(f"file not found: {path}")
    return p


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", type=_existing, required=True,
                   help="weight container path")
    p.add_argument("--config", type=_existing, required=True,
                   help="model config JSON path")


def _load_model(args) -> transformer.TransformerWeights:
    cfg = tensorio.load_config(args.config)
    tensors = tensorio.read_container(args.model)
    return transformer.TransformerWeights.from_tensors(cfg, tensors)


def _quant_mode(mode: str):
    return None if mode == "none" else CacheQuant(mode)


def _parse_prompt(args) -> np.ndarray:
    if args.prompt is not None:
        ids = [int(t) for t in args.prompt.split()]
    else:
        ids = [int(t) for t in Path(args.prompt_file).read_text().split()]
    return np.array(ids, dtype=np.int64)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cskv",
        description="Channel-shrinking KV cache engine and calibration toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="initialize and fine-tune low-rank factors")
    _add_model_args(p)
    p.add_argument("--streams", type=_existing, default=None,
                   help="calibration token streams (line-delimited ids); "
                        "synthetic streams are generated when omitted")
    p.add_argument("--ratio-k", type=_ratio, default=0.5, help="key compression ratio (default 0.5)")
    p.add_argument("--ratio-v", type=_ratio, default=0.5, help="value compression ratio (default 0.5)")
    p.add_argument("--window", type=int, default=32, help="recency window size (default 32)")
    p.add_argument("--quant", choices=["none", "ptq4", "qat4"], default="none",
                   help="cache quantization mode (default none)")
    p.add_argument("--init", choices=["random", "svd", "asvd"], default="asvd",
                   help="factor initialization (default asvd)")
    p.add_argument("--alpha", type=float, default=0.5,
                   help="activation-scaling exponent for asvd init (default 0.5)")
    p.add_argument("--steps", type=int, default=100,
                   help="fine-tuning steps per layer; 0 records init loss only (default 100)")
    p.add_argument("--lr", type=float, default=5e-5, help="learning rate (default 5e-5)")
    p.add_argument("--mode", choices=["gradient", "als"], default="gradient",
                   help="fine-tuning mode (default gradient)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--factors", required=True, help="output factor container path")
    p.add_argument("--out", default=None, help="calibration report JSON path")

    p = sub.add_parser("generate", help="greedy generation; transcript token ids to stdout")
    _add_model_args(p)
    p.add_argument("--cache", choices=["baseline", "cskv", "streaming", "h2o"],
                   default="baseline", help="cache implementation (default baseline)")
    p.add_argument("--factors", default=None, help="factor container (required for cskv)")
    p.add_argument("--ratio-k", type=_ratio, default=0.5, help="key compression ratio (default 0.5)")
    p.add_argument("--ratio-v", type=_ratio, default=0.5, help="value compression ratio (default 0.5)")
    p.add_argument("--window", type=int, default=32,
                   help="cskv recency window / streaming window (default 32)")
    p.add_argument("--quant", choices=["none", "ptq4", "qat4"], default="none",
                   help="cache quantization mode (default none)")
    p.add_argument("--sinks", type=int, default=4, help="streaming sink tokens (default 4)")
    p.add_argument("--budget", type=int, default=64, help="h2o kept-token budget (default 64)")
    p.add_argument("--prompt", default=None, help="prompt as space-separated token ids")
    p.add_argument("--prompt-file", default=None, help="file holding prompt token ids")
    p.add_argument("--max-new", type=int, default=16, help="tokens to generate (default 16)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")

    p = sub.add_parser("eval", help="fidelity evaluation of one configuration")
    _add_model_args(p)
    p.add_argument("--factors", default=None,
                   help="factor container; oracle-calibrated factors are built when omitted")
    p.add_argument("--ratio-k", type=_ratio, default=0.5, help="key compression ratio (default 0.5)")
    p.add_argument("--ratio-v", type=_ratio, default=0.5, help="value compression ratio (default 0.5)")
    p.add_argument("--window", type=int, default=32, help="recency window size (default 32)")
    p.add_argument("--quant", choices=["none", "ptq4", "qat4"], default="none",
                   help="cache quantization mode (default none)")
    p.add_argument("--lines", type=int, default=6, help="retrieval task lines (default 6)")
    p.add_argument("--max-new", type=int, default=8, help="decode steps to compare (default 8)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--out", required=True, help="output CSV path")

    p = sub.add_parser("sweep", help="grid evaluation; CSV plus optional plot data")
    _add_model_args(p)
    p.add_argument("--ratio-k", type=_ratio_list, default=[0.5],
                   help="comma list of key ratios, zipped with --ratio-v (default 0.5)")
    p.add_argument("--ratio-v", type=_ratio_list, default=[0.5],
                   help="comma list of value ratios (default 0.5)")
    p.add_argument("--windows", type=_int_list, default=[32],
                   help="comma list of window sizes (default 32)")
    p.add_argument("--quant", default="none",
                   help="comma list of quant modes from none,ptq4,qat4 (default none)")
    p.add_argument("--seeds", type=_int_list, default=[0],
                   help="comma list of evaluation seeds (default 0)")
    p.add_argument("--lines", type=int, default=6, help="retrieval task lines (default 6)")
    p.add_argument("--max-new", type=int, default=8, help="decode steps to compare (default 8)")
    p.add_argument("--seed", type=int, default=9001, help="calibration seed (default 9001)")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--plot-out", default=None, help="optional plot-data JSON path")

    p = sub.add_parser("report", help="summarize an eval/sweep CSV")
    p.add_argument("--in", dest="input", type=_existing, required=True, help="CSV path")
    return parser


def _synthetic_streams(seed: int, vocab_size: int) -> list[np.ndarray]:
    return bench.default_calib_streams(seed, vocab_size=vocab_size)


def cmd_calibrate(args) -> int:
    weights = _load_model(args)
    if args.streams is not None:
        streams = calibrate.load_token_streams(args.streams)
    else:
        streams = _synthetic_streams(args.seed, weights.config.vocab_size)
    plan = CompressionPlan.build(args.ratio_k, args.ratio_v, weights.config.d_kv,
                                 args.window, _quant_mode(args.quant))
    acts = calibrate.capture_activations(weights, streams, range(weights.config.n_layers))
    cfg = calibrate.CalibConfig(mode=args.mode, steps=args.steps,
                                learning_rate=args.lr, seed=args.seed)
    factors, report = calibrate.finetune_model(weights, acts, plan, cfg,
                                               init=args.init, alpha=args.alpha)
    factors.save(args.factors)
    if args.out:
        report.save(args.out)
    print(f"calibrated {weights.config.n_layers} layers: "
          f"loss {report.total_before:.6g} -> {report.total_after:.6g} "
          f"({report.wall_time:.2f}s); factors written to {args.factors}")
    return 0


def cmd_generate(args) -> int:
    if args.prompt is None and args.prompt_file is None:
        print("error: provide --prompt or --prompt-file", file=sys.stderr)
        return USAGE_ERROR
    if args.cache == "cskv":
        if args.factors is None or not Path(args.factors).exists():
            print("error: --cache cskv requires an existing --factors file",
                  file=sys.stderr)
            return USAGE_ERROR
    weights = _load_model(args)
    prompt = _parse_prompt(args)

    if args.cache == "baseline":
        out = transformer.greedy_generate(weights, prompt, args.max_new)
    elif args.cache == "cskv":
        factors = FactorSet.load(args.factors)
        plan = CompressionPlan.build(args.ratio_k, args.ratio_v, weights.config.d_kv,
                                     args.window, _quant_mode(args.quant))
        out = bibranch.greedy_generate(weights, factors, plan, prompt, args.max_new)
    elif args.cache == "streaming":
        policy = baselines.StreamingPolicy(args.sinks, args.window)
        out = baselines.decode_with_pruned_cache(weights, policy, prompt, args.max_new)
    else:
        policy = baselines.H2OPolicy(args.budget)
        out = baselines.decode_with_pruned_cache(weights, policy, prompt, args.max_new)
    print(" ".join(str(t) for t in out))
    return 0


def _eval_factors(args, weights, plan) -> FactorSet:
    if args.factors is not None:
        return FactorSet.load(args.factors)
    streams = _synthetic_streams(args.seed + 7919, weights.config.vocab_size)
    return bench.build_factors(weights, plan, streams, seed=args.seed)


def cmd_eval(args) -> int:
    weights = _load_model(args)
    plan = CompressionPlan.build(args.ratio_k, args.ratio_v, weights.config.d_kv,
                                 args.window, _quant_mode(args.quant))
    factors = _eval_factors(args, weights, plan)
    report, stats, score = bench.evaluate_cell(weights, plan, factors, args.seed,
                                               args.lines, args.max_new)
    cell = bench.SweepCell(args.ratio_k, args.ratio_v, args.window, args.quant,
                           args.seed, report, stats, score)
    bench.emit_csv(bench.SweepResult([cell]), args.out)
    print(f"mean logit err {report.mean_logit_err:.3e}, cosine {report.mean_cosine:.6f}, "
          f"bytes {stats.bytes_total}, achieved ratio {stats.achieved_ratio:.4f}, "
          f"retrieval {score}; wrote {args.out}")
    return 0


def cmd_sweep(args) -> int:
    weights = _load_model(args)
    ratio_k, ratio_v = args.ratio_k, args.ratio_v
    if len(ratio_k) == 1 and len(ratio_v) > 1:
        ratio_k = ratio_k * len(ratio_v)
    if len(ratio_v) == 1 and len(ratio_k) > 1:
        ratio_v = ratio_v * len(ratio_k)
    if len(ratio_k) != len(ratio_v):
        print("error: --ratio-k and --ratio-v lists must zip", file=sys.stderr)
        return USAGE_ERROR
    modes = args.quant.split(",")
    for mode in modes:
        if mode not in ("none", "ptq4", "qat4"):
            print(f"error: unknown quant mode {mode!r}", file=sys.stderr)
            return USAGE_ERROR

    result = bench.run_sweep(weights, list(zip(ratio_k, ratio_v)), args.windows,
                             modes, args.seeds, n_lines=args.lines,
                             max_new=args.max_new, calib_seed=args.seed)
    bench.emit_csv(result, args.out)
    if args.plot_out:
        bench.emit_plot_data(result, args.plot_out)
    failures = [c for c in result.cells if c.error is not None]
    print(f"{len(result.cells)} cells -> {args.out}"
          + (f" ({len(failures)} failed)" if failures else ""))
    for c in failures:
        print(f"  cell (rk={c.ratio_k}, rv={c.ratio_v}, w={c.window}, "
              f"q={c.quant_mode}, seed={c.seed}): {c.error}", file=sys.stderr)
    return 1 if failures else 0


def cmd_report(args) -> int:
    lines = Path(args.input).read_text(encoding="utf-8").strip().splitlines()
    if len(lines) <= 1:
        print("no data")
        return 0
    header = lines[0].split(",")
    rows = [line.split(",") for line in lines[1:]]
    widths = [max(len(header[i]), *(len(r[i]) for r in rows)) for i in range(len(header))]
    print("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    print("  ".join("-" * w for w in widths))
    for r in rows:
        print("  ".join(c.ljust(w) for c, w in zip(r, widths)))
    return 0


_COMMANDS = {
    "calibrate": cmd_calibrate,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
