"""Acceptance gate: one test per criterion, at the stated tolerance and
runtime budget, on randomly initialized models generated by the engine
itself. Each test prints a single pass/fail line (run with -s to stream)."""

import time

import numpy as np

from cskv import bibranch, transformer
from cskv.baselines import H2OCache, H2OPolicy, StreamingCache, StreamingPolicy, \
    h2o_append, h2o_evict, streaming_evict, streaming_kept_positions
from cskv.bench import gen_lines_task, output_fidelity, trace_run
from cskv.calibrate import CalibConfig, capture_activations, finetune_layer, \
    finetune_layer_quant_aware, layer_loss, _quant_latent_loss
from cskv.lowrank import CompressionPlan, compute_asvd_scaling, init_asvd, \
    init_random, init_svd, weighted_lowrank_oracle
from cskv.numerics import thin_svd
from cskv.quant import PER_CHANNEL, CacheQuant, QuantSpec, dequantize, pack_codes, \
    quantize, unpack_codes
from cskv.tensorio import ModelConfig
from cskv.transformer import longtail_matrix, make_random_weights

from conftest import oracle_factor_set, svd_factor_set


class _Gate:
    """Times a criterion and prints its verdict line."""

    def __init__(self, number: int, title: str, limit_s: float):
        self.number, self.title, self.limit = number, title, limit_s

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.t0
        verdict = "PASS" if exc_type is None and elapsed < self.limit else "FAIL"
        print(f"[{verdict}] criterion {self.number:2d} ({elapsed:6.2f}s / "
              f"{self.limit:.0f}s): {self.title}")
        if exc_type is None:
            assert elapsed < self.limit, f"criterion {self.number} overran {self.limit}s"
        return False


def engine_model(seed: int) -> transformer.TransformerWeights:
    cfg = ModelConfig(n_layers=4, n_heads=8, d_head=16, d_model=128, d_kv=128,
                      vocab_size=256, max_position=4096)
    return make_random_weights(cfg, seed=seed)


def small_model(seed: int) -> transformer.TransformerWeights:
    cfg = ModelConfig(n_layers=2, n_heads=4, d_head=16, d_model=64, d_kv=64,
                      vocab_size=256, max_position=4096)
    return make_random_weights(cfg, seed=seed)


def skewed_activations(rng, rows, cols, lo=1e-2, hi=1e2):
    scales = np.exp(rng.uniform(np.log(lo), np.log(hi), size=cols))
    return rng.standard_normal((rows, cols)) * scales


def test_criterion_01_prefill_equivalence():
    with _Gate(1, "bi-branch prefill logits equal baseline (ratios 0.5/0.8, "
                  "20 seeds, 1e-8 rel)", 30):
        for seed in range(20):
            weights = engine_model(seed)
            cfg = weights.config
            rng = np.random.default_rng(seed)
            prompt = rng.integers(0, cfg.vocab_size, size=24)
            base, _ = transformer.prefill_baseline(weights, prompt)
            scale = np.linalg.norm(base)
            for ratio in (0.5, 0.8):
                plan = CompressionPlan.build(ratio, ratio, cfg.d_kv, window_size=4)
                fs = svd_factor_set(weights, plan.rank_k, plan.rank_v)
                logits, _ = bibranch.prefill(weights, fs, plan, prompt)
                assert np.linalg.norm(logits - base) <= 1e-8 * scale


def test_criterion_02_window_dominates():
    with _Gate(2, "window >= sequence length reproduces baseline transcripts "
                  "(64 tokens, 20 seeds)", 30):
        for seed in range(20):
            weights = engine_model(seed + 100)
            cfg = weights.config
            rng = np.random.default_rng(seed)
            prompt = rng.integers(0, cfg.vocab_size, size=8)
            plan = CompressionPlan.build(0.8, 0.8, cfg.d_kv, window_size=4096)
            fs = svd_factor_set(weights, plan.rank_k, plan.rank_v)
            base = transformer.greedy_generate(weights, prompt, 64)
            comp = bibranch.greedy_generate(weights, fs, plan, prompt, 64)
            assert np.array_equal(base, comp)


def test_criterion_03_full_rank_pipeline_exactness():
    with _Gate(3, "full-rank factors reproduce baseline decode logits within "
                  "1e-5 (storage-precision slack)", 30):
        for seed in range(5):
            weights = engine_model(seed + 200)
            cfg = weights.config
            rng = np.random.default_rng(seed)
            prompt = rng.integers(0, cfg.vocab_size, size=24)
            plan = CompressionPlan.build(0.0, 0.0, cfg.d_kv, window_size=4)
            fs = svd_factor_set(weights, cfg.d_kv, cfg.d_kv)
            _, cb = transformer.prefill_baseline(weights, prompt)
            _, cc = bibranch.prefill(weights, fs, plan, prompt)
            for token in rng.integers(0, cfg.vocab_size, size=16):
                lb, cb = transformer.decode_step_baseline(weights, cb, int(token))
                lc, cc = bibranch.decode_step(weights, fs, plan, cc, int(token))
                assert np.linalg.norm(lc - lb) <= 1e-5 * max(1.0, np.linalg.norm(lb))


def test_criterion_04_eckart_young():
    with _Gate(4, "rank truncation error equals tail singular norm (100 random "
                  "64x64, 1e-6 rel); no random competitor wins", 60):
        rng = np.random.default_rng(0)
        for trial in range(100):
            m = rng.standard_normal((64, 64))
            svd = thin_svd(m)
            rank = int(rng.integers(1, 64))
            err = np.linalg.norm(m - svd.truncate(rank).reconstruct())
            tail = np.sqrt(np.sum(svd.S[rank:] ** 2))
            assert abs(err - tail) <= 1e-6 * max(tail, 1e-12)
            for _ in range(20):
                cand = rng.standard_normal((64, rank)) @ rng.standard_normal((rank, 64))
                assert np.linalg.norm(m - cand) >= err


def test_criterion_05_oracle_optimality_and_als_convergence():
    with _Gate(5, "ALS from SVD init reaches within 5% of the closed-form "
                  "weighted optimum (50 instances); ALS monotone", 60):
        for seed in range(50):
            rng = np.random.default_rng(seed)
            X = rng.standard_normal((256, 32))
            W = rng.standard_normal((32, 32))
            oracle = layer_loss(X, W, weighted_lowrank_oracle(X, W, 8))
            _, curve = finetune_layer(X, W, init_svd(W, 8),
                                      CalibConfig(mode="als", steps=50))
            assert curve[-1] <= 1.05 * oracle
            for lo, hi in zip(curve[1:], curve[:-1]):
                assert lo <= hi + 1e-10


def test_criterion_06_gradient_correctness():
    with _Gate(6, "analytic MSE gradients match central differences within "
                  "1e-4 rel (8-dim, 20 seeds)", 30):
        h = 1e-6
        for seed in range(20):
            rng = np.random.default_rng(seed)
            X = rng.standard_normal((12, 8))
            W = rng.standard_normal((8, 8))
            a = rng.standard_normal((8, 3))
            b = rng.standard_normal((3, 8))
            n_elem = (X @ W).size
            err = X @ a @ b - X @ W
            analytic = {"a": (2.0 / n_elem) * X.T @ err @ b.T,
                        "b": (2.0 / n_elem) * (X @ a).T @ err}

            def loss():
                return np.mean((X @ a @ b - X @ W) ** 2)

            for name, mat in (("a", a), ("b", b)):
                numeric = np.zeros_like(mat)
                it = np.nditer(mat, flags=["multi_index"])
                while not it.finished:
                    idx = it.multi_index
                    keep = mat[idx]
                    mat[idx] = keep + h
                    fp = loss()
                    mat[idx] = keep - h
                    fm = loss()
                    mat[idx] = keep
                    numeric[idx] = (fp - fm) / (2 * h)
                    it.iternext()
                rel = np.abs(analytic[name] - numeric) / np.maximum(np.abs(numeric), 1e-8)
                assert rel.max() <= 1e-4


def test_criterion_07_init_ordering_and_asvd_finetune():
    with _Gate(7, "random-init loss >= 10x SVD-init loss (100 layers); "
                  "fine-tune from activation-aware init drops >= 5%", 120):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            W = longtail_matrix(rng, 64, 64, std=0.02)
            X = rng.standard_normal((96, 64))
            loss_rand = layer_loss(X, W, init_random(seed, 64, 64, 12))
            loss_svd = layer_loss(X, W, init_svd(W, 12))
            assert loss_rand >= 10 * loss_svd
        for seed in range(10):
            rng = np.random.default_rng(seed)
            X = skewed_activations(rng, 128, 64)
            W = longtail_matrix(rng, 64, 64, std=0.02)
            f0 = init_asvd(W, compute_asvd_scaling(X, 0.5), 12)
            _, curve = finetune_layer(X, W, f0, CalibConfig(mode="als", steps=30))
            assert curve[-1] <= 0.95 * curve[0]


def test_criterion_08_asvd_beats_svd_on_skewed_activations():
    with _Gate(8, "activation-aware init beats plain SVD on skewed channels "
                  "in >= 70/100 trials", 60):
        wins = 0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            X = skewed_activations(rng, 64, 16)
            W = rng.standard_normal((16, 16))
            la = layer_loss(X, W, init_asvd(W, compute_asvd_scaling(X, 0.5), 4))
            ls = layer_loss(X, W, init_svd(W, 4))
            wins += la <= ls
        print(f"    activation-aware init win rate: {wins}/100")
        assert wins >= 70


def test_criterion_09_combined_ratio_arithmetic():
    with _Gate(9, "channel shrink and 4-bit compose to 87.5% / 95% exactly "
                  "(pre group overhead)", 1):
        from cskv.lowrank import ratio_to_rank
        d = 640
        r50 = ratio_to_rank(0.50, d)
        half = bibranch.memory_bytes(10**6, 32, d, r50, r50, 2, CacheQuant("ptq4"))
        assert half.headline_ratio == 0.875
        r80 = ratio_to_rank(0.80, d)
        four_fifths = bibranch.memory_bytes(10**6, 32, d, r80, r80, 2,
                                            CacheQuant("qat4"))
        assert four_fifths.headline_ratio == 0.95


def test_criterion_10_qat_never_worse_than_ptq():
    with _Gate(10, "quant-aware fine-tuned loss <= PTQ-on-plain loss on all 50 "
                   "seeded layer instances", 120):
        spec = QuantSpec(PER_CHANNEL, group_size=8)
        for seed in range(50):
            rng = np.random.default_rng(seed)
            X = rng.standard_normal((64, 16))
            X[:, :2] *= 10.0
            W = rng.standard_normal((16, 16))
            plain, _ = finetune_layer(X, W, init_svd(W, 5),
                                      CalibConfig(mode="als", steps=25))
            ptq = _quant_latent_loss(X, W, plain.A, plain.B, spec)
            qat, _ = finetune_layer_quant_aware(
                X, W, plain, spec, CalibConfig(steps=40, learning_rate=2e-3, seed=seed))
            assert _quant_latent_loss(X, W, qat.A, qat.B, spec) <= ptq + 1e-12


def test_criterion_11_fidelity_monotone_in_rank_and_window():
    with _Gate(11, "mean logit error non-increasing along rank {4..64} and "
                   "window {2..64} grids (20 seeds, 1e-6 slack)", 300):
        ranks = [4, 8, 16, 32, 64]
        windows = [2, 4, 8, 16, 32, 64]
        rank_err = np.zeros(len(ranks))
        win_err = np.zeros(len(windows))
        n_seeds = 20
        for seed in range(n_seeds):
            weights = small_model(seed + 300)
            cfg = weights.config
            task = gen_lines_task(5, seed)
            continuation = transformer.greedy_generate(weights, task.prompt, 12)
            tokens = np.concatenate([task.prompt, continuation])
            base = trace_run(weights, tokens, task.prompt.size)
            # Broad-coverage calibration stream (well-conditioned activations).
            calib_rng = np.random.default_rng(seed + 5000)
            calib = calib_rng.integers(0, cfg.vocab_size, size=160)
            acts = capture_activations(weights, [calib], range(cfg.n_layers))
            X = [a.X for a in acts]

            for i, rank in enumerate(ranks):
                ratio = 1 - rank / cfg.d_kv
                plan = CompressionPlan(ratio, ratio, rank, rank, cfg.d_kv, 4)
                fs = oracle_factor_set(weights, X, rank, rank)
                run = trace_run(weights, tokens, task.prompt.size, fs, plan)
                rank_err[i] += output_fidelity(base, run).mean_logit_err

            fs80 = oracle_factor_set(weights, X, 12, 12)
            for i, window in enumerate(windows):
                plan = CompressionPlan(0.8125, 0.8125, 12, 12, cfg.d_kv, window)
                run = trace_run(weights, tokens, task.prompt.size, fs80, plan)
                win_err[i] += output_fidelity(base, run).mean_logit_err

        rank_err /= n_seeds
        win_err /= n_seeds
        print(f"    rank grid errors:   {np.array2string(rank_err, precision=3)}")
        print(f"    window grid errors: {np.array2string(win_err, precision=3)}")
        assert np.all(np.diff(rank_err) <= 1e-6)
        assert np.all(np.diff(win_err) <= 1e-6)


def test_criterion_12_quantizer_bound_and_packing():
    with _Gate(12, "round-trip error <= scale/2 + 1e-6 on 1000 random groups; "
                   "nibble packing exhaustive", 10):
        rng = np.random.default_rng(0)
        spec = QuantSpec(PER_CHANNEL, group_size=25)
        m = rng.standard_normal((25, 1000)) * np.exp(rng.uniform(-2, 2, 1000))
        q = quantize(m, spec)
        err = np.abs(dequantize(q) - m)
        bound = q.scales.astype(np.float64).reshape(1, -1) / 2 + 1e-6
        assert np.all(err.T <= bound.T)  # one group per channel

        codes = np.array([[a, b] for a in range(16) for b in range(16)],
                         dtype=np.uint8).reshape(-1)
        assert np.array_equal(unpack_codes(pack_codes(codes), codes.size), codes)


def test_criterion_13_baseline_correctness():
    with _Gate(13, "streaming kept-set matches closed form (1000 traces); "
                   "heavy-hitter kept-set matches brute force (50 seeds)", 60):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            sinks = int(rng.integers(0, 6))
            window = int(rng.integers(1, 10))
            n = int(rng.integers(1, 80))
            cache = StreamingCache.empty(StreamingPolicy(sinks, window), 2)
            row = np.zeros(2)
            for pos in range(n):
                streaming_evict(cache, row, row, pos)
            assert list(cache.positions) == streaming_kept_positions(sinks, window, n)

        budget = 6
        reserve = budget // 2
        for seed in range(50):
            rng = np.random.default_rng(seed)
            cache = H2OCache.empty(H2OPolicy(budget), 2)
            kept: list[int] = []
            scores: dict[int, float] = {}
            for pos in range(12):
                h2o_append(cache, np.zeros(2), np.zeros(2), pos)
                raw = rng.random(cache.positions.size)
                row = raw / raw.sum()
                h2o_evict(cache, row)
                # brute-force tracker over the same rows
                kept.append(pos)
                scores[pos] = 0.0
                for token, w in zip(kept, row):
                    scores[token] += w
                if len(kept) > budget:
                    victim = min(kept[:len(kept) - reserve], key=lambda t: (scores[t], t))
                    kept.remove(victim)
                    del scores[victim]
                assert list(cache.positions) == kept
