"""Channel-shrinking KV cache: compress the per-token cache width with
low-rank projection factors, keep a full-precision recency window, and
optionally quantize the compressed branch to 4 bits."""

from .bibranch import BiBranchCache, CacheStats, decode_step, greedy_generate as greedy_generate_cskv, \
    memory_bytes, prefill, reconstruct_history
from .calibrate import ActivationBatch, CalibConfig, CalibReport, capture_activations, \
    finetune_layer, finetune_layer_quant_aware, finetune_model, layer_loss, total_loss
from .lowrank import AsvdScaling, CompressionPlan, FactorSet, LowRankFactors, \
    compute_asvd_scaling, init_asvd, init_random, init_svd, ratio_to_rank, \
    reconstruct_weight, weighted_lowrank_oracle
from .numerics import Matrix, SvdResult, frobenius_norm, matmul, qr_factor, \
    solve_least_squares, thin_svd
from .quant import CacheQuant, QuantSpec, QuantizedTensor, dequantize, fake_quant, quantize
from .tensorio import ModelConfig, load_config, read_container, save_config, \
    validate_config, write_container
from .transformer import BaselineKvCache, TransformerWeights, attention_forward, \
    decode_step_baseline, greedy_generate, make_random_weights, prefill_baseline, \
    rmsnorm, rope_rotate

__version__ = "0.1.0"
