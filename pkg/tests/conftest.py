import pytest

from cskv import ModelConfig, make_random_weights
from cskv.lowrank import CompressionPlan, FactorSet, init_svd, weighted_lowrank_oracle


def tiny_config(n_layers=2, n_heads=4, d_head=8, d_model=32, vocab=64, max_position=4096):
    return ModelConfig(n_layers=n_layers, n_heads=n_heads, d_head=d_head,
                       d_model=d_model, d_kv=n_heads * d_head,
                       vocab_size=vocab, max_position=max_position)


@pytest.fixture
def cfg():
    return tiny_config()


@pytest.fixture
def weights(cfg):
    return make_random_weights(cfg, seed=0)


def svd_factor_set(weights, rank_k, rank_v) -> FactorSet:
    fs = FactorSet()
    for i, lw in enumerate(weights.layers):
        fs.key.append(init_svd(lw.wk, rank_k, "key", i))
        fs.value.append(init_svd(lw.wv, rank_v, "value", i))
    return fs


def oracle_factor_set(weights, X_per_layer, rank_k, rank_v) -> FactorSet:
    fs = FactorSet()
    for i, lw in enumerate(weights.layers):
        fs.key.append(weighted_lowrank_oracle(X_per_layer[i], lw.wk, rank_k, "key", i))
        fs.value.append(weighted_lowrank_oracle(X_per_layer[i], lw.wv, rank_v, "value", i))
    return fs


def full_rank_plan(cfg, window_size=8) -> CompressionPlan:
    return CompressionPlan.build(0.0, 0.0, cfg.d_kv, window_size)


def random_prompt(rng, cfg, length):
    return rng.integers(0, cfg.vocab_size, size=length)
