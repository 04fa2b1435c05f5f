"""Initializer choice decides whether layer-wise fine-tuning converges.

Three ways to seed the (A, B) factors of one layer:

  random  Gaussian noise; the projection's information is destroyed and
          the reconstruction loss starts orders of magnitude too high.
  svd     truncated SVD of the weight itself.
  asvd    truncated SVD of the activation-scaled weight diag(s) W, where
          s_i = mean(|X[:, i]|) ** alpha; channels that matter more are
          approximated more carefully.

Fine-tuning then minimizes mean((X W - X A B)^2) per layer, either with
Adam on the analytic gradients or with alternating least squares (which
is monotone and converges to the bilinear fixed point). The closed-form
weighted optimum gives the floor any run can reach.

Run:  python demos/02_calibration_initializers.py
"""

import json
from pathlib import Path

import numpy as np

from cskv.calibrate import CalibConfig, finetune_layer, layer_loss
from cskv.lowrank import (compute_asvd_scaling, init_asvd, init_random, init_svd,
                          weighted_lowrank_oracle)
from cskv.transformer import longtail_matrix

H, RANK, TOKENS = 64, 12, 192
rng = np.random.default_rng(7)

# Activations with channel scales spanning four decades.
scales = np.exp(rng.uniform(np.log(1e-2), np.log(1e2), size=H))
X = rng.standard_normal((TOKENS, H)) * scales
W = longtail_matrix(rng, H, H, std=0.02)

inits = {
    "random": init_random(0, H, H, RANK),
    "svd": init_svd(W, RANK),
    "asvd": init_asvd(W, compute_asvd_scaling(X, alpha=0.5), RANK),
}
floor = layer_loss(X, W, weighted_lowrank_oracle(X, W, RANK))
print(f"closed-form optimum at rank {RANK}: {floor:.6e}\n")

curves = {}
print(f"{'init':>8} {'start loss':>14} {'after 40 ALS':>14} {'vs optimum':>11}")
for name, f0 in inits.items():
    _, curve = finetune_layer(X, W, f0, CalibConfig(mode="als", steps=40))
    curves[name] = curve
    print(f"{name:>8} {curve[0]:14.6e} {curve[-1]:14.6e} "
          f"{curve[-1] / floor:10.3f}x")

out = Path(__file__).with_name("loss_curves.json")
out.write_text(json.dumps({
    "series": [{"name": k, "x": list(range(len(v))), "y": v} for k, v in curves.items()],
}, indent=2))
print(f"""
Random initialization starts ~{curves['random'][0] / curves['svd'][0]:.0f}x higher
than the SVD-based inits and stays far from the optimum, while svd/asvd
converge within a few alternating steps (asvd starts closer under skewed
activations). Loss curves written to {out.name} for plotting.""")
