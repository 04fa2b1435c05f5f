"""The weight container, config file, and the command-line pipeline.

Writes a random desk-scale model to the documented binary container plus
its JSON config, then drives the CLI end to end: calibrate factors,
generate with baseline and compressed caches, evaluate fidelity, and
render the report.

Run:  python demos/06_container_and_cli.py
"""

import struct
import tempfile
from pathlib import Path

from cskv.cli import main
from cskv.tensorio import read_header, save_config, write_container
from cskv.transformer import make_random_weights
from cskv.tensorio import ModelConfig

workdir = Path(tempfile.mkdtemp(prefix="cskv_demo_"))
cfg = ModelConfig(n_layers=2, n_heads=4, d_head=16, d_model=64, d_kv=64,
                  vocab_size=1024, max_position=4096)
weights = make_random_weights(cfg, seed=5)

model = workdir / "model.cskv"
config = workdir / "model.json"
write_container({k: (v, "f32") for k, v in weights.to_tensors().items()}, model)
save_config(cfg, config)

blob = model.read_bytes()
magic, version, header_len = struct.unpack("<4sIQ", blob[:16])
print(f"container: magic={magic.decode()} version={version} "
      f"header={header_len}B file={len(blob)}B")
for meta in read_header(model)[:4]:
    print(f"  {meta.name:<16} {meta.dtype} {str(meta.shape):<12} "
          f"offset={meta.offset:<8} nbytes={meta.nbytes}")
print(f"  ... {len(read_header(model))} tensors total, offsets 64-byte aligned\n")

factors = workdir / "factors.cskv"
report = workdir / "report.json"
csv = workdir / "eval.csv"
prompt = "1 11 2 3 10 14 15 16 4 5 12 13 17 18 19 4"

steps = [
    ["calibrate", "--model", str(model), "--config", str(config),
     "--ratio-k", "0.8", "--ratio-v", "0.8", "--mode", "als", "--steps", "15",
     "--factors", str(factors), "--out", str(report)],
    ["generate", "--model", str(model), "--config", str(config),
     "--prompt", prompt, "--max-new", "12"],
    ["generate", "--model", str(model), "--config", str(config),
     "--cache", "cskv", "--factors", str(factors), "--ratio-k", "0.8",
     "--ratio-v", "0.8", "--window", "8", "--prompt", prompt, "--max-new", "12"],
    ["generate", "--model", str(model), "--config", str(config),
     "--cache", "h2o", "--budget", "12", "--prompt", prompt, "--max-new", "12"],
    ["eval", "--model", str(model), "--config", str(config),
     "--factors", str(factors), "--ratio-k", "0.8", "--ratio-v", "0.8",
     "--window", "8", "--out", str(csv)],
    ["report", "--in", str(csv)],
]
for argv in steps:
    print(f"$ cskv {' '.join(argv)}")
    code = main(argv)
    assert code == 0, f"exit {code}"
    print()
