"""
Assembling the network and saving it
====================================

The full model is a U-shaped encoder/decoder.  Encoder levels carry the
regulation block; decoder levels are plain conv blocks fed by skip
connections.  Checkpoints are float32 files with a CRC and an
architecture fingerprint.
"""

import tempfile
from pathlib import Path

import numpy as np

from scrnet.model import ModelConfig, build_model, count_params, forward, load_checkpoint, save_checkpoint
from scrnet.tensor import ShapeError, Tensor, no_grad

cfg = ModelConfig(depth=3, widths=(8, 16, 32), seed=0)
model = build_model(cfg)
print("parameters:", count_params(model))

x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 64, 64)))
with no_grad():
    logits, skips = forward(model.eval(), x, return_skips=True)
print("logits", logits.shape, "skips", [s.shape for s in skips])

# extents must be divisible by 2^(depth-1); the check runs before any work
try:
    forward(model, Tensor(np.zeros((1, 3, 62, 64))))
except ShapeError as exc:
    print("rejected:", exc)

# the default paper-sized configuration for reference
print("default depth-5 model:", count_params(build_model(ModelConfig())), "parameters")

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "model.ckpt"
    save_checkpoint(model, path)
    again = load_checkpoint(path, cfg).eval()
    with no_grad():
        diff = np.abs(forward(again, x).data - logits.data).max()
    print(f"checkpoint {path.stat().st_size} bytes, max logit difference after reload {diff:.1e}")

    # a checkpoint refuses to load into a different architecture
    try:
        load_checkpoint(path, ModelConfig(depth=3, widths=(8, 16, 32), ablate_fam=True))
    except ValueError as exc:
        print("mismatch:", exc)
