"""Briefly train a model, then prune 30% of every channel group, finetune and quantize to int8."""
import tempfile
from pathlib import Path

import numpy as np

from greenseg import checkpoint
from greenseg.compression import dequantized_forward, iterative_prune_finetune, quantize_weights_int8
from greenseg.config import RunConfig
from greenseg.data import split_by_patient
from greenseg.data.types import stack_batch
from greenseg.models import ArchSpec, Family, param_count
from greenseg.training import Finetuner, load_slices, train

cfg = RunConfig()
cfg.model = ArchSpec(Family.UNET, base_channels=8, depth=3)
cfg.data.n, cfg.data.side = 128, 32
cfg.training.max_epochs = 6
cfg.energy.mode = "modeled"
model = train(cfg).model

train_set, val_set, test_set = split_by_patient(load_slices(cfg), seed=cfg.data.split_seed)
tuner = Finetuner(train_set, test_set, lr=1e-3)
small, trace = iterative_prune_finetune(model, [(0.3, 2)], tuner)
for row in trace:
    print(f"{row['stage']:10s} params {row['params']:>8,d}  dice {row['dice']:.4f}")

out = Path(tempfile.mkdtemp(prefix="greenseg-"))
fp32 = checkpoint.save_model(out / "pruned.gseg", small)
q = quantize_weights_int8(small)
size = q.save(out / "pruned.q")
x = stack_batch(test_set[:16])[0]
drift = float(np.mean(np.abs(dequantized_forward(q, x) - small.predict(x))))
print(f"params {param_count(model):,d} -> {param_count(small):,d}; file {fp32:,d} -> {size:,d} bytes; "
      f"int8 output drift {drift:.2e}")
