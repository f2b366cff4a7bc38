"""
Synthetic shapes and a short training run
=========================================

The toy model learns 12 classes (circle, square, triangle x red, green,
blue, yellow) on 32x32 images. This script renders a sample sheet and
trains a throwaway model for a few hundred steps so the loss curve is
visible. The shipped checkpoint came from the same entry point with the
default 7000 steps (``freectl train``).
"""

import sys
import time

import numpy as np

from _common import OUT
from freectl.dataset import ShapeSpec, render, sample_dataset, stack
from freectl.images import contact_sheet, write_image
from freectl.model import DiTModel, ModelConfig
from freectl.numerics import SeededRng
from freectl.trainer import TrainConfig, train

# %%
# Every class once, then a random draw from the dataset sampler.
fixed = [render(ShapeSpec(k, c, (16, 16), 8)) for k in ("circle", "square", "triangle")
         for c in ("red", "green", "blue", "yellow")]
items = sample_dataset(SeededRng(0), 12)
write_image(OUT / "shapes.png", contact_sheet(fixed + [it.image for it in items], cols=12))
print("labels of the random row:", [it.label for it in items])

# %%
# A few hundred Adam steps are enough to watch the flow-matching loss fall.
steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
X, Y = stack(sample_dataset(SeededRng(1234), 2000))
model = DiTModel(ModelConfig(), seed=0)
t0 = time.perf_counter()
train(model, X, Y, TrainConfig(steps=steps, log_every=50), log_path=OUT / "demo_train_log.csv")
print(f"{steps} steps in {time.perf_counter() - t0:.0f} s")
log = np.genfromtxt(OUT / "demo_train_log.csv", delimiter=",", names=True)
for row in log:
    print(f"step {int(row['step']):5d}  loss {row['loss']:.4f}")
