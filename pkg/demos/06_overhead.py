"""
Inference overhead
==================

Wall-clock cost of uncontrolled sampling, one-step control and iterative
extraction, in the layout of a timing table. The ratio column is what
matters: one-step adds a single forward pass, iterative doubles them.
"""

import sys

from _common import CHECKPOINT, OUT
from freectl.control import run
from freectl.dataset import sample_dataset
from freectl.metrics import bench_many, write_timing_csv
from freectl.numerics import SeededRng
from freectl.scheduler import NoiseSchedule, build_grid
from freectl.trainer import load_checkpoint

repeats = int(sys.argv[1]) if len(sys.argv) > 1 else 20
model = load_checkpoint(CHECKPOINT)
grid = build_grid(NoiseSchedule(step_count=25))
item = sample_dataset(SeededRng(99991), 1)[0]

# %%
# The three modes are timed round-robin, so a background hiccup costs all
# of them equally instead of landing on one.
modes = {"baseline": "off", "one_step": "one_step", "iterative": "iterative"}
rows = bench_many({name: (lambda m=m: run(model, item.label, grid, 0, m, item.image)) for name, m in modes.items()},
                  repeats=repeats)
base = rows["baseline"].mean_s
print(f"{'':10s} {'mean s':>8s} {'max s':>8s} {'min s':>8s} {'passes':>6s} {'ratio':>6s}")
for name, s in rows.items():
    print(f"{name:10s} {s.mean_s:8.4f} {s.max_s:8.4f} {s.min_s:8.4f} {s.forward_passes:6d} {s.mean_s / base:6.3f}")
write_timing_csv(OUT / "timing.csv", rows)
