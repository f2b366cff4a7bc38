"""
Control strength: sigma, key timestep and depth
===============================================

Sweeps one knob at a time over 20 held-out references and reports mean SSIM
and edge-F1 against the references. ``freectl sweep`` does the same from the
command line and also writes a contact sheet.
"""

import numpy as np

from _common import CHECKPOINT
from freectl.control import ControlPlan, last_layers, run
from freectl.dataset import sample_dataset, stack
from freectl.metrics import canny_image, edge_f1, ssim
from freectl.numerics import SeededRng
from freectl.scheduler import NoiseSchedule, build_grid
from freectl.trainer import load_checkpoint

model = load_checkpoint(CHECKPOINT)
grid = build_grid(NoiseSchedule(step_count=25))
refs, labels = stack(sample_dataset(SeededRng(99991), 20))


def score(plan):
    imgs = run(model, labels, grid, 0, "one_step", refs, plan).images
    s = np.mean([ssim(refs[i], imgs[i]) for i in range(len(refs))])
    f = np.mean([edge_f1(canny_image(imgs[i]), canny_image(refs[i])) for i in range(len(refs))])
    return s, f


for axis, plans in [
    ("sigma", {v: ControlPlan(sigma=v) for v in (0.0, 0.25, 0.5, 0.75)}),
    ("t_key", {v: ControlPlan(t_key=v) for v in (50, 250, 500, 661, 900)}),
    ("depth", {d: ControlPlan(layer_set=last_layers(8, d)) for d in (0, 2, 4, 6, 8)}),
]:
    print(axis)
    for v, p in plans.items():
        s, f = score(p)
        print(f"  {v!s:>5}  SSIM {s:.3f}  edge-F1 {f:.3f}")
