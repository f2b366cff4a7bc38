"""
One-step query control
======================

Extract self-attention queries from a reference image in a single extra
forward pass, then inject them at every sampling step. Compared against the
same seed without control and against per-step (iterative) extraction.
"""

import numpy as np

from _common import CHECKPOINT, OUT
from freectl.control import ControlPlan, extract_one_step, run
from freectl.dataset import sample_dataset, stack
from freectl.images import contact_sheet, write_image
from freectl.metrics import canny_image, edge_f1, ssim
from freectl.numerics import SeededRng
from freectl.scheduler import NoiseSchedule, build_grid
from freectl.trainer import load_checkpoint

model = load_checkpoint(CHECKPOINT)
grid = build_grid(NoiseSchedule(step_count=25))
refs, labels = stack(sample_dataset(SeededRng(99991), 10))

# %%
# The default plan: key timestep 661, LCD latent 0.75 * x0, last four blocks,
# null label during extraction.
plan = ControlPlan().resolve(model.config)
print(plan)
q = extract_one_step(model, refs[0], plan)
print({l: q[l].shape for l in q.layers}, q.provenance)

# %%
# Same seed, three modes.
results = {m: run(model, labels, grid, seed=0, mode=m, reference=refs) for m in ("off", "one_step", "iterative")}
for m, r in results.items():
    s = np.mean([ssim(refs[i], r.images[i]) for i in range(len(refs))])
    f = np.mean([edge_f1(canny_image(r.images[i]), canny_image(refs[i])) for i in range(len(refs))])
    print(f"{m:10s} forward passes {r.forward_passes:3d}  SSIM {s:.3f}  edge-F1 {f:.3f}")

# %%
# Rows: reference, uncontrolled, one-step, iterative.
rows = [refs] + [results[m].images for m in ("off", "one_step", "iterative")]
write_image(OUT / "control_sheet.png", contact_sheet([im for row in rows for im in row], cols=len(refs)))
print("wrote", OUT / "control_sheet.png")
