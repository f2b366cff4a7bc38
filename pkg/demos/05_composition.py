"""
Compositional references
========================

Crop shapes out of dataset images, paste them onto a fresh canvas, and use
the composed picture as the structural reference. The manifest is plain
JSON so the same layout can be rendered with ``freectl compose``.
"""

import json

import numpy as np

from _common import CHECKPOINT, OUT
from freectl.compose import CompositionManifest, compose
from freectl.control import run
from freectl.dataset import ShapeSpec, render
from freectl.images import contact_sheet, write_image, write_ppm
from freectl.metrics import canny_image, edge_f1
from freectl.scheduler import NoiseSchedule, build_grid
from freectl.trainer import load_checkpoint

# %%
# A source image on disk and a manifest that moves its shape.
write_ppm(OUT / "src_circle.ppm", render(ShapeSpec("circle", "blue", (10, 10), 6)))
manifest = {
    "canvas": {"width": 32, "height": 32, "background": [0.03, 0.03, 0.03]},
    "items": [
        {"source": "src_circle.ppm", "rect": [3, 3, 15, 15], "dest": [14, 14]},
    ],
    "blur": {"enabled": False, "sigma": 0.8},
}
(OUT / "manifest.json").write_text(json.dumps(manifest, indent=2))
ref = compose(CompositionManifest.load(OUT / "manifest.json"))

# %%
# Controlled vs uncontrolled with the circle's class and the same seeds.
model = load_checkpoint(CHECKPOINT)
grid = build_grid(NoiseSchedule(step_count=25))
label = 0 * 4 + 2  # circle, blue
seeds = range(4)
on = [run(model, label, grid, s, "one_step", ref).images[0] for s in seeds]
off = [run(model, label, grid, s, "off").images[0] for s in seeds]
e_ref = canny_image(ref)
print("edge-F1 controlled  ", np.round([edge_f1(canny_image(x), e_ref) for x in on], 3))
print("edge-F1 uncontrolled", np.round([edge_f1(canny_image(x), e_ref) for x in off], 3))
write_image(OUT / "composition_sheet.png", contact_sheet([ref] * 4 + off + on, cols=4))
