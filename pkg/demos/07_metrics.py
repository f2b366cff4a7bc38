"""
Metrics at a glance
===================

SSIM, PSNR and Canny edge-F1 on hand-made pairs, so their ranges and
failure modes are easy to see before reading any experiment table.
"""

import numpy as np

from freectl.dataset import ShapeSpec, render
from freectl.metrics import canny_image, edge_f1, psnr, ssim

ref = render(ShapeSpec("triangle", "green", (16, 16), 9))
pairs = {
    "identical": ref,
    "shifted 1 px": np.roll(ref, 1, axis=1),
    "shifted 4 px": np.roll(ref, 4, axis=1),
    "recolored": render(ShapeSpec("triangle", "red", (16, 16), 9)),
    "other shape": render(ShapeSpec("circle", "green", (16, 16), 9)),
    "noisy": np.clip(ref + 0.1 * np.random.default_rng(0).standard_normal(ref.shape), 0, 1),
}
e_ref = canny_image(ref)
print(f"{'':14s} {'SSIM':>7s} {'PSNR':>7s} {'F1 tol0':>8s} {'F1 tol1':>8s}")
for name, img in pairs.items():
    e = canny_image(img)
    print(f"{name:14s} {ssim(ref, img):7.3f} {psnr(ref, img):7.2f} {edge_f1(e, e_ref, 0):8.3f} {edge_f1(e, e_ref, 1):8.3f}")
