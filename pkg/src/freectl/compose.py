"""Compositional reference images: paste crops onto a canvas, optionally blur.

Manifest (JSON)::

    {
      "canvas": {"width": 32, "height": 32,
                 "background": [r, g, b] | gray | "path/to/image.ppm"},
      "items": [
        {"source": "a.ppm", "rect": [x, y, w, h], "dest": [x, y],
         "mask": "a_mask.ppm"}          # mask optional, nonzero = paste
      ],
      "blur": {"enabled": false, "sigma": 1.0, "radius": 3}   # radius optional
    }

Relative paths resolve against the manifest's directory. Colors are in
[0, 1]. Items paste in order, later over earlier; destinations that leave the
canvas are clipped.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .images import read_image


@dataclass
class Item:
    source: object  # path or [h, w, 3] array
    rect: tuple[int, int, int, int]
    dest: tuple[int, int]
    mask: object = None


@dataclass
class BlurSettings:
    enabled: bool = False
    sigma: float = 1.0
    radius: int | None = None

    @property
    def taps_radius(self) -> int:
        return math.ceil(3 * self.sigma) if self.radius is None else self.radius


@dataclass
class CompositionManifest:
    width: int
    height: int
    background: object = 0.0
    items: list[Item] = field(default_factory=list)
    blur: BlurSettings = field(default_factory=BlurSettings)
    base_dir: Path = field(default_factory=Path)

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "CompositionManifest":
        c = d["canvas"]
        items = [
            Item(it["source"], tuple(int(v) for v in it["rect"]), tuple(int(v) for v in it["dest"]), it.get("mask"))
            for it in d.get("items", [])
        ]
        b = d.get("blur", {})
        blur = BlurSettings(bool(b.get("enabled", False)), float(b.get("sigma", 1.0)), b.get("radius"))
        return cls(int(c["width"]), int(c["height"]), c.get("background", 0.0), items, blur, Path(base_dir))

    @classmethod
    def load(cls, path) -> "CompositionManifest":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), path.parent)

    def _image(self, src) -> np.ndarray:
        if isinstance(src, np.ndarray):
            return src.astype(np.float32)
        p = Path(src)
        if not p.is_absolute():
            p = self.base_dir / p
        if not p.exists():
            raise FileNotFoundError(f"composition source not found: {p}")
        return read_image(p)


class CompositionError(ValueError):
    pass


def blur_taps(sigma: float, radius: int) -> np.ndarray:
    """Normalized, symmetric 1-D Gaussian of length ``2 * radius + 1``."""
    if sigma <= 0:
        raise ValueError("blur sigma must be positive")
    if radius < 1:
        raise ValueError("blur radius must be >= 1")
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def gaussian_blur(x: np.ndarray, sigma: float, radius: int | None = None) -> np.ndarray:
    """Separable Gaussian blur with reflect padding (edge pixel repeated)."""
    radius = math.ceil(3 * sigma) if radius is None else radius
    taps = blur_taps(sigma, radius)
    out = np.asarray(x, dtype=np.float64)
    for axis in (0, 1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (radius, radius)
        p = np.pad(out, pad, mode="symmetric")
        acc = np.zeros_like(out)
        n = out.shape[axis]
        for k, w in enumerate(taps):
            acc += w * np.take(p, np.arange(k, k + n), axis=axis)
        out = acc
    src = np.asarray(x)
    # a convex combination stays in range; the clip only removes rounding excess
    out = np.clip(out, src.min(), src.max())
    return out.astype(np.result_type(src.dtype, np.float32))


def _background(m: CompositionManifest) -> np.ndarray:
    bg = m.background
    if isinstance(bg, str) or isinstance(bg, np.ndarray) and bg.ndim == 3:
        img = m._image(bg)
        if img.shape[:2] != (m.height, m.width):
            raise CompositionError(f"background is {img.shape[:2]}, canvas is {(m.height, m.width)}")
        return img.copy()
    color = np.broadcast_to(np.asarray(bg, dtype=np.float32), (3,))
    return np.tile(color, (m.height, m.width, 1)).astype(np.float32)


def compose(manifest: CompositionManifest) -> np.ndarray:
    canvas = _background(manifest)
    H, W = canvas.shape[:2]
    for it in manifest.items:
        src = manifest._image(it.source)
        x, y, w, h = it.rect
        if w < 1 or h < 1 or x < 0 or y < 0 or x + w > src.shape[1] or y + h > src.shape[0]:
            raise CompositionError(f"rect {it.rect} outside source of size {src.shape[1]}x{src.shape[0]}")
        crop = src[y : y + h, x : x + w]
        if it.mask is not None:
            mimg = manifest._image(it.mask) if not isinstance(it.mask, np.ndarray) else np.asarray(it.mask)
            if mimg.ndim == 3:
                mimg = mimg.max(axis=2)
            if mimg.shape == src.shape[:2]:
                mimg = mimg[y : y + h, x : x + w]
            if mimg.shape != (h, w):
                raise CompositionError(f"mask shape {mimg.shape} fits neither source nor rect")
            sel = mimg > 0
        else:
            sel = np.ones((h, w), dtype=bool)
        dx, dy = it.dest
        x0, y0 = max(dx, 0), max(dy, 0)
        x1, y1 = min(dx + w, W), min(dy + h, H)
        if x1 <= x0 or y1 <= y0:
            continue
        cs = crop[y0 - dy : y1 - dy, x0 - dx : x1 - dx]
        ms = sel[y0 - dy : y1 - dy, x0 - dx : x1 - dx]
        region = canvas[y0:y1, x0:x1]
        region[ms] = cs[ms]
    if manifest.blur.enabled:
        canvas = gaussian_blur(canvas, manifest.blur.sigma, manifest.blur.taps_radius)
    return canvas
