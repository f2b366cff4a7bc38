"""Synthetic shapes: hard-edged colored primitives on plain dark backgrounds.

Class id is ``kind * 4 + color`` with kinds (circle, square, triangle) and
colors (red, green, blue, yellow). Rendering is non-antialiased so the edge
contour of every image is known exactly. Palette lumas are >= 0.54 and
backgrounds <= 0.08, which keeps every contour above the Canny high
threshold after smoothing.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .images import write_ppm
from .numerics import SeededRng

KINDS = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
PALETTE = {
    "red": (1.0, 0.35, 0.35),
    "green": (0.35, 1.0, 0.35),
    "blue": (0.45, 0.6, 1.0),
    "yellow": (1.0, 1.0, 0.3),
}
NUM_CLASSES = len(KINDS) * len(COLORS)
IMAGE_SIZE = 32
MIN_SIZE, MAX_SIZE = 5, 10
MAX_BACKGROUND = 0.08


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    color: str
    center: tuple[int, int]  # (x, y) = (column, row)
    size: int  # radius or half-extent in pixels
    background: float = 0.0
    canvas: int = IMAGE_SIZE

    @property
    def label(self) -> int:
        return KINDS.index(self.kind) * len(COLORS) + COLORS.index(self.color)

    def validate(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r}")
        if self.color not in COLORS:
            raise ValueError(f"unknown color {self.color!r}")
        if self.size < 3:
            raise ValueError("size must be >= 3 px")
        cx, cy = self.center
        s, n = self.size, self.canvas
        if cx - s < 0 or cy - s < 0 or cx + s > n - 1 or cy + s > n - 1:
            raise ValueError(f"shape {self} leaves the {n}x{n} canvas")


@dataclass
class LabeledImage:
    image: np.ndarray
    label: int
    spec: ShapeSpec | None = None


def shape_mask(spec: ShapeSpec) -> np.ndarray:
    """Boolean ``[H, W]`` coverage of the shape on integer pixel centers."""
    spec.validate()
    n = spec.canvas
    y, x = np.mgrid[0:n, 0:n]
    cx, cy = spec.center
    s = spec.size
    if spec.kind == "circle":
        return (x - cx) ** 2 + (y - cy) ** 2 <= s * s
    if spec.kind == "square":
        return (np.abs(x - cx) <= s) & (np.abs(y - cy) <= s)
    # upward isosceles triangle: apex (cx, cy - s), base y = cy + s from cx - s to cx + s
    dy = y - (cy - s)
    return (y <= cy + s) & (dy >= 0) & (2 * np.abs(x - cx) <= dy)


def render(spec: ShapeSpec) -> np.ndarray:
    mask = shape_mask(spec)
    img = np.full((spec.canvas, spec.canvas, 3), spec.background, dtype=np.float32)
    img[mask] = np.asarray(PALETTE[spec.color], dtype=np.float32)
    return img


def sample_spec(rng: SeededRng, canvas: int = IMAGE_SIZE) -> ShapeSpec:
    kind = KINDS[int(rng.integers(0, len(KINDS)))]
    color = COLORS[int(rng.integers(0, len(COLORS)))]
    size = int(rng.integers(MIN_SIZE, MAX_SIZE + 1))
    cx = int(rng.integers(size, canvas - size))
    cy = int(rng.integers(size, canvas - size))
    bg = float(np.round(rng.uniform(0.0, MAX_BACKGROUND), 4))
    return ShapeSpec(kind, color, (cx, cy), size, bg, canvas)


def sample_dataset(rng: SeededRng, n: int) -> list[LabeledImage]:
    if n < 1:
        raise ValueError("n must be >= 1")
    out = []
    for _ in range(n):
        spec = sample_spec(rng)
        out.append(LabeledImage(render(spec), spec.label, spec))
    return out


def stack(items: list[LabeledImage]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([it.image for it in items]), np.array([it.label for it in items], dtype=np.int64)


def dump_dataset(items: list[LabeledImage], directory) -> Path:
    """Write ``NNNNN.ppm`` files plus ``labels.csv`` (file, label, kind, color, cx, cy, size, background)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "labels.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["file", "label", "kind", "color", "cx", "cy", "size", "background"])
        for i, it in enumerate(items):
            name = f"{i:05d}.ppm"
            write_ppm(d / name, it.image)
            s = it.spec
            w.writerow([name, it.label] + ([s.kind, s.color, *s.center, s.size, s.background] if s else [""] * 6))
    return d
