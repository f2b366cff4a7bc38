"""Image file I/O: binary PPM (P6, maxval 255) natively, PNG through Pillow."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def to_bytes(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> Path:
    """Write an ``[H, W, 3]`` (or ``[H, W]``) image with values in [0, 1]."""
    path = Path(path)
    data = to_bytes(image)
    if data.ndim == 2:
        data = np.repeat(data[:, :, None], 3, axis=2)
    if data.ndim != 3 or data.shape[2] != 3:
        raise ValueError(f"PPM needs [H, W, 3] data, got {data.shape}")
    h, w, _ = data.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(data).tobytes())
    return path


def _tokens(buf: bytes, count: int):
    """First ``count`` whitespace-separated header tokens, skipping comments,
    plus the offset just past the single whitespace byte that ends them."""
    out, i = [], 0
    while len(out) < count:
        while i < len(buf) and buf[i : i + 1].isspace():
            i += 1
        if buf[i : i + 1] == b"#":
            while i < len(buf) and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j : j + 1].isspace():
            j += 1
        if j == i:
            raise ValueError("truncated PPM header")
        out.append(buf[i:j])
        i = j
    return out, i + 1


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), off = _tokens(buf, 4)
    if magic != b"P6":
        raise ValueError(f"{path}: not a binary PPM (magic {magic!r})")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=off)
    return data.reshape(h, w, 3).astype(np.float32) / 255.0


def read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    if path.suffix.lower() in (".ppm", ".pnm"):
        return read_ppm(path)
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def write_image(path, image: np.ndarray) -> Path:
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pnm"):
        return write_ppm(path, image)
    from PIL import Image

    Image.fromarray(to_bytes(image)).save(path)
    return path


def contact_sheet(images, cols: int, pad: int = 1, fill: float = 1.0) -> np.ndarray:
    """Tile equally sized images row-major into one grid image."""
    images = [np.asarray(im) for im in images]
    if not images:
        raise ValueError("no images to tile")
    h, w, c = images[0].shape
    rows = -(-len(images) // cols)
    sheet = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad, c), fill, dtype=np.float32)
    for k, im in enumerate(images):
        r, q = divmod(k, cols)
        y, x = pad + r * (h + pad), pad + q * (w + pad)
        sheet[y : y + h, x : x + w] = im
    return sheet
