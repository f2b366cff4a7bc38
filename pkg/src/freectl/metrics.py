"""Image-similarity metrics, Canny edges, query similarity and timing.

Conventions worth knowing:

* SSIM uses a normalized Gaussian window over the valid region only
  (7x7, sigma 1.0 for images under 64 px; 11x11, sigma 1.5 otherwise),
  K1=0.01, K2=0.03, population moments, averaged over channels.
* PSNR of identical images is reported as :data:`PSNR_CAP` dB.
* Canny thresholds (low 100, high 200) apply to the raw L2 Sobel magnitude of
  a 0-255 luma image smoothed by a 5x5, sigma 1.4 Gaussian. Borders use
  reflect-101 padding.
* Edge F1 matches pixels within a Chebyshev distance ``tol_px``.
"""

from __future__ import annotations

import csv
import gc
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .numerics import DimensionError

PSNR_CAP = 99.0
LUMA = np.array([0.299, 0.587, 0.114])


# ---------------------------------------------------------------------------
# SSIM / PSNR
# ---------------------------------------------------------------------------


def gaussian_taps(size: int, sigma: float) -> np.ndarray:
    r = (size - 1) / 2.0
    x = np.arange(size) - r
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _valid_filter(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    k = taps.size
    x = sliding_window_view(x, k, axis=0) @ taps
    return sliding_window_view(x, k, axis=1) @ taps


def ssim_window(h: int, w: int) -> tuple[int, float]:
    return (11, 1.5) if min(h, w) >= 64 else (7, 1.0)


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    size, sig = ssim_window(*a.shape[:2])
    if min(a.shape[:2]) < size:
        raise DimensionError(f"image {a.shape[:2]} smaller than the {size}x{size} window")
    taps = gaussian_taps(size, sig)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _valid_filter(x, taps), _valid_filter(y, taps)
        vx = _valid_filter(x * x, taps) - mx * mx
        vy = _valid_filter(y * y, taps) - my * my
        cxy = _valid_filter(x * y, taps) - mx * my
        num = (2 * mx * my + c1) * (2 * cxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        vals.append(float(np.mean(num / den)))
    return float(np.mean(vals))


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range**2 / mse))


# ---------------------------------------------------------------------------
# Canny
# ---------------------------------------------------------------------------


def to_gray255(image: np.ndarray) -> np.ndarray:
    """RGB in [0, 1] -> luma on the 0-255 scale; 2-D input is only rescaled."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image[..., :3] @ LUMA
    return image * 255.0


def _gaussian_kernel_2d(size: int, sigma: float) -> np.ndarray:
    g = gaussian_taps(size, sigma)
    return np.outer(g, g)


SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T


def sobel(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx = ndimage.correlate(gray, SOBEL_X, mode="mirror")
    gy = ndimage.correlate(gray, SOBEL_Y, mode="mirror")
    return gx, gy


def non_max_suppression(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Thin edges along the gradient, quantized to 4 directions.

    A pixel survives if it is strictly above the neighbor on the negative side
    and not below the one on the positive side (ties resolved to one pixel).
    """
    ang = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    p = np.pad(mag, 1)
    H, W = mag.shape

    def nb(dr, dc):
        return p[1 + dr : 1 + dr + H, 1 + dc : 1 + dc + W]

    # (row, col) offsets of the positive-side neighbor; rows grow downward like gy
    sectors = [
        ((ang < 22.5) | (ang >= 157.5), (0, 1)),
        ((ang >= 22.5) & (ang < 67.5), (1, 1)),
        ((ang >= 67.5) & (ang < 112.5), (1, 0)),
        ((ang >= 112.5) & (ang < 157.5), (1, -1)),
    ]
    keep = np.zeros(mag.shape, dtype=bool)
    for mask, (dr, dc) in sectors:
        keep |= mask & (mag > nb(-dr, -dc)) & (mag >= nb(dr, dc))
    return np.where(keep, mag, 0.0)


def hysteresis(nms: np.ndarray, low: float, high: float) -> np.ndarray:
    """Keep 8-connected components of ``nms > low`` that touch ``nms > high``."""
    cand = nms > low
    lab, n = ndimage.label(cand, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return np.zeros(nms.shape, dtype=np.uint8)
    strong = np.zeros(n + 1, dtype=bool)
    strong[np.unique(lab[nms > high])] = True
    strong[0] = False
    return strong[lab].astype(np.uint8)


def canny(gray255: np.ndarray, low: float = 100.0, high: float = 200.0, smooth: bool = True) -> np.ndarray:
    """Binary edge map of a single-channel image on the 0-255 scale."""
    g = np.asarray(gray255, dtype=np.float64)
    if g.ndim != 2:
        raise DimensionError("canny expects a single-channel image; use canny_image for RGB")
    if smooth:
        g = ndimage.convolve(g, _gaussian_kernel_2d(5, 1.4), mode="mirror")
    gx, gy = sobel(g)
    mag = np.hypot(gx, gy)
    return hysteresis(non_max_suppression(mag, gx, gy), low, high)


def canny_image(image: np.ndarray, **kw) -> np.ndarray:
    """Canny edges of an RGB (or gray) image with values in [0, 1]."""
    return canny(to_gray255(image), **kw)


def edge_f1(pred: np.ndarray, gt: np.ndarray, tol_px: int = 1) -> float:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"edge maps differ in shape: {pred.shape} vs {gt.shape}")
    np_, ng = pred.sum(), gt.sum()
    if np_ == 0 and ng == 0:
        return 1.0
    if np_ == 0 or ng == 0:
        return 0.0
    if tol_px > 0:
        st = np.ones((2 * tol_px + 1, 2 * tol_px + 1), dtype=bool)
        gt_d = ndimage.binary_dilation(gt, structure=st)
        pred_d = ndimage.binary_dilation(pred, structure=st)
    else:
        gt_d, pred_d = gt, pred
    precision = (pred & gt_d).sum() / np_
    recall = (gt & pred_d).sum() / ng
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class PairMetrics:
    name: str
    ssim: float
    psnr_db: float
    canny_f1: float


METRIC_FIELDS = ("ssim", "psnr_db", "canny_f1")


def compare(name: str, ref: np.ndarray, gen: np.ndarray, tol_px: int = 1) -> PairMetrics:
    return PairMetrics(name, ssim(ref, gen), psnr(ref, gen),
                       edge_f1(canny_image(gen), canny_image(ref), tol_px))


def aggregate(values) -> dict:
    v = np.asarray(list(values), dtype=np.float64)
    return {"mean": float(v.mean()), "min": float(v.min()), "max": float(v.max()), "variance": float(v.var())}


@dataclass
class MetricsReport:
    pairs: list[PairMetrics] = field(default_factory=list)
    similarity: dict | None = None
    timing: dict | None = None

    @property
    def aggregates(self) -> dict:
        if not self.pairs:
            return {}
        return {f: aggregate(getattr(p, f) for p in self.pairs) for f in METRIC_FIELDS}

    def mean(self, metric: str) -> float:
        return self.aggregates[metric]["mean"]


def write_pairs_csv(path, report: MetricsReport) -> Path:
    """One row per pair, then ``mean``, ``min``, ``max``, ``variance`` rows
    (population variance) under the ``name`` column."""
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["name", *METRIC_FIELDS])
        for p in report.pairs:
            w.writerow([p.name] + [repr(float(getattr(p, m))) for m in METRIC_FIELDS])
        agg = report.aggregates
        for stat in ("mean", "min", "max", "variance"):
            w.writerow([stat] + [repr(agg[m][stat]) for m in METRIC_FIELDS])
    return path


def read_pairs_csv(path) -> tuple[list[PairMetrics], dict]:
    pairs, aggs = [], {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            vals = {m: float(row[m]) for m in METRIC_FIELDS}
            if row["name"] in ("mean", "min", "max", "variance"):
                aggs[row["name"]] = vals
            else:
                pairs.append(PairMetrics(row["name"], **vals))
    return pairs, aggs


# ---------------------------------------------------------------------------
# query similarity
# ---------------------------------------------------------------------------


def _cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine between flattened tensors, one value per batch row for 4-D input."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"query shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 4:
        a, b = a.reshape(a.shape[0], -1), b.reshape(b.shape[0], -1)
    else:
        a, b = a.reshape(1, -1), b.reshape(1, -1)
    den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    return np.where(den > 0, (a * b).sum(axis=1) / np.where(den > 0, den, 1.0), 0.0)


def layer_buckets(layers) -> dict:
    """Split an ordered layer list into early / mid / last thirds."""
    parts = np.array_split(np.asarray(sorted(layers)), 3)
    return {name: [int(l) for l in part] for name, part in zip(("early", "mid", "last"), parts)}


def query_similarity(one_step, multi_step) -> dict:
    """Mean cosine between one-step queries and each step's queries.

    Returns ``{"per_layer": {l: mean}, "early": .., "mid": .., "last": ..,
    "global": ..}``. Bucket and global means weight layers uniformly; an
    empty bucket (fewer than three layers) is reported as NaN.
    """
    layers = one_step.layers
    per_layer = {}
    for l in layers:
        sims = [float(_cosine_rows(one_step[l], q[l]).mean()) for q in multi_step]
        if not sims:
            raise ValueError("multi_step list is empty")
        per_layer[l] = float(np.mean(sims))
    table = {"per_layer": per_layer}
    for name, ls in layer_buckets(layers).items():
        table[name] = float(np.mean([per_layer[l] for l in ls])) if ls else float("nan")
    table["global"] = float(np.mean(list(per_layer.values())))
    return table


BUCKETS = ("early", "mid", "last", "global")


def write_similarity_csv(path, with_lcd: dict, without_lcd: dict) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bucket", "with_lcd", "without_lcd"])
        for b in BUCKETS:
            w.writerow([b, repr(with_lcd[b]), repr(without_lcd[b])])
    return path


def read_similarity_csv(path) -> dict:
    with open(path, newline="") as f:
        return {r["bucket"]: (float(r["with_lcd"]), float(r["without_lcd"])) for r in csv.DictReader(f)}


# ---------------------------------------------------------------------------
# timing
# ---------------------------------------------------------------------------


@dataclass
class TimingStats:
    mean_s: float
    max_s: float
    min_s: float
    variance: float
    repeats: int
    forward_passes: int | None = None
    times: list = field(default_factory=list, repr=False)


def _passes_of(result):
    if isinstance(result, (int, np.integer)):
        return int(result)
    return getattr(result, "forward_passes", None)


def bench(runner: Callable[[], object], repeats: int = 100, warmup: int = 1) -> TimingStats:
    """Wall-clock statistics of ``runner()`` over ``repeats`` calls.

    ``runner`` may return a forward-pass count (or an object carrying
    ``forward_passes``); the last run's count is reported. Variance is the
    sample variance over repeats.
    """
    return bench_many({"_": runner}, repeats, warmup)["_"]


def bench_many(runners: dict, repeats: int = 100, warmup: int = 1) -> dict:
    """Time several runners round-robin, so drift in machine load hits each alike.

    The garbage collector is paused while timing, as :mod:`timeit` does.
    Returns ``{name: TimingStats}`` in the order given.
    """
    if repeats < 2:
        raise ValueError("repeats must be >= 2")
    for _ in range(warmup):
        for run in runners.values():
            run()
    times = {k: [] for k in runners}
    passes = dict.fromkeys(runners)
    was_on = gc.isenabled()
    gc.disable()
    try:
        for _ in range(repeats):
            for k, run in runners.items():
                t0 = time.perf_counter()
                res = run()
                times[k].append(time.perf_counter() - t0)
                passes[k] = _passes_of(res)
            gc.collect()
    finally:
        if was_on:
            gc.enable()
    return {k: TimingStats(statistics.fmean(t), max(t), min(t), statistics.variance(t), repeats, passes[k], t)
            for k, t in times.items()}


def write_timing_csv(path, rows: dict, baseline: str = "baseline") -> Path:
    """Rows ``configuration, mean_s, max_s, min_s, variance, forward_passes, ratio``
    where ratio is mean over the baseline mean."""
    path = Path(path)
    base = rows[baseline].mean_s
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["configuration", "mean_s", "max_s", "min_s", "variance", "forward_passes", "ratio"])
        for name, s in rows.items():
            w.writerow([name, repr(s.mean_s), repr(s.max_s), repr(s.min_s), repr(s.variance),
                        s.forward_passes, repr(s.mean_s / base)])
    return path
