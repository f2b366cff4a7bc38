"""Flow-matching noise schedule, forward noising and the Euler sampler grid.

Convention: ``x_sigma = sigma * eps + (1 - sigma) * x0`` and the model
predicts the velocity ``v = eps - x0``, so ``dx/dsigma = v`` along a
straight line from data (sigma=0) to noise (sigma=1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import DimensionError


@dataclass(frozen=True)
class NoiseSchedule:
    T: int = 1000
    step_count: int = 25
    shift: float = 1.0

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.shift <= 0:
            raise ValueError("shift must be positive")

    def sigma_of(self, t):
        """Monotone map t in [0, T] -> sigma in [0, 1].

        Linear ``t / T`` when ``shift == 1``; otherwise the shifted form
        ``shift*s / (1 + (shift-1)*s)`` which keeps both endpoints.
        """
        s = np.asarray(t, dtype=np.float64) / self.T
        if self.shift != 1.0:
            s = self.shift * s / (1.0 + (self.shift - 1.0) * s)
        return s if s.ndim else float(s)


@dataclass(frozen=True)
class SamplingGrid:
    """Descending timesteps ``t_N > ... > t_0`` and their sigmas.

    ``timesteps`` is what the model is conditioned on; ``sigmas`` drive the
    Euler update. They coincide through ``sigma_of`` except in ``compress``
    range mode, where the sigmas are stretched to end at 0.
    """

    timesteps: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        if len(self.timesteps) != len(self.sigmas) or len(self.timesteps) < 2:
            raise ValueError("grid needs matching timesteps/sigmas of length >= 2")
        if np.any(np.diff(self.timesteps) >= 0) or np.any(np.diff(self.sigmas) >= 0):
            raise ValueError("grid must be strictly descending")

    @property
    def steps(self) -> int:
        return len(self.timesteps) - 1

    def __len__(self):
        return len(self.timesteps)


def forward_noise(x0: np.ndarray, sigma, eps: np.ndarray) -> np.ndarray:
    """Noised sample ``sigma*eps + (1-sigma)*x0``.

    ``sigma`` is a scalar or an array broadcastable against ``x0`` (one value
    per batch row, for instance).
    """
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise DimensionError(f"x0 {x0.shape} and eps {eps.shape} differ")
    s = np.asarray(sigma, dtype=np.float64)
    if np.any(s < 0.0) or np.any(s > 1.0) or np.isnan(s).any():
        raise ValueError(f"sigma must lie in [0, 1], got {sigma}")
    dtype = np.result_type(x0, eps)
    s = s.astype(dtype)
    return s * eps + (1 - s) * x0


def build_grid(
    schedule: NoiseSchedule,
    t_start: int | None = None,
    t_end: int = 0,
    steps: int | None = None,
    range_mode: str = "stop",
) -> SamplingGrid:
    """Uniform grid in t from ``t_start`` down to ``t_end`` inclusive.

    ``range_mode`` decides what a truncated range (``t_end > 0``) means:
    ``"stop"`` ends sampling at ``sigma_of(t_end)``; ``"compress"`` keeps the
    t conditioning but rescales the sigma trajectory onto ``[sigma_start, 0]``.
    """
    T = schedule.T
    t_start = T if t_start is None else t_start
    steps = schedule.step_count if steps is None else steps
    if not (T >= t_start > t_end >= 0):
        raise ValueError(f"need T >= t_start > t_end >= 0, got {t_start}, {t_end}")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    ts = np.linspace(float(t_start), float(t_end), steps + 1)
    sig = np.asarray(schedule.sigma_of(ts), dtype=np.float64)
    if range_mode == "compress":
        s_hi, s_lo = sig[0], sig[-1]
        sig = (sig - s_lo) / (s_hi - s_lo) * s_hi
    elif range_mode != "stop":
        raise ValueError(f"unknown range_mode {range_mode!r}")
    return SamplingGrid(ts, sig)


def euler_step(x_t: np.ndarray, v: np.ndarray, sigma_from: float, sigma_to: float) -> np.ndarray:
    """``x + (sigma_to - sigma_from) * v``."""
    if np.shape(x_t) != np.shape(v):
        raise DimensionError(f"x {np.shape(x_t)} and v {np.shape(v)} differ")
    if not sigma_to < sigma_from:
        raise ValueError("Euler step must decrease sigma")
    return (x_t + (sigma_to - sigma_from) * v).astype(np.result_type(x_t, v), copy=False)
