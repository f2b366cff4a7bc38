"""Deterministic array arithmetic, seeded randomness and gradient checking.

Arrays are plain :class:`numpy.ndarray` values (row-major, float32 by default,
float64 for verification). The reference operations here fix their
accumulation order so results are bit-reproducible; the model uses BLAS for
speed and is checked against these.

The random stream is xoshiro256** seeded through splitmix64. Uniform doubles
take the top 53 bits of each 64-bit output. Gaussian samples use Box-Muller on
consecutive pairs ``(u1, u2)`` of uniforms, emitting ``r*cos`` then ``r*sin``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numba import njit

_U64 = np.uint64
_MASK64 = (1 << 64) - 1


class DimensionError(ValueError):
    """Raised when array shapes do not agree."""


# ---------------------------------------------------------------------------
# RNG
# ---------------------------------------------------------------------------


def splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step on a Python int. Returns ``(new_state, output)``."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x, z ^ (z >> 31)


@njit(cache=True)
def _rotl(x, k):
    return (x << _U64(k)) | (x >> _U64(64 - k))


@njit(cache=True)
def _xoshiro_fill(state, out):
    s0, s1, s2, s3 = state[0], state[1], state[2], state[3]
    for i in range(out.shape[0]):
        out[i] = _rotl(s1 * _U64(5), 7) * _U64(9)
        t = s1 << _U64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
    state[0], state[1], state[2], state[3] = s0, s1, s2, s3


class SeededRng:
    """xoshiro256** generator. Single owner; do not share across threads."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        x = self.seed
        words = []
        for _ in range(4):
            x, z = splitmix64(x)
            words.append(z)
        self._state = np.array(words, dtype=np.uint64)

    @property
    def state(self) -> tuple[int, ...]:
        return tuple(int(w) for w in self._state)

    def next_u64(self, n: int) -> np.ndarray:
        out = np.empty(int(n), dtype=np.uint64)
        _xoshiro_fill(self._state, out)
        return out

    def random(self, shape=()) -> np.ndarray:
        """Uniform float64 in [0, 1)."""
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.next_u64(n) >> _U64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return u.reshape(shape)

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=()) -> np.ndarray:
        return low + (high - low) * self.random(shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in [low, high) by scaling a uniform double."""
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        u = self.random(shape)
        return (low + np.floor(u * (high - low))).astype(np.int64)

    def normal(self, shape=(), dtype=np.float32) -> np.ndarray:
        return sample_gaussian(self, shape, dtype)

    def spawn(self) -> "SeededRng":
        """Child generator seeded from this stream's next output."""
        return SeededRng(int(self.next_u64(1)[0]))


def sample_gaussian(rng: SeededRng, shape, dtype=np.float32) -> np.ndarray:
    """I.i.d. standard normals by Box-Muller; deterministic given the seed."""
    n = int(np.prod(shape, dtype=np.int64))
    pairs = (n + 1) // 2
    u = rng.random(2 * pairs).reshape(pairs, 2)
    u1 = 1.0 - u[:, 0]  # (0, 1] keeps log finite
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * math.pi * u[:, 1]
    z = np.empty((pairs, 2), dtype=np.float64)
    z[:, 0] = r * np.cos(theta)
    z[:, 1] = r * np.sin(theta)
    return z.reshape(-1)[:n].reshape(shape).astype(dtype)


# ---------------------------------------------------------------------------
# Reference operations
# ---------------------------------------------------------------------------


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product accumulated over the inner index in ascending order.

    Each output element is ``((0 + a0*b0) + a1*b1) + ...``, the same sequence
    a naive triple loop produces, so the result is reproducible bit for bit.
    Leading batch dimensions broadcast as in :func:`numpy.matmul`.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >= 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    dtype = np.result_type(a, b)
    batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    out = np.zeros(batch + (a.shape[-2], b.shape[-1]), dtype=dtype)
    for k in range(a.shape[-1]):
        out += a[..., :, k : k + 1] * b[..., k : k + 1, :]
    return out


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with max subtraction."""
    x = np.asarray(x)
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    if np.isnan(x).any():
        raise ValueError("softmax input contains NaN")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Normalize the last axis to zero mean and unit (biased) variance."""
    x = np.asarray(x)
    d = x.shape[-1]
    if np.shape(gain) != (d,) or np.shape(bias) != (d,):
        raise DimensionError(f"gain/bias must have shape ({d},)")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    rel_errors: list[float]
    tolerance: float
    checked: list[int] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max(self.rel_errors, default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _default_step(dtype) -> float:
    return 1e-4 if np.dtype(dtype) == np.float64 else 1e-2


def grad_check(
    f: Callable[[Sequence[np.ndarray]], tuple[float, Sequence[np.ndarray]]],
    params: Sequence[np.ndarray],
    tolerance: float | None = None,
    h: float | None = None,
    max_probes: int | None = 64,
    seed: int = 0,
    floor: float = 1e-7,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``f(params)`` returns ``(value, grads)``. Parameters are perturbed in
    place and restored. Tensors larger than ``max_probes`` entries are
    probed at a seeded random subset of positions. The error per parameter is
    ``|g - g_fd| / max(|g|, |g_fd|, floor)`` taken over the probed entries
    as vectors; the floor absorbs finite-difference noise on gradients that
    vanish identically.
    """
    params = list(params)
    dtype = params[0].dtype if params else np.float64
    if tolerance is None:
        tolerance = 1e-4 if dtype == np.float64 else 1e-3
    if h is None:
        h = _default_step(dtype)
    value, grads = f(params)
    if not np.isfinite(value):
        raise ValueError(f"non-finite function value {value}")
    rng = SeededRng(seed)
    errors, counts = [], []
    for p, g in zip(params, grads):
        flat = p.reshape(-1)
        gflat = np.asarray(g, dtype=np.float64).reshape(-1)
        if max_probes is None or flat.size <= max_probes:
            idx = np.arange(flat.size)
        else:
            idx = np.unique(rng.integers(0, flat.size, (max_probes,)))
        fd = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up, _ = f(params)
            flat[i] = orig - h
            down, _ = f(params)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise ValueError("non-finite function value under perturbation")
            fd[j] = (up - down) / (2 * h)
        an = gflat[idx]
        denom = max(np.linalg.norm(an), np.linalg.norm(fd), floor)
        errors.append(float(np.linalg.norm(an - fd) / denom))
        counts.append(int(idx.size))
    return GradCheckReport(errors, tolerance, counts)
