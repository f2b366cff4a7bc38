"""Flow-matching training of the toy DiT and the binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    b"FCTL"  u32 version
    u32 n    n bytes of UTF-8 JSON: ModelConfig fields, sorted keys
    u32 count
    count x { u32 name_len, name, u8 dtype_tag (1 = float32), u32 rank,
              rank x u32 dims, float32 little-endian payload }
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import csv
import json
import logging
import struct
import time
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .model import DiTModel, ModelConfig
from .dataset import sample_dataset, stack
from .numerics import SeededRng, sample_gaussian
from .scheduler import forward_noise

log = logging.getLogger(__name__)

MAGIC = b"FCTL"
FORMAT_VERSION = 1
DTYPE_F32 = 1


class CheckpointError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    steps: int = 7000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    label_drop_prob: float = 0.1
    seed: int = 0
    ema_decay: float | None = 0.999
    warmup: int = 200
    log_every: int = 50
    dataset_size: int = 10000
    dataset_seed: int = 1234
    init_seed: int = 0
    sigma_sampling: str = "uniform"

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 0 or self.lr <= 0:
            raise ValueError("batch_size >= 1, steps >= 0 and lr > 0 required")
        if not 0 <= self.label_drop_prob < 1:
            raise ValueError("label_drop_prob must be in [0, 1)")


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def fm_loss(model, images: np.ndarray, labels: np.ndarray, rng: SeededRng,
            label_drop_prob: float | None = None, grads: bool = True, sigma_sampling: str = "uniform"):
    """Flow-matching loss ``mean((v(x_s, s*T, c) - (eps - x0))**2)``.

    Per example ``s ~ U(0, 1)`` (or ``sigmoid(N(0, 1))`` with
    ``sigma_sampling="logit_normal"``), ``eps ~ N(0, I)`` and the label is replaced
    by the null class with probability ``label_drop_prob``. Returns
    ``(loss, grads_dict or None)``.
    """
    cfg = model.config
    images = np.asarray(images)
    if images.shape[0] == 0:
        raise ValueError("empty batch")
    p = cfg.label_drop_prob if label_drop_prob is None else label_drop_prob
    B = images.shape[0]
    x0 = model.encode(images).astype(model.dtype)
    if sigma_sampling == "uniform":
        sigma = rng.random((B,))
    elif sigma_sampling == "logit_normal":
        sigma = 1.0 / (1.0 + np.exp(-rng.normal((B,), np.float64)))
    else:
        raise ValueError(f"unknown sigma_sampling {sigma_sampling!r}")
    eps = sample_gaussian(rng, x0.shape, model.dtype)
    drop = rng.random((B,)) < p
    labels = np.where(drop, cfg.null_class, np.asarray(labels, dtype=np.int64))
    return flow_matching_loss(model, x0, sigma, eps, labels, grads)


def flow_matching_loss(model, x0, sigma, eps, labels, grads: bool = True):
    """Loss and gradients for fixed draws of ``sigma`` (per example) and ``eps``."""
    x_t = forward_noise(x0, np.asarray(sigma)[:, None, None, None], eps)
    v = model.forward(x_t, np.asarray(sigma) * model.config.T, labels, cache=grads)
    r = v - (eps - x0)
    loss = float(np.mean(r.astype(np.float64) ** 2))
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss (max |v| = {np.max(np.abs(v))}, labels {np.asarray(labels).tolist()})")
    if not grads:
        return loss, None
    return loss, model.backward(2.0 * r / r.size)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, p in params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def train(model: DiTModel, images: np.ndarray, labels: np.ndarray, config: TrainConfig,
          log_path=None, checkpoint_path=None) -> DiTModel:
    """Adam on the flow-matching loss; returns the trained (EMA, if enabled) model.

    Minibatches are drawn with replacement from ``images``/``labels`` using
    the config seed, so a run is reproducible in a single process. Rows of
    ``step, loss, wall_ms`` go to ``log_path`` every ``log_every`` steps.
    """
    rng = SeededRng(config.seed)
    opt = Adam(model.params, config.lr, config.beta1, config.beta2, config.adam_eps)
    ema = {k: v.copy() for k, v in model.params.items()} if config.ema_decay else None
    log_file = open(log_path, "w", newline="") if log_path else None
    writer = csv.writer(log_file) if log_file else None
    if writer:
        writer.writerow(["step", "loss", "wall_ms"])
    t0 = time.perf_counter()
    high_run = 0
    running = []
    try:
        for step in range(1, config.steps + 1):
            idx = rng.integers(0, len(images), (config.batch_size,))
            loss, grads = fm_loss(model, images[idx], labels[idx], rng, config.label_drop_prob,
                                  sigma_sampling=config.sigma_sampling)
            high_run = high_run + 1 if loss > 1e3 else 0
            if high_run >= 100:
                raise TrainingError(f"diverged: loss > 1e3 for 100 steps (step {step}, loss {loss:.3g})")
            warm = min(1.0, step / config.warmup) if config.warmup else 1.0
            # cosine decay to 10% of the peak rate
            decay = 0.55 + 0.45 * np.cos(np.pi * step / max(config.steps, 1))
            opt.step(model.params, grads, config.lr * warm * decay)
            if ema is not None:
                d = config.ema_decay
                for k, v in model.params.items():
                    ema[k] *= d
                    ema[k] += (1 - d) * v
            running.append(loss)
            if step % config.log_every == 0 or step == config.steps:
                wall = (time.perf_counter() - t0) * 1e3
                mean = float(np.mean(running))
                running.clear()
                if writer:
                    writer.writerow([step, f"{mean:.6f}", f"{wall:.1f}"])
                    log_file.flush()
                log.info("step %d loss %.5f (%.0f s)", step, mean, wall / 1e3)
    finally:
        if log_file:
            log_file.close()
    trained = DiTModel(model.config, ema) if ema is not None and config.steps > 0 else model
    if checkpoint_path is not None:
        save_checkpoint(trained, checkpoint_path)
    return trained


def train_from_scratch(config: TrainConfig = TrainConfig(), model_config: ModelConfig | None = None,
                       log_path=None, checkpoint_path=None) -> DiTModel:
    """Render the shapes dataset, initialize a model and train it."""
    images, labels = stack(sample_dataset(SeededRng(config.dataset_seed), config.dataset_size))
    model = DiTModel(model_config or ModelConfig(), seed=config.init_seed)
    return train(model, images, labels, config, log_path, checkpoint_path)


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------


def write_records(tensors: dict) -> bytes:
    out = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)) + nb)
        out.append(struct.pack("<BI", DTYPE_F32, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes, off: int = 0):
        self.buf, self.off = buf, off

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise CheckpointError("truncated file")
        b = self.buf[self.off : self.off + n]
        self.off += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_records(r: _Reader) -> dict:
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        tag, rank = r.unpack("<BI")
        if tag != DTYPE_F32:
            raise CheckpointError(f"{name}: unsupported dtype tag {tag}")
        dims = r.unpack(f"<{rank}I")
        n = int(np.prod(dims, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    return tensors


def frame(magic: bytes, version: int, header: dict, tensors: dict) -> bytes:
    """Magic, version, JSON header and tensor records followed by their CRC32."""
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    body = magic + struct.pack("<II", version, len(hb)) + hb + write_records(tensors)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def unframe(buf: bytes, magic: bytes, version: int) -> tuple[dict, dict]:
    if len(buf) < len(magic) + 12:
        raise CheckpointError("truncated file")
    if buf[: len(magic)] != magic:
        raise CheckpointError(f"bad magic {buf[:len(magic)]!r}")
    (found,) = struct.unpack_from("<I", buf, len(magic))
    if found != version:
        raise CheckpointError(f"unsupported format version {found} (expected {version})")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) & 0xFFFFFFFF != crc:
        raise CheckpointError("CRC mismatch")
    r = _Reader(buf[:-4], len(magic) + 4)
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"bad header: {e}") from e
    tensors = read_records(r)
    if r.off != len(r.buf):
        raise CheckpointError("trailing bytes after tensor records")
    return header, tensors


def checkpoint_bytes(model: DiTModel) -> bytes:
    return frame(MAGIC, FORMAT_VERSION, model.config.to_dict(), model.params)


def save_checkpoint(model: DiTModel, path) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(model))
    return path


def load_checkpoint(path) -> DiTModel:
    header, tensors = unframe(Path(path).read_bytes(), MAGIC, FORMAT_VERSION)
    try:
        cfg = ModelConfig(**header)
    except TypeError as e:
        raise CheckpointError(f"bad model config: {e}") from e
    expected = DiTModel(cfg).params  # shapes and names to validate against
    if list(expected) != list(tensors):
        raise CheckpointError("tensor names do not match the model layout")
    for k, v in expected.items():
        if v.shape != tensors[k].shape:
            raise CheckpointError(f"{k}: shape {tensors[k].shape} != {v.shape}")
    return DiTModel(cfg, tensors)


def config_dict(cfg) -> dict:
    return asdict(cfg)
