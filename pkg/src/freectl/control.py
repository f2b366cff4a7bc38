"""Query extraction from a reference image and injection during sampling.

One-step control runs a single extra denoiser pass on the reference, captures
the self-attention queries of the chosen layers, and substitutes them for the
live queries at every sampling step while keys and values keep coming from the
image being generated. With latent-condition decoupling (LCD) the extraction
input is the noise-free scaled latent ``(1 - sigma) * x0`` and the timestep fed
to the network is chosen independently as ``t_key``.

The iterative baseline re-extracts at every sampling step from a freshly
forward-noised reference, costing one extra pass per step.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .model import AttentionTap, InjectionError, generate
from .numerics import SeededRng, sample_gaussian
from .scheduler import SamplingGrid, forward_noise
from .trainer import frame, unframe

QSET_MAGIC = b"FCQS"
QSET_VERSION = 1


def default_layer_set(layers: int) -> tuple[int, ...]:
    """The last ``ceil(layers / 2)`` blocks."""
    return tuple(range(layers - math.ceil(layers / 2), layers))


def last_layers(layers: int, depth: int) -> tuple[int, ...]:
    return tuple(range(layers - depth, layers))


@dataclass(frozen=True)
class ControlPlan:
    """Extraction and injection settings.

    ``layer_set=None`` means the last half of the blocks, ``t_key=None`` means
    ``round(0.661 * T)``, ``extraction_label=None`` the null class
    (``"same"`` lets :func:`run` use the generation label) and
    ``step_interval=None`` the whole trajectory. ``step_interval=(t_hi, t_lo)``
    limits injection to steps whose conditioning t lies in ``[t_lo, t_hi]``.
    """

    t_key: float | None = None
    sigma: float = 0.25
    use_lcd: bool = True
    layer_set: tuple[int, ...] | None = None
    step_interval: tuple[float, float] | None = None
    extraction_label: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.sigma <= 1.0:
            raise ValueError(f"sigma must lie in [0, 1], got {self.sigma}")
        if self.layer_set is not None:
            object.__setattr__(self, "layer_set", tuple(sorted(int(l) for l in self.layer_set)))

    def resolve(self, config) -> "ControlPlan":
        """Fill defaults from a :class:`ModelConfig` and validate ranges."""
        t_key = round(0.661 * config.T) if self.t_key is None else self.t_key
        layers = default_layer_set(config.layers) if self.layer_set is None else self.layer_set
        label = config.null_class if self.extraction_label is None else self.extraction_label
        if isinstance(label, str):
            raise ValueError(f"extraction_label {label!r} must be bound to a class id first (see run)")
        if np.any(np.asarray(label) < 0) or np.any(np.asarray(label) >= config.num_classes):
            raise ValueError(f"extraction_label {label} outside the class table")
        if not 0 <= t_key <= config.T:
            raise ValueError(f"t_key {t_key} outside [0, {config.T}]")
        bad = [l for l in layers if not 0 <= l < config.layers]
        if bad:
            raise ValueError(f"layers {bad} outside [0, {config.layers})")
        return replace(self, t_key=t_key, layer_set=tuple(layers), extraction_label=label)

    def active(self, t: float) -> bool:
        if self.step_interval is None:
            return True
        hi, lo = self.step_interval
        return lo <= t <= hi

    def to_dict(self) -> dict:
        return {
            "t_key": self.t_key,
            "sigma": self.sigma,
            "use_lcd": self.use_lcd,
            "layer_set": list(self.layer_set) if self.layer_set is not None else None,
            "step_interval": list(self.step_interval) if self.step_interval is not None else None,
            "extraction_label": _plain(self.extraction_label),
        }


@dataclass(frozen=True)
class AttentionQuerySet:
    """Captured queries, ``layer -> [heads, tokens, head_dim]`` (or with a
    leading batch axis when extracted from a batch of references)."""

    queries: dict
    provenance: dict = field(default_factory=dict)

    @property
    def layers(self) -> tuple[int, ...]:
        return tuple(sorted(self.queries))

    def __getitem__(self, layer: int) -> np.ndarray:
        return self.queries[layer]

    def select(self, layers) -> dict:
        missing = [l for l in layers if l not in self.queries]
        if missing:
            raise InjectionError(f"query set lacks layers {missing}")
        return {l: self.queries[l] for l in layers}

    def save(self, path) -> Path:
        path = Path(path)
        tensors = {f"layer.{l}": self.queries[l] for l in self.layers}
        path.write_bytes(frame(QSET_MAGIC, QSET_VERSION, self.provenance, tensors))
        return path

    @classmethod
    def load(cls, path) -> "AttentionQuerySet":
        header, tensors = unframe(Path(path).read_bytes(), QSET_MAGIC, QSET_VERSION)
        return cls({int(k.split(".", 1)[1]): v for k, v in tensors.items()}, header)


def _plain(v):
    return np.asarray(v).tolist() if isinstance(v, (np.ndarray, np.integer)) else v


def reference_hash(image: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(image, dtype=np.float32).tobytes()).hexdigest()[:16]


def lcd_latent(x0: np.ndarray, sigma: float) -> np.ndarray:
    """Noise-free extraction latent ``(1 - sigma) * x0``."""
    if not 0.0 <= sigma <= 1.0:
        raise ValueError(f"sigma must lie in [0, 1], got {sigma}")
    x0 = np.asarray(x0)
    s = np.asarray(sigma, dtype=np.float64).astype(x0.dtype)
    return (1 - s) * x0


def _as_batch(model, image):
    image = np.asarray(image, dtype=model.dtype)
    single = image.ndim == 3
    return (image[None] if single else image), single


def _capture(model, latent, t, label, layers, single) -> dict:
    tap = AttentionTap.capture(layers)
    model.forward(latent, t, label, tap)
    return {l: (q[0] if single else q) for l, q in tap.captured.items()}


def extraction_latent(model, image, plan: ControlPlan, rng: SeededRng | None = None) -> np.ndarray:
    """Batch of extraction inputs for a reference image (or batch of them)."""
    x, _ = _as_batch(model, image)
    x0 = model.encode(x).astype(model.dtype)
    if plan.use_lcd:
        return lcd_latent(x0, plan.sigma)
    if rng is None:
        raise ValueError("an rng is required when use_lcd is False")
    return forward_noise(x0, plan.sigma, sample_gaussian(rng, x0.shape, model.dtype))


def extract_one_step(model, image, plan: ControlPlan, rng: SeededRng | None = None) -> AttentionQuerySet:
    """One capture pass at ``t_key`` on the LCD (or noised) reference latent.

    ``image`` is a reference in [0, 1], ``[H, W, C]`` or ``[B, H, W, C]``.
    Without LCD the latent is ``forward_noise(x0, plan.sigma, eps)`` with eps
    drawn from ``rng``; set ``sigma = t_key / T`` for the coupled form.
    """
    plan = plan.resolve(model.config)
    _, single = _as_batch(model, image)
    latent = extraction_latent(model, image, plan, rng)
    queries = _capture(model, latent, plan.t_key, plan.extraction_label, plan.layer_set, single)
    prov = {
        "t_key": plan.t_key,
        "sigma": plan.sigma,
        "use_lcd": plan.use_lcd,
        "extraction_label": _plain(plan.extraction_label),
        "reference": reference_hash(image),
        "mode": "one_step",
    }
    return AttentionQuerySet(queries, prov)


def extract_iterative(model, image, plan: ControlPlan, grid: SamplingGrid, rng: SeededRng,
                      shared_eps: bool = False) -> list[AttentionQuerySet]:
    """Per-step queries from ``forward_noise(x0, sigma_i, eps)`` at ``t_i``.

    One capture pass per sampling step. ``eps`` is redrawn every step unless
    ``shared_eps`` is set.
    """
    plan = plan.resolve(model.config)
    x, single = _as_batch(model, image)
    x0 = model.encode(x).astype(model.dtype)
    eps = sample_gaussian(rng, x0.shape, model.dtype) if shared_eps else None
    out = []
    ref = reference_hash(image)
    for i in range(grid.steps):
        t, s = float(grid.timesteps[i]), float(grid.sigmas[i])
        e = eps if shared_eps else sample_gaussian(rng, x0.shape, model.dtype)
        latent = forward_noise(x0, s, e)
        queries = _capture(model, latent, t, plan.extraction_label, plan.layer_set, single)
        out.append(AttentionQuerySet(queries, {"t": t, "sigma": s, "reference": ref, "mode": "iterative",
                                               "step": i, "extraction_label": _plain(plan.extraction_label)}))
    return out


def controlled_generate(model, label, grid: SamplingGrid, plan: ControlPlan, queries, rng: SeededRng,
                        guidance_scale: float = 1.0, batch: int | None = None) -> np.ndarray:
    """Sample with injected queries.

    ``queries`` is one :class:`AttentionQuerySet` (reused at every active
    step) or a list with one set per sampling step. Only ``plan.layer_set``
    layers are injected; steps outside ``plan.step_interval`` run untouched.
    """
    plan = plan.resolve(model.config)
    layers = plan.layer_set
    if isinstance(queries, AttentionQuerySet):
        fixed = queries.select(layers)
        per_step = None
    else:
        if len(queries) != grid.steps:
            raise ValueError(f"{len(queries)} query sets for {grid.steps} steps")
        per_step = [q.select(layers) for q in queries]
        fixed = per_step[0] if per_step else {}
    if batch is None:
        sample = next(iter(fixed.values()), None)
        batch = sample.shape[0] if sample is not None and sample.ndim == 4 else None

    def tap_for(i, t):
        if not layers or not plan.active(t):
            return None
        return AttentionTap.inject(fixed if per_step is None else per_step[i])

    return generate(model, label, grid, rng, tap_for, guidance_scale, batch=batch)


@dataclass
class RunResult:
    images: np.ndarray
    forward_passes: int
    queries: object = None


def run(model, label, grid: SamplingGrid, seed: int, mode: str = "one_step", reference=None,
        plan: ControlPlan | None = None, guidance_scale: float = 1.0, shared_eps: bool = False,
        batch: int | None = None) -> RunResult:
    """Full pipeline for one mode: ``off``, ``one_step`` or ``iterative``.

    The sampling noise comes from ``SeededRng(seed)`` in every mode, so the
    three modes start from identical noise; extraction noise uses a separate
    stream derived from the same seed.
    """
    plan = plan or ControlPlan()
    if plan.extraction_label == "same":
        plan = replace(plan, extraction_label=np.asarray(label, dtype=np.int64))
    gen_rng = SeededRng(seed)
    ext_rng = SeededRng(seed ^ 0x5EED_E17A)
    before = model.forward_calls
    queries = None
    if mode == "off":
        images = generate(model, label, grid, gen_rng, None, guidance_scale, batch=batch)
    elif reference is None:
        raise ValueError(f"mode {mode!r} needs a reference image")
    elif mode == "one_step":
        queries = extract_one_step(model, reference, plan, ext_rng)
        images = controlled_generate(model, label, grid, plan, queries, gen_rng, guidance_scale, batch)
    elif mode == "iterative":
        queries = extract_iterative(model, reference, plan, grid, ext_rng, shared_eps)
        images = controlled_generate(model, label, grid, plan, queries, gen_rng, guidance_scale, batch)
    else:
        raise ValueError(f"unknown control mode {mode!r}")
    return RunResult(images, model.forward_calls - before, queries)
