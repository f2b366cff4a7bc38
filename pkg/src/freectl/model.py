"""A small pixel-space diffusion transformer with a self-attention query tap.

Layout: patchify -> linear patch embedding + learned positional embedding ->
``layers`` adaLN transformer blocks -> adaLN final norm -> per-patch linear
head -> unpatchify. Conditioning is ``MLP(sincos(t)) + class_table[label]``;
the last class id is the null class used for guidance and unconditional
extraction.

Every block computes queries as ``Q = modulated(LN(h)) @ Wq + bq``; the tap
captures that tensor, shaped ``[batch, heads, tokens, head_dim]``, and can
replace it while keys and values stay live.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .numerics import DimensionError, SeededRng, sample_gaussian
from .scheduler import SamplingGrid, euler_step

_GELU_C = math.sqrt(2.0 / math.pi)


class InjectionError(ValueError):
    """Override queries do not match the live query geometry."""


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 4
    dim: int = 64
    heads: int = 4
    layers: int = 8
    num_classes: int = 13  # 12 shape x color classes + null
    label_drop_prob: float = 0.1
    mlp_ratio: int = 4
    T: int = 1000
    layernorm: bool = True

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")

    @property
    def null_class(self) -> int:
        return self.num_classes - 1

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def tokens(self) -> int:
        return self.grid_size**2

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.channels

    @property
    def query_shape(self) -> tuple[int, int, int]:
        return (self.heads, self.tokens, self.head_dim)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AttentionTap:
    """Per-pass query capture and/or override.

    ``capture_layers`` records each listed layer's live queries into
    ``captured``; ``overrides`` maps layer -> queries used in place of the
    live ones. Override tensors are ``[heads, tokens, head_dim]`` (shared by
    every batch row) or ``[batch, heads, tokens, head_dim]``.
    """

    capture_layers: frozenset = frozenset()
    overrides: dict = field(default_factory=dict)
    capture_kv: bool = False
    captured: dict = field(default_factory=dict)
    captured_kv: dict = field(default_factory=dict)

    @classmethod
    def off(cls) -> "AttentionTap":
        return cls()

    @classmethod
    def capture(cls, layers, capture_kv=False) -> "AttentionTap":
        return cls(capture_layers=frozenset(int(l) for l in layers), capture_kv=capture_kv)

    @classmethod
    def inject(cls, overrides: dict, capture_kv=False) -> "AttentionTap":
        return cls(overrides=dict(overrides), capture_kv=capture_kv)

    @property
    def mode(self) -> str:
        if self.overrides:
            return "inject"
        return "capture" if self.capture_layers else "off"

    @property
    def layer_set(self) -> frozenset:
        return frozenset(self.overrides) | self.capture_layers


# ---------------------------------------------------------------------------
# elementwise pieces
# ---------------------------------------------------------------------------


def _silu(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return z * s, s


def _silu_bwd(dy, z, s):
    return dy * s * (1.0 + z * (1.0 - s))


def _gelu(z):
    """tanh-approximate GELU; also returns the tanh term for the backward."""
    th = z * z
    th *= 0.044715
    th += 1.0
    th *= z
    th *= _GELU_C
    np.tanh(th, out=th)
    out = th + 1.0
    out *= z
    out *= 0.5
    return out, th


def _gelu_bwd(dy, z, th):
    # d/dz = 0.5 (1 + th) + 0.5 z (1 - th^2) c (1 + 3a z^2)
    w = z * z
    w *= 3 * 0.044715
    w += 1.0
    w *= _GELU_C
    w *= z
    w *= 1.0 - th * th
    w += 1.0
    w += th
    w *= 0.5
    w *= dy
    return w


def _ln(x, eps, enabled):
    if not enabled:
        return x, None
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
    return xc * rstd, rstd


def _ln_bwd(dn, n, rstd):
    if rstd is None:
        return dn
    return rstd * (dn - dn.mean(axis=-1, keepdims=True) - n * (dn * n).mean(axis=-1, keepdims=True))


def timestep_embedding(t, dim: int, T: int = 1000) -> np.ndarray:
    """Sinusoidal embedding ``[cos(w t), sin(w t)]`` of t on a 0..1000 scale."""
    t = np.asarray(t, dtype=np.float64).reshape(-1) * (1000.0 / T)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    arg = t[:, None] * freqs[None, :]
    return np.concatenate([np.cos(arg), np.sin(arg)], axis=1)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict:
    rng = SeededRng(seed)
    D, P, M = cfg.dim, cfg.patch_dim, cfg.dim * cfg.mlp_ratio

    def w(fan_in, fan_out, scale=1.0):
        return (sample_gaussian(rng, (fan_in, fan_out), np.float64) * scale / math.sqrt(fan_in)).astype(dtype)

    def zeros(*shape):
        return np.zeros(shape, dtype=dtype)

    p = {
        "patch.w": w(P, D),
        "patch.b": zeros(D),
        "pos": (sample_gaussian(rng, (cfg.tokens, D), np.float64) * 0.5).astype(dtype),
        "temb.w1": w(D, D),
        "temb.b1": zeros(D),
        "temb.w2": w(D, D),
        "temb.b2": zeros(D),
        "cls": (sample_gaussian(rng, (cfg.num_classes, D), np.float64)).astype(dtype),
    }
    for l in range(cfg.layers):
        b = f"blocks.{l}."
        p[b + "mod.w"] = w(D, 6 * D, 0.1)
        p[b + "mod.b"] = zeros(6 * D)
        for name in ("q", "k", "v", "o"):
            p[b + name + ".w"] = w(D, D)
            p[b + name + ".b"] = zeros(D)
        p[b + "mlp.w1"] = w(D, M)
        p[b + "mlp.b1"] = zeros(M)
        p[b + "mlp.w2"] = w(M, D)
        p[b + "mlp.b2"] = zeros(D)
    p["final.mod.w"] = w(D, 2 * D, 0.1)
    p["final.mod.b"] = zeros(2 * D)
    p["out.w"] = w(D, P, 0.1)
    p["out.b"] = zeros(P)
    return p


class DiTModel:
    """Parameters plus forward/backward. Weights are treated as read-only
    outside the trainer; per-run state lives in the :class:`AttentionTap`.
    """

    ln_eps = 1e-5

    def __init__(self, config: ModelConfig, params: dict | None = None, seed: int = 0, dtype=np.float32):
        self.config = config
        self.params = params if params is not None else init_params(config, seed, dtype)
        self.forward_calls = 0
        self.on_forward: Callable | None = None
        self._cache = None

    @property
    def dtype(self):
        return self.params["patch.w"].dtype

    def astype(self, dtype) -> "DiTModel":
        return DiTModel(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> "DiTModel":
        return DiTModel(self.config, {k: v.copy() for k, v in self.params.items()})

    # image <-> model space (stand-in for an autoencoder)
    @staticmethod
    def encode(image: np.ndarray) -> np.ndarray:
        return 2.0 * np.asarray(image) - 1.0

    @staticmethod
    def decode(x: np.ndarray) -> np.ndarray:
        return np.clip((np.asarray(x) + 1.0) * 0.5, 0.0, 1.0)

    def patchify(self, x: np.ndarray) -> np.ndarray:
        c = self.config
        B = x.shape[0]
        g, ps = c.grid_size, c.patch_size
        x = x.reshape(B, g, ps, g, ps, c.channels).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(B, g * g, c.patch_dim)

    def unpatchify(self, tok: np.ndarray) -> np.ndarray:
        c = self.config
        B = tok.shape[0]
        g, ps = c.grid_size, c.patch_size
        x = tok.reshape(B, g, g, ps, ps, c.channels).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(B, c.image_size, c.image_size, c.channels)

    def _check_input(self, x):
        c = self.config
        want = (c.image_size, c.image_size, c.channels)
        if x.ndim != 4 or x.shape[1:] != want:
            raise DimensionError(f"expected [batch, {want}], got {x.shape}")

    def _override_for(self, tap, l, B):
        ov = np.asarray(tap.overrides[l])
        shape = self.config.query_shape
        if ov.shape == shape:
            return np.broadcast_to(ov.astype(self.dtype, copy=False), (B,) + shape)
        if ov.shape == (B,) + shape:
            return ov.astype(self.dtype, copy=False)
        raise InjectionError(f"layer {l}: override {ov.shape} does not match live queries {(B,) + shape}")

    def forward(self, x, t, labels, tap: AttentionTap | None = None, cache: bool = False) -> np.ndarray:
        """One denoiser pass; returns the velocity field with the shape of ``x``.

        ``x`` is ``[batch, H, W, C]`` in model space, ``t`` and ``labels`` are
        scalars or length-batch arrays. With ``cache=True`` the activations
        needed by :meth:`backward` are kept (overridden queries receive no
        gradient).
        """
        c, p = self.config, self.params
        dt = self.dtype
        x = np.asarray(x, dtype=dt)
        self._check_input(x)
        B = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
        labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (B,))
        if np.any(t < 0) or np.any(t > c.T):
            raise ValueError(f"timestep outside [0, {c.T}]")
        if np.any(labels < 0) or np.any(labels >= c.num_classes):
            raise ValueError("label outside class table")
        tap = tap if tap is not None else AttentionTap()
        for l in tap.overrides:
            if not 0 <= l < c.layers:
                raise InjectionError(f"layer {l} outside [0, {c.layers})")
        self.forward_calls += 1
        if self.on_forward is not None:
            self.on_forward(x, t, labels, tap)

        H, N, hd, D = c.heads, c.tokens, c.head_dim, c.dim
        scale = 1.0 / math.sqrt(hd)
        tok = self.patchify(x)
        h = tok @ p["patch.w"] + p["patch.b"] + p["pos"]
        temb = timestep_embedding(t, D, c.T).astype(dt)
        e1 = temb @ p["temb.w1"] + p["temb.b1"]
        a1, s1 = _silu(e1)
        cond = a1 @ p["temb.w2"] + p["temb.b2"] + p["cls"][labels]
        sc, ssc = _silu(cond)
        blocks = []
        for l in range(c.layers):
            b = f"blocks.{l}."
            m = sc @ p[b + "mod.w"] + p[b + "mod.b"]
            sh1, sc1, g1, sh2, sc2, g2 = (m[:, None, i * D : (i + 1) * D] for i in range(6))
            n1, r1 = _ln(h, self.ln_eps, c.layernorm)
            u1 = n1 * (1 + sc1) + sh1

            def heads_of(z):
                return z.reshape(B, N, H, hd).transpose(0, 2, 1, 3)

            q_live = heads_of(u1 @ p[b + "q.w"] + p[b + "q.b"])
            k = heads_of(u1 @ p[b + "k.w"] + p[b + "k.b"])
            v = heads_of(u1 @ p[b + "v.w"] + p[b + "v.b"])
            if l in tap.capture_layers:
                tap.captured[l] = q_live.copy()
            injected = l in tap.overrides
            q = self._override_for(tap, l, B) if injected else q_live
            if tap.capture_kv and (injected or l in tap.capture_layers):
                tap.captured_kv[l] = (k.copy(), v.copy())
            logits = (q @ k.transpose(0, 1, 3, 2)) * scale
            logits = logits - logits.max(axis=-1, keepdims=True)
            att = np.exp(logits)
            att /= att.sum(axis=-1, keepdims=True)
            ao = (att @ v).transpose(0, 2, 1, 3).reshape(B, N, D)
            o = ao @ p[b + "o.w"] + p[b + "o.b"]
            h_mid = h + g1 * o
            n2, r2 = _ln(h_mid, self.ln_eps, c.layernorm)
            u2 = n2 * (1 + sc2) + sh2
            z = u2 @ p[b + "mlp.w1"] + p[b + "mlp.b1"]
            gz, th = _gelu(z)
            y = gz @ p[b + "mlp.w2"] + p[b + "mlp.b2"]
            h_out = h_mid + g2 * y
            if cache:
                blocks.append(dict(h=h, m=m, n1=n1, r1=r1, u1=u1, q=q, k=k, v=v, att=att, ao=ao, o=o,
                                   injected=injected, n2=n2, r2=r2, u2=u2, z=z, gz=gz, th=th, y=y))
            h = h_out
        mf = sc @ p["final.mod.w"] + p["final.mod.b"]
        shf, scf = mf[:, None, :D], mf[:, None, D:]
        nf, rf = _ln(h, self.ln_eps, c.layernorm)
        uf = nf * (1 + scf) + shf
        out = uf @ p["out.w"] + p["out.b"]
        if cache:
            self._cache = dict(B=B, tok=tok, temb=temb, e1=e1, a1=a1, s1=s1, cond=cond, sc=sc, ssc=ssc,
                               labels=labels, blocks=blocks, nf=nf, rf=rf, uf=uf, mf=mf)
        else:
            self._cache = None
        return self.unpatchify(out)

    def backward(self, dvel: np.ndarray) -> dict:
        """Gradients of ``sum(dvel * velocity)`` w.r.t. all parameters for the
        last ``forward(..., cache=True)`` call."""
        if self._cache is None:
            raise RuntimeError("backward() needs a preceding forward(cache=True)")
        c, p, C = self.config, self.params, self._cache
        B, H, N, hd, D = C["B"], c.heads, c.tokens, c.head_dim, c.dim
        scale = 1.0 / math.sqrt(hd)
        g = {k: np.zeros_like(v) for k, v in p.items()}
        dout = self.patchify(np.asarray(dvel, dtype=self.dtype))

        g["out.w"] = _mm_t(C["uf"], dout)
        g["out.b"] = dout.sum(axis=(0, 1))
        duf = dout @ p["out.w"].T
        D2 = D
        dshf = duf.sum(axis=1)
        dscf = (duf * C["nf"]).sum(axis=1)
        dmf = np.concatenate([dshf, dscf], axis=1)
        g["final.mod.w"] = C["sc"].T @ dmf
        g["final.mod.b"] = dmf.sum(axis=0)
        dsc = dmf @ p["final.mod.w"].T
        dnf = duf * (1 + C["mf"][:, None, D2:])
        dh = _ln_bwd(dnf, C["nf"], C["rf"])

        def merge(z):
            return z.transpose(0, 2, 1, 3).reshape(B, N, D)

        for l in reversed(range(c.layers)):
            b = f"blocks.{l}."
            K = C["blocks"][l]
            m = K["m"]
            sc1, g1, sc2, g2 = (m[:, None, i * D : (i + 1) * D] for i in (1, 2, 4, 5))
            dm = np.zeros_like(m)
            # MLP branch
            dm[:, 5 * D : 6 * D] = (dh * K["y"]).sum(axis=1)
            dy = dh * g2
            g[b + "mlp.w2"] = _mm_t(K["gz"], dy)
            g[b + "mlp.b2"] = dy.sum(axis=(0, 1))
            dz = _gelu_bwd(dy @ p[b + "mlp.w2"].T, K["z"], K["th"])
            g[b + "mlp.w1"] = _mm_t(K["u2"], dz)
            g[b + "mlp.b1"] = dz.sum(axis=(0, 1))
            du2 = dz @ p[b + "mlp.w1"].T
            dm[:, 3 * D : 4 * D] = du2.sum(axis=1)
            dm[:, 4 * D : 5 * D] = (du2 * K["n2"]).sum(axis=1)
            dh_mid = dh + _ln_bwd(du2 * (1 + sc2), K["n2"], K["r2"])
            # attention branch
            dm[:, 2 * D : 3 * D] = (dh_mid * K["o"]).sum(axis=1)
            do = dh_mid * g1
            g[b + "o.w"] = _mm_t(K["ao"], do)
            g[b + "o.b"] = do.sum(axis=(0, 1))
            dao = (do @ p[b + "o.w"].T).reshape(B, N, H, hd).transpose(0, 2, 1, 3)
            att = K["att"]
            datt = dao @ K["v"].transpose(0, 1, 3, 2)
            dv = att.transpose(0, 1, 3, 2) @ dao
            dlog = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) * scale
            dk = dlog.transpose(0, 1, 3, 2) @ K["q"]
            du1 = np.zeros_like(K["u1"])
            for name, dz_h in (("k", dk), ("v", dv)):
                dzm = merge(dz_h)
                g[b + name + ".w"] = _mm_t(K["u1"], dzm)
                g[b + name + ".b"] = dzm.sum(axis=(0, 1))
                du1 += dzm @ p[b + name + ".w"].T
            if not K["injected"]:
                dq = merge(dlog @ K["k"])
                g[b + "q.w"] = _mm_t(K["u1"], dq)
                g[b + "q.b"] = dq.sum(axis=(0, 1))
                du1 += dq @ p[b + "q.w"].T
            dm[:, 0:D] = du1.sum(axis=1)
            dm[:, D : 2 * D] = (du1 * K["n1"]).sum(axis=1)
            dh = dh_mid + _ln_bwd(du1 * (1 + sc1), K["n1"], K["r1"])
            g[b + "mod.w"] = C["sc"].T @ dm
            g[b + "mod.b"] = dm.sum(axis=0)
            dsc += dm @ p[b + "mod.w"].T

        g["pos"] = dh.sum(axis=0)
        g["patch.w"] = _mm_t(C["tok"], dh)
        g["patch.b"] = dh.sum(axis=(0, 1))
        dcond = _silu_bwd(dsc, C["cond"], C["ssc"])
        np.add.at(g["cls"], C["labels"], dcond)
        g["temb.w2"] = C["a1"].T @ dcond
        g["temb.b2"] = dcond.sum(axis=0)
        de1 = _silu_bwd(dcond @ p["temb.w2"].T, C["e1"], C["s1"])
        g["temb.w1"] = C["temb"].T @ de1
        g["temb.b1"] = de1.sum(axis=0)
        return g


def _mm_t(a, b):
    """``sum_batch a[i].T @ b[i]`` for [B, N, X] and [B, N, Y] operands."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def forward(model, x, t_cond, label, tap: AttentionTap | None = None) -> np.ndarray:
    """Single-image convenience wrapper around :meth:`DiTModel.forward`."""
    return model.forward(np.asarray(x)[None], t_cond, label, tap)[0]


def count_forward_passes(model, run: Callable) -> int:
    """Number of ``forward`` invocations made while executing ``run()``."""
    before = model.forward_calls
    run()
    return model.forward_calls - before


def _duplicate_tap(tap: AttentionTap, B: int) -> AttentionTap:
    """The same tap applied to a [cond; null] batch of 2B rows."""
    ov = {}
    for l, q in tap.overrides.items():
        q = np.asarray(q)
        ov[l] = np.concatenate([q, q], axis=0) if q.ndim == 4 and q.shape[0] == B else q
    return AttentionTap(capture_layers=tap.capture_layers, overrides=ov, capture_kv=tap.capture_kv,
                        captured=tap.captured, captured_kv=tap.captured_kv)


def generate(
    model,
    label,
    grid: SamplingGrid,
    rng: SeededRng,
    tap: AttentionTap | Callable[[int, float], AttentionTap | None] | None = None,
    guidance_scale: float = 1.0,
    batch: int | None = None,
    x_init: np.ndarray | None = None,
) -> np.ndarray:
    """Sample images with the flow-matching Euler loop.

    ``label`` is one class id or one per batch row. ``tap`` is either a fixed
    tap for every step or ``tap(step_index, t)`` returning the tap for that
    step. With guidance the conditional and null branches share one batched
    forward and receive identical injected queries. Returns images in [0, 1],
    shape ``[batch, H, W, C]``; clipping happens only after the last step.
    """
    c = model.config
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    B = batch if batch is not None else labels.size
    labels = np.broadcast_to(labels, (B,)).copy()
    shape = (B, c.image_size, c.image_size, c.channels)
    x = sample_gaussian(rng, shape, model.dtype) if x_init is None else np.array(x_init, dtype=model.dtype)
    if x.shape != shape:
        raise DimensionError(f"initial noise {x.shape} does not match {shape}")
    cfg = guidance_scale != 1.0
    null = np.full(B, c.null_class)
    for i in range(grid.steps):
        t = float(grid.timesteps[i])
        step_tap = tap(i, t) if callable(tap) else tap
        if cfg:
            both_tap = _duplicate_tap(step_tap, B) if step_tap is not None else None
            v2 = model.forward(np.concatenate([x, x]), t, np.concatenate([labels, null]), both_tap)
            v_cond, v_null = v2[:B], v2[B:]
            v = v_null + guidance_scale * (v_cond - v_null)
        else:
            v = model.forward(x, t, labels, step_tap)
        x = euler_step(x, v, grid.sigmas[i], grid.sigmas[i + 1])
    return model.decode(x)
