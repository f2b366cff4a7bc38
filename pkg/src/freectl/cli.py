"""``freectl`` command line: train, generate, compose, eval, sweep, bench, similarity.

Every command takes ``--config run.json`` (optional) and flags that override
it. The effective configuration is written as ``config.json`` next to the
outputs. Config file layout (all sections and keys optional)::

    {
      "seed": 0, "checkpoint": "checkpoints/toy.fctl", "out": "runs/x",
      "guidance_scale": 1.0,
      "model":    {... ModelConfig fields ...},
      "schedule": {"T": 1000, "step_count": 25, "shift": 1.0},
      "grid":     {"t_start": null, "t_end": 0, "range_mode": "stop"},
      "plan":     {"t_key": 661, "sigma": 0.25, "use_lcd": true,
                   "layer_set": [4, 5, 6, 7], "step_interval": null,
                   "extraction_label": null},
      "train":    {... TrainConfig fields ...},
      "refs":     {"dir": null, "count": 50, "seed": 99991}
    }

Failures print one line ``freectl: error: <Kind>: <message>`` on stderr and
exit with status 1 (2 for usage errors). ``FREECTL_THREADS`` caps BLAS
threads (default 1).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .compose import CompositionManifest, compose
from .control import ControlPlan, extract_iterative, extract_one_step, last_layers, run
from .dataset import sample_dataset, stack
from .images import contact_sheet, read_image, to_bytes, write_image, write_ppm
from .metrics import (
    MetricsReport,
    bench_many,
    canny_image,
    compare,
    edge_f1,
    query_similarity,
    ssim,
    write_pairs_csv,
    write_similarity_csv,
    write_timing_csv,
)
from .model import DiTModel, ModelConfig
from .numerics import DimensionError, SeededRng
from .scheduler import NoiseSchedule, build_grid
from .trainer import TrainConfig, load_checkpoint, train_from_scratch


IMAGE_SUFFIXES = (".ppm", ".png")
HELD_OUT_SEED = 99991


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class RefSource:
    dir: str | None = None
    count: int = 50
    seed: int = HELD_OUT_SEED


@dataclass
class GridSpec:
    t_start: float | None = None
    t_end: float = 0
    range_mode: str = "stop"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    grid: GridSpec = field(default_factory=GridSpec)
    plan: ControlPlan = field(default_factory=ControlPlan)
    train: TrainConfig = field(default_factory=TrainConfig)
    refs: RefSource = field(default_factory=RefSource)
    seed: int = 0
    checkpoint: str | None = None
    out: str = "runs/out"
    guidance_scale: float = 1.0

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "checkpoint": self.checkpoint,
            "out": self.out,
            "guidance_scale": self.guidance_scale,
            "model": self.model.to_dict(),
            "schedule": {"T": self.schedule.T, "step_count": self.schedule.step_count, "shift": self.schedule.shift},
            "grid": asdict(self.grid),
            "plan": self.plan.to_dict(),
            "train": asdict(self.train),
            "refs": asdict(self.refs),
        }


_SECTIONS = {"model": ModelConfig, "schedule": NoiseSchedule, "grid": GridSpec, "plan": ControlPlan, "train": TrainConfig,
             "refs": RefSource}


def _section(cls, base, values: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise UsageError(f"unknown key(s) in '{name}': {', '.join(unknown)}")
    vals = dict(values)
    for k in ("layer_set", "step_interval"):
        if vals.get(k) is not None:
            vals[k] = tuple(vals[k])
    return replace(base, **vals)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the JSON file, then ``overrides`` (same nesting)."""
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise UsageError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(doc, dict):
            raise UsageError(f"config {path} must hold a JSON object")
    merged = _deep_merge(doc, overrides or {})
    cfg = RunConfig()
    top = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(merged) - top)
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    for k, v in merged.items():
        if k in _SECTIONS:
            if not isinstance(v, dict):
                raise UsageError(f"'{k}' must be an object")
            setattr(cfg, k, _section(_SECTIONS[k], getattr(cfg, k), v, k))
        else:
            setattr(cfg, k, v)
    validate(cfg)
    return cfg


def _deep_merge(a: dict, b: dict) -> dict:
    out = dict(a)
    for k, v in b.items():
        out[k] = _deep_merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def validate(cfg: RunConfig) -> None:
    c = cfg.model
    if c.image_size % c.patch_size or c.dim % c.heads:
        raise UsageError("image_size must be divisible by patch_size and dim by heads")
    if cfg.schedule.step_count < 1 or cfg.schedule.T <= 0:
        raise UsageError("schedule needs step_count >= 1 and T > 0")
    if cfg.schedule.T != c.T:
        raise UsageError(f"schedule T={cfg.schedule.T} differs from model T={c.T}")
    grid_of(cfg)
    _bound(cfg.plan, None).resolve(c)
    if cfg.refs.count < 1:
        raise UsageError("refs.count must be >= 1")
    if cfg.guidance_scale < 0:
        raise UsageError("guidance_scale must be >= 0")


def echo_config(cfg: RunConfig, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.json"
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def apply_threads() -> int:
    """Cap BLAS threads at ``FREECTL_THREADS`` (default 1); nothing else here runs in parallel."""
    raw = os.environ.get("FREECTL_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"FREECTL_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("FREECTL_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits

    threadpool_limits(n)
    return n


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------


def load_model(cfg: RunConfig, required: bool = True) -> DiTModel:
    if cfg.checkpoint is None:
        if required:
            raise UsageError("--checkpoint is required")
        return DiTModel(cfg.model, seed=cfg.seed)
    model = load_checkpoint(cfg.checkpoint)
    cfg.model = model.config  # the checkpoint's geometry wins
    return model


def grid_of(cfg: RunConfig):
    g = cfg.grid
    t_start = None if g.t_start is None else float(g.t_start)
    return build_grid(cfg.schedule, t_start, float(g.t_end), range_mode=g.range_mode)


def image_files(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"not a directory: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def read_labels(directory) -> dict:
    path = Path(directory) / "labels.csv"
    if not path.exists():
        return {}
    with open(path, newline="") as f:
        return {r["file"]: int(r["label"]) for r in csv.DictReader(f)}


def load_references(cfg: RunConfig, null_class: int):
    """``(images [B,H,W,3], labels [B], names)`` from ``refs.dir`` or the
    held-out synthetic set. Unlabeled files get the null class."""
    if cfg.refs.dir is not None:
        files = image_files(cfg.refs.dir)
        if not files:
            raise FileNotFoundError(f"no .ppm/.png images in {cfg.refs.dir}")
        labels = read_labels(cfg.refs.dir)
        images = np.stack([read_image(p) for p in files])
        return images, np.array([labels.get(p.name, null_class) for p in files]), [p.stem for p in files]
    items = sample_dataset(SeededRng(cfg.refs.seed), cfg.refs.count)
    images, labels = stack(items)
    return images, labels, [f"ref_{i:03d}" for i in range(len(items))]


def check_geometry(model: DiTModel, images: np.ndarray) -> None:
    c = model.config
    want = (c.image_size, c.image_size, c.channels)
    if images.shape[1:] != want:
        raise DimensionError(f"reference is {images.shape[1:]}, model expects {want}")


def parse_label(text: str | None, null_class: int) -> int:
    """Class id: an integer, ``kind:color`` (e.g. ``circle:red``) or ``null``."""
    from .dataset import COLORS, KINDS

    if text is None or text == "null":
        return null_class
    if ":" in text:
        kind, color = text.split(":", 1)
        if kind not in KINDS or color not in COLORS:
            raise UsageError(f"unknown shape label {text!r}")
        return KINDS.index(kind) * len(COLORS) + COLORS.index(color)
    try:
        v = int(text)
    except ValueError:
        raise UsageError(f"bad label {text!r}") from None
    if not 0 <= v <= null_class:
        raise UsageError(f"label {v} outside [0, {null_class}]")
    return v


def write_json(path: Path, payload: dict) -> Path:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


MODES = {"off": "off", "on": "one_step", "iterative": "iterative"}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    echo_config(cfg, out)
    ckpt = out / "model.fctl"
    t0 = time.perf_counter()
    train_from_scratch(cfg.train, cfg.model, log_path=out / "train_log.csv", checkpoint_path=ckpt)
    load_checkpoint(ckpt)  # validate what was written
    write_json(out / "model.json", {"checkpoint": ckpt.name, "wall_time_s": time.perf_counter() - t0,
                                    "train": asdict(cfg.train)})
    return ckpt


def cmd_generate(cfg: RunConfig, reference=None, control: str = "on", label=None, count: int = 1,
                 save_queries: bool = False) -> list[Path]:
    """Writes ``<out>/<name>.ppm`` plus a ``<name>.json`` sidecar per image.

    ``reference`` is an image file or a directory (one output per image,
    labels from its ``labels.csv``). Without a reference, ``count`` images
    of ``label`` are drawn.
    """
    if control not in MODES:
        raise UsageError(f"control must be one of {sorted(MODES)}")
    model = load_model(cfg)
    null = model.config.null_class
    grid = grid_of(cfg)
    mode = MODES[control]
    ref_images = None
    if reference is not None:
        rp = Path(reference)
        if rp.is_dir():
            ref_images, labels, names = load_references(replace(cfg, refs=RefSource(dir=str(rp))), null)
        else:
            if not rp.exists():
                raise FileNotFoundError(f"reference not found: {rp}")
            ref_images = read_image(rp)[None]
            names = [rp.stem]
            labels = np.array([parse_label(label, null)])
        if label is not None:
            labels = np.full(len(names), parse_label(label, null))
        check_geometry(model, ref_images)
    elif mode != "off":
        raise UsageError(f"control={control} needs --reference")
    else:
        names = [f"sample_{i:03d}" for i in range(count)]
        labels = np.full(count, parse_label(label, null))
    out = Path(cfg.out)
    echo_config(cfg, out)
    t0 = time.perf_counter()
    res = run(model, labels, grid, cfg.seed, mode, ref_images, cfg.plan, cfg.guidance_scale,
              batch=len(names))
    wall = time.perf_counter() - t0
    plan = _bound(cfg.plan, labels.tolist()).resolve(model.config).to_dict()
    paths = []
    for i, name in enumerate(names):
        p = write_ppm(out / f"{name}.ppm", res.images[i])
        write_json(out / f"{name}.json", {
            "seed": cfg.seed, "index": i, "batch": len(names), "label": int(labels[i]), "control": control,
            "plan": plan if mode != "off" else None, "forward_passes": res.forward_passes,
            "steps": grid.steps, "guidance_scale": cfg.guidance_scale, "wall_time_s": wall,
            "checkpoint": cfg.checkpoint,
        })
        paths.append(p)
    if save_queries and mode == "one_step":
        res.queries.save(out / "queries.fcqs")
    return paths


def cmd_compose(manifest, out, blur: bool | None = None) -> Path:
    m = CompositionManifest.load(manifest)
    if blur is not None:
        m.blur = replace(m.blur, enabled=blur)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    return write_image(out, compose(m))


def cmd_eval(ref_dir, gen_dir, out_csv, tol_px: int = 1) -> MetricsReport:
    refs, gens = image_files(ref_dir), image_files(gen_dir)
    if len(refs) != len(gens):
        raise UsageError(f"{len(refs)} reference images but {len(gens)} generated images")
    if not refs:
        raise UsageError(f"no images in {ref_dir}")
    pairs = []
    for r, g in zip(refs, gens):
        a, b = read_image(r), read_image(g)
        if a.shape != b.shape:
            raise DimensionError(f"{r.name} is {a.shape}, {g.name} is {b.shape}")
        pairs.append(compare(g.stem, a, b, tol_px))
    report = MetricsReport(pairs)
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    write_pairs_csv(out_csv, report)
    return report


def _plan_for(cfg: RunConfig, axis: str, value):
    if axis == "sigma":
        return replace(cfg.plan, sigma=float(value))
    if axis == "t_key":
        return replace(cfg.plan, t_key=float(value))
    if axis == "depth":
        return replace(cfg.plan, layer_set=last_layers(cfg.model.layers, int(value)))
    raise UsageError(f"unknown sweep axis {axis!r} (sigma, t_key, depth)")


def sweep_scores(model, refs, labels, grid, cfg: RunConfig, plans: dict, include_off: bool = True,
                 quantize: bool = False):
    """Per-plan SSIM and edge-F1 arrays against ``refs`` (same seed throughout).

    ``quantize`` scores the 8-bit images that would be written to disk.
    """
    edges = [canny_image(r) for r in refs]
    runs = {}
    if include_off:
        runs["off"] = ("off", None)
    runs.update({k: ("one_step", p) for k, p in plans.items()})
    out = {}
    for name, (mode, plan) in runs.items():
        imgs = run(model, labels, grid, cfg.seed, mode, refs, plan, cfg.guidance_scale, batch=len(refs)).images
        if quantize:
            imgs = to_bytes(imgs).astype(np.float32) / 255.0
        s = np.array([ssim(refs[i], imgs[i]) for i in range(len(refs))])
        f = np.array([edge_f1(canny_image(imgs[i]), edges[i]) for i in range(len(refs))])
        out[name] = (s, f, imgs)
    return out


def cmd_sweep(cfg: RunConfig, axis: str, values) -> Path:
    values = list(values)
    if not values:
        raise UsageError("sweep needs at least one value")
    model = load_model(cfg)
    refs, labels, _ = load_references(cfg, model.config.null_class)
    check_geometry(model, refs)
    values = [int(v) if float(v).is_integer() and axis != "sigma" else v for v in values]
    plans = {f"{axis}={v}": _plan_for(cfg, axis, v) for v in values}
    for p in plans.values():
        _bound(p, None).resolve(model.config)
    out = Path(cfg.out)
    echo_config(cfg, out)
    scores = sweep_scores(model, refs, labels, grid_of(cfg), cfg, plans, quantize=True)
    csv_path = out / f"sweep_{axis}.csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["axis", "value", "ssim_mean", "canny_f1_mean", "ssim_wins", "f1_wins", "n"])
        s0, f0, _ = scores["off"]
        w.writerow([axis, "off", repr(float(s0.mean())), repr(float(f0.mean())), "", "", len(refs)])
        for v, key in zip(values, plans):
            s, e, _ = scores[key]
            w.writerow([axis, v, repr(float(s.mean())), repr(float(e.mean())), int((s > s0).sum()),
                        int((e > f0).sum()), len(refs)])
    k = min(len(refs), 10)
    rows = [refs[:k], scores["off"][2][:k]] + [scores[key][2][:k] for key in plans]
    write_image(out / f"sweep_{axis}.png", contact_sheet([im for r in rows for im in r], cols=k))
    return csv_path


def cmd_bench(cfg: RunConfig, repeats: int = 100) -> Path:
    model = load_model(cfg, required=False)
    refs, labels, _ = load_references(replace(cfg, refs=replace(cfg.refs, count=1)), model.config.null_class)
    ref, label = refs[0], int(labels[0])
    grid = grid_of(cfg)
    out = Path(cfg.out)
    echo_config(cfg, out)
    modes = {"baseline": "off", "one_step": "one_step", "iterative": "iterative"}
    rows = bench_many({name: (lambda m=m: run(model, label, grid, cfg.seed, m, ref, cfg.plan, cfg.guidance_scale))
                       for name, m in modes.items()}, repeats=repeats)
    return write_timing_csv(out / "timing.csv", rows)


def _bound(plan: ControlPlan, label) -> ControlPlan:
    """Replace an ``extraction_label="same"`` placeholder by ``label`` (None: null class)."""
    return replace(plan, extraction_label=label) if plan.extraction_label == "same" else plan


def similarity_tables(model, refs, grid, plan: ControlPlan, seed: int, labels=None) -> tuple[dict, dict]:
    """Query cosine tables (with LCD, without LCD) averaged over references.

    Without LCD the one-step latent is ``forward_noise(x0, t_key / T, eps)``,
    i.e. the noise level is tied to the key timestep.
    """
    tables = ([], [])
    for i, ref in enumerate(refs):
        p_i = _bound(plan, None if labels is None else int(labels[i])).resolve(model.config)
        coupled = replace(p_i, use_lcd=False, sigma=p_i.t_key / model.config.T)
        rng = SeededRng(seed + i)
        multi = extract_iterative(model, ref, p_i, grid, rng)
        for j, p in enumerate((p_i, coupled)):
            one = extract_one_step(model, ref, p, rng)
            tables[j].append(query_similarity(one, multi))

    def mean_table(ts):
        keys = ("early", "mid", "last", "global")
        return {k: float(np.mean([t[k] for t in ts])) for k in keys}

    return mean_table(tables[0]), mean_table(tables[1])


def cmd_similarity(cfg: RunConfig) -> Path:
    model = load_model(cfg)
    refs, labels, _ = load_references(cfg, model.config.null_class)
    check_geometry(model, refs)
    out = Path(cfg.out)
    echo_config(cfg, out)
    with_lcd, without = similarity_tables(model, refs, grid_of(cfg), cfg.plan, cfg.seed, labels)
    return write_similarity_csv(out / "similarity.csv", with_lcd, without)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"freectl: error: UsageError: {message}\n")


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _common(p: argparse.ArgumentParser, sampling: bool = True):
    p.add_argument("--config", help="JSON run config (flags override it)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    if sampling:
        p.add_argument("--checkpoint", help="trained model (.fctl)")
        p.add_argument("--steps", type=int, help="sampling steps N")
        p.add_argument("--shift", type=float, help="schedule shift (1 = linear)")
        p.add_argument("--t-start", type=float, help="first sampling timestep (default T)")
        p.add_argument("--t-end", type=float, help="last sampling timestep (default 0)")
        p.add_argument("--range-mode", choices=("stop", "compress"),
                       help="truncated range: stop at t_end, or compress sigma onto [sigma_start, 0]")
        p.add_argument("--guidance", type=float, help="classifier-free guidance scale (1 = off)")
        p.add_argument("--t-key", type=float, help="key timestep fed during extraction")
        p.add_argument("--sigma", type=float, help="LCD latent scale")
        p.add_argument("--no-lcd", action="store_true", help="extract from a forward-noised latent instead")
        p.add_argument("--layers", type=_ints, help="comma-separated injected layers")
        p.add_argument("--depth", type=int, help="inject into the last DEPTH layers")
        p.add_argument("--interval", type=_floats, help="t_hi,t_lo window where injection is active")
        p.add_argument("--extraction-label", help="class used during extraction: id, kind:color, null (default) or same")


def _refs_args(p):
    p.add_argument("--refs", help="directory of reference images (with optional labels.csv)")
    p.add_argument("--n-refs", type=int, help="held-out synthetic references when --refs is absent")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="freectl", description="Training-free structural control for a toy diffusion transformer.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train the toy model on synthetic shapes")
    _common(p, sampling=False)
    p.add_argument("--train-steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("generate", help="sample images, optionally with structural control")
    _common(p)
    p.add_argument("--reference", help="reference image or directory")
    p.add_argument("--control", choices=sorted(MODES), default="on")
    p.add_argument("--label", help="class id, kind:color (e.g. circle:red) or null")
    p.add_argument("--count", type=int, default=1, help="images to draw when no reference is given")
    p.add_argument("--save-queries", action="store_true", help="cache one-step queries as queries.fcqs")

    p = sub.add_parser("compose", help="render a composition manifest")
    p.add_argument("manifest")
    p.add_argument("out", help="output image (.ppm or .png)")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--blur", dest="blur", action="store_true", default=None)
    g.add_argument("--no-blur", dest="blur", action="store_false")

    p = sub.add_parser("eval", help="SSIM / PSNR / edge-F1 between two image directories")
    p.add_argument("ref_dir")
    p.add_argument("gen_dir")
    p.add_argument("out_csv")
    p.add_argument("--tol", type=int, default=1, help="edge-F1 tolerance in pixels")

    p = sub.add_parser("sweep", help="vary sigma, t_key or depth over a reference set")
    _common(p)
    _refs_args(p)
    p.add_argument("--axis", choices=("sigma", "t_key", "depth"), required=True)
    p.add_argument("--values", type=_floats, required=True)

    p = sub.add_parser("bench", help="wall-clock overhead of control modes")
    _common(p)
    p.add_argument("--repeats", type=int, default=100)

    p = sub.add_parser("similarity", help="one-step vs per-step query cosine table")
    _common(p)
    _refs_args(p)
    return parser


def _overrides(a) -> dict:
    o: dict = {}

    def put(section, key, value):
        if value is not None:
            (o.setdefault(section, {}) if section else o)[key] = value

    for key, attr in (("out", "out"), ("seed", "seed"), ("checkpoint", "checkpoint"), ("guidance_scale", "guidance")):
        put(None, key, getattr(a, attr, None))
    put("schedule", "step_count", getattr(a, "steps", None))
    put("schedule", "shift", getattr(a, "shift", None))
    put("grid", "t_start", getattr(a, "t_start", None))
    put("grid", "t_end", getattr(a, "t_end", None))
    put("grid", "range_mode", getattr(a, "range_mode", None))
    put("plan", "t_key", getattr(a, "t_key", None))
    put("plan", "sigma", getattr(a, "sigma", None))
    if getattr(a, "no_lcd", False):
        put("plan", "use_lcd", False)
    put("plan", "layer_set", getattr(a, "layers", None))
    interval = getattr(a, "interval", None)
    if interval is not None:
        if len(interval) != 2:
            raise UsageError("--interval takes t_hi,t_lo")
        put("plan", "step_interval", interval)
    put("train", "steps", getattr(a, "train_steps", None))
    put("train", "batch_size", getattr(a, "batch_size", None))
    put("train", "lr", getattr(a, "lr", None))
    put("refs", "dir", getattr(a, "refs", None))
    put("refs", "count", getattr(a, "n_refs", None))
    return o


def _resolve(a) -> RunConfig:
    cfg = load_config(a.config, _overrides(a))
    depth = getattr(a, "depth", None)
    if depth is not None:
        if not 0 <= depth <= cfg.model.layers:
            raise UsageError(f"--depth must lie in [0, {cfg.model.layers}]")
        cfg.plan = replace(cfg.plan, layer_set=last_layers(cfg.model.layers, depth))
    lab = getattr(a, "extraction_label", None)
    if lab is not None:
        value = "same" if lab == "same" else parse_label(lab, cfg.model.null_class)
        cfg.plan = replace(cfg.plan, extraction_label=value)
    validate(cfg)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(message)s")
    try:
        apply_threads()
        if a.command == "compose":
            result = cmd_compose(a.manifest, a.out, a.blur)
        elif a.command == "eval":
            report = cmd_eval(a.ref_dir, a.gen_dir, a.out_csv, a.tol)
            result = f"{a.out_csv} ({len(report.pairs)} pairs, mean ssim {report.mean('ssim'):.4f})"
        else:
            cfg = _resolve(a)
            if a.command == "train":
                result = cmd_train(cfg)
            elif a.command == "generate":
                paths = cmd_generate(cfg, a.reference, a.control, a.label, a.count, a.save_queries)
                result = f"{len(paths)} image(s) in {cfg.out}"
            elif a.command == "sweep":
                result = cmd_sweep(cfg, a.axis, a.values)
            elif a.command == "bench":
                result = cmd_bench(cfg, a.repeats)
            else:
                result = cmd_similarity(cfg)
    except Exception as e:  # one machine-parseable line, nonzero status
        msg = " ".join(str(e).split()) or repr(e)
        print(f"freectl: error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 1
    print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
