import numpy as np
import pytest

from freectl.control import (
    AttentionQuerySet,
    ControlPlan,
    controlled_generate,
    default_layer_set,
    extract_iterative,
    extract_one_step,
    extraction_latent,
    lcd_latent,
    run,
)
from freectl.dataset import ShapeSpec, render
from freectl.model import InjectionError, generate
from freectl.numerics import SeededRng
from freectl.scheduler import NoiseSchedule, build_grid, forward_noise
from freectl.trainer import CheckpointError

REF = render(ShapeSpec("square", "red", (14, 17), 6, 0.04))
GRID = build_grid(NoiseSchedule(), steps=4)


def test_lcd_latent_endpoints():
    x0 = SeededRng(0).normal((4, 4, 3))
    assert np.array_equal(lcd_latent(x0, 0.0), x0)
    assert not lcd_latent(x0, 1.0).any()
    assert lcd_latent(np.array([2.0]), 0.25)[0] == 1.5
    with pytest.raises(ValueError):
        lcd_latent(x0, 1.5)


@pytest.mark.parametrize("sigma", [0.0, 0.25, 0.5, 1.0])
def test_forward_noise_zero_eps_equals_lcd(sigma):
    x0 = SeededRng(1).normal((8, 8, 3))
    assert np.array_equal(forward_noise(x0, sigma, np.zeros_like(x0)), lcd_latent(x0, sigma))


def test_plan_defaults_and_validation(random_model):
    cfg = random_model.config
    p = ControlPlan().resolve(cfg)
    assert p.t_key == 661 and p.layer_set == (4, 5, 6, 7) and p.extraction_label == cfg.null_class
    assert default_layer_set(7) == (3, 4, 5, 6)
    with pytest.raises(ValueError):
        ControlPlan(sigma=-0.1)
    with pytest.raises(ValueError):
        ControlPlan(layer_set=(8,)).resolve(cfg)
    with pytest.raises(ValueError):
        ControlPlan(t_key=1001).resolve(cfg)


def test_one_step_lcd_is_deterministic_single_pass(random_model):
    n0 = random_model.forward_calls
    a = extract_one_step(random_model, REF, ControlPlan())
    b = extract_one_step(random_model, REF, ControlPlan())
    assert random_model.forward_calls - n0 == 2
    assert a.layers == (4, 5, 6, 7)
    assert a[4].shape == random_model.config.query_shape
    for l in a.layers:
        assert np.array_equal(a[l], b[l])
    assert a.provenance["t_key"] == 661 and a.provenance["use_lcd"]


def test_noised_extraction_depends_on_seed(random_model):
    plan = ControlPlan(use_lcd=False)
    a = extract_one_step(random_model, REF, plan, SeededRng(1))
    b = extract_one_step(random_model, REF, plan, SeededRng(2))
    assert np.abs(a[7] - b[7]).max() > 0
    with pytest.raises(ValueError):
        extract_one_step(random_model, REF, plan)


def test_decoupling_instrumented(random_model):
    seen = []
    random_model.on_forward = lambda x, t, labels, tap: seen.append((x.copy(), t.copy(), labels.copy()))
    try:
        extract_one_step(random_model, REF, ControlPlan(t_key=300, sigma=0.25))
        extract_one_step(random_model, REF, ControlPlan(t_key=800, sigma=0.25))
        extract_one_step(random_model, REF, ControlPlan(t_key=800, sigma=0.5))
    finally:
        random_model.on_forward = None
    (x1, t1, _), (x2, t2, _), (x3, t3, _) = seen
    assert np.array_equal(x1, x2) and t1[0] == 300 and t2[0] == 800
    assert not np.array_equal(x2, x3) and np.array_equal(t2, t3)
    x0 = random_model.encode(REF).astype(np.float32)
    assert np.array_equal(x3[0], lcd_latent(x0, 0.5))


def test_iterative_extraction(random_model):
    plan = ControlPlan()
    n0 = random_model.forward_calls
    qs = extract_iterative(random_model, REF, plan, GRID, SeededRng(3))
    assert len(qs) == GRID.steps and random_model.forward_calls - n0 == GRID.steps
    assert all(q.layers == (4, 5, 6, 7) for q in qs)
    a = extract_iterative(random_model, REF, plan, GRID, SeededRng(4), shared_eps=True)
    b = extract_iterative(random_model, REF, plan, GRID, SeededRng(4), shared_eps=True)
    assert all(np.array_equal(x[5], y[5]) for x, y in zip(a, b))


def test_noop_plans_equal_uncontrolled(random_model):
    q = extract_one_step(random_model, REF, ControlPlan())
    base = generate(random_model, 2, GRID, SeededRng(9))
    empty = controlled_generate(random_model, 2, GRID, ControlPlan(layer_set=()), q, SeededRng(9))
    outside = controlled_generate(random_model, 2, GRID, ControlPlan(step_interval=(-1.0, -2.0)), q, SeededRng(9))
    assert np.array_equal(base, empty) and np.array_equal(base, outside)
    ctrl = controlled_generate(random_model, 2, GRID, ControlPlan(), q, SeededRng(9))
    assert not np.array_equal(base, ctrl)


def test_step_interval_gates_injection(random_model):
    q = extract_one_step(random_model, REF, ControlPlan())
    used = []
    random_model.on_forward = lambda x, t, labels, tap: used.append((float(t[0]), bool(tap.overrides)))
    try:
        controlled_generate(random_model, 2, GRID, ControlPlan(step_interval=(1000, 600)), q, SeededRng(9))
    finally:
        random_model.on_forward = None
    assert used == [(t, 600 <= t <= 1000) for t in GRID.timesteps[:-1]]


def test_controlled_generate_errors(random_model):
    q = extract_one_step(random_model, REF, ControlPlan(layer_set=(6, 7)))
    with pytest.raises(InjectionError):
        controlled_generate(random_model, 0, GRID, ControlPlan(), q, SeededRng(0))
    with pytest.raises(ValueError):
        controlled_generate(random_model, 0, GRID, ControlPlan(layer_set=(6, 7)), [q, q], SeededRng(0))


def test_run_forward_pass_counts(random_model):
    n = GRID.steps
    assert run(random_model, 1, GRID, 5, "off").forward_passes == n
    assert run(random_model, 1, GRID, 5, "one_step", REF).forward_passes == n + 1
    assert run(random_model, 1, GRID, 5, "iterative", REF).forward_passes == 2 * n
    assert run(random_model, 1, GRID, 5, "one_step", REF, guidance_scale=3.0).forward_passes == n + 1
    with pytest.raises(ValueError):
        run(random_model, 1, GRID, 5, "one_step")
    with pytest.raises(ValueError):
        run(random_model, 1, GRID, 5, "sideways", REF)


def test_batched_references(random_model):
    refs = np.stack([REF, REF[::-1]])
    q = extract_one_step(random_model, refs, ControlPlan())
    single = extract_one_step(random_model, REF[::-1], ControlPlan())
    assert q[4].shape == (2,) + random_model.config.query_shape
    np.testing.assert_allclose(q[6][1], single[6], rtol=1e-5, atol=1e-6)
    out = run(random_model, np.array([0, 1]), GRID, 2, "one_step", refs).images
    assert out.shape == (2, 32, 32, 3)


def test_query_set_cache_roundtrip(tmp_path, random_model):
    q = extract_one_step(random_model, REF, ControlPlan())
    path = q.save(tmp_path / "q.fcqs")
    back = AttentionQuerySet.load(path)
    assert back.layers == q.layers and back.provenance == q.provenance
    assert all(np.array_equal(back[l], q[l]) for l in q.layers)
    raw = bytearray(path.read_bytes())
    raw[-10] ^= 1
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        AttentionQuerySet.load(path)


def test_extraction_latent_matches_forward_noise(random_model):
    eps_rng, ref_rng = SeededRng(12), SeededRng(12)
    lat = extraction_latent(random_model, REF, ControlPlan(use_lcd=False, sigma=0.4), eps_rng)
    x0 = random_model.encode(REF[None]).astype(np.float32)
    eps = ref_rng.normal(x0.shape)
    assert np.array_equal(lat, forward_noise(x0, 0.4, eps))


def test_extraction_label_same_uses_generation_label(random_model):
    seen = []
    random_model.on_forward = lambda x, t, labels, tap: seen.append(labels.copy())
    try:
        run(random_model, np.array([3, 5]), GRID, 0, "one_step", np.stack([REF, REF]),
            ControlPlan(extraction_label="same"))
    finally:
        random_model.on_forward = None
    assert seen[0].tolist() == [3, 5]
    with pytest.raises(ValueError):
        ControlPlan(extraction_label="same").resolve(random_model.config)
    with pytest.raises(ValueError):
        ControlPlan(extraction_label=13).resolve(random_model.config)
