import numpy as np
import pytest

from freectl.numerics import DimensionError, SeededRng, sample_gaussian
from freectl.scheduler import NoiseSchedule, build_grid, euler_step, forward_noise


def test_forward_noise_endpoints_and_value():
    x0 = np.array([0.3, -0.2])
    eps = np.array([1.5, 0.1])
    assert np.array_equal(forward_noise(x0, 0.0, eps), x0)
    assert np.array_equal(forward_noise(x0, 1.0, eps), eps)
    assert forward_noise(np.array([1.0]), 0.25, np.array([-1.0]))[0] == 0.5


def test_forward_noise_errors():
    with pytest.raises(DimensionError):
        forward_noise(np.ones(2), 0.5, np.ones(3))
    with pytest.raises(ValueError):
        forward_noise(np.ones(2), 1.5, np.ones(2))


def test_forward_noise_linear():
    rng = SeededRng(0)
    a, b, e1, e2 = (sample_gaussian(rng, (4, 4), np.float64) for _ in range(4))
    lhs = forward_noise(a + 2 * b, 0.3, e1 + 2 * e2)
    rhs = forward_noise(a, 0.3, e1) + 2 * forward_noise(b, 0.3, e2)
    assert np.allclose(lhs, rhs, atol=1e-12)
    assert np.array_equal(forward_noise(a, 0.3, np.zeros_like(a)), (1 - 0.3) * a)


def test_schedule_endpoints_and_monotone():
    for shift in (1.0, 3.0):
        s = NoiseSchedule(shift=shift)
        assert s.sigma_of(0) == 0.0 and s.sigma_of(1000) == 1.0
        vals = s.sigma_of(np.arange(0, 1001))
        assert np.all(np.diff(vals) > 0)


def test_build_grid_examples():
    sched = NoiseSchedule(T=1000)
    g = build_grid(sched, 1000, 0, 4)
    assert g.timesteps.tolist() == [1000, 750, 500, 250, 0]
    assert np.allclose(g.sigmas, g.timesteps / 1000)
    assert build_grid(sched, 1000, 0, 1).timesteps.tolist() == [1000, 0]
    assert len(build_grid(sched, steps=25)) == 26
    with pytest.raises(ValueError):
        build_grid(sched, 400, 1000, 4)


def test_truncated_range_modes():
    sched = NoiseSchedule()
    stop = build_grid(sched, 1000, 400, 5)
    comp = build_grid(sched, 1000, 400, 5, range_mode="compress")
    assert stop.sigmas[-1] == pytest.approx(0.4)
    assert comp.sigmas[-1] == 0.0 and comp.sigmas[0] == 1.0
    assert np.array_equal(stop.timesteps, comp.timesteps)


def test_euler_examples():
    rng = SeededRng(4)
    x0, eps = sample_gaussian(rng, (3, 3), np.float64), sample_gaussian(rng, (3, 3), np.float64)
    assert np.allclose(euler_step(eps, eps - x0, 1.0, 0.0), x0, atol=1e-15)
    assert np.array_equal(euler_step(eps, np.zeros_like(eps), 0.5, 0.2), eps)
    v = sample_gaussian(rng, (3, 3), np.float64)
    two = euler_step(euler_step(eps, v, 1.0, 0.5), v, 0.5, 0.0)
    assert np.allclose(two, euler_step(eps, v, 1.0, 0.0), atol=1e-15)


@pytest.mark.parametrize("steps", [1, 3, 25])
def test_exact_velocity_recovers_x0(steps):
    rng = SeededRng(steps)
    x0, eps = sample_gaussian(rng, (4, 4), np.float64), sample_gaussian(rng, (4, 4), np.float64)
    g = build_grid(NoiseSchedule(), steps=steps)
    x = eps
    for i in range(g.steps):
        x = euler_step(x, eps - x0, g.sigmas[i], g.sigmas[i + 1])
    assert np.allclose(x, x0, atol=1e-12)
    assert np.all(np.diff(g.sigmas) < 0)
