import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from renderflow.bridge import (BridgeConfig, interpolate, make_state, ode_step, recover_endpoint,
                               sample_timestep, sde_step, velocity_target)
from renderflow.errors import InvalidArgumentError

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
vec = arrays(np.float64, (6,), elements=finite)
t_open = st.floats(0.0, 0.99)


def test_default_sigma_matches_the_reported_setting():
    assert BridgeConfig().sigma == 0.005


def test_interpolate_endpoint_and_midpoint():
    z0, z1 = np.full(4, 0.0), np.full(4, 2.0)
    eps = np.ones(4)
    assert np.array_equal(interpolate(z0, z1, 0.0, 0.7, eps), z0)
    assert np.array_equal(interpolate(z0, z1, 0.5, 0.0, eps), np.ones(4))


def test_interpolate_default_noise_at_half():
    z0, z1 = np.array([0.2]), np.array([0.6])
    zt = interpolate(z0, z1, 0.5, 0.005, np.array([1.0]))
    assert zt[0] == pytest.approx(0.5 * 0.2 + 0.5 * 0.6 + 0.0025, abs=1e-15)


def test_interpolate_shape_mismatch():
    with pytest.raises(InvalidArgumentError):
        interpolate(np.zeros(3), np.zeros(4), 0.5, 0.0, np.zeros(3))


@given(z0=vec, z1=vec)
def test_noise_free_endpoint_at_one(z0, z1):
    assert np.allclose(interpolate(z0, z1, 1.0, 0.0, np.zeros(6)), z1, atol=1e-12)


@given(z0=vec, z1=vec, eps=vec, t=st.sampled_from([0.0, 0.25, 0.5, 0.75]), sigma=st.floats(0, 1))
def test_inverse_pair(z0, z1, eps, t, sigma):
    zt = interpolate(z0, z1, t, sigma, eps)
    back = recover_endpoint(zt, velocity_target(z1, zt, t), t)
    assert np.allclose(back, z1, rtol=1e-12, atol=1e-12)


@given(z0=vec, z1=vec, t=t_open)
def test_flow_matching_target_is_constant_in_t(z0, z1, t):
    zt = interpolate(z0, z1, t, 0.0, np.zeros(6))
    assert np.allclose(velocity_target(z1, zt, t), z1 - z0, rtol=1e-9, atol=1e-9)


def test_velocity_target_zero_when_at_target():
    z = np.arange(5.0)
    assert np.array_equal(velocity_target(z, z, 0.3), np.zeros(5))


def test_velocity_target_near_singularity_is_finite():
    v = velocity_target(np.array([1.0]), np.array([0.0]), 0.9998)
    assert np.isfinite(v).all() and v[0] > 1e3


def test_velocity_target_guard():
    with pytest.raises(InvalidArgumentError):
        velocity_target(np.ones(2), np.zeros(2), 0.9999)


def test_recover_special_cases():
    z0, z1 = np.array([0.1, 0.4]), np.array([0.9, 0.3])
    assert np.array_equal(recover_endpoint(z0, z1 - z0, 0.0), z1)
    assert np.array_equal(recover_endpoint(z0, np.zeros(2), 0.4), z0)


def test_make_state_uses_the_given_rng():
    z0, z1 = np.zeros((2, 3)), np.ones((2, 3))
    a = make_state(z0, z1, 0.5, 0.1, np.random.default_rng(1))
    b = make_state(z0, z1, 0.5, 0.1, np.random.default_rng(1))
    assert np.array_equal(a.eps, b.eps) and np.array_equal(a.zt, b.zt)
    assert np.array_equal(a.zt, interpolate(z0, z1, 0.5, 0.1, a.eps))


def test_make_state_with_tensors():
    z0 = torch.zeros(2, 3, dtype=torch.float64)
    s = make_state(z0, torch.ones_like(z0), 0.25, 0.005, np.random.default_rng(0))
    assert isinstance(s.eps, torch.Tensor) and s.zt.dtype == torch.float64


def test_discrete_schedule_frequencies():
    t = sample_timestep(BridgeConfig(), np.random.default_rng(0), size=100_000)
    for g in (0.0, 0.25, 0.5, 0.75):
        assert abs(np.mean(t == g) - 0.25) < 0.01


def test_uniform_schedule_mean():
    cfg = BridgeConfig(schedule="uniform")
    t = sample_timestep(cfg, np.random.default_rng(0), size=100_000)
    assert abs(t.mean() - cfg.t_max / 2) < 0.01
    assert t.min() >= 0 and t.max() <= cfg.t_max


def test_sample_timestep_reproducible_and_scalar():
    cfg = BridgeConfig()
    a = [sample_timestep(cfg, r) for r in [np.random.default_rng(4)] for _ in range(10)]
    b = [sample_timestep(cfg, r) for r in [np.random.default_rng(4)] for _ in range(10)]
    assert a == b and all(isinstance(x, float) for x in a)


@pytest.mark.parametrize("kwargs", [dict(sigma=-0.1), dict(schedule="cosine"), dict(t_max=1.0),
                                    dict(t_grid=[0.0, 0.5, 0.25]), dict(t_grid=[0.0, 1.0]), dict(t_grid=[])])
def test_bridge_config_invariants(kwargs):
    with pytest.raises(InvalidArgumentError):
        BridgeConfig(**kwargs)


@given(z=vec, t=st.floats(0, 0.5))
def test_ode_step_properties(z, t):
    v = np.linspace(-1, 1, 6)
    assert np.array_equal(ode_step(z, np.zeros(6), t, 0.3), z)
    two = ode_step(ode_step(z, v, t, 0.25), v, t + 0.25, 0.25)
    assert np.allclose(two, ode_step(z, v, t, 0.5), atol=1e-12)


def test_ode_step_full_remaining_interval_hits_target():
    z0, z1 = np.array([0.2, 0.8]), np.array([0.5, 0.1])
    zt = interpolate(z0, z1, 0.25, 0.0, np.zeros(2))
    assert np.allclose(ode_step(zt, velocity_target(z1, zt, 0.25), 0.25, 0.75), z1, atol=1e-15)


def test_ode_step_rejects_overshoot():
    with pytest.raises(InvalidArgumentError):
        ode_step(np.zeros(1), np.zeros(1), 0.8, 0.5)


@given(z=vec, v=vec)
def test_sde_without_noise_is_ode(z, v):
    a = sde_step(z, v, 0.25, 0.5, 0.0, np.random.default_rng(0))
    assert np.array_equal(a, ode_step(z, v, 0.25, 0.25))


def test_sde_terminal_step_ignores_rng():
    z, v = np.array([0.3]), np.array([0.2])
    a = sde_step(z, v, 0.5, 1.0, 0.5, np.random.default_rng(0))
    b = sde_step(z, v, 0.5, 1.0, 0.5, np.random.default_rng(99))
    assert np.array_equal(a, b) and np.array_equal(a, recover_endpoint(z, v, 0.5))


@pytest.mark.parametrize("t,t_next", [(0.5, 0.25), (0.5, 0.5), (0.0, 0.99999)])
def test_sde_step_ordering(t, t_next):
    with pytest.raises(InvalidArgumentError):
        sde_step(np.zeros(1), np.zeros(1), t, t_next, 0.1, np.random.default_rng(0))


def test_sde_step_variance():
    z = np.full(1_000_000, 0.3)
    v = np.full_like(z, 0.4)
    sigma, t_next = 0.005, 0.5
    out = sde_step(z, v, 0.25, t_next, sigma, np.random.default_rng(0))
    assert np.mean(out) == pytest.approx(0.3 + 0.4 * 0.25, abs=1e-4)
    expected = sigma ** 2 * t_next * (1 - t_next)
    assert abs(np.var(out) / expected - 1) < 0.05
