"""Brownian-bridge interpolants between albedo (t=0) and rendered image (t=1).

All functions work on numpy arrays and torch tensors alike; ``t`` may be a
python float or an array broadcastable against the data. Randomness always
comes from an explicit ``numpy.random.Generator``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from renderflow.errors import InvalidArgumentError

DEFAULT_SIGMA = 0.005
DEFAULT_T_MAX = 0.9999
SCHEDULES = ("uniform", "discrete4")


@dataclass
class BridgeConfig:
    sigma: float = DEFAULT_SIGMA
    schedule: str = "discrete4"
    t_grid: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75])
    t_max: float = DEFAULT_T_MAX

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.sigma < 0:
            raise InvalidArgumentError("sigma must be >= 0")
        if self.schedule not in SCHEDULES:
            raise InvalidArgumentError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if not 0.0 < self.t_max < 1.0:
            raise InvalidArgumentError("t_max must lie in (0, 1)")
        grid = [float(t) for t in self.t_grid]
        if not grid or any(not 0.0 <= t <= self.t_max for t in grid):
            raise InvalidArgumentError("every t_grid entry must lie in [0, t_max]")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise InvalidArgumentError("t_grid must be strictly increasing")
        self.t_grid = grid


@dataclass
class BridgeState:
    z0: object
    z1: object
    t: object
    eps: object
    zt: object


def _check_shapes(*arrays):
    shapes = {tuple(a.shape) for a in arrays if hasattr(a, "shape")}
    if len(shapes) > 1:
        raise InvalidArgumentError(f"shape mismatch: {sorted(shapes)}")


def _t_max_of(t):
    return float(np.max(np.asarray(t.detach().cpu() if hasattr(t, "detach") else t)))


def interpolate(z0, z1, t, sigma, eps):
    """Bridge sample (1-t) z0 + t z1 + sigma sqrt(t(1-t)) eps."""
    _check_shapes(z0, z1, eps)
    return (1 - t) * z0 + t * z1 + sigma * (t * (1 - t)) ** 0.5 * eps


def make_state(z0, z1, t, sigma, rng: np.random.Generator) -> BridgeState:
    """Draw eps from ``rng`` and build the full bridge state."""
    eps = rng.standard_normal(np.shape(z0))
    if hasattr(z0, "new_tensor"):
        eps = z0.new_tensor(eps)
    else:
        eps = eps.astype(np.asarray(z0).dtype, copy=False)
    return BridgeState(z0=z0, z1=z1, t=t, eps=eps, zt=interpolate(z0, z1, t, sigma, eps))


def velocity_target(z1, zt, t, t_max=DEFAULT_T_MAX):
    """Drift (z1 - zt) / (1 - t) that carries zt onto z1."""
    _check_shapes(z1, zt)
    if _t_max_of(t) >= t_max:
        raise InvalidArgumentError(f"t must be below t_max={t_max} (1/(1-t) singularity)")
    return (z1 - zt) / (1 - t)


def recover_endpoint(zt, v, t):
    """Endpoint estimate zt + v (1 - t)."""
    _check_shapes(zt, v)
    return zt + v * (1 - t)


def sample_timestep(config: BridgeConfig, rng: np.random.Generator, size=None):
    """Draw t from U[0, t_max] or uniformly from ``config.t_grid``."""
    if config.schedule == "uniform":
        return rng.uniform(0.0, config.t_max, size=size)
    idx = rng.integers(0, len(config.t_grid), size=size)
    return np.asarray(config.t_grid)[idx] if size is not None else float(config.t_grid[int(idx)])


def ode_step(zt, v, t, dt):
    """Euler step of the deterministic flow."""
    if t + dt > 1.0 + 1e-12:
        raise InvalidArgumentError("ode_step would step past t=1")
    return zt + v * dt


def sde_step(zt, v, t, t_next, sigma, rng: np.random.Generator, t_max=DEFAULT_T_MAX):
    """Predict-then-renoise step towards the bridge marginal at ``t_next``.

    ``t_next == 1`` returns the deterministic endpoint estimate. Otherwise the
    drift is followed to ``t_next`` and fresh noise with variance
    sigma^2 t_next (1 - t_next) is added.
    """
    if t_next == 1.0:
        if not 0.0 <= t < 1.0:
            raise InvalidArgumentError("sde_step needs 0 <= t < 1")
        return recover_endpoint(zt, v, t)
    if not (0.0 <= t < t_next <= t_max):
        raise InvalidArgumentError(f"sde_step needs t < t_next <= t_max, got t={t}, t_next={t_next}")
    out = zt + v * (t_next - t)
    if sigma == 0:
        return out
    noise = rng.standard_normal(np.shape(zt))
    noise = zt.new_tensor(noise) if hasattr(zt, "new_tensor") else noise.astype(np.asarray(zt).dtype, copy=False)
    return out + sigma * np.sqrt(t_next * (1 - t_next)) * noise
