"""Lat-long environment maps: synthesis, lookup and Reinhard tonemapping.

Texel (i, j) of an H'xW' map covers polar angle theta in
[pi*i/H', pi*(i+1)/H'] measured from +y and azimuth phi in
[2pi*j/W', 2pi*(j+1)/W'], with direction (sin t cos p, cos t, sin t sin p).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from renderflow.errors import InvalidArgumentError


@dataclass
class EnvMap:
    hdr: np.ndarray

    def __post_init__(self):
        hdr = np.asarray(self.hdr, dtype=np.float32)
        if hdr.ndim != 3 or hdr.shape[2] != 3:
            raise InvalidArgumentError(f"envmap must be H'xW'x3, got {hdr.shape}")
        if not np.all(np.isfinite(hdr)) or np.any(hdr < 0):
            raise InvalidArgumentError("envmap radiance must be finite and non-negative")
        self.hdr = hdr

    @property
    def resolution(self):
        return self.hdr.shape[:2]


def reinhard(x):
    """Reinhard operator x / (1 + x), element-wise."""
    x = np.asarray(x)
    return x / (1.0 + x)


def texel_directions(res):
    """Unit directions of texel centres, shape (H', W', 3)."""
    h, w = res
    theta = np.pi * (np.arange(h) + 0.5) / h
    phi = 2 * np.pi * (np.arange(w) + 0.5) / w
    t, p = np.meshgrid(theta, phi, indexing="ij")
    return np.stack([np.sin(t) * np.cos(p), np.cos(t), np.sin(t) * np.sin(p)], axis=-1)


def texel_solid_angles(res):
    """Midpoint-rule solid angle of each texel, shape (H', W')."""
    h, w = res
    theta = np.pi * (np.arange(h) + 0.5) / h
    d_omega = np.sin(theta) * (np.pi / h) * (2 * np.pi / w)
    return np.repeat(d_omega[:, None], w, axis=1)


def direction_to_uv(dirs, res):
    """Continuous texel coordinates (row, col) for unit directions."""
    h, w = res
    y = np.clip(dirs[..., 1], -1.0, 1.0)
    theta = np.arccos(y)
    phi = np.mod(np.arctan2(dirs[..., 2], dirs[..., 0]), 2 * np.pi)
    return theta / np.pi * h - 0.5, phi / (2 * np.pi) * w - 0.5


def lookup(hdr, dirs):
    """Bilinear lat-long lookup; wraps in azimuth, clamps at the poles."""
    h, w = hdr.shape[:2]
    v, u = direction_to_uv(dirs, (h, w))
    v = np.clip(v, 0.0, h - 1.0)
    i0 = np.floor(v).astype(np.int64)
    i1 = np.minimum(i0 + 1, h - 1)
    fv = (v - i0)[..., None]
    j0f = np.floor(u)
    fu = (u - j0f)[..., None]
    j0 = np.mod(j0f.astype(np.int64), w)
    j1 = np.mod(j0 + 1, w)
    hdr = np.asarray(hdr, dtype=np.float64)
    top = hdr[i0, j0] * (1 - fu) + hdr[i0, j1] * fu
    bot = hdr[i1, j0] * (1 - fu) + hdr[i1, j1] * fu
    return top * (1 - fv) + bot * fv


def gen_envmap(seed: int, resolution=(16, 32)) -> EnvMap:
    """Constant ambient plus 1-4 Gaussian lobes with peak radiance in [1, 20].

    Lobe centres are snapped to texel centres in the upper hemisphere so the
    stated peak radiance is actually present in the map.
    """
    h, w = resolution
    if h < 4 or w < 8:
        raise InvalidArgumentError(f"envmap resolution must be at least 4x8, got {resolution}")
    rng = np.random.default_rng([int(seed), 0xE17])
    ambient = rng.uniform(0.05, 0.3) * rng.uniform(0.85, 1.0, size=3)
    dirs = texel_directions((h, w))
    hdr = np.broadcast_to(ambient, (h, w, 3)).copy()
    upper_rows = max(1, (h // 2) - 1)
    for _ in range(int(rng.integers(1, 5))):
        i = int(rng.integers(0, upper_rows)) if h > 4 else 0
        j = int(rng.integers(0, w))
        centre = dirs[i, j]
        width = rng.uniform(0.15, 0.5)
        peak = rng.uniform(1.0, 20.0)
        color = rng.uniform(0.6, 1.0, size=3)
        color /= color.max()
        ang = np.arccos(np.clip(dirs @ centre, -1.0, 1.0))
        hdr += peak * color * np.exp(-0.5 * (ang / width) ** 2)[..., None]
    return EnvMap(hdr.astype(np.float32))


def tonemap_rotate(env: EnvMap, pose) -> np.ndarray:
    """Resample the map into the camera's frame and apply Reinhard.

    Output texel (i, j) holds the radiance arriving from the camera-space
    direction of that texel, so the result is an LDR map in [0, 1).
    """
    d_cam = texel_directions(env.resolution)
    d_world = d_cam @ pose.camera_to_world().T
    return reinhard(lookup(env.hdr, d_world)).astype(np.float32)
