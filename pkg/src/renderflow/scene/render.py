"""G-buffer rasterization and deterministic direct-illumination reference renders.

Everything is vectorized numpy in float64. Each envmap texel acts as a
directional light with the texel's solid angle as weight, so the reference
image is an exact finite sum with binary shadow-ray visibility and no noise.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from renderflow.errors import InvalidArgumentError
from renderflow.scene.envmap import lookup, reinhard, texel_directions, texel_solid_angles

RAY_EPS = 1e-4
# GGX alpha floor; alpha = roughness**2 otherwise
ALPHA_MIN = 1e-3
DEFAULT_D_MAX = 12.0
_PAIR_CHUNK = 1 << 18


@dataclass
class GBufferFrame:
    albedo: np.ndarray
    normal: np.ndarray
    depth: np.ndarray
    material: np.ndarray
    hit_mask: np.ndarray

    @property
    def resolution(self):
        return self.albedo.shape[:2]

    def attributes(self) -> np.ndarray:
        """Normal, depth, material and hit mask stacked into 8 channels."""
        return np.concatenate([self.normal, self.depth, self.material, self.hit_mask], axis=-1)


def encode_normals(n):
    return (np.asarray(n) + 1.0) * 0.5


def decode_normals(enc):
    return np.asarray(enc) * 2.0 - 1.0


class _Geometry:
    """Flattened primitive tables for vectorized intersection."""

    def __init__(self, scene):
        objs = scene.objects
        self.n_obj = len(objs)
        self.shape = np.array([0 if o.shape == "sphere" else 1 for o in objs])
        self.center = np.array([o.center for o in objs], dtype=np.float64)
        self.size = np.array([o.size for o in objs], dtype=np.float64)
        gp = scene.ground_plane
        self.plane_h = float(gp.height)
        self.plane_extent = float(gp.extent)
        mats = [(o.albedo, (o.roughness, o.metallic, o.specular)) for o in objs]
        mats.append((gp.albedo, (gp.roughness, gp.metallic, gp.specular)))
        # row n_obj is the ground plane
        self.albedo = np.array([m[0] for m in mats], dtype=np.float64)
        self.material = np.array([m[1] for m in mats], dtype=np.float64)

    def _hit_sphere(self, k, o, d, t_min):
        oc = o - self.center[k]
        b = np.einsum("...i,...i->...", oc, d)
        c = np.einsum("...i,...i->...", oc, oc) - self.size[k] ** 2
        disc = b * b - c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t0, t1 = -b - sq, -b + sq
        t = np.where(t0 > t_min, t0, t1)
        return np.where(ok & (t > t_min), t, np.inf)

    def _hit_box(self, k, o, d, t_min):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / np.where(d == 0.0, 1e-300, d)
            lo = (self.center[k] - self.size[k] - o) * inv
            hi = (self.center[k] + self.size[k] - o) * inv
        t_near = np.minimum(lo, hi).max(axis=-1)
        t_far = np.maximum(lo, hi).min(axis=-1)
        t = np.where(t_near > t_min, t_near, t_far)
        return np.where((t_near <= t_far) & (t > t_min), t, np.inf)

    def _hit_plane(self, o, d, t_min):
        dy = d[..., 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.plane_h - o[..., 1]) / dy
        p = o + np.nan_to_num(t, nan=0.0, posinf=0.0, neginf=0.0)[..., None] * d
        inside = (np.abs(p[..., 0]) <= self.plane_extent) & (np.abs(p[..., 2]) <= self.plane_extent)
        return np.where((dy != 0) & (t > t_min) & inside, t, np.inf)

    def hit_distances(self, o, d, t_min=RAY_EPS):
        """Distance to every primitive, shape (..., n_obj + 1); inf on miss."""
        out = [self._hit_sphere(k, o, d, t_min) if self.shape[k] == 0 else self._hit_box(k, o, d, t_min)
               for k in range(self.n_obj)]
        out.append(self._hit_plane(o, d, t_min))
        return np.stack(out, axis=-1)

    def occluded(self, o, d, t_min=RAY_EPS):
        hit = np.isfinite(self._hit_plane(o, d, t_min))
        for k in range(self.n_obj):
            tk = self._hit_sphere(k, o, d, t_min) if self.shape[k] == 0 else self._hit_box(k, o, d, t_min)
            hit |= np.isfinite(tk)
        return hit

    def closest_hit(self, o, d):
        dist = self.hit_distances(o, d)
        idx = np.argmin(dist, axis=-1)
        t = np.take_along_axis(dist, idx[..., None], axis=-1)[..., 0]
        hit = np.isfinite(t)
        idx = np.where(hit, idx, -1)
        p = o + np.where(hit, t, 0.0)[..., None] * d
        normal = np.zeros_like(p)
        normal[..., 1] = 1.0
        for k in range(self.n_obj):
            sel = idx == k
            if not np.any(sel):
                continue
            local = p[sel] - self.center[k]
            if self.shape[k] == 0:
                normal[sel] = local / np.linalg.norm(local, axis=-1, keepdims=True)
            else:
                axis = np.argmax(np.abs(local), axis=-1)
                nk = np.zeros_like(local)
                nk[np.arange(len(local)), axis] = np.sign(local[np.arange(len(local)), axis])
                normal[sel] = nk
        plane_sel = idx == self.n_obj
        normal[plane_sel] = np.where(d[plane_sel][:, 1:2] > 0, [0.0, -1.0, 0.0], [0.0, 1.0, 0.0])
        return hit, idx, t, p, normal


def _check_res(res):
    h, w = res
    if h < 16 or w < 16:
        raise InvalidArgumentError(f"image resolution must be at least 16x16, got {res}")


def rasterize_gbuffers(scene, pose, res, d_max=DEFAULT_D_MAX) -> GBufferFrame:
    """One pixel-centre primary ray per pixel; nearest hit fills every buffer."""
    _check_res(res)
    geo = _Geometry(scene)
    dirs = pose.primary_rays(res)
    origin = np.broadcast_to(np.asarray(pose.position, dtype=np.float64), dirs.shape)
    hit, idx, t, _, n_world = geo.closest_hit(origin, dirs)
    safe = np.where(hit, idx, 0)
    mask = hit[..., None]
    albedo = np.where(mask, geo.albedo[safe], 0.0)
    material = np.where(mask, geo.material[safe], 0.0)
    n_cam = n_world @ pose.camera_to_world()
    n_cam = np.where(mask, n_cam, [0.0, 0.0, 1.0])
    depth = np.where(hit, np.clip(t / d_max, 0.0, 1.0), 1.0)[..., None]
    f32 = np.float32
    return GBufferFrame(
        albedo=albedo.astype(f32),
        normal=encode_normals(n_cam).astype(f32),
        depth=depth.astype(f32),
        material=material.astype(f32),
        hit_mask=mask.astype(f32),
    )


def brdf(n, l, v, albedo, roughness, metallic, specular):
    """Lambert diffuse plus Cook-Torrance GGX specular (UE4 shading model).

    Arguments broadcast; vectors are unit length in their last axis and the
    scalar material arrays carry a trailing singleton axis. Returns RGB.
    """
    h = l + v
    h = h / np.maximum(np.linalg.norm(h, axis=-1, keepdims=True), 1e-12)
    n_l = np.clip(np.sum(n * l, axis=-1, keepdims=True), 0.0, 1.0)
    n_v = np.clip(np.sum(n * v, axis=-1, keepdims=True), 1e-4, 1.0)
    n_h = np.clip(np.sum(n * h, axis=-1, keepdims=True), 0.0, 1.0)
    v_h = np.clip(np.sum(v * h, axis=-1, keepdims=True), 0.0, 1.0)

    alpha = np.maximum(roughness * roughness, ALPHA_MIN)
    a2 = alpha * alpha
    denom = n_h * n_h * (a2 - 1.0) + 1.0
    d = a2 / (np.pi * denom * denom)
    k = (roughness + 1.0) ** 2 / 8.0
    g = (n_l / (n_l * (1 - k) + k)) * (n_v / (n_v * (1 - k) + k))
    f0 = 0.08 * specular * (1.0 - metallic) + albedo * metallic
    fc = (1.0 - v_h) ** 5
    # UE4 convention: F0 below 2% is treated as pre-baked shadowing, so F0 = 0 kills the lobe
    f = f0 + (np.minimum(50.0 * f0, 1.0) - f0) * fc
    spec = d * g * f / np.maximum(4.0 * n_l * n_v, 1e-8)
    spec = np.where(n_l > 0, spec, 0.0)
    diffuse = albedo / np.pi * (1.0 - metallic)
    return diffuse + spec


def shade_points(geo, env, points, normals, view, albedo, material, light_mask=None):
    """Outgoing radiance at surface points from all envmap texels.

    ``light_mask`` (H'xW' bool) restricts the sum to a subset of texels, which
    the tests use to isolate individual lights.
    """
    res = env.resolution
    l_dirs = texel_directions(res).reshape(-1, 3)
    weights = (env.hdr.astype(np.float64) * texel_solid_angles(res)[..., None]).reshape(-1, 3)
    if light_mask is not None:
        keep = np.asarray(light_mask).reshape(-1)
        l_dirs, weights = l_dirs[keep], weights[keep]
    keep = np.any(weights > 0, axis=-1)
    l_dirs, weights = l_dirs[keep], weights[keep]
    n_pts, n_lights = len(points), len(l_dirs)
    out = np.zeros((n_pts, 3))
    if n_pts == 0 or n_lights == 0:
        return out
    rows = max(1, _PAIR_CHUNK // n_lights)
    for s in range(0, n_pts, rows):
        sl = slice(s, s + rows)
        n = normals[sl][:, None, :]
        cos = np.einsum("pi,li->pl", normals[sl], l_dirs)
        pi_, li_ = np.nonzero(cos > 0)
        if len(pi_) == 0:
            continue
        origin = points[sl][pi_] + normals[sl][pi_] * RAY_EPS
        vis = ~geo.occluded(origin, l_dirs[li_])
        pi_, li_ = pi_[vis], li_[vis]
        f = brdf(n[pi_, 0], l_dirs[li_], view[sl][pi_], albedo[sl][pi_],
                 material[sl][pi_, 0:1], material[sl][pi_, 1:2], material[sl][pi_, 2:3])
        contrib = f * cos[pi_, li_][:, None] * weights[li_]
        np.add.at(out, s + pi_, contrib)
    return out


def render_radiance(scene, env, pose, res, light_mask=None):
    """Pre-tonemap radiance image (H, W, 3) plus the hit mask."""
    _check_res(res)
    geo = _Geometry(scene)
    dirs = pose.primary_rays(res)
    origin = np.broadcast_to(np.asarray(pose.position, dtype=np.float64), dirs.shape)
    hit, idx, _, p, n = geo.closest_hit(origin, dirs)
    img = lookup(env.hdr, dirs).reshape(-1, 3)
    flat = hit.reshape(-1)
    if np.any(flat):
        sel = idx.reshape(-1)[flat]
        img[flat] = shade_points(
            geo, env,
            p.reshape(-1, 3)[flat], n.reshape(-1, 3)[flat], -dirs.reshape(-1, 3)[flat],
            geo.albedo[sel], geo.material[sel], light_mask=light_mask)
    return img.reshape(dirs.shape), hit


def render_reference(scene, env, pose, res) -> np.ndarray:
    """Tonemapped direct-illumination render in [0, 1), float32 (H, W, 3)."""
    img, _ = render_radiance(scene, env, pose, res)
    return reinhard(img).astype(np.float32)
