"""Independent reference implementations used as test oracles.

These are deliberately written as scalar pure-Python loops so they share no
code path with the vectorized library versions they check.
"""
from __future__ import annotations

import math

import numpy as np

from renderflow.scene.envmap import EnvMap
from renderflow.scene.scene import GroundPlane, SceneObject, SceneSpec

# A sample whose ray passes this close to a silhouette, face edge or the
# t_min cutoff is treated as ambiguous and skipped.
GRAZE_TOL = 1e-7


def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def _sphere_hit(center, radius, o, d, t_min):
    """(hit, ambiguous) for the ray o + t d, t > t_min."""
    oc = (o[0] - center[0], o[1] - center[1], o[2] - center[2])
    b = _dot(oc, d)
    c = _dot(oc, oc) - radius * radius
    disc = b * b - c
    if abs(disc) < GRAZE_TOL:
        return False, True
    if disc < 0:
        return False, False
    sq = math.sqrt(disc)
    roots = [-b - sq, -b + sq]
    if any(abs(r - t_min) < GRAZE_TOL for r in roots):
        return False, True
    return any(r > t_min for r in roots), False


def _box_hit(center, half, o, d, t_min):
    """Test the ray against each of the six face squares separately."""
    ambiguous = False
    for axis in range(3):
        if d[axis] == 0.0:
            continue
        for sign in (-1.0, 1.0):
            plane = center[axis] + sign * half
            t = (plane - o[axis]) / d[axis]
            if abs(t - t_min) < GRAZE_TOL:
                ambiguous = True
            if t <= t_min:
                continue
            inside = True
            for other in range(3):
                if other == axis:
                    continue
                p = o[other] + t * d[other]
                gap = half - abs(p - center[other])
                if abs(gap) < GRAZE_TOL:
                    ambiguous = True
                if gap < 0:
                    inside = False
            if inside:
                return True, ambiguous
    return False, ambiguous


def _plane_hit(height, extent, o, d, t_min):
    if d[1] == 0.0:
        return False, False
    t = (height - o[1]) / d[1]
    if abs(t - t_min) < GRAZE_TOL:
        return False, True
    if t <= t_min:
        return False, False
    px, pz = o[0] + t * d[0], o[2] + t * d[2]
    margin = extent - max(abs(px), abs(pz))
    return margin >= 0, abs(margin) < GRAZE_TOL


def scalar_occluded(scene, o, d, t_min):
    """Brute-force shadow-ray test: (occluded, ambiguous)."""
    o, d = tuple(float(v) for v in o), tuple(float(v) for v in d)
    ambiguous = False
    hit, amb = _plane_hit(scene.ground_plane.height, scene.ground_plane.extent, o, d, t_min)
    ambiguous |= amb
    blocked = hit
    for obj in scene.objects:
        if obj.shape == "sphere":
            hit, amb = _sphere_hit(obj.center, obj.size, o, d, t_min)
        else:
            hit, amb = _box_hit(obj.center, obj.size, o, d, t_min)
        ambiguous |= amb
        blocked |= hit
    return blocked, ambiguous


def ray_sphere_normal(center, radius, o, d):
    """Outward unit normal at the first hit of a ray, or None on a miss."""
    oc = np.asarray(o, float) - np.asarray(center, float)
    b = float(oc @ d)
    disc = b * b - (float(oc @ oc) - radius * radius)
    if disc < 0:
        return None
    t = -b - math.sqrt(disc)
    if t <= 0:
        return None
    p = np.asarray(o, float) + t * np.asarray(d, float)
    return (p - np.asarray(center, float)) / radius


def brute_ssim(a, b, size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Sliding-window SSIM on the channel mean, one window at a time."""
    a = np.asarray(a, dtype=np.float64).mean(axis=-1)
    b = np.asarray(b, dtype=np.float64).mean(axis=-1)
    half = (size - 1) / 2
    w = np.array([[math.exp(-((i - half) ** 2 + (j - half) ** 2) / (2 * sigma * sigma))
                   for j in range(size)] for i in range(size)])
    w /= w.sum()
    c1, c2 = k1 ** 2, k2 ** 2
    vals = []
    for r in range(a.shape[0] - size + 1):
        for c in range(a.shape[1] - size + 1):
            pa, pb = a[r:r + size, c:c + size], b[r:r + size, c:c + size]
            ma, mb = float((w * pa).sum()), float((w * pb).sum())
            va = float((w * (pa - ma) ** 2).sum())
            vb = float((w * (pb - mb) ** 2).sum())
            cov = float((w * (pa - ma) * (pb - mb)).sum())
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def lambert_scene(albedo=(0.8, 0.6, 0.4)):
    """One matte sphere resting on a matte floor."""
    ball = SceneObject(name="ball", shape="sphere", center=(0.0, 1.0, 0.0), size=1.0, albedo=albedo,
                       roughness=1.0, metallic=0.0, specular=0.0)
    floor = GroundPlane(height=0.0, albedo=(0.5, 0.5, 0.5), roughness=1.0, metallic=0.0, specular=0.0)
    return SceneSpec(seed=0, objects=[ball], ground_plane=floor)


def single_texel_env(res, row, col, radiance=10.0, ambient=0.0):
    hdr = np.full((res[0], res[1], 3), ambient, dtype=np.float32)
    hdr[row, col] = radiance
    return EnvMap(hdr)
