"""Procedural scene descriptions and camera poses.

World space is y-up. Camera space follows the usual graphics convention:
x right, y up, and the camera looks down -z, so a surface facing the camera
has camera-space normal (0, 0, 1).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from renderflow.errors import InvalidArgumentError

SHAPES = ("sphere", "box")
MATERIAL_PARAMS = ("roughness", "metallic", "specular")


def _check_unit(name, value):
    if not (0.0 <= float(value) <= 1.0):
        raise InvalidArgumentError(f"{name} must lie in [0, 1], got {value}")


@dataclass
class SceneObject:
    name: str
    shape: str
    center: tuple
    size: float
    albedo: tuple
    roughness: float
    metallic: float
    specular: float

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise InvalidArgumentError(f"unknown shape {self.shape!r}")
        if self.size <= 0:
            raise InvalidArgumentError("object size must be positive")
        self.center = tuple(float(c) for c in self.center)
        self.albedo = tuple(float(c) for c in self.albedo)
        if len(self.center) != 3 or len(self.albedo) != 3:
            raise InvalidArgumentError("center and albedo must be 3-vectors")
        for c in self.albedo:
            _check_unit("albedo", c)
        for p in MATERIAL_PARAMS:
            _check_unit(p, getattr(self, p))

    def bounding_radius(self) -> float:
        return self.size * (math.sqrt(3.0) if self.shape == "box" else 1.0)


@dataclass
class GroundPlane:
    height: float = 0.0
    albedo: tuple = (0.5, 0.5, 0.5)
    roughness: float = 0.8
    metallic: float = 0.0
    specular: float = 0.5
    # half side length of the square floor centred at the origin
    extent: float = 8.0

    def __post_init__(self):
        self.albedo = tuple(float(c) for c in self.albedo)
        for c in self.albedo:
            _check_unit("ground_plane.albedo", c)
        for p in MATERIAL_PARAMS:
            _check_unit(f"ground_plane.{p}", getattr(self, p))


@dataclass
class SceneSpec:
    seed: int
    objects: list
    ground_plane: GroundPlane = field(default_factory=GroundPlane)

    def __post_init__(self):
        if not self.objects:
            raise InvalidArgumentError("a scene needs at least one object")
        names = [o.name for o in self.objects]
        if len(set(names)) != len(names):
            raise InvalidArgumentError("object names must be unique")

    def find(self, name: str) -> SceneObject:
        for obj in self.objects:
            if obj.name == name:
                return obj
        raise InvalidArgumentError(f"no object named {name!r} in scene")

    def check_orbit(self, orbit_radius: float, center=(0.0, 0.0)):
        """Raise if any object reaches the horizontal camera orbit."""
        for obj in self.objects:
            d = math.hypot(obj.center[0] - center[0], obj.center[2] - center[1])
            if d + obj.bounding_radius() >= orbit_radius:
                raise InvalidArgumentError(
                    f"object {obj.name!r} intersects the camera orbit (radius {orbit_radius})")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        objects = [SceneObject(**o) for o in d["objects"]]
        return cls(seed=int(d["seed"]), objects=objects, ground_plane=GroundPlane(**d["ground_plane"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def gen_scene(seed: int, n_objects: int) -> SceneSpec:
    """Place ``n_objects`` random primitives with random materials on a floor.

    The result is a pure function of ``seed``. Objects sit on the floor, do
    not overlap, and stay within 1.8 units of the origin.
    """
    if not isinstance(n_objects, (int, np.integer)) or not 1 <= n_objects <= 8:
        raise InvalidArgumentError(f"n_objects must be an integer in [1, 8], got {n_objects!r}")
    rng = np.random.default_rng([int(seed), 0x5CE4E])
    objects = []
    placed = []
    attempts = 0
    while len(objects) < n_objects:
        attempts += 1
        shape = SHAPES[int(rng.integers(0, 2))]
        size = float(rng.uniform(0.25, 0.55))
        r = float(np.sqrt(rng.uniform(0.0, 1.0))) * (1.8 - size)
        phi = float(rng.uniform(0.0, 2 * np.pi))
        x, z = r * np.cos(phi), r * np.sin(phi)
        bound = size * (math.sqrt(2.0) if shape == "box" else 1.0)
        if attempts < 200 and any(math.hypot(x - px, z - pz) < bound + pb + 0.05 for px, pz, pb in placed):
            continue
        if attempts >= 200:
            # dense draw: shrink instead of looping forever
            size *= 0.5
            bound *= 0.5
        placed.append((x, z, bound))
        objects.append(SceneObject(
            name=f"obj{len(objects)}",
            shape=shape,
            center=(x, size, z),
            size=size,
            albedo=tuple(float(c) for c in rng.uniform(0.05, 0.95, size=3)),
            roughness=float(rng.uniform(0.05, 1.0)),
            metallic=float(rng.choice([0.0, 0.0, 1.0]) if rng.uniform() < 0.7 else rng.uniform()),
            specular=float(rng.uniform(0.2, 0.8)),
        ))
    gray = float(rng.uniform(0.3, 0.8))
    tint = rng.uniform(-0.08, 0.08, size=3)
    ground = GroundPlane(
        height=0.0,
        albedo=tuple(float(np.clip(gray + t, 0.0, 1.0)) for t in tint),
        roughness=float(rng.uniform(0.5, 1.0)),
        metallic=0.0,
        specular=float(rng.uniform(0.2, 0.6)),
    )
    return SceneSpec(seed=int(seed), objects=objects, ground_plane=ground)


@dataclass
class CameraPose:
    position: tuple
    look_at: tuple
    fov_deg: float = 45.0
    frame_index: int = 0

    def __post_init__(self):
        self.position = tuple(float(c) for c in self.position)
        self.look_at = tuple(float(c) for c in self.look_at)
        if np.allclose(self.position, self.look_at):
            raise InvalidArgumentError("camera position must differ from look_at")
        if not 10.0 < self.fov_deg < 120.0:
            raise InvalidArgumentError(f"fov_deg must lie in (10, 120), got {self.fov_deg}")
        if self.frame_index < 0:
            raise InvalidArgumentError("frame_index must be >= 0")

    def camera_to_world(self) -> np.ndarray:
        """3x3 rotation whose columns are the camera x, y, z axes in world space."""
        eye = np.asarray(self.position, dtype=np.float64)
        forward = np.asarray(self.look_at, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        up = np.array([0.0, 1.0, 0.0])
        if abs(forward @ up) > 0.999:
            up = np.array([0.0, 0.0, -1.0])
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        true_up = np.cross(right, forward)
        return np.stack([right, true_up, -forward], axis=1)

    def primary_rays(self, res):
        """Unit world-space ray directions through pixel centres, shape (H, W, 3)."""
        h, w = res
        tan_half = math.tan(math.radians(self.fov_deg) / 2)
        aspect = w / h
        xs = (2 * (np.arange(w) + 0.5) / w - 1) * tan_half * aspect
        ys = (1 - 2 * (np.arange(h) + 0.5) / h) * tan_half
        px, py = np.meshgrid(xs, ys)
        d_cam = np.stack([px, py, -np.ones_like(px)], axis=-1)
        d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
        return d_cam @ self.camera_to_world().T

    def to_dict(self) -> dict:
        return asdict(self)


def orbit_poses(n_frames, radius=4.0, height=1.6, arc_deg=60.0, start_deg=0.0,
                look_at=(0.0, 0.35, 0.0), fov_deg=45.0):
    """Camera poses evenly spaced along a horizontal arc around ``look_at``."""
    poses = []
    for i in range(n_frames):
        frac = i / (n_frames - 1) if n_frames > 1 else 0.0
        ang = math.radians(start_deg + arc_deg * frac)
        pos = (look_at[0] + radius * math.sin(ang), height, look_at[2] + radius * math.cos(ang))
        poses.append(CameraPose(position=pos, look_at=look_at, fov_deg=fov_deg, frame_index=i))
    return poses
