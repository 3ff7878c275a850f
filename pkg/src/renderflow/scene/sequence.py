"""Frame sequences: synthesis, the RFSQ binary format and dataset manifests."""
from __future__ import annotations

import copy
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from renderflow.errors import CorruptFileError, InvalidArgumentError
from renderflow.scene.envmap import EnvMap, gen_envmap, tonemap_rotate
from renderflow.scene.render import DEFAULT_D_MAX, GBufferFrame, rasterize_gbuffers, render_reference
from renderflow.scene.scene import MATERIAL_PARAMS, CameraPose, SceneSpec, gen_scene, orbit_poses

MAGIC = b"RFSQ"
VERSION = 1
_HEADER = struct.Struct("<4s6I")
# per-frame channel layout in file order
_FRAME_FIELDS = (("albedo", 3), ("normal", 3), ("depth", 1), ("material", 3), ("hit_mask", 1), ("reference", 3))


@dataclass
class Frame:
    gbuffer: GBufferFrame
    reference: np.ndarray
    pose: CameraPose


@dataclass
class Sequence:
    frames: list
    envmap: EnvMap
    envmap_ldr_per_frame: list
    seed: int
    material_interp: Optional[dict] = None
    # indices of frames in a longer parent sequence (None: 0..F-1)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.frames) < 1:
            raise InvalidArgumentError("a sequence needs at least one frame")
        if len(self.envmap_ldr_per_frame) != len(self.frames):
            raise InvalidArgumentError("envmap_ldr_per_frame must have one map per frame")
        res = self.frames[0].gbuffer.resolution
        if any(f.gbuffer.resolution != res for f in self.frames):
            raise InvalidArgumentError("all frames must share a resolution")

    def __len__(self):
        return len(self.frames)

    @property
    def resolution(self):
        return self.frames[0].gbuffer.resolution

    def stack(self, name: str, start=0, stop=None) -> np.ndarray:
        """Stack one per-frame buffer over frames[start:stop] into (F, H, W, C)."""
        frames = self.frames[start:stop]
        if name == "reference":
            return np.stack([f.reference for f in frames])
        if name == "attributes":
            return np.stack([f.gbuffer.attributes() for f in frames])
        if name == "envmap_ldr":
            return np.stack(self.envmap_ldr_per_frame[start:stop])
        return np.stack([getattr(f.gbuffer, name) for f in frames])


@dataclass
class SequenceConfig:
    frames: int = 5
    res: tuple = (64, 64)
    env_res: tuple = (16, 32)
    orbit_radius: float = 4.0
    orbit_height: float = 1.6
    orbit_arc_deg: float = 40.0
    fov_deg: float = 45.0
    n_objects: int = 4
    d_max: float = DEFAULT_D_MAX
    # {"object": name, "param": roughness|metallic|specular|albedo, "start": v, "end": v}
    material_interp: Optional[dict] = None


def _apply_interp(scene: SceneSpec, interp: dict, frac: float) -> SceneSpec:
    scene = copy.deepcopy(scene)
    obj = scene.find(interp["object"])
    start, end = interp["start"], interp["end"]
    if interp["param"] == "albedo":
        obj.albedo = tuple(float((1 - frac) * a + frac * b) for a, b in zip(start, end))
    else:
        setattr(obj, interp["param"], float((1 - frac) * start + frac * end))
    return scene


def _check_interp(scene: SceneSpec, interp: dict):
    try:
        scene.find(interp["object"])
    except KeyError as exc:
        raise InvalidArgumentError("material_interp needs an 'object' key") from exc
    param = interp.get("param")
    if param not in MATERIAL_PARAMS + ("albedo",):
        raise InvalidArgumentError(f"unknown material parameter {param!r}")
    vals = [interp["start"], interp["end"]]
    if param == "albedo":
        vals = [c for v in vals for c in v]
    if any(not 0.0 <= float(v) <= 1.0 for v in vals):
        raise InvalidArgumentError("material_interp endpoints must lie in [0, 1]")


def synth_sequence(seed: int, config: SequenceConfig = None, scene: SceneSpec = None,
                   envmap: EnvMap = None, start_deg: float = None) -> Sequence:
    """Render an orbiting-camera clip of a procedural scene.

    ``scene`` and ``envmap`` default to ``gen_scene(seed, n_objects)`` and
    ``gen_envmap(seed)``. With ``config.material_interp`` set, one material
    parameter of the named object moves linearly from ``start`` (frame 0) to
    ``end`` (last frame); everything else stays fixed.
    """
    config = config or SequenceConfig()
    if config.frames < 1:
        raise InvalidArgumentError("frames must be >= 1")
    scene = scene if scene is not None else gen_scene(seed, config.n_objects)
    scene.check_orbit(config.orbit_radius)
    if config.material_interp is not None:
        _check_interp(scene, config.material_interp)
    env = envmap if envmap is not None else gen_envmap(seed, tuple(config.env_res))
    if start_deg is None:
        start_deg = float(np.random.default_rng([int(seed), 0x0B17]).uniform(0.0, 360.0))
    poses = orbit_poses(config.frames, radius=config.orbit_radius, height=config.orbit_height,
                        arc_deg=config.orbit_arc_deg, start_deg=start_deg, fov_deg=config.fov_deg)
    frames, ldr = [], []
    res = tuple(config.res)
    for i, pose in enumerate(poses):
        sc = scene
        if config.material_interp is not None:
            frac = i / (config.frames - 1) if config.frames > 1 else 0.0
            sc = _apply_interp(scene, config.material_interp, frac)
        gb = rasterize_gbuffers(sc, pose, res, d_max=config.d_max)
        frames.append(Frame(gbuffer=gb, reference=render_reference(sc, env, pose, res), pose=pose))
        ldr.append(tonemap_rotate(env, pose))
    return Sequence(frames=frames, envmap=env, envmap_ldr_per_frame=ldr, seed=int(seed),
                    material_interp=copy.deepcopy(config.material_interp),
                    meta={"scene": scene.to_dict()})


def write_sequence(seq: Sequence, path):
    """Write ``seq`` in the RFSQ v1 layout (little-endian float32 payloads)."""
    h, w = seq.resolution
    eh, ew = seq.envmap.resolution
    parts = [_HEADER.pack(MAGIC, VERSION, len(seq), h, w, eh, ew)]
    for frame, ldr in zip(seq.frames, seq.envmap_ldr_per_frame):
        for name, _ in _FRAME_FIELDS:
            arr = frame.reference if name == "reference" else getattr(frame.gbuffer, name)
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(ldr, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(seq.envmap.hdr, dtype="<f4").tobytes())
    trailer = {
        "seed": seq.seed,
        "camera_poses": [f.pose.to_dict() for f in seq.frames],
        "material_interp": seq.material_interp,
        "meta": seq.meta,
    }
    parts.append(json.dumps(trailer, sort_keys=True).encode("utf-8"))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        for p in parts:
            fh.write(p)
    os.replace(tmp, path)


def read_sequence(path) -> Sequence:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise CorruptFileError(f"{path}: truncated header")
    magic, version, n_frames, h, w, eh, ew = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CorruptFileError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CorruptFileError(f"{path}: unsupported version {version}")
    frame_floats = sum(c for _, c in _FRAME_FIELDS) * h * w + eh * ew * 3
    payload = 4 * (n_frames * frame_floats + eh * ew * 3)
    if n_frames < 1 or len(data) < _HEADER.size + payload:
        raise CorruptFileError(f"{path}: truncated payload")
    try:
        trailer = json.loads(data[_HEADER.size + payload:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{path}: unreadable trailer") from exc
    poses = trailer.get("camera_poses", [])
    if len(poses) != n_frames:
        raise CorruptFileError(f"{path}: trailer lists {len(poses)} poses for {n_frames} frames")

    off = _HEADER.size

    def take(shape):
        nonlocal off
        n = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
        off += 4 * n
        return arr

    frames, ldr = [], []
    for i in range(n_frames):
        buf = {name: take((h, w, c)) for name, c in _FRAME_FIELDS}
        ref = buf.pop("reference")
        frames.append(Frame(gbuffer=GBufferFrame(**buf), reference=ref, pose=CameraPose(**poses[i])))
        ldr.append(take((eh, ew, 3)))
    env = EnvMap(take((eh, ew, 3)))
    return Sequence(frames=frames, envmap=env, envmap_ldr_per_frame=ldr, seed=int(trailer["seed"]),
                    material_interp=trailer.get("material_interp"), meta=trailer.get("meta", {}))


def split_of(index: int, n: int, val_frac=0.1, test_frac=0.1) -> str:
    n_test = int(round(n * test_frac))
    n_val = int(round(n * val_frac))
    if index >= n - n_test:
        return "test"
    if index >= n - n_test - n_val:
        return "val"
    return "train"


def write_dataset(out_dir, seed: int, n_sequences: int, config: SequenceConfig = None,
                  val_frac=0.1, test_frac=0.1, progress=None) -> dict:
    """Synthesize ``n_sequences`` sequence files plus ``manifest.json``.

    Sequence ``k`` uses scene/envmap seed ``seed * 100003 + k`` so datasets
    with different base seeds do not share scenes.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config = config or SequenceConfig()
    entries = []
    for k in range(n_sequences):
        seq = synth_sequence(seed * 100003 + k, config)
        name = f"seq{k}.rfsq"
        write_sequence(seq, out_dir / name)
        entries.append({"path": name, "split": split_of(k, n_sequences, val_frac, test_frac),
                        "seed": seq.seed, "frames": len(seq)})
        if progress is not None:
            progress(k + 1, n_sequences)
    manifest = {"version": 1, "seed": seed, "config": _config_dict(config), "sequences": entries}
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def _config_dict(config: SequenceConfig) -> dict:
    d = dict(config.__dict__)
    d["res"], d["env_res"] = list(config.res), list(config.env_res)
    return d


def read_manifest(data_dir) -> dict:
    with open(Path(data_dir) / "manifest.json") as fh:
        return json.load(fh)


def load_dataset(data_dir, split: Optional[str] = None) -> list:
    """Read every sequence listed in the manifest, optionally one split only."""
    manifest = read_manifest(data_dir)
    return [read_sequence(Path(data_dir) / e["path"]) for e in manifest["sequences"]
            if split is None or e["split"] == split]
