"""Procedural scenes, G-buffers, reference renders and sequence files."""
from renderflow.scene.envmap import EnvMap, gen_envmap, reinhard, tonemap_rotate
from renderflow.scene.render import (
    GBufferFrame,
    decode_normals,
    encode_normals,
    rasterize_gbuffers,
    render_reference,
)
from renderflow.scene.scene import CameraPose, GroundPlane, SceneObject, SceneSpec, gen_scene, orbit_poses

__all__ = [
    "CameraPose", "EnvMap", "GBufferFrame", "GroundPlane", "SceneObject", "SceneSpec",
    "decode_normals", "encode_normals", "gen_envmap", "gen_scene", "orbit_poses",
    "rasterize_gbuffers", "reinhard", "render_reference", "tonemap_rotate",
]
