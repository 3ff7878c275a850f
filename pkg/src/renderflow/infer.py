"""Deterministic 1-4 step rendering, progressive chunking and keyframe guidance."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch

from renderflow.bridge import DEFAULT_SIGMA, ode_step, recover_endpoint, sde_step, velocity_target
from renderflow.checkpoint import Checkpoint, load_checkpoint
from renderflow.data import ClipArrays, condition, nearest_keyframes, sequence_arrays
from renderflow.errors import InvalidArgumentError, UnsupportedConfigurationError

MODES = ("ode", "sde")


@dataclass
class InferConfig:
    steps: int = 1
    mode: str = "ode"
    # None: use the sigma the checkpoint was trained with
    sde_sigma: Optional[float] = None
    use_keyframes: bool = False
    keyframe_gap: int = 16
    chunk_frames: int = 5
    overlap: int = 1
    rng_seed: int = 0
    t_grid: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75])
    max_keyframes: int = 4

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 1 <= self.steps <= len(self.t_grid):
            raise InvalidArgumentError(f"steps must lie in [1, {len(self.t_grid)}]")
        if self.mode not in MODES:
            raise InvalidArgumentError(f"mode must be one of {MODES}")
        if not 1 <= self.overlap < self.chunk_frames:
            raise InvalidArgumentError("overlap must satisfy 1 <= overlap < chunk_frames")
        if self.keyframe_gap < 1:
            raise InvalidArgumentError("keyframe_gap must be >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class RenderResult:
    images: np.ndarray
    frame_seconds: list
    config: dict
    # unclamped endpoint estimates
    raw: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.images)


class NetVelocity:
    """Wraps a RenderNet as an inference-only velocity field."""

    def __init__(self, net, stage="base", sigma=DEFAULT_SIGMA, name=""):
        self.net = net.eval()
        self.stage = stage
        self.sigma = sigma
        self.name = name
        self.image_res = tuple(net.cfg.image_res)

    @classmethod
    def from_checkpoint(cls, ckpt, name=""):
        if not isinstance(ckpt, Checkpoint):
            name = name or str(ckpt)
            ckpt = load_checkpoint(ckpt)
        sigma = ckpt.train_config.get("bridge", {}).get("sigma", DEFAULT_SIGMA)
        return cls(ckpt.build_net(), stage=ckpt.stage, sigma=sigma, name=name)

    @property
    def supports_keyframes(self):
        return self.stage == "keyframe"

    def __call__(self, zt, t, cond, use_keyframes=False):
        with torch.no_grad():
            tt = torch.full((zt.shape[0],), float(t), dtype=zt.dtype)
            return self.net(zt, tt, cond, use_keyframes=use_keyframes)


class OracleVelocity:
    """Returns the exact bridge drift towards known reference frames.

    ``reference`` is indexed by absolute frame index. Useful for checking
    that every inference path reproduces its target.
    """

    supports_keyframes = True
    stage = "keyframe"
    sigma = 0.0
    image_res = None

    def __init__(self, reference):
        self.reference = torch.as_tensor(np.asarray(reference), dtype=torch.float64)

    def __call__(self, zt, t, cond, use_keyframes=False):
        idx = cond.frame_positions.long()
        z1 = self.reference[idx].to(zt.dtype)
        return velocity_target(z1, zt, t)


def _check_model_res(model, clip: ClipArrays):
    res = getattr(model, "image_res", None)
    if res is not None and tuple(clip.albedo.shape[1:3]) != tuple(res):
        raise InvalidArgumentError(f"clip resolution {clip.albedo.shape[1:3]} does not match checkpoint {res}")


def _integrate(model, z, cond, cfg: InferConfig, use_kf, rng, sigma):
    times = cfg.t_grid[:cfg.steps]
    for i, t in enumerate(times):
        v = model(z, t, cond, use_keyframes=use_kf)
        if i == len(times) - 1:
            z = recover_endpoint(z, v, t)
        elif cfg.mode == "ode":
            z = ode_step(z, v, t, times[i + 1] - t)
        else:
            z = sde_step(z, v, t, times[i + 1], sigma, rng)
    return z


def _select_keyframes(keyframes, key_positions, frames, k):
    if keyframes is None or len(key_positions) == 0:
        return None, None
    key_positions = np.asarray(key_positions)
    sel = nearest_keyframes(key_positions, float(np.mean(frames)), min(k, len(key_positions)))
    lookup = {int(p): i for i, p in enumerate(key_positions)}
    return np.asarray(keyframes)[[lookup[int(p)] for p in sel]][None], sel[None]


def render_clip(model, clip: ClipArrays, config: InferConfig = None, keyframes=None, key_positions=None,
                ref_frames=None, dtype=torch.float32) -> RenderResult:
    """Render one chunk starting from its albedo.

    ``keyframes``/``key_positions`` are ground-truth frames with absolute
    indices; ``ref_frames`` fills the first frames of the masked reference
    clip. ODE mode never touches the RNG.
    """
    cfg = config or InferConfig()
    if len(clip) > cfg.chunk_frames:
        raise InvalidArgumentError(f"clip has {len(clip)} frames, chunk_frames is {cfg.chunk_frames}")
    _check_model_res(model, clip)
    use_kf = bool(cfg.use_keyframes and keyframes is not None and len(key_positions) > 0)
    kf, kp = _select_keyframes(keyframes, key_positions, clip.frame_indices, cfg.max_keyframes) if use_kf \
        else (None, None)
    cond = condition([clip], [ref_frames], kf, kp, dtype=dtype)
    z0 = torch.as_tensor(clip.albedo[None], dtype=dtype)
    sigma = cfg.sde_sigma if cfg.sde_sigma is not None else getattr(model, "sigma", DEFAULT_SIGMA)
    rng = np.random.default_rng(cfg.rng_seed)
    t0 = time.perf_counter()
    z = _integrate(model, z0, cond, cfg, use_kf, rng, sigma)
    elapsed = time.perf_counter() - t0
    raw = z[0].detach().cpu().numpy().astype(np.float32)
    return RenderResult(images=np.clip(raw, 0.0, 1.0), frame_seconds=[elapsed / len(clip)] * len(clip),
                        config=cfg.to_dict(), raw=raw)


def chunk_starts(length: int, chunk: int, overlap: int) -> list:
    """Start indices of overlapping chunks covering ``length`` frames."""
    starts = [0]
    while starts[-1] + chunk < length:
        starts.append(starts[-1] + chunk - overlap)
    return starts


def render_progressive(model, arrays: ClipArrays, config: InferConfig = None, keyframes=None,
                       key_positions=None, first_ref=None, dtype=torch.float32) -> RenderResult:
    """Render a long sequence chunk by chunk.

    Chunk j > 0 is conditioned on the last ``overlap`` rendered frames of
    chunk j - 1 through the masked reference clip; frames rendered twice
    keep the later chunk's output. ``first_ref`` optionally conditions the
    first chunk on given frames (e.g. a ground-truth first frame).
    """
    cfg = config or InferConfig()
    n = len(arrays)
    images = np.zeros_like(arrays.albedo)
    raw = np.zeros_like(arrays.albedo)
    seconds = [0.0] * n
    prev = None
    for j, s in enumerate(chunk_starts(n, cfg.chunk_frames, cfg.overlap)):
        e = min(s + cfg.chunk_frames, n)
        ref = first_ref if j == 0 else prev
        res = render_clip(model, arrays.slice(s, e), cfg, keyframes, key_positions, ref_frames=ref, dtype=dtype)
        images[s:e] = res.images
        raw[s:e] = res.raw
        seconds[s:e] = res.frame_seconds
        prev = res.images[-cfg.overlap:]
    return RenderResult(images=images, frame_seconds=seconds, config=cfg.to_dict(), raw=raw)


def render_with_keyframes(model, arrays: ClipArrays, keyframes, key_positions, config: InferConfig = None,
                          progressive=True, dtype=torch.float32) -> RenderResult:
    """Render with sparse ground-truth keyframes injected into every chunk.

    With ``progressive=False`` chunks are rendered independently.
    """
    cfg = config or InferConfig(use_keyframes=True)
    key_positions = np.asarray(key_positions if key_positions is not None else [], dtype=np.int64)
    if len(key_positions) and not getattr(model, "supports_keyframes", False):
        raise UnsupportedConfigurationError("keyframe guidance needs a stage-2 (keyframe) checkpoint")
    if np.any(key_positions < 0) or np.any(key_positions >= len(arrays)):
        raise InvalidArgumentError("keyframe indices must lie within the sequence")
    if len(key_positions) and keyframes is not None and len(keyframes) != len(key_positions):
        raise InvalidArgumentError("need one keyframe image per keyframe index")
    cfg = InferConfig(**{**cfg.to_dict(), "use_keyframes": True})
    if progressive:
        return render_progressive(model, arrays, cfg, keyframes, key_positions, dtype=dtype)
    return render_independent(model, arrays, cfg, keyframes, key_positions, dtype=dtype)


def render_independent(model, arrays: ClipArrays, config: InferConfig = None, keyframes=None,
                       key_positions=None, dtype=torch.float32) -> RenderResult:
    """Render back-to-back chunks with no conditioning between them."""
    cfg = config or InferConfig()
    n = len(arrays)
    out = np.zeros_like(arrays.albedo)
    raw = np.zeros_like(arrays.albedo)
    seconds = [0.0] * n
    for s in range(0, n, cfg.chunk_frames):
        e = min(s + cfg.chunk_frames, n)
        res = render_clip(model, arrays.slice(s, e), cfg, keyframes, key_positions, dtype=dtype)
        out[s:e], raw[s:e], seconds[s:e] = res.images, res.raw, res.frame_seconds
    return RenderResult(images=out, frame_seconds=seconds, config=cfg.to_dict(), raw=raw)


def render_sequence(model, seq, config: InferConfig = None, keyframe_gap=None) -> RenderResult:
    """Convenience: render a Sequence, with ground-truth keyframes every ``keyframe_gap`` frames."""
    cfg = config or InferConfig()
    arrays = sequence_arrays(seq)
    gap = keyframe_gap if keyframe_gap is not None else (cfg.keyframe_gap if cfg.use_keyframes else None)
    if gap:
        idx = np.arange(0, len(seq), gap)
        return render_with_keyframes(model, arrays, arrays.reference[idx], idx, cfg)
    return render_progressive(model, arrays, cfg)


def material_edit_demo(model, scene_seed: int, edit: dict, frames: int = 5, seq_config=None,
                       config: InferConfig = None, scene=None):
    """Render a clip where one material parameter of one object is interpolated.

    ``edit`` = {"object", "param", "start", "end"}. Returns the render result,
    the per-frame parameter log, side-by-side (model | reference) images and
    the synthesized sequence.
    """
    from renderflow.scene.sequence import SequenceConfig, synth_sequence

    base = seq_config or SequenceConfig()
    sc = SequenceConfig(**{**base.__dict__, "frames": frames, "material_interp": dict(edit)})
    seq = synth_sequence(scene_seed, sc, scene=scene)
    result = render_progressive(model, sequence_arrays(seq), config or InferConfig())
    log = []
    for i in range(frames):
        frac = i / (frames - 1) if frames > 1 else 0.0
        if edit["param"] == "albedo":
            value = [float((1 - frac) * a + frac * b) for a, b in zip(edit["start"], edit["end"])]
        else:
            value = float((1 - frac) * edit["start"] + frac * edit["end"])
        log.append({"frame": i, "object": edit["object"], "param": edit["param"], "value": value})
    side = np.concatenate([result.images, seq.stack("reference")], axis=2)
    return result, log, side, seq


def load_model(path_or_ckpt) -> NetVelocity:
    return NetVelocity.from_checkpoint(path_or_ckpt)
