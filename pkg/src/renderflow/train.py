"""Two-stage bridge-matching training.

Stage 1 ("base") trains the backbone and envmap adapter. Stage 2
("keyframe") freezes both and trains only the keyframe adapter, so the
keyframe-free path is bit-for-bit unchanged by stage 2.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from renderflow.bridge import BridgeConfig, BridgeState, interpolate, sample_timestep
from renderflow.checkpoint import (
    Checkpoint,
    optimizer_arrays,
    params_hash,
    restore_optimizer,
    save_checkpoint,
    state_arrays,
)
from renderflow.data import condition, keyframe_indices, nearest_keyframes, sequence_arrays
from renderflow.errors import InvalidArgumentError, TrainingDivergedError
from renderflow.losses import PIXEL_TERMS, loss_total
from renderflow.model import NetConfig, RenderNet

log = logging.getLogger(__name__)

STAGES = ("base", "keyframe")
STAGE_GROUPS = {"base": ("base", "envmap_adapter"), "keyframe": ("keyframe_adapter",)}


@dataclass
class TrainConfig:
    stage: str = "base"
    lr: float = 1e-4
    warmup_steps: int = 100
    steps: int = 3000
    batch: int = 4
    lambda_pixel: float = 1.0
    bridge: BridgeConfig = field(default_factory=BridgeConfig)
    clip_frames: int = 5
    seed: int = 0
    keyframe_gap: int = 16
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    ref_prob: float = 0.5
    pixel_terms: tuple = PIXEL_TERMS
    checkpoint_every: int = 0
    # cap on keyframes per clip in stage 2 (nearest to the clip centre)
    max_keyframes: int = 4

    def __post_init__(self):
        if isinstance(self.bridge, dict):
            self.bridge = BridgeConfig(**self.bridge)
        self.betas = tuple(self.betas)
        self.pixel_terms = tuple(self.pixel_terms)
        self.validate()

    def validate(self):
        if self.stage not in STAGES:
            raise InvalidArgumentError(f"stage must be one of {STAGES}")
        if not self.lr > 0:
            raise InvalidArgumentError("lr must be > 0")
        if self.steps < 1 or self.batch < 1:
            raise InvalidArgumentError("steps and batch must be >= 1")
        if self.clip_frames < 1:
            raise InvalidArgumentError("clip_frames must be >= 1")
        if self.keyframe_gap < 1:
            raise InvalidArgumentError("keyframe_gap must be >= 1")
        if any(t not in PIXEL_TERMS for t in self.pixel_terms):
            raise InvalidArgumentError(f"pixel_terms must be drawn from {PIXEL_TERMS}")
        self.bridge.validate()

    def to_dict(self):
        d = asdict(self)
        d["betas"], d["pixel_terms"] = list(self.betas), list(self.pixel_terms)
        return d


def make_optimizer(params, cfg: TrainConfig):
    return torch.optim.AdamW(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``cfg.lr`` over ``warmup_steps``, then constant."""
    if cfg.warmup_steps <= 0:
        return cfg.lr
    return cfg.lr * min(1.0, (step + 1) / cfg.warmup_steps)


class ClipSampler:
    """Draws training clips (and optional keyframes) from in-memory sequences."""

    def __init__(self, sequences, cfg: TrainConfig):
        if not sequences:
            raise InvalidArgumentError("training needs a non-empty dataset")
        self.arrays = [sequence_arrays(s) for s in sequences]
        short = [len(a) for a in self.arrays if len(a) < cfg.clip_frames]
        if short:
            raise InvalidArgumentError(
                f"sequences must have at least clip_frames={cfg.clip_frames} frames (got {min(short)})")
        self.cfg = cfg

    def draw(self, rng: np.random.Generator, with_keyframes=False):
        cfg = self.cfg
        f = cfg.clip_frames
        clips, refs, kf_sets = [], [], []
        for _ in range(cfg.batch):
            arr = self.arrays[int(rng.integers(len(self.arrays)))]
            start = int(rng.integers(0, len(arr) - f + 1))
            clip = arr.slice(start, start + f)
            clips.append(clip)
            refs.append(clip.reference[:1] if rng.uniform() < cfg.ref_prob else None)
            if with_keyframes:
                idx = keyframe_indices(len(arr), cfg.keyframe_gap)
                kf_sets.append((arr, idx, start + (f - 1) / 2))
        keyframes = key_pos = None
        if with_keyframes:
            k = min(cfg.max_keyframes, min(len(idx) for _, idx, _ in kf_sets))
            chosen = [nearest_keyframes(idx, c, k) for _, idx, c in kf_sets]
            keyframes = np.stack([arr.reference[sel] for (arr, _, _), sel in zip(kf_sets, chosen)])
            key_pos = np.stack(chosen)
        return clips, refs, keyframes, key_pos


def _smoothed(history, key="loss", frac=0.2):
    vals = [h[key] for h in history]
    n = max(1, int(len(vals) * frac))
    return float(np.mean(vals[:n])), float(np.mean(vals[-n:]))


def _rng_from_state(seed, state):
    rng = np.random.default_rng(seed)
    if state is not None:
        rng.bit_generator.state = state
    return rng


def _run(net: RenderNet, sampler: ClipSampler, cfg: TrainConfig, stage: str, start_step=0,
         opt_state=None, rng_state=None, log_path=None, ckpt_dir=None, extra=None, on_step=None):
    torch.manual_seed(cfg.seed)
    trainable = STAGE_GROUPS[stage]
    net.set_trainable(trainable)
    named = {n: p for n, p in net.named_parameters() if p.requires_grad}
    frozen = [p for n, p in net.named_parameters() if not p.requires_grad]
    opt = make_optimizer(list(named.values()), cfg)
    if opt_state:
        restore_optimizer(opt, named, opt_state)
    rng = _rng_from_state(cfg.seed, rng_state)
    use_kf = stage == "keyframe"
    history = []
    log_fh = open(log_path, "a") if log_path else None
    t_start = time.perf_counter()
    dtype = next(net.parameters()).dtype
    try:
        for step in range(start_step, cfg.steps):
            clips, refs, keyframes, key_pos = sampler.draw(rng, with_keyframes=use_kf)
            z0 = torch.as_tensor(np.stack([c.albedo for c in clips]), dtype=dtype)
            z1 = torch.as_tensor(np.stack([c.reference for c in clips]), dtype=dtype)
            t = np.asarray(sample_timestep(cfg.bridge, rng, size=cfg.batch))
            eps = torch.as_tensor(rng.standard_normal(z0.shape), dtype=dtype)
            t_b = torch.as_tensor(t, dtype=dtype).reshape(-1, 1, 1, 1, 1)
            state = BridgeState(z0=z0, z1=z1, t=t_b, eps=eps, zt=interpolate(z0, z1, t_b, cfg.bridge.sigma, eps))
            cond = condition(clips, refs, keyframes, key_pos, dtype=dtype)
            for g in opt.param_groups:
                g["lr"] = lr_at(step, cfg)
            v = net(state.zt, torch.as_tensor(t, dtype=dtype), cond, use_keyframes=use_kf)
            total, latent, pixel = loss_total(v, state, lam=cfg.lambda_pixel, terms=cfg.pixel_terms,
                                              t_max=cfg.bridge.t_max)
            if not torch.isfinite(total):
                raise TrainingDivergedError(
                    f"non-finite loss at step {step} (latent={latent.item()}, pixel={pixel.item()}, t={t.tolist()})")
            opt.zero_grad(set_to_none=True)
            total.backward()
            frozen_norm = float(sum(float(p.grad.norm()) for p in frozen if p.grad is not None))
            opt.step()
            rec = {"step": step + 1, "loss": total.item(), "loss_latent": latent.item(),
                   "loss_pixel": pixel.item(), "lr": lr_at(step, cfg),
                   "wallclock": time.perf_counter() - t_start, "frozen_grad_norm": frozen_norm}
            history.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec) + "\n")
            if on_step is not None:
                on_step(rec, net)
            if ckpt_dir and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                ck = _make_ckpt(net, cfg, stage, step + 1, opt, named, rng, extra)
                save_checkpoint(ck, Path(ckpt_dir) / f"step{step + 1:06d}.rfck")
    finally:
        if log_fh:
            log_fh.close()
    net.set_trainable(("base", "envmap_adapter", "keyframe_adapter"))
    ck = _make_ckpt(net, cfg, stage, cfg.steps, opt, named, rng, extra)
    ck.history = history
    if history:
        first, last = _smoothed(history)
        log.info("%s stage: smoothed loss %.4f -> %.4f over %d steps", stage, first, last, len(history))
    return ck


def _make_ckpt(net, cfg, stage, step, opt, named, rng, extra):
    return Checkpoint(
        net_config=net.cfg,
        params=state_arrays(net),
        stage=stage,
        step=step,
        train_config=cfg.to_dict(),
        optimizer=optimizer_arrays(opt, named),
        rng_state=rng.bit_generator.state,
        extra=dict(extra or {}),
    )


def train_stage1(dataset, config: TrainConfig, net_config: NetConfig = None, resume: Checkpoint = None,
                 log_path=None, ckpt_dir=None, on_step=None) -> Checkpoint:
    """Train backbone + envmap adapter; returns the final checkpoint.

    ``resume`` continues a stage-1 checkpoint from its step with its
    optimizer and RNG state, reproducing the uninterrupted trajectory.
    """
    if config.stage != "base":
        raise InvalidArgumentError("train_stage1 needs config.stage == 'base'")
    sampler = ClipSampler(dataset, config)
    if resume is not None:
        net = resume.build_net()
        return _run(net, sampler, config, "base", start_step=resume.step, opt_state=resume.optimizer,
                    rng_state=resume.rng_state, log_path=log_path, ckpt_dir=ckpt_dir, on_step=on_step)
    torch.manual_seed(config.seed)
    net = RenderNet(net_config or NetConfig())
    return _run(net, sampler, config, "base", log_path=log_path, ckpt_dir=ckpt_dir, on_step=on_step)


def train_stage2(dataset, base_ckpt: Checkpoint, config: TrainConfig, log_path=None, ckpt_dir=None,
                 on_step=None) -> Checkpoint:
    """Train only the keyframe adapter on top of a frozen stage-1 model."""
    if config.stage != "keyframe":
        raise InvalidArgumentError("train_stage2 needs config.stage == 'keyframe'")
    sampler = ClipSampler(dataset, config)
    net = base_ckpt.build_net()
    resume = base_ckpt.stage == "keyframe"
    extra = {"base_hash": base_ckpt.extra.get("base_hash") if resume else _base_hash(base_ckpt)}
    return _run(net, sampler, config, "keyframe",
                start_step=base_ckpt.step if resume else 0,
                opt_state=base_ckpt.optimizer if resume else None,
                rng_state=base_ckpt.rng_state if resume else None,
                log_path=log_path, ckpt_dir=ckpt_dir, extra=extra, on_step=on_step)


def with_keyframe_design(base_ckpt: Checkpoint, variant: str, ffn_lora: bool, seed: int = 0) -> Checkpoint:
    """Copy of a stage-1 checkpoint whose (untrained) keyframe adapter uses another design.

    Base and envmap weights are copied unchanged; the keyframe adapter is
    freshly initialized from ``seed``.
    """
    if base_ckpt.stage != "base":
        raise InvalidArgumentError("keyframe designs are swapped on stage-1 checkpoints only")
    cfg = NetConfig(**{**base_ckpt.net_config.to_dict(), "keyframe_variant": variant,
                       "keyframe_ffn_lora": ffn_lora})
    torch.manual_seed(seed)
    net = RenderNet(cfg)
    fresh = state_arrays(net)
    params = {n: (base_ckpt.params[n] if RenderNet.group_of(n) != "keyframe_adapter" else fresh[n]) for n in fresh}
    return Checkpoint(net_config=cfg, params=params, stage="base", step=base_ckpt.step,
                      train_config=dict(base_ckpt.train_config), extra=dict(base_ckpt.extra))


def _base_hash(ckpt: Checkpoint) -> str:
    groups = STAGE_GROUPS["base"]
    return params_hash({n: a for n, a in ckpt.params.items() if RenderNet.group_of(n) in groups})


def frozen_gradient_norms(net: RenderNet) -> dict:
    """Sum of gradient norms per parameter group (0 for groups without grads)."""
    out = {}
    for group, params in net.parameter_groups().items():
        out[group] = float(sum(float(p.grad.norm()) for p in params.values() if p.grad is not None))
    return out


def smoothed_improvement(history, frac=0.2):
    """(first, last) mean loss over the first and last ``frac`` of steps."""
    return _smoothed(history, "loss", frac)

