"""Intrinsic decomposition on top of a frozen forward checkpoint.

A trainable embedder reads the (interpolated) image clip, the frozen
transformer blocks run with LoRA on q/k/v plus a prompt cross-attention
after each self-attention, and a per-modality MLP head predicts the
bridge velocity from the image towards the intrinsic layer. Every layer
is carried in a 3-channel bridge space; depth is log-depth replicated
over the channels and averaged back to one channel at the end.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from renderflow.bridge import BridgeConfig, interpolate, recover_endpoint, sample_timestep
from renderflow.checkpoint import (
    Checkpoint,
    load_checkpoint,
    load_params,
    params_hash,
    save_checkpoint,
    state_arrays,
)
from renderflow.data import sequence_arrays
from renderflow.errors import CorruptFileError, InvalidArgumentError, TrainingDivergedError
from renderflow.losses import loss_albedo, loss_depth_ssi_log, loss_latent, loss_material, loss_normal
from renderflow.metrics import angular_error, psnr, rmse
from renderflow.model import LoRA, PatchEmbed, RenderNet, _attend, _heads, _merge, spacetime_embedding, unpatchify


MODALITY_CHANNELS = {"albedo": 3, "normal": 3, "depth": 1, "material": 3}
MODALITIES = tuple(MODALITY_CHANNELS)
DEPTH_EPS = 1e-6


@dataclass(frozen=True)
class Modality:
    tag: str
    prompt_tokens: int = 4

    def __post_init__(self):
        if self.tag not in MODALITY_CHANNELS:
            raise InvalidArgumentError(f"unknown modality {self.tag!r}; expected one of {MODALITIES}")
        if self.prompt_tokens < 1:
            raise InvalidArgumentError("prompt_tokens must be >= 1")

    @property
    def channels(self) -> int:
        return MODALITY_CHANNELS[self.tag]


def _check_modality(tag):
    if tag not in MODALITY_CHANNELS:
        raise InvalidArgumentError(f"unknown modality {tag!r}; expected one of {MODALITIES}")


@dataclass
class InverseConfig:
    lora_rank: int = 8
    lr: float = 3e-4
    steps: int = 1000
    batch: int = 4
    warmup_steps: int = 50
    clip_frames: int = 5
    seed: int = 0
    prompt_tokens: int = 4
    modality_weights: dict = field(default_factory=lambda: {m: 1.0 for m in MODALITIES})
    bridge: BridgeConfig = field(default_factory=BridgeConfig)
    lambda_albedo: float = 1.0
    # 0.5 is the printed half-weighted SSI form, 1.0 removes any log shift
    depth_lambda: float = 0.5
    weight_decay: float = 0.01

    def __post_init__(self):
        if isinstance(self.bridge, dict):
            self.bridge = BridgeConfig(**self.bridge)
        self.validate()

    def validate(self):
        if self.lora_rank < 1:
            raise InvalidArgumentError("lora_rank must be >= 1")
        if not self.lr > 0:
            raise InvalidArgumentError("lr must be > 0")
        if self.steps < 1 or self.batch < 1 or self.clip_frames < 1:
            raise InvalidArgumentError("steps, batch and clip_frames must be >= 1")
        for tag, w in self.modality_weights.items():
            _check_modality(tag)
            if w < 0:
                raise InvalidArgumentError(f"modality weight for {tag} must be >= 0")
        if sum(self.modality_weights.values()) <= 0:
            raise InvalidArgumentError("at least one modality weight must be positive")
        self.bridge.validate()

    def probabilities(self):
        tags = [m for m in MODALITIES if self.modality_weights.get(m, 0) > 0]
        w = np.array([self.modality_weights[m] for m in tags], dtype=np.float64)
        return tags, w / w.sum()

    def to_dict(self):
        return asdict(self)


class PromptCrossAttention(nn.Module):
    """Tokens attend to the selected modality's prompt tokens; output starts at zero."""

    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.norm = nn.LayerNorm(dim)
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x, prompt):
        q = _heads(self.q(self.norm(x)), self.heads)
        k = _heads(self.k(prompt), self.heads)
        v = _heads(self.v(prompt), self.heads)
        return self.out(_merge(_attend(q, k, v)))


class InverseAdapter(nn.Module):
    def __init__(self, net_cfg, config: InverseConfig):
        super().__init__()
        dim, p, r = net_cfg.dim, net_cfg.patch, config.lora_rank
        self.embed = PatchEmbed(6, p, dim)
        self.lora = nn.ModuleList(
            nn.ModuleDict({n: LoRA(dim, dim, r) for n in ("q", "k", "v")}) for _ in range(net_cfg.depth))
        self.xattn = nn.ModuleList(PromptCrossAttention(dim, net_cfg.heads) for _ in range(net_cfg.depth))
        self.prompts = nn.ParameterDict(
            {m: nn.Parameter(torch.randn(config.prompt_tokens, dim) * 0.02) for m in MODALITIES})
        self.heads = nn.ModuleDict({
            m: nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, p * p * 3)) for m in MODALITIES})


class InverseModel(nn.Module):
    """Frozen forward trunk plus a trainable inverse adapter."""

    def __init__(self, trunk: RenderNet, config: InverseConfig):
        super().__init__()
        self.config = config
        self.trunk = trunk
        for prm in self.trunk.parameters():
            prm.requires_grad_(False)
        self.adapter = InverseAdapter(trunk.cfg, config)

    def trunk_features(self, x, modality=None, adapted=True):
        """Run the frozen blocks on tokens ``x``; ``adapted=False`` skips every adapter path."""
        b = x.shape[0]
        for i, block in enumerate(self.trunk.blocks):
            inv = None
            if adapted:
                prompt = self.adapter.prompts[modality].expand(b, -1, -1)
                inv = {"lora": self.adapter.lora[i], "xattn": self.adapter.xattn[i], "prompt": prompt}
            x = block(x, inv=inv)
        return self.trunk.final_norm(x)

    def tokens(self, zt, t, rgb):
        b, f, h, w, _ = zt.shape
        hp, wp = self.trunk.grid(h, w)
        x = self.adapter.embed(torch.cat([zt, rgb], dim=-1))
        local = torch.arange(f, dtype=zt.dtype).expand(b, f)
        x = x + spacetime_embedding(local, hp, wp, self.trunk.cfg.dim)
        t = torch.as_tensor(t, dtype=zt.dtype).reshape(-1).expand(b)
        return x + self.trunk.time_embed(t)[:, None, :]

    def forward(self, zt, t, rgb, modality: str):
        """Velocity in the 3-channel bridge space, (B, F, H, W, 3)."""
        _check_modality(modality)
        b, f, h, w, _ = zt.shape
        feats = self.trunk_features(self.tokens(zt, t, rgb), modality)
        return unpatchify(self.adapter.heads[modality](feats), f, h, w, 3, self.trunk.cfg.patch)


# ----------------------------------------------------------------------------
# targets and losses

def bridge_target(arrays, modality: str) -> np.ndarray:
    """Intrinsic layer of a ClipArrays in the 3-channel bridge space."""
    _check_modality(modality)
    a = arrays.attributes
    if modality == "albedo":
        return arrays.albedo
    if modality == "normal":
        return a[..., 0:3]
    if modality == "material":
        return a[..., 4:7]
    logd = np.log(a[..., 3:4] + DEPTH_EPS)
    return np.repeat(logd, 3, axis=-1).astype(np.float32)


def intrinsic_ground_truth(arrays, modality: str) -> np.ndarray:
    """Ground truth in output units (depth as linear normalized depth)."""
    _check_modality(modality)
    if modality == "depth":
        return arrays.attributes[..., 3:4]
    return bridge_target(arrays, modality)


def to_output(endpoint, modality: str):
    """Reduce a 3-channel bridge endpoint to the modality's channel count.

    Depth stays in log space (one channel); :func:`depth_from_log` converts
    it for display.
    """
    if modality == "depth":
        return endpoint.mean(dim=-1, keepdim=True) if isinstance(endpoint, torch.Tensor) \
            else endpoint.mean(axis=-1, keepdims=True)
    return endpoint


def depth_from_log(log_depth):
    return np.clip(np.exp(log_depth) - DEPTH_EPS, 0.0, None)


def modality_loss(pred_endpoint, arrays_gt: dict, modality: str, config: InverseConfig):
    """Dispatch to the modality's loss on the recovered endpoint."""
    gt, mask = arrays_gt["target"], arrays_gt["mask"]
    if modality == "albedo":
        return loss_albedo(pred_endpoint, gt, lam=config.lambda_albedo)
    if modality == "normal":
        return loss_normal(pred_endpoint, gt, mask=mask)
    if modality == "material":
        return loss_material(pred_endpoint, gt)
    return loss_depth_ssi_log(to_output(pred_endpoint, "depth")[..., 0], gt, mask=mask, lam=config.depth_lambda)


# ----------------------------------------------------------------------------
# inference

def inverse_forward(model: InverseModel, rgb_clip, modality: str) -> np.ndarray:
    """Single-step decomposition of an (F, H, W, 3) image clip.

    Returns (F, H, W, C) with C = 3 for albedo/normal/material and 1 for
    depth (log-depth).
    """
    _check_modality(modality)
    rgb = torch.as_tensor(np.asarray(rgb_clip)[None], dtype=next(model.adapter.parameters()).dtype)
    with torch.no_grad():
        v = model(rgb, 0.0, rgb, modality)
        end = recover_endpoint(rgb, v, 0.0)
    return to_output(end, modality)[0].numpy()


def evaluate_inverse(model: InverseModel, sequences, modalities=("albedo", "normal")) -> dict:
    """Validation metrics with their trivial baselines.

    Baselines: a constant camera-facing normal (0, 0, 1) for normals and the
    input image copied as the albedo prediction.
    """
    out = {}
    for tag in modalities:
        scores, base = [], []
        for seq in sequences:
            arr = sequence_arrays(seq)
            pred = inverse_forward(model, arr.reference, tag)
            hit = arr.attributes[..., 7] > 0.5
            if tag == "normal":
                gt = arr.attributes[..., 0:3]
                scores.append(angular_error(pred, gt, hit, encoded=True))
                flat = np.broadcast_to(np.array([0.5, 0.5, 1.0]), gt.shape)
                base.append(angular_error(flat, gt, hit, encoded=True))
            elif tag == "albedo":
                scores.append(psnr(np.clip(pred, 0, 1), arr.albedo))
                base.append(psnr(arr.reference, arr.albedo))
            elif tag == "depth":
                gt = arr.attributes[..., 3:4]
                scores.append(rmse(depth_from_log(pred), gt, hit))
                base.append(rmse(np.full_like(gt, float(gt[hit].mean())), gt, hit))
            else:
                gt = arr.attributes[..., 4:7]
                scores.append(rmse(np.clip(pred, 0, 1), gt))
                base.append(rmse(np.full_like(gt, 0.5), gt))
        metric = {"normal": "angular_deg", "albedo": "psnr", "depth": "rmse", "material": "rmse"}[tag]
        out[tag] = {"metric": metric, "model": float(np.mean(scores)), "baseline": float(np.mean(base))}
    return out


# ----------------------------------------------------------------------------
# training

def _sample_batch(arrays, cfg: InverseConfig, rng, modality):
    f = cfg.clip_frames
    rgb, tgt, gt, mask = [], [], [], []
    for _ in range(cfg.batch):
        arr = arrays[int(rng.integers(len(arrays)))]
        start = int(rng.integers(0, len(arr) - f + 1))
        clip = arr.slice(start, start + f)
        rgb.append(clip.reference)
        tgt.append(bridge_target(clip, modality))
        gt.append(intrinsic_ground_truth(clip, modality) if modality != "depth" else clip.attributes[..., 3])
        mask.append(clip.attributes[..., 7])
    return [np.stack(x) for x in (rgb, tgt, gt, mask)]


def frozen_parameter_grad_norm(model: InverseModel) -> float:
    return float(sum(float(p.grad.norm()) for p in model.trunk.parameters() if p.grad is not None))


def forward_hash(ckpt: Checkpoint) -> str:
    return params_hash(ckpt.params)


def train_inverse(dataset, forward_ckpt: Checkpoint, config: InverseConfig = None, log_path=None,
                  on_step=None) -> Checkpoint:
    """Adapter-only training; the forward checkpoint stays frozen.

    Each step draws one modality by ``modality_weights`` and a batch of
    clips, bridges image -> intrinsic layer and minimizes the latent loss
    plus the modality loss on the recovered endpoint.
    """
    cfg = config or InverseConfig()
    if forward_ckpt.stage not in ("base", "keyframe"):
        raise InvalidArgumentError("train_inverse needs a forward (base or keyframe) checkpoint")
    if not dataset:
        raise InvalidArgumentError("training needs a non-empty dataset")
    arrays = [sequence_arrays(s) for s in dataset]
    if min(len(a) for a in arrays) < cfg.clip_frames:
        raise InvalidArgumentError(f"sequences must have at least clip_frames={cfg.clip_frames} frames")
    torch.manual_seed(cfg.seed)
    model = InverseModel(forward_ckpt.build_net(), cfg)
    params = [p for p in model.adapter.parameters()]
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    tags, probs = cfg.probabilities()
    history = []
    fh = open(log_path, "a") if log_path else None
    t0 = time.perf_counter()
    try:
        for step in range(cfg.steps):
            modality = tags[int(rng.choice(len(tags), p=probs))]
            rgb, tgt, gt, mask = (torch.as_tensor(x, dtype=torch.float32)
                                  for x in _sample_batch(arrays, cfg, rng, modality))
            t = torch.as_tensor(np.asarray(sample_timestep(cfg.bridge, rng, size=cfg.batch)), dtype=torch.float32)
            t_b = t.reshape(-1, 1, 1, 1, 1)
            eps = torch.as_tensor(rng.standard_normal(rgb.shape), dtype=torch.float32)
            zt = interpolate(rgb, tgt, t_b, cfg.bridge.sigma, eps)
            for g in opt.param_groups:
                g["lr"] = cfg.lr * min(1.0, (step + 1) / max(cfg.warmup_steps, 1))
            v = model(zt, t, rgb, modality)
            latent = loss_latent(v, tgt, zt, t_b, cfg.bridge.t_max)
            end = recover_endpoint(zt, v, t_b)
            task = modality_loss(end, {"target": gt, "mask": mask}, modality, cfg)
            total = latent + task
            if not torch.isfinite(total):
                raise TrainingDivergedError(f"non-finite inverse loss at step {step} ({modality})")
            opt.zero_grad(set_to_none=True)
            total.backward()
            rec = {"step": step + 1, "modality": modality, "loss": total.item(), "loss_latent": latent.item(),
                   "loss_task": task.item(), "frozen_grad_norm": frozen_parameter_grad_norm(model),
                   "wallclock": time.perf_counter() - t0}
            opt.step()
            history.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
            if on_step is not None:
                on_step(rec, model)
    finally:
        if fh:
            fh.close()
    ck = Checkpoint(
        net_config=forward_ckpt.net_config,
        params=state_arrays(model.adapter),
        stage="inverse",
        step=cfg.steps,
        train_config=cfg.to_dict(),
        rng_state=rng.bit_generator.state,
        extra={"forward_hash": forward_hash(forward_ckpt), "modalities": list(MODALITIES)},
    )
    ck.history = history
    return ck


def build_inverse(inverse_ckpt: Checkpoint, forward_ckpt: Checkpoint) -> InverseModel:
    """Rebuild an InverseModel, verifying the frozen forward weights by hash."""
    if inverse_ckpt.stage != "inverse":
        raise InvalidArgumentError(f"expected an inverse checkpoint, got stage {inverse_ckpt.stage!r}")
    expected = inverse_ckpt.extra.get("forward_hash")
    actual = forward_hash(forward_ckpt)
    if expected != actual:
        raise CorruptFileError(f"forward checkpoint hash {actual[:12]} does not match the one the adapter "
                               f"was trained on ({str(expected)[:12]})")
    cfg = InverseConfig(**inverse_ckpt.train_config)
    model = InverseModel(forward_ckpt.build_net(), cfg)
    load_params(model.adapter, inverse_ckpt.params)
    return model.eval()


def load_inverse(inverse_path, forward_path) -> InverseModel:
    return build_inverse(load_checkpoint(inverse_path), load_checkpoint(forward_path))


def save_inverse(ckpt: Checkpoint, path) -> str:
    return save_checkpoint(ckpt, path)

