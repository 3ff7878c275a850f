"""Conditional velocity transformer over space-time image patches.

Render tokens come from the bridge interpolant (plus an optional masked
reference clip), G-buffer attribute tokens are added element-wise, an
envmap embedding modulates every block as ``(gamma + 1) * f + beta``, and an
optional keyframe cross-attention branch with temporal RoPE runs in parallel
to self-attention. All adapters start as exact no-ops.

Clips are channel-last tensors of shape (B, F, H, W, C).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from renderflow.errors import InvalidArgumentError

KEYFRAME_VARIANTS = ("reused_query", "dedicated_query")
PARAM_GROUPS = ("base", "envmap_adapter", "keyframe_adapter", "inverse_adapter")
ATTR_CHANNELS = 8
RENDER_IN_CHANNELS = 3 + 3 + 1  # interpolant, masked reference, mask


@dataclass
class NetConfig:
    patch: int = 8
    dim: int = 128
    depth: int = 6
    heads: int = 4
    ffn_mult: float = 4.0
    lora_rank: int = 8
    keyframe_variant: str = "dedicated_query"
    keyframe_ffn_lora: bool = True
    image_res: tuple = (64, 64)
    env_res: tuple = (16, 32)
    env_patch: int = 4

    def __post_init__(self):
        self.image_res = tuple(int(v) for v in self.image_res)
        self.env_res = tuple(int(v) for v in self.env_res)
        self.validate()

    def validate(self):
        if self.dim % self.heads:
            raise InvalidArgumentError("dim must be divisible by heads")
        if (self.dim // self.heads) % 2:
            raise InvalidArgumentError("head_dim must be even for RoPE")
        if any(r % self.patch for r in self.image_res):
            raise InvalidArgumentError(f"patch {self.patch} must divide image_res {self.image_res}")
        if any(r % self.env_patch for r in self.env_res):
            raise InvalidArgumentError(f"env_patch {self.env_patch} must divide env_res {self.env_res}")
        if self.keyframe_variant not in KEYFRAME_VARIANTS:
            raise InvalidArgumentError(f"keyframe_variant must be one of {KEYFRAME_VARIANTS}")
        if self.lora_rank < 1 or self.depth < 1:
            raise InvalidArgumentError("lora_rank and depth must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["image_res"], d["env_res"] = list(self.image_res), list(self.env_res)
        return d


@dataclass
class ConditionBundle:
    """Per-clip conditioning.

    attributes:      (B, F, H, W, 8) normal, depth, material, hit mask
    env_ldr:         (B, F, H', W', 3) camera-rotated tonemapped envmaps
    ref_clip:        (B, F, H, W, 3) masked reference frames, or None
    ref_mask:        (B, F, H, W, 1) 1 where ref_clip holds a frame
    keyframes:       (B, K, H, W, 3) keyframe images, or None
    key_positions:   (B, K) absolute frame indices of the keyframes
    frame_positions: (B, F) absolute frame indices of the clip frames
    """

    attributes: torch.Tensor
    env_ldr: torch.Tensor
    ref_clip: Optional[torch.Tensor] = None
    ref_mask: Optional[torch.Tensor] = None
    keyframes: Optional[torch.Tensor] = None
    key_positions: Optional[torch.Tensor] = None
    frame_positions: Optional[torch.Tensor] = None

    def has_keyframes(self) -> bool:
        return self.keyframes is not None and self.keyframes.shape[1] > 0


# ----------------------------------------------------------------------------
# token plumbing

def patchify(clip: torch.Tensor, patch: int) -> torch.Tensor:
    """(B, F, H, W, C) -> (B, F*Hp*Wp, patch*patch*C), frame-major then row-major."""
    b, f, h, w, c = clip.shape
    if h % patch or w % patch:
        raise InvalidArgumentError(f"patch {patch} does not divide {h}x{w}")
    x = clip.reshape(b, f, h // patch, patch, w // patch, patch, c)
    x = x.permute(0, 1, 2, 4, 3, 5, 6)
    return x.reshape(b, f * (h // patch) * (w // patch), patch * patch * c)


def unpatchify(tokens: torch.Tensor, frames: int, h: int, w: int, channels: int, patch: int) -> torch.Tensor:
    b = tokens.shape[0]
    x = tokens.reshape(b, frames, h // patch, w // patch, patch, patch, channels)
    x = x.permute(0, 1, 2, 4, 3, 5, 6)
    return x.reshape(b, frames, h, w, channels)


def token_positions(frames: int, hp: int, wp: int) -> np.ndarray:
    """(frame, row, col) integer coordinates per token, shape (F*Hp*Wp, 3)."""
    f, r, c = np.meshgrid(np.arange(frames), np.arange(hp), np.arange(wp), indexing="ij")
    return np.stack([f.ravel(), r.ravel(), c.ravel()], axis=-1)


def sincos(pos: torch.Tensor, dim: int, base: float = 10000.0) -> torch.Tensor:
    """Sinusoidal features of ``pos`` (any shape) -> (..., dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(base) * torch.arange(half, dtype=pos.dtype, device=pos.device) / half)
    ang = pos[..., None] * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


def _pos_split(dim):
    d_sp = 2 * (dim // 6)
    return dim - 2 * d_sp, d_sp


def spacetime_embedding(frame_pos: torch.Tensor, hp: int, wp: int, dim: int) -> torch.Tensor:
    """Fixed sin-cos embedding of (frame, row, col); frame_pos is (B, F)."""
    d_f, d_sp = _pos_split(dim)
    b, f = frame_pos.shape
    rows = torch.arange(hp, dtype=frame_pos.dtype, device=frame_pos.device)
    cols = torch.arange(wp, dtype=frame_pos.dtype, device=frame_pos.device)
    ef = sincos(frame_pos, d_f)[:, :, None, None, :].expand(b, f, hp, wp, d_f)
    er = sincos(rows, d_sp)[None, None, :, None, :].expand(b, f, hp, wp, d_sp)
    ec = sincos(cols, d_sp)[None, None, None, :, :].expand(b, f, hp, wp, d_sp)
    return torch.cat([ef, er, ec], dim=-1).reshape(b, f * hp * wp, dim)


def spatial_embedding(hp: int, wp: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Row/col sin-cos embedding with a zero frame part, shape (Hp*Wp, dim)."""
    zero = torch.zeros(1, 1, dtype=dtype)
    return spacetime_embedding(zero, hp, wp, dim)[0]


def rope_apply(x: torch.Tensor, positions: torch.Tensor, base: float = 10000.0) -> torch.Tensor:
    """Rotate consecutive feature pairs of ``x`` by ``position * theta_j``.

    x is (..., N, head_dim), positions broadcast against (..., N).
    theta_j = base ** (-2j / head_dim).
    """
    hd = x.shape[-1]
    if hd % 2:
        raise InvalidArgumentError("rope needs an even head_dim")
    theta = base ** (-torch.arange(0, hd, 2, dtype=x.dtype, device=x.device) / hd)
    ang = positions.to(x.dtype)[..., None] * theta
    cos, sin = torch.cos(ang), torch.sin(ang)
    x_even, x_odd = x[..., 0::2], x[..., 1::2]
    out = torch.stack([x_even * cos - x_odd * sin, x_even * sin + x_odd * cos], dim=-1)
    return out.flatten(-2)


# ----------------------------------------------------------------------------
# layers

class LoRA(nn.Module):
    """Low-rank delta (alpha / r) * B A x with B zero-initialised and alpha = r."""

    def __init__(self, d_in, d_out, rank):
        super().__init__()
        self.down = nn.Parameter(torch.randn(rank, d_in) / math.sqrt(d_in))
        self.up = nn.Parameter(torch.zeros(d_out, rank))

    def forward(self, x):
        return (x @ self.down.t()) @ self.up.t()


def _heads(x, n_heads):
    b, n, d = x.shape
    return x.reshape(b, n, n_heads, d // n_heads).transpose(1, 2)


def _merge(x):
    b, h, n, hd = x.shape
    return x.transpose(1, 2).reshape(b, n, h * hd)


def _attend(q, k, v):
    scale = q.shape[-1] ** -0.5
    w = torch.softmax((q @ k.transpose(-2, -1)) * scale, dim=-1)
    return w @ v


class SelfAttention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def project(self, h, lora=None):
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        if lora is not None:
            q, k, v = q + lora["q"](h), k + lora["k"](h), v + lora["v"](h)
        return q, k, v

    def attend(self, q, k, v):
        return self.out(_merge(_attend(_heads(q, self.heads), _heads(k, self.heads), _heads(v, self.heads))))


class FeedForward(nn.Module):
    def __init__(self, dim, mult):
        super().__init__()
        hidden = int(dim * mult)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x, lora=None):
        h = self.fc1(x)
        if lora is not None:
            h = h + lora["fc1"](x)
        a = F.gelu(h)
        out = self.fc2(a)
        if lora is not None:
            out = out + lora["fc2"](a)
        return out


class KeyframeBranch(nn.Module):
    """Cross-attention from render tokens to keyframe tokens with temporal RoPE."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        dim = cfg.dim
        self.heads = cfg.heads
        self.variant = cfg.keyframe_variant
        self.norm_kv = nn.LayerNorm(dim)
        if self.variant == "dedicated_query":
            self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        if cfg.keyframe_ffn_lora:
            hidden = int(dim * cfg.ffn_mult)
            self.ffn_lora = nn.ModuleDict({"fc1": LoRA(dim, hidden, cfg.lora_rank),
                                           "fc2": LoRA(hidden, dim, cfg.lora_rank)})
        else:
            self.ffn_lora = None

    def forward(self, h, sa_query, key_tokens, query_pos, key_pos):
        q = self.q(h) if self.variant == "dedicated_query" else sa_query
        kv = self.norm_kv(key_tokens)
        q = rope_apply(_heads(q, self.heads), query_pos[:, None, :])
        k = rope_apply(_heads(self.k(kv), self.heads), key_pos[:, None, :])
        v = _heads(self.v(kv), self.heads)
        return self.out(_merge(_attend(q, k, v)))


class Block(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        dim = cfg.dim
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, cfg.heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, cfg.ffn_mult)
        self.env_proj = nn.Linear(dim, 2 * dim)
        nn.init.zeros_(self.env_proj.weight)
        nn.init.zeros_(self.env_proj.bias)
        self.kf = KeyframeBranch(cfg)

    def forward(self, x, env=None, kf=None, inv=None):
        """``env``: pooled env embedding per token; ``kf``: (key_tokens, qpos, kpos)."""
        if env is not None:
            x = envmap_modulate(x, self.env_proj(env))
        h = self.norm1(x)
        q, k, v = self.attn.project(h, lora=None if inv is None else inv["lora"])
        out = x + self.attn.attend(q, k, v)
        if kf is not None:
            out = out + self.kf(h, q, *kf)
        if inv is not None:
            out = out + inv["xattn"](out, inv["prompt"])
        ffn_lora = self.kf.ffn_lora if kf is not None else None
        return out + self.ffn(self.norm2(out), lora=ffn_lora)


def envmap_modulate(f: torch.Tensor, gamma_beta: torch.Tensor) -> torch.Tensor:
    """(gamma + 1) * f + beta with ``gamma_beta`` = cat(gamma, beta) on the last axis."""
    gamma, beta = gamma_beta.chunk(2, dim=-1)
    return (gamma + 1) * f + beta


class PatchEmbed(nn.Module):
    def __init__(self, channels, patch, dim, zero=False):
        super().__init__()
        self.patch = patch
        self.proj = nn.Linear(channels * patch * patch, dim)
        if zero:
            nn.init.zeros_(self.proj.weight)
            nn.init.zeros_(self.proj.bias)

    def forward(self, clip):
        return self.proj(patchify(clip, self.patch))


class EnvEmbed(nn.Module):
    """Per-frame envmap tokens, a token-wise MLP, then mean pooling -> (B, F, dim)."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = PatchEmbed(3, cfg.env_patch, cfg.dim)
        self.mlp = nn.Sequential(nn.SiLU(), nn.Linear(cfg.dim, cfg.dim))

    def tokens(self, env_ldr):
        b, f = env_ldr.shape[:2]
        hp, wp = (r // self.cfg.env_patch for r in env_ldr.shape[2:4])
        tok = self.embed(env_ldr).reshape(b, f, hp * wp, -1)
        return tok + spatial_embedding(hp, wp, self.cfg.dim, tok.dtype).to(tok.device)

    def forward(self, env_ldr):
        return self.mlp(self.tokens(env_ldr)).mean(dim=2)


class TimestepEmbed(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t):
        # t in [0, 1] scaled to the usual diffusion step range
        return self.mlp(sincos(t * 1000.0, self.dim))


# ----------------------------------------------------------------------------
# the network

_GROUP_OF_MODULE = {
    "render_embed": "base", "attr_embed": "base", "time_embed": "base",
    "final_norm": "base", "head": "base",
    "env_embed": "envmap_adapter", "key_embed": "keyframe_adapter",
}
_GROUP_OF_BLOCK_PART = {
    "norm1": "base", "attn": "base", "norm2": "base", "ffn": "base",
    "env_proj": "envmap_adapter", "kf": "keyframe_adapter",
}


class RenderNet(nn.Module):
    """Velocity field v(zt, t | G-buffers, envmap, keyframes)."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        p, dim = cfg.patch, cfg.dim
        self.render_embed = PatchEmbed(RENDER_IN_CHANNELS, p, dim)
        self.attr_embed = PatchEmbed(ATTR_CHANNELS, p, dim, zero=True)
        self.time_embed = TimestepEmbed(dim)
        self.env_embed = EnvEmbed(cfg)
        self.key_embed = PatchEmbed(3, p, dim)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.depth))
        self.final_norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, p * p * 3)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    # -- parameter groups -------------------------------------------------
    @staticmethod
    def group_of(name: str) -> str:
        parts = name.split(".")
        if parts[0] == "blocks":
            return _GROUP_OF_BLOCK_PART[parts[2]]
        return _GROUP_OF_MODULE[parts[0]]

    def parameter_groups(self) -> dict:
        groups = {g: {} for g in PARAM_GROUPS}
        for name, prm in self.named_parameters():
            groups[self.group_of(name)][name] = prm
        return groups

    def set_trainable(self, groups):
        for name, prm in self.named_parameters():
            prm.requires_grad_(self.group_of(name) in groups)

    # -- pieces -----------------------------------------------------------
    def grid(self, h, w):
        return h // self.cfg.patch, w // self.cfg.patch

    def embed_attributes(self, attributes: torch.Tensor) -> torch.Tensor:
        return self.attr_embed(attributes)

    def env_modulation_input(self, env_ldr, n_frames, tokens_per_frame):
        pooled = self.env_embed(env_ldr)  # (B, F, dim)
        return pooled.repeat_interleave(tokens_per_frame, dim=1)

    def keyframe_tokens(self, keyframes):
        b, k, h, w, _ = keyframes.shape
        hp, wp = self.grid(h, w)
        tok = self.key_embed(keyframes)
        return tok + spatial_embedding(hp, wp, self.cfg.dim, tok.dtype).repeat(k, 1).to(tok.device)

    def input_tokens(self, zt, t, cond: ConditionBundle):
        b, f, h, w, _ = zt.shape
        if cond.attributes.shape[:4] != zt.shape[:4]:
            raise InvalidArgumentError(
                f"attribute buffers {tuple(cond.attributes.shape)} not aligned with clip {tuple(zt.shape)}")
        ref = cond.ref_clip if cond.ref_clip is not None else zt.new_zeros(zt.shape)
        mask = cond.ref_mask if cond.ref_mask is not None else zt.new_zeros((b, f, h, w, 1))
        hp, wp = self.grid(h, w)
        frame_pos = self.frame_positions(cond, b, f, zt)
        local = frame_pos - frame_pos.min(dim=1, keepdim=True).values
        x = self.render_embed(torch.cat([zt, ref, mask], dim=-1))
        x = x + self.embed_attributes(cond.attributes)
        x = x + spacetime_embedding(local, hp, wp, self.cfg.dim)
        t = torch.as_tensor(t, dtype=zt.dtype, device=zt.device).reshape(-1)
        x = x + self.time_embed(t.expand(b))[:, None, :]
        return x

    @staticmethod
    def frame_positions(cond, b, f, like):
        if cond.frame_positions is None:
            return torch.arange(f, dtype=like.dtype, device=like.device).expand(b, f)
        return cond.frame_positions.to(like.dtype)

    def forward(self, zt, t, cond: ConditionBundle, use_keyframes: bool = False):
        b, f, h, w, _ = zt.shape
        hp, wp = self.grid(h, w)
        x = self.input_tokens(zt, t, cond)
        env = self.env_modulation_input(cond.env_ldr, f, hp * wp)
        kf = None
        if use_keyframes and cond.has_keyframes():
            frame_pos = self.frame_positions(cond, b, f, zt)
            qpos = frame_pos.repeat_interleave(hp * wp, dim=1)
            kpos = cond.key_positions.to(zt.dtype).repeat_interleave(hp * wp, dim=1)
            kf = (self.keyframe_tokens(cond.keyframes), qpos, kpos)
        for block in self.blocks:
            x = block(x, env=env, kf=kf)
        out = self.head(self.final_norm(x))
        return unpatchify(out, f, h, w, 3, self.cfg.patch)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
