"""Turning sequences into network-ready tensors."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from renderflow.errors import InvalidArgumentError
from renderflow.model import ConditionBundle


@dataclass
class ClipArrays:
    """Float32 arrays for frames ``start .. start+F-1`` of one sequence."""

    albedo: np.ndarray
    attributes: np.ndarray
    env_ldr: np.ndarray
    frame_indices: np.ndarray
    reference: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.albedo)

    def slice(self, start, stop) -> "ClipArrays":
        ref = None if self.reference is None else self.reference[start:stop]
        return ClipArrays(self.albedo[start:stop], self.attributes[start:stop], self.env_ldr[start:stop],
                          self.frame_indices[start:stop], ref)


def sequence_arrays(seq, with_reference=True) -> ClipArrays:
    """Whole-sequence arrays; frame indices are 0..L-1."""
    return ClipArrays(
        albedo=seq.stack("albedo").astype(np.float32),
        attributes=seq.stack("attributes").astype(np.float32),
        env_ldr=seq.stack("envmap_ldr").astype(np.float32),
        frame_indices=np.arange(len(seq)),
        reference=seq.stack("reference").astype(np.float32) if with_reference else None,
    )


def keyframe_indices(length: int, gap: int, offset: int = 0) -> np.ndarray:
    """Frame indices {offset, offset+gap, ...} below ``length``."""
    if gap < 1:
        raise InvalidArgumentError("keyframe gap must be >= 1")
    return np.arange(offset, length, gap)


def condition(clips, ref_frames=None, keyframes=None, key_positions=None, dtype=torch.float32):
    """Batch a list of ClipArrays into a ConditionBundle.

    ``ref_frames`` is a list (per clip) of either None or an (n, H, W, 3)
    array placed in the first n frames of the masked reference clip.
    """
    def stack(name):
        return torch.as_tensor(np.stack([getattr(c, name) for c in clips]), dtype=dtype)

    attrs = stack("attributes")
    b, f, h, w, _ = attrs.shape
    ref = mask = None
    if ref_frames is not None and any(r is not None for r in ref_frames):
        ref = torch.zeros(b, f, h, w, 3, dtype=dtype)
        mask = torch.zeros(b, f, h, w, 1, dtype=dtype)
        for i, r in enumerate(ref_frames):
            if r is None:
                continue
            n = len(r)
            ref[i, :n] = torch.as_tensor(np.asarray(r), dtype=dtype)
            mask[i, :n] = 1.0
    kf = kp = None
    if keyframes is not None:
        kf = torch.as_tensor(np.asarray(keyframes), dtype=dtype)
        kp = torch.as_tensor(np.asarray(key_positions), dtype=dtype)
    return ConditionBundle(
        attributes=attrs,
        env_ldr=stack("env_ldr"),
        ref_clip=ref,
        ref_mask=mask,
        keyframes=kf,
        key_positions=kp,
        frame_positions=torch.as_tensor(np.stack([c.frame_indices for c in clips]), dtype=dtype),
    )


def nearest_keyframes(indices: np.ndarray, center: float, k: int) -> np.ndarray:
    """The ``k`` keyframe indices closest to ``center``, in increasing order."""
    order = np.argsort(np.abs(indices - center), kind="stable")[:k]
    return np.sort(indices[order])
