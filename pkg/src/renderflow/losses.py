"""Training losses on channel-last image tensors (..., H, W, C).

The perceptual term is a dependency-free multi-scale proxy: image and
finite-difference gradient L1 distances at full, half and quarter
resolution. It stands in for a pretrained perceptual network.
"""
from __future__ import annotations

import torch

from renderflow.bridge import DEFAULT_T_MAX, recover_endpoint, velocity_target
from renderflow.errors import InvalidArgumentError

PIXEL_TERMS = ("perceptual", "gradient")


def _as_tensor(x):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def _same_shape(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise InvalidArgumentError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_latent(v_pred, z1, zt, t, t_max=DEFAULT_T_MAX):
    """Mean squared error against the bridge drift (z1 - zt) / (1 - t)."""
    v_pred, z1, zt = map(_as_tensor, (v_pred, z1, zt))
    _same_shape(v_pred, z1)
    return torch.mean((v_pred - velocity_target(z1, zt, t, t_max)) ** 2)


def _grads(img):
    gx = img[..., :, 1:, :] - img[..., :, :-1, :]
    gy = img[..., 1:, :, :] - img[..., :-1, :, :]
    return gx, gy


def loss_gradient(pred, gt):
    """mean |dx pred - dx gt| + mean |dy pred - dy gt| with forward differences."""
    pred, gt = _as_tensor(pred), _as_tensor(gt)
    _same_shape(pred, gt)
    px, py = _grads(pred)
    gx, gy = _grads(gt)
    total = pred.new_zeros(())
    if px.numel():
        total = total + torch.mean(torch.abs(px - gx))
    if py.numel():
        total = total + torch.mean(torch.abs(py - gy))
    return total


def downsample2(img):
    """2x2 average pool over the H, W axes of a (..., H, W, C) tensor (odd edges cropped)."""
    h, w = img.shape[-3] // 2 * 2, img.shape[-2] // 2 * 2
    img = img[..., :h, :w, :]
    lead = img.shape[:-3]
    x = img.reshape(*lead, h // 2, 2, w // 2, 2, img.shape[-1])
    return x.mean(dim=(-4, -2))


def loss_perceptual_proxy(pred, gt, scales=3):
    """Sum over scales 1, 1/2, 1/4 of gradient L1 plus image L1."""
    pred, gt = _as_tensor(pred), _as_tensor(gt)
    _same_shape(pred, gt)
    total = pred.new_zeros(())
    for s in range(scales):
        if s:
            if min(pred.shape[-3], pred.shape[-2]) < 2:
                break
            pred, gt = downsample2(pred), downsample2(gt)
        total = total + loss_gradient(pred, gt) + torch.mean(torch.abs(pred - gt))
    return total


def loss_pixel(pred, gt, terms=PIXEL_TERMS):
    """Composite pixel loss; ``terms`` selects which of the two parts are active."""
    total = _as_tensor(pred).new_zeros(())
    if "perceptual" in terms:
        total = total + loss_perceptual_proxy(pred, gt)
    if "gradient" in terms:
        total = total + loss_gradient(pred, gt)
    return total


def loss_total(v_pred, state, i_gt=None, lam=1.0, terms=PIXEL_TERMS, t_max=DEFAULT_T_MAX):
    """Latent bridge loss plus ``lam`` times the pixel loss.

    ``state`` is a BridgeState; the predicted image is the recovered endpoint
    (pixel space, so decoding is the identity) and is deliberately not clamped.
    Returns (total, latent, pixel).
    """
    i_gt = state.z1 if i_gt is None else i_gt
    latent = loss_latent(v_pred, state.z1, state.zt, state.t, t_max)
    if lam == 0 or not terms:
        return latent, latent, latent.new_zeros(())
    i_pred = recover_endpoint(state.zt, v_pred, state.t)
    pixel = loss_pixel(i_pred, i_gt, terms)
    return latent + lam * pixel, latent, pixel


# -- intrinsic decomposition losses -----------------------------------------

def loss_albedo(pred, gt, lam=1.0):
    pred, gt = _as_tensor(pred), _as_tensor(gt)
    _same_shape(pred, gt)
    return torch.mean(torch.abs(pred - gt)) + lam * loss_perceptual_proxy(pred, gt)


def loss_normal(pred, gt, mask=None, eps=1e-8, encoded=True):
    """1 - mean cosine similarity over hit pixels.

    With ``encoded`` the inputs are [0, 1] encodings and are decoded to
    [-1, 1] first.
    """
    pred, gt = _as_tensor(pred), _as_tensor(gt)
    _same_shape(pred, gt)
    if encoded:
        pred, gt = pred * 2 - 1, gt * 2 - 1
    cos = torch.sum(pred * gt, dim=-1) / (
        torch.clamp(torch.linalg.vector_norm(pred, dim=-1) * torch.linalg.vector_norm(gt, dim=-1), min=eps))
    if mask is not None:
        m = _as_tensor(mask).to(cos.dtype).reshape(cos.shape)
        return 1 - torch.sum(cos * m) / torch.clamp(torch.sum(m), min=1.0)
    return 1 - torch.mean(cos)


def ssi_from_delta(delta, mask=None, lam=0.5):
    """(1/N) sum d^2 - (lam/N^2) (sum d)^2 over the masked entries."""
    if mask is not None:
        m = _as_tensor(mask).to(delta.dtype).reshape(delta.shape)
        n = torch.clamp(torch.sum(m), min=1.0)
        s = torch.sum(delta * m)
        return torch.sum(delta * delta * m) / n - lam * s * s / (n * n)
    n = delta.numel()
    s = torch.sum(delta)
    return torch.sum(delta * delta) / n - lam * s * s / (n * n)


def loss_depth_ssi(pred, gt, mask=None, lam=0.5, eps=1e-6):
    """Log-depth loss with Delta_i = log(pred_i + eps) - log(gt_i + eps).

    lam = 0.5 is the half-weighted variant; lam = 1 removes any constant
    log-shift (full scale invariance in depth).
    """
    pred, gt = _as_tensor(pred), _as_tensor(gt)
    _same_shape(pred, gt)
    if torch.any(pred + eps <= 0) or torch.any(gt + eps <= 0):
        raise InvalidArgumentError("depth values must be positive after the eps guard")
    return ssi_from_delta(torch.log(pred + eps) - torch.log(gt + eps), mask, lam)


def loss_depth_ssi_log(pred_log, gt, mask=None, lam=0.5, eps=1e-6):
    """Same loss when the prediction is already a log-depth."""
    pred_log, gt = _as_tensor(pred_log), _as_tensor(gt)
    _same_shape(pred_log, gt)
    return ssi_from_delta(pred_log - torch.log(gt + eps), mask, lam)


def loss_material(pred, gt):
    pred, gt = _as_tensor(pred), _as_tensor(gt)
    _same_shape(pred, gt)
    return torch.mean(torch.abs(pred - gt))


def psnr_torch(pred, gt):
    mse = torch.mean((torch.clamp(pred, 0, 1) - gt) ** 2)
    return -10 * torch.log10(torch.clamp(mse, min=1e-12))

