"""Image metrics and report plumbing.

PSNR uses peak 1.0. SSIM uses an 11x11 Gaussian window (sigma 1.5),
K1=0.01, K2=0.03, L=1, over the grayscale channel mean, and averages the
SSIM map over the valid (unpadded) region.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.signal import convolve2d

from renderflow.errors import InvalidArgumentError
from renderflow.losses import loss_perceptual_proxy

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
PROXY_NOTE = ("perceptual_proxy is a multi-scale gradient+L1 structural proxy standing in for LPIPS; "
              "its values are not comparable to published LPIPS numbers")


def _pair(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10 log10(1 / MSE); identical inputs give +inf."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def to_gray(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img if img.ndim == 2 else img.mean(axis=-1)


def ssim_map(a, b, data_range=1.0) -> np.ndarray:
    a, b = _pair(a, b)
    a, b = to_gray(a), to_gray(b)
    if a.ndim != 2:
        raise InvalidArgumentError("ssim expects an (H, W) or (H, W, C) image")
    if min(a.shape) < SSIM_WINDOW:
        raise InvalidArgumentError(f"image {a.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    w = gaussian_window()

    def filt(x):
        return convolve2d(x, w, mode="valid")

    c1, c2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))


def ssim(a, b) -> float:
    return float(np.mean(ssim_map(a, b)))


def angular_error(pred_n, gt_n, mask=None, encoded=False, eps=1e-8) -> float:
    """Mean angle in degrees between normal fields over ``mask``."""
    p, g = _pair(pred_n, gt_n)
    if encoded:
        p, g = p * 2 - 1, g * 2 - 1
    cos = np.sum(p * g, axis=-1) / np.maximum(np.linalg.norm(p, axis=-1) * np.linalg.norm(g, axis=-1), eps)
    ang = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
    if mask is None:
        return float(np.mean(ang))
    m = np.asarray(mask, dtype=bool).reshape(ang.shape)
    if not m.any():
        raise InvalidArgumentError("angular_error mask selects no pixels")
    return float(np.mean(ang[m]))


def rmse(a, b, mask=None) -> float:
    a, b = _pair(a, b)
    d2 = (a - b) ** 2
    if mask is None:
        return float(np.sqrt(np.mean(d2)))
    # mask is per pixel: (..., H, W) or (..., H, W, 1)
    m = np.asarray(mask, dtype=bool).reshape(d2.shape[:-1])
    if not m.any():
        raise InvalidArgumentError("rmse mask selects no pixels")
    return float(np.sqrt(np.mean(d2[m])))


def perceptual_proxy(a, b) -> float:
    a, b = _pair(a, b)
    return float(loss_perceptual_proxy(torch.from_numpy(a), torch.from_numpy(b)))


# ----------------------------------------------------------------------------
# reports

@dataclass
class MetricReport:
    per_frame: list
    aggregate: dict
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        return jsonable({"per_frame": self.per_frame, "aggregate": self.aggregate, "meta": self.meta})

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def _mean(values):
    values = list(values)
    if not values:
        return None
    if any(math.isinf(v) for v in values):
        return math.inf
    return float(np.mean(values))


def evaluate_frames(pred, gt, keyframe_indices=(), meta=None) -> MetricReport:
    """Per-frame PSNR/SSIM/proxy for (F, H, W, 3) stacks.

    Aggregates cover all frames and, separately, frames that are not
    keyframes (those are trivially easy when keyframes are ground truth).
    """
    pred, gt = _pair(pred, gt)
    keys = {int(k) for k in keyframe_indices}
    rows = []
    for i in range(len(pred)):
        rows.append({"frame": i, "psnr": psnr(pred[i], gt[i]), "ssim": ssim(pred[i], gt[i]),
                     "perceptual_proxy": perceptual_proxy(pred[i], gt[i]), "keyframe": i in keys})
    agg = {}
    for name in ("psnr", "ssim", "perceptual_proxy"):
        agg[name] = _mean(r[name] for r in rows)
        agg[f"{name}_non_keyframe"] = _mean(r[name] for r in rows if not r["keyframe"])
    return MetricReport(per_frame=rows, aggregate=agg, meta={"proxy_note": PROXY_NOTE, **(meta or {})})


def merge_reports(reports, meta=None) -> MetricReport:
    """Pool per-frame rows of several reports and recompute the aggregates."""
    rows = [dict(r, sequence=i) for i, rep in enumerate(reports) for r in rep.per_frame]
    agg = {}
    for name in ("psnr", "ssim", "perceptual_proxy"):
        agg[name] = _mean(r[name] for r in rows)
        agg[f"{name}_non_keyframe"] = _mean(r[name] for r in rows if not r["keyframe"])
    return MetricReport(per_frame=rows, aggregate=agg, meta={"proxy_note": PROXY_NOTE, **(meta or {})})


def variance_over_runs(render_fn, n_runs: int, gt) -> dict:
    """Run ``render_fn(run_index) -> (F, H, W, 3)`` repeatedly.

    Reports the per-frame variance of PSNR and SSIM across runs and the
    largest absolute pixel deviation from the first run.
    """
    if n_runs < 1:
        raise InvalidArgumentError("n_runs must be >= 1")
    gt = np.asarray(gt, dtype=np.float64)
    runs = [np.asarray(render_fn(i), dtype=np.float64) for i in range(n_runs)]
    first = runs[0]
    max_dev = max(float(np.max(np.abs(r - first))) for r in runs)
    out = {"n_runs": n_runs, "max_pixel_deviation": max_dev, "per_frame_variance": {}}
    for name, fn in (("psnr", psnr), ("ssim", ssim)):
        vals = np.array([[fn(r[i], gt[i]) for i in range(len(gt))] for r in runs])
        # identical finite or infinite values have zero spread
        # a mix of exact (infinite PSNR) and inexact runs has unbounded spread
        var = [0.0 if np.all(col == col[0]) else (math.inf if np.isinf(col).any() else float(np.var(col)))
               for col in vals.T]
        out["per_frame_variance"][name] = var
        out[f"max_{name}_variance"] = max(var)
    return out


def jsonable(obj):
    """Convert numpy scalars/arrays and infinities for JSON output."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        if math.isnan(v):
            return "nan"
        return v
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def rows_to_csv(rows, columns=None) -> str:
    rows = [jsonable(r) for r in rows]
    columns = columns or list(dict.fromkeys(k for r in rows for k in r))
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def rows_to_text(rows, columns=None, floatfmt="{:.4f}") -> str:
    """Aligned plain-text table."""
    columns = columns or list(dict.fromkeys(k for r in rows for k in r))

    def fmt(v):
        if isinstance(v, float):
            return "inf" if math.isinf(v) else floatfmt.format(v)
        return "" if v is None else str(v)

    cells = [[fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)
