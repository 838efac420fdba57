"""Evaluation metrics: PSNR, Gaussian-window SSIM, and flow-warping error.

PSNR/SSIM follow the usual [0, 1]-range conventions (PSNR capped at 99 dB for
identical frames; SSIM with an 11x11 sigma=1.5 window, C1=0.01^2, C2=0.03^2,
averaged over RGB). The warping error measures temporal stability: the mean
squared difference between each frame and its successor warped back by the
ground-truth forward flow, restricted to pixels that survive a forward-backward
flow consistency check.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import geom
from .tensor import Tensor, no_grad

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
_C1 = 0.01**2
_C2 = 0.03**2
PSNR_CAP = 99.0


def _check_pair(a, b, name):
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def psnr(a, b):
    """Per-frame PSNR in dB for (t, h, w, c) videos in [0, 1]."""
    _check_pair(a, b, "psnr")
    t = a.shape[0]
    mse = ((a - b) ** 2).reshape(t, -1).mean(axis=1)
    out = np.full(t, PSNR_CAP)
    nz = mse > 0
    out[nz] = np.minimum(10.0 * np.log10(1.0 / mse[nz]), PSNR_CAP)
    return out


def _gaussian_1d():
    half = SSIM_WINDOW // 2
    xs = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(xs**2) / (2 * SSIM_SIGMA**2))
    return k / k.sum()


def _filter_valid(img, k1):
    tmp = sliding_window_view(img, len(k1), axis=0) @ k1
    return sliding_window_view(tmp, len(k1), axis=1) @ k1


def _ssim_channel(a, b, k1):
    mua = _filter_valid(a, k1)
    mub = _filter_valid(b, k1)
    va = _filter_valid(a * a, k1) - mua**2
    vb = _filter_valid(b * b, k1) - mub**2
    cov = _filter_valid(a * b, k1) - mua * mub
    num = (2 * mua * mub + _C1) * (2 * cov + _C2)
    den = (mua**2 + mub**2 + _C1) * (va + vb + _C2)
    return float((num / den).mean())


def ssim(a, b):
    """Per-frame SSIM for (t, h, w, c) videos; channel-and-pixel mean."""
    _check_pair(a, b, "ssim")
    t, h, w, c = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"frame {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    k1 = _gaussian_1d()
    out = np.empty(t)
    for ti in range(t):
        out[ti] = np.mean([_ssim_channel(a[ti, :, :, ch], b[ti, :, :, ch], k1) for ch in range(c)])
    return out


def warp_error(video, gt_flows_fullres, occlusion_threshold=1.0):
    """Temporal warping error against ground-truth full-resolution flows.

    video: (t, h, w, c); gt_flows_fullres: (forward, backward) arrays of shape
    (t-1, h, w, 2). Returns 0.0 for single-frame videos (no pairs).
    """
    fwd, bwd = gt_flows_fullres
    t = video.shape[0]
    if t <= 1:
        return 0.0
    if fwd.shape[0] != t - 1 or bwd.shape[0] != t - 1:
        raise ValueError(f"expected {t - 1} flow maps, got {fwd.shape[0]}/{bwd.shape[0]}")
    errs = []
    with no_grad():
        for ti in range(t - 1):
            warped = geom.bilinear_warp(Tensor(video[ti + 1]), Tensor(fwd[ti])).data
            # backward flow sampled at the forward-displaced position
            bwd_at = geom.bilinear_warp(Tensor(bwd[ti]), Tensor(fwd[ti])).data
            residual = np.linalg.norm(fwd[ti] + bwd_at, axis=-1)
            visible = residual < occlusion_threshold
            if not visible.any():
                continue
            sq = ((warped - video[ti]) ** 2).mean(axis=-1)
            errs.append(float(sq[visible].mean()))
    return float(np.mean(errs)) if errs else 0.0


@dataclass
class EvalReport:
    """Per-video metric rows plus frame-count-weighted aggregates."""

    rows: list = field(default_factory=list)  # (name, frames, psnr, ssim, e_warp)
    config_text: str = ""

    def add(self, name, frames, psnr_db, ssim_val, e_warp):
        self.rows.append((name, int(frames), float(psnr_db), float(ssim_val), float(e_warp)))

    def aggregate(self):
        if not self.rows:
            return (0, 0.0, 0.0, 0.0)
        frames = np.array([r[1] for r in self.rows], dtype=float)
        total = frames.sum()
        vals = np.array([[r[2], r[3], r[4]] for r in self.rows])
        agg = (vals * frames[:, None]).sum(axis=0) / total
        return (int(total), float(agg[0]), float(agg[1]), float(agg[2]))

    def render_table(self):
        """Aligned table; E_warp column follows the x10^-2 reporting convention."""
        header = f"{'video':<14}{'frames':>7}{'PSNR(dB)':>10}{'SSIM':>8}{'VFID':>6}{'E_warp*':>9}"
        lines = [header, "-" * len(header)]
        for name, frames, p, s, e in self.rows:
            lines.append(f"{name:<14}{frames:>7}{p:>10.3f}{s:>8.4f}{'-':>6}{e * 100:>9.4f}")
        total, p, s, e = self.aggregate()
        lines.append("-" * len(header))
        lines.append(f"{'ALL':<14}{total:>7}{p:>10.3f}{s:>8.4f}{'-':>6}{e * 100:>9.4f}")
        lines.append("(E_warp* = E_warp x 1e-2 units; VFID not computed in this build)")
        return "\n".join(lines) + "\n"

    def render_records(self):
        """One key=value record per line, raw (unscaled) metric values."""
        lines = []
        for name, frames, p, s, e in self.rows:
            lines.append(f"video={name} frames={frames} psnr={p:.6f} ssim={s:.6f} vfid=null e_warp={e:.8f}")
        total, p, s, e = self.aggregate()
        lines.append(f"video=ALL frames={total} psnr={p:.6f} ssim={s:.6f} vfid=null e_warp={e:.8f}")
        return "\n".join(lines) + "\n"
