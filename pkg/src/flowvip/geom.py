"""Geometric kernels: bilinear flow warping and modulated deformable convolution.

Coordinate convention: a flow value at pixel p displaces the *sampling* point,
i.e. out(p) reads the source at p + flow(p) (backward sampling). Flow channel 0
is the horizontal displacement dx, channel 1 the vertical displacement dy, in
pixels at the grid's own resolution. Out-of-bounds samples clamp to the edge.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import NumericError
from .tensor import Tensor

# Test hook: when set, the weight gradient of mod_deform_conv is scaled by a
# wrong factor so gradient checks must fail (negative control for the verifier).
_BREAK_DCN_BACKWARD = False


def set_broken_dcn_backward(enabled):
    global _BREAK_DCN_BACKWARD
    _BREAK_DCN_BACKWARD = bool(enabled)


@dataclass
class DeformParams:
    """Per-location deformable sampling parameters.

    offsets: (h, w, k*k*g*2) tensor laid out [group][tap][dy, dx], pixels.
    mask_logits: (h, w, k*k*g) tensor laid out [group][tap]; masks are
    sigmoid(mask_logits), so they always land strictly inside (0, 1).
    """

    offsets: Tensor
    mask_logits: Tensor

    def validate(self, kernel, groups):
        oc = self.offsets.shape[-1]
        mc = self.mask_logits.shape[-1]
        if oc != 2 * mc:
            raise ValueError(f"offset channels {oc} must be twice mask channels {mc}")
        if mc != kernel * kernel * groups:
            raise ValueError(f"mask channels {mc} != K*K*G = {kernel * kernel * groups}")


def _bilinear_terms(coords_y, coords_x, h, w, row_base):
    """Decompose fractional sample coords into 4 (row-index, weight) corner terms.

    coords_* are graph tensors of identical shape; row_base is a constant array
    broadcastable to that shape giving the first row of each source plane.
    Gradients flow into the coordinates through the fractional weights.
    """
    cy = T.clip(coords_y, 0.0, float(h - 1))
    cx = T.clip(coords_x, 0.0, float(w - 1))
    y0 = np.floor(cy.data)
    x0 = np.floor(cx.data)
    fy = cy - Tensor(y0)
    fx = cx - Tensor(x0)
    y0 = y0.astype(np.intp)
    x0 = x0.astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    one = 1.0
    base = np.broadcast_to(row_base, y0.shape)
    terms = []
    for yc, wy in ((y0, one - fy), (y1, fy)):
        for xc, wx in ((x0, one - fx), (x1, fx)):
            idx = (base + yc * w + xc).reshape(-1)
            weight = T.reshape(wy * wx, idx.size, 1)
            terms.append((idx, weight))
    return terms


def bilinear_warp(src, flow):
    """Warp src by flow: out(y, x, .) = bilinear sample of src at (y+dy, x+dx).

    src: (..., h, w, c); flow: (..., h, w, 2) with identical leading dims.
    Differentiable in both src and flow; edge-clamped sampling.
    """
    if src.shape[:-1] != flow.shape[:-1] or flow.shape[-1] != 2:
        raise T.GraphError(f"bilinear_warp: src {src.shape} incompatible with flow {flow.shape}")
    *lead, h, w, c = src.shape
    b = int(np.prod(lead)) if lead else 1
    grid_y, grid_x = np.mgrid[0:h, 0:w].astype(src.data.dtype)
    flow4 = T.reshape(flow, b, h, w, 2)
    coords_x = T.tslice(flow4, (slice(None), slice(None), slice(None), 0)) + Tensor(grid_x)
    coords_y = T.tslice(flow4, (slice(None), slice(None), slice(None), 1)) + Tensor(grid_y)
    row_base = (np.arange(b) * h * w).reshape(b, 1, 1)
    rows = T.reshape(src, b * h * w, c)
    out = None
    for idx, weight in _bilinear_terms(coords_y, coords_x, h, w, row_base):
        term = T.gather_rows(rows, idx) * weight
        out = term if out is None else out + term
    return T.reshape(out, *src.shape)


def flow_sanity(flow, max_flow):
    """Raise if a flow field is non-finite or implausibly large."""
    data = flow.data if isinstance(flow, Tensor) else np.asarray(flow)
    if not np.all(np.isfinite(data)):
        raise NumericError("non-finite flow field")
    peak = float(np.abs(data).max()) if data.size else 0.0
    if peak > max_flow:
        raise NumericError(f"flow magnitude {peak:.2f} exceeds bound {max_flow}")


def mod_deform_conv(x, weight, bias, base_flow, params, groups):
    """Modulated deformable convolution with a shared base displacement.

    x: (h, w, cin); weight: (G, k, k, cin/G, cout/G); bias: (cout,);
    base_flow: (h, w, 2) or None; params: DeformParams.
    Each kernel tap samples at p + tap + base_flow(p) + offset(p, g, tap),
    scaled by sigmoid(mask_logit(p, g, tap)); same-padding semantics.
    """
    h, w, cin = x.shape
    g, k = weight.shape[0], weight.shape[1]
    if g != groups:
        raise ValueError(f"weight carries {g} groups, expected {groups}")
    if cin % groups:
        raise ValueError(f"input channels {cin} not divisible by groups {groups}")
    if k % 2 == 0:
        raise ValueError(f"kernel size {k} must be odd")
    params.validate(k, groups)
    cin_g = cin // groups
    cout_g = weight.shape[4]
    kk = k * k
    half = k // 2

    # (h, w, g, kk) sampling coordinates, built relative to each pixel.
    taps = np.mgrid[-half : half + 1, -half : half + 1].reshape(2, kk)  # (dy, dx)
    grid_y, grid_x = np.mgrid[0:h, 0:w].astype(x.data.dtype)
    base_y = grid_y[:, :, None, None] + taps[0][None, None, None, :]
    base_x = grid_x[:, :, None, None] + taps[1][None, None, None, :]
    offs = T.reshape(params.offsets, h, w, groups, kk, 2)
    off_y = T.tslice(offs, (slice(None),) * 4 + (0,))
    off_x = T.tslice(offs, (slice(None),) * 4 + (1,))
    coords_y = off_y + Tensor(base_y)
    coords_x = off_x + Tensor(base_x)
    if base_flow is not None:
        flow_x = T.tslice(base_flow, (slice(None), slice(None), 0))
        flow_y = T.tslice(base_flow, (slice(None), slice(None), 1))
        coords_y = coords_y + T.reshape(flow_y, h, w, 1, 1)
        coords_x = coords_x + T.reshape(flow_x, h, w, 1, 1)

    # samples gathered from per-group planes: rows (g*h*w, cin_g)
    xg = T.permute(T.reshape(x, h * w, groups, cin_g), (1, 0, 2))
    rows = T.reshape(xg, groups * h * w, cin_g)
    # coords (h, w, g, kk) -> (g, h*w, kk) sample order
    coords_y = T.reshape(T.permute(coords_y, (2, 0, 1, 3)), groups, h * w, kk)
    coords_x = T.reshape(T.permute(coords_x, (2, 0, 1, 3)), groups, h * w, kk)
    row_base = (np.arange(groups) * h * w).reshape(groups, 1, 1)

    sampled = None
    for idx, wgt in _bilinear_terms(coords_y, coords_x, h, w, row_base):
        term = T.gather_rows(rows, idx) * wgt
        sampled = term if sampled is None else sampled + term
    # (g*h*w*kk, cin_g); modulate, then contract taps x channels per group
    mask = T.sigmoid(T.reshape(T.permute(T.reshape(params.mask_logits, h, w, groups, kk), (2, 0, 1, 3)), groups * h * w * kk, 1))
    sampled = sampled * mask
    sampled = T.reshape(sampled, groups, h * w, kk * cin_g)
    wmat = T.reshape(weight, groups, kk * cin_g, cout_g)
    if _BREAK_DCN_BACKWARD:
        wmat = _broken_grad(wmat)
    out = sampled @ wmat  # (g, h*w, cout_g)
    out = T.reshape(T.permute(out, (1, 0, 2)), h, w, groups * cout_g)
    return out + bias


def _broken_grad(t):
    # deliberately corrupt the backward rule (gradcheck negative control)
    return Tensor._result(t.data, (t,), lambda gout: (gout * 1.5,))
