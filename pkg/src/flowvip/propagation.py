"""Bidirectional flow-guided feature propagation with deformable compensation.

Backward propagation runs the recurrence from the last frame toward the first,
pulling each neighbor feature into the current frame with the forward flow and
a predicted deformable refinement; forward propagation is the time-reversed
mirror with the backward flow. The two streams fuse through a 1x1 convolution.
"""

from __future__ import annotations

from . import geom, nn
from . import tensor as T
from .tensor import Tensor


def _conv_single(conv, x):
    # conv2d layers take a batch axis; recurrence steps are single frames
    return T.tslice(conv(T.reshape(x, 1, *x.shape)), 0)


class PropagationCell(nn.Module):
    """One direction's parameters: offset predictor, deformable weights, merge."""

    def __init__(self, rng, channels, kernel=3, groups=2):
        super().__init__()
        self.channels = channels
        self.kernel = kernel
        self.groups = groups
        taps = kernel * kernel * groups
        cin = 2 * channels + 2  # current feature, warped neighbor, flow
        self.offset_conv1 = nn.Conv2d(rng, cin, channels, 3)
        self.offset_conv2 = nn.Conv2d(rng, channels, channels, 3)
        # zero-init: training starts at zero offsets and half-open masks
        self.offset_conv3 = nn.Conv2d(rng, channels, 3 * taps, 3, zero_init=True)
        cg = channels // groups
        fan = kernel * kernel * cg
        self.deform_weight = Tensor(
            nn.uniform_init(rng, (groups, kernel, kernel, cg, cg), fan), requires_grad=True
        )
        self.deform_bias = Tensor(nn.uniform_init(rng, (channels,), fan), requires_grad=True)
        self.merge_conv1 = nn.Conv2d(rng, 2 * channels, channels, 3)
        self.merge_conv2 = nn.Conv2d(rng, channels, channels, 3)

    def deform_params(self, feat, warped, flow):
        """Predict offsets and mask logits from (feature, warped neighbor, flow)."""
        x = T.concat([feat, warped, flow], axis=-1)
        x = T.leaky_relu(_conv_single(self.offset_conv1, x), 0.2)
        x = T.leaky_relu(_conv_single(self.offset_conv2, x), 0.2)
        raw = _conv_single(self.offset_conv3, x)
        taps = self.kernel * self.kernel * self.groups
        offsets = T.tslice(raw, (slice(None), slice(None), slice(0, 2 * taps)))
        logits = T.tslice(raw, (slice(None), slice(None), slice(2 * taps, 3 * taps)))
        return geom.DeformParams(offsets, logits)

    def align(self, neighbor, flow, params):
        """Deformable warp of the neighbor feature around flow-displaced taps."""
        return geom.mod_deform_conv(
            neighbor, self.deform_weight, self.deform_bias, flow, params, self.groups
        )

    def merge(self, feat, aligned):
        x = T.concat([feat, aligned], axis=-1)
        x = T.leaky_relu(_conv_single(self.merge_conv1, x), 0.2)
        return _conv_single(self.merge_conv2, x)


def propagate_backward(features, flows_fwd, cell, use_dcn=True):
    """Recurrence from the last frame to the first, guided by forward flows.

    features: (t, h, w, c); flows_fwd: (t-1, h, w, 2) where flows_fwd[i] maps
    frame i to i+1. The last frame initializes the recurrence unchanged.
    """
    t = features.shape[0]
    if flows_fwd.shape[0] != t - 1:
        raise ValueError(f"expected {t - 1} flow maps, got {flows_fwd.shape[0]}")
    out = [None] * t
    out[t - 1] = T.tslice(features, t - 1)
    for i in range(t - 2, -1, -1):
        feat = T.tslice(features, i)
        flow = T.tslice(flows_fwd, i)
        warped = geom.bilinear_warp(out[i + 1], flow)
        if use_dcn:
            params = cell.deform_params(feat, warped, flow)
            aligned = cell.align(out[i + 1], flow, params)
        else:
            aligned = warped
        out[i] = cell.merge(feat, aligned)
    return T.concat([T.reshape(o, 1, *o.shape) for o in out], axis=0)


def propagate_forward(features, flows_bwd, cell, use_dcn=True):
    """Mirror recurrence from the first frame to the last, guided by backward flows.

    flows_bwd[i] maps frame i+1 to frame i; implemented as backward propagation
    on the time-reversed sequence, so the two directions share one recurrence.
    """
    rev = T.tslice(features, slice(None, None, -1))
    rev_flows = T.tslice(flows_bwd, slice(None, None, -1))
    out = propagate_backward(rev, rev_flows, cell, use_dcn=use_dcn)
    return T.tslice(out, slice(None, None, -1))


class BidirectionalPropagation(nn.Module):
    """Independently parameterized backward and forward cells plus 1x1 fusion."""

    def __init__(self, rng, channels, kernel=3, groups=2):
        super().__init__()
        self.cell_backward = PropagationCell(rng, channels, kernel, groups)
        self.cell_forward = PropagationCell(rng, channels, kernel, groups)
        self.fusion = nn.Conv2d(rng, 2 * channels, channels, 1, pad=0)

    def fuse(self, fwd, bwd):
        """Adaptive per-pixel 1x1 fusion of the two propagation streams."""
        if fwd.shape != bwd.shape:
            raise ValueError(f"fuse shape mismatch: {fwd.shape} vs {bwd.shape}")
        return self.fusion(T.concat([fwd, bwd], axis=-1))

    def __call__(self, features, flows, use_dcn=True):
        """features: (t, h, w, c); flows: BidirectionalFlows for the window."""
        bwd = propagate_backward(features, flows.forward, self.cell_backward, use_dcn)
        fwd = propagate_forward(features, flows.backward, self.cell_forward, use_dcn)
        return self.fuse(fwd, bwd)
