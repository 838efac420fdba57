"""Flow completion: coarse-to-fine residual estimation between masked frames.

A small pyramid network predicts bidirectional flows for a whole local window
in one feed-forward pass. The final layer of every level is zero-initialized,
so an untrained network predicts exactly zero flow and training starts from
the identity warp.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geom, nn
from . import tensor as T
from .tensor import Tensor


@dataclass
class BidirectionalFlows:
    """Stacked flow maps for a local window of T frames.

    forward[t]  maps frame t   -> t+1   (t = 0..T-2)
    backward[t] maps frame t+1 -> t     (t = 0..T-2)
    Both are (T-1, h, w, 2) tensors; empty (0, h, w, 2) when T < 2.
    """

    forward: Tensor
    backward: Tensor

    @property
    def count(self):
        return self.forward.shape[0]

    def detach(self):
        return BidirectionalFlows(self.forward.detach(), self.backward.detach())


def downsample_quarter(frames):
    """Area-average 4x4 reduction of (..., h, w, c); h and w divisible by 4."""
    *lead, h, w, c = frames.shape
    if h % 4 or w % 4:
        raise ValueError(f"spatial extents ({h}, {w}) not divisible by 4")
    x = T.reshape(frames, *lead, h // 4, 4, w // 4, 4, c)
    n = len(lead)
    return x.mean(axis=(n + 1, n + 3))


class _LevelStack(nn.Module):
    """Five convolutions (7x7 head, 3x3 rest) predicting a residual flow."""

    def __init__(self, rng, cin=8, width=16):
        super().__init__()
        self.convs = nn.ModuleList(
            [
                nn.Conv2d(rng, cin, width, 7),
                nn.Conv2d(rng, width, width, 3),
                nn.Conv2d(rng, width, width, 3),
                nn.Conv2d(rng, width, width // 2, 3),
                nn.Conv2d(rng, width // 2, 2, 3, zero_init=True),
            ]
        )

    def __call__(self, x):
        for conv in self.convs[:-1]:
            x = T.leaky_relu(conv(x), 0.2)
        return self.convs[-1](x)


class FlowPyramidNet(nn.Module):
    """Coarse-to-fine flow estimator on 1/4-resolution frames."""

    def __init__(self, rng, levels=3, width=16):
        super().__init__()
        self.levels = levels
        self.stacks = nn.ModuleList([_LevelStack(rng, width=width) for _ in range(levels)])
        self.forward_calls = 0

    def __call__(self, f1, f2):
        """Estimate flow f1 -> f2 for a batch of frame pairs (b, h, w, 3)."""
        self.forward_calls += 1
        pyr1, pyr2 = [f1], [f2]
        for _ in range(self.levels - 1):
            pyr1.append(nn.avgpool2x(pyr1[-1]))
            pyr2.append(nn.avgpool2x(pyr2[-1]))
        flow = None
        for lvl in range(self.levels - 1, -1, -1):
            a, b = pyr1[lvl], pyr2[lvl]
            if flow is None:
                flow = Tensor(np.zeros((a.shape[0], a.shape[1], a.shape[2], 2)))
            else:
                flow = nn.upsample2x_bilinear(flow) * 2.0  # magnitude doubles per level
            warped = geom.bilinear_warp(b, flow)
            residual = self.stacks[lvl](T.concat([a, warped, flow], axis=-1))
            flow = flow + residual
        return flow


def estimate_bidirectional(frames_small, net):
    """All forward and backward flows of a window in a single net invocation.

    frames_small: (t, h, w, 3) at 1/4 resolution. Returns empty flow sets for
    t < 2 so degenerate windows propagate gracefully.
    """
    t, h, w, _ = frames_small.shape
    if t < 2:
        empty = Tensor(np.zeros((0, h, w, 2)))
        return BidirectionalFlows(empty, empty)
    lead = T.tslice(frames_small, slice(0, t - 1))
    lag = T.tslice(frames_small, slice(1, t))
    src = T.concat([lead, lag], axis=0)
    dst = T.concat([lag, lead], axis=0)
    flows = net(src, dst)
    fwd = T.tslice(flows, slice(0, t - 1))
    bwd = T.tslice(flows, slice(t - 1, 2 * (t - 1)))
    return BidirectionalFlows(fwd, bwd)


def flow_loss(pred, gt):
    """Mean absolute error per direction, summed over the two directions."""
    if pred.forward.shape != gt.forward.shape or pred.backward.shape != gt.backward.shape:
        raise ValueError(
            f"flow shape mismatch: pred {pred.forward.shape}/{pred.backward.shape} "
            f"vs gt {gt.forward.shape}/{gt.backward.shape}"
        )
    if pred.count == 0:
        return Tensor(0.0)
    return T.tabs(pred.forward - gt.forward).mean() + T.tabs(pred.backward - gt.backward).mean()


def endpoint_error(pred, gt):
    """Mean Euclidean endpoint error over all pixels of all maps, in pixels."""
    if pred.count == 0:
        return 0.0
    errs = []
    for a, b in ((pred.forward.data, gt.forward.data), (pred.backward.data, gt.backward.data)):
        errs.append(np.sqrt(((a - b) ** 2).sum(axis=-1)))
    return float(np.mean(np.concatenate([e.reshape(-1) for e in errs])))
