"""Temporal focal transformer: soft split/composite token embedding, 3D window
partitioning, spatial window pooling, local+global attention, and the F3N
feed-forward with its interior fold/unfold stage.

Queries live in fine sub-windows; keys and values concatenate (a) the window's
own fine tokens and (b) pooled tokens of the spatial window-of-windows centered
on it, clamped at grid edges. The temporal axis is never pooled and a window
always spans all frames in this build.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor

# attention score evaluations (query-key pairs x heads), for cost accounting
SCORE_EVALS = 0


def reset_score_evals():
    global SCORE_EVALS
    SCORE_EVALS = 0


@dataclass(frozen=True)
class SplitGeometry:
    kernel: int
    stride: int
    pad: int
    height: int  # feature-map extents the tokens were split from
    width: int

    def grid_shape(self):
        m = (self.height + 2 * self.pad - self.kernel) // self.stride + 1
        n = (self.width + 2 * self.pad - self.kernel) // self.stride + 1
        if m < 1 or n < 1:
            raise ValueError(f"degenerate soft-split geometry: grid {m}x{n}")
        return m, n


@dataclass
class TokenGrid:
    tokens: Tensor  # (t, m, n, c_e)
    geom: SplitGeometry


_COUNTS = {}


def _overlap_counts(t, geom):
    """How many patches cover each padded canvas cell (>=1 inside the crop)."""
    key = (t, geom)
    cached = _COUNTS.get(key)
    if cached is None:
        k, s, p, h, w = geom.kernel, geom.stride, geom.pad, geom.height, geom.width
        idx, _, _, hp, wp = nn._patch_index_2d(t, h, w, k, s, p)
        counts = np.bincount(idx, minlength=t * hp * wp).astype(np.float64)
        cached = np.maximum(counts, 1.0).reshape(-1, 1)
        _COUNTS[key] = cached
    return cached


def _split_patches(feat, geom):
    """(t, h, w, c) -> patch rows (t*m*n, k*k*c), zero padded, tap-major layout."""
    t, h, w, c = feat.shape
    k, s, p = geom.kernel, geom.stride, geom.pad
    idx, m, n, hp, wp = nn._patch_index_2d(t, h, w, k, s, p)
    xp = T.pad_zeros(feat, ((0, 0), (p, p), (p, p), (0, 0))) if p else feat
    rows = T.reshape(xp, t * hp * wp, c)
    patches = T.gather_rows(rows, idx)
    return T.reshape(patches, t * m * n, k * k * c), m, n


def _overlap_add(patch_rows, geom, t, c):
    """Inverse of `_split_patches`: scatter-add, divide by coverage, crop pad."""
    k, s, p, h, w = geom.kernel, geom.stride, geom.pad, geom.height, geom.width
    idx, m, n, hp, wp = nn._patch_index_2d(t, h, w, k, s, p)
    rows = T.reshape(patch_rows, t * m * n * k * k, c)
    canvas = T.scatter_rows(rows, idx, t * hp * wp)
    canvas = canvas * Tensor(1.0 / _overlap_counts(t, geom))
    canvas = T.reshape(canvas, t, hp, wp, c)
    return T.tslice(canvas, (slice(None), slice(p, p + h), slice(p, p + w)))


class SoftSplit(nn.Module):
    """Overlapped patch embedding: extract k x k patches, project to token dim."""

    def __init__(self, rng, channels, token_dim, kernel=7, stride=3, pad=3):
        super().__init__()
        self.channels = channels
        self.kernel = kernel
        self.stride = stride
        self.pad = pad
        self.proj = nn.Linear(rng, kernel * kernel * channels, token_dim)

    def __call__(self, feat):
        t, h, w, c = feat.shape
        geom = SplitGeometry(self.kernel, self.stride, self.pad, h, w)
        patches, m, n = _split_patches(feat, geom)
        tokens = self.proj(patches)
        return TokenGrid(T.reshape(tokens, t, m, n, tokens.shape[-1]), geom)


class SoftComposite(nn.Module):
    """Inverse embedding: project tokens back to patches, overlap-add, normalize."""

    def __init__(self, rng, channels, token_dim, kernel=7):
        super().__init__()
        self.channels = channels
        self.proj = nn.Linear(rng, token_dim, kernel * kernel * channels)

    def __call__(self, grid):
        t, m, n, _ = grid.tokens.shape
        gm, gn = grid.geom.grid_shape()
        if (m, n) != (gm, gn):
            raise ValueError(f"token grid {m}x{n} inconsistent with geometry {gm}x{gn}")
        patches = self.proj(T.reshape(grid.tokens, t * m * n, grid.tokens.shape[-1]))
        return _overlap_add(patches, grid.geom, t, self.channels)


def partition_windows(tokens, s_t, s_h, s_w):
    """(t, m, n, c) -> (n_windows, s_t, s_h, s_w, c); exact bijective reshape."""
    t, m, n, c = tokens.shape
    for extent, win, axis in ((t, s_t, "t"), (m, s_h, "h"), (n, s_w, "w")):
        if extent % win:
            raise ValueError(f"axis {axis}: extent {extent} not divisible by window {win}")
    nt, ny, nx = t // s_t, m // s_h, n // s_w
    x = T.reshape(tokens, nt, s_t, ny, s_h, nx, s_w, c)
    x = T.permute(x, (0, 2, 4, 1, 3, 5, 6))
    return T.reshape(x, nt * ny * nx, s_t, s_h, s_w, c)


def unpartition_windows(windows, t, m, n):
    """Inverse of partition_windows."""
    nw, s_t, s_h, s_w, c = windows.shape
    nt, ny, nx = t // s_t, m // s_h, n // s_w
    x = T.reshape(windows, nt, ny, nx, s_t, s_h, s_w, c)
    x = T.permute(x, (0, 3, 1, 4, 2, 5, 6))
    return T.reshape(x, t, m, n, c)


def pool_windows(windows, f_p):
    """Collapse each window's spatial tokens per temporal slice via f_p.

    windows: (nw, s_t, s_h, s_w, c) -> pooled (nw, s_t, c).
    """
    nw, s_t, s_h, s_w, c = windows.shape
    x = T.reshape(windows, nw, s_t, s_h * s_w, c)
    x = T.permute(x, (0, 1, 3, 2))  # (nw, s_t, c, s_h*s_w)
    pooled = f_p(x)  # (nw, s_t, c, 1)
    return T.reshape(pooled, nw, s_t, c)


def _neighborhood_index(nt, ny, nx, s_h, s_w):
    """Flat window indices of the s_h x s_w window-of-windows around each window."""
    wy = np.arange(ny)[:, None] + (np.arange(s_h) - s_h // 2)[None, :]
    wx = np.arange(nx)[:, None] + (np.arange(s_w) - s_w // 2)[None, :]
    wy = np.clip(wy, 0, ny - 1)  # (ny, s_h)
    wx = np.clip(wx, 0, nx - 1)  # (nx, s_w)
    spatial = wy[:, None, :, None] * nx + wx[None, :, None, :]  # (ny, nx, s_h, s_w)
    base = (np.arange(nt) * ny * nx)[:, None, None, None, None]
    idx = spatial[None] + base  # (nt, ny, nx, s_h, s_w)
    return idx.reshape(nt * ny * nx, s_h * s_w).astype(np.intp)


class F3N(nn.Module):
    """Feed-forward with an interior soft composite -> soft split stage.

    The hidden activation is reshaped into k x k patches (kernel**2 * channels
    wide), folded onto the feature canvas with overlap normalization, unfolded
    back, and only then passed through the activation and second linear layer,
    coupling tokens that share pixels.
    """

    def __init__(self, rng, token_dim, hidden_channels, kernel):
        super().__init__()
        self.hidden_channels = hidden_channels
        self.fc1 = nn.Linear(rng, token_dim, kernel * kernel * hidden_channels)
        self.fc2 = nn.Linear(rng, kernel * kernel * hidden_channels, token_dim)

    def __call__(self, grid):
        t, m, n, c = grid.tokens.shape
        h = self.fc1(T.reshape(grid.tokens, t * m * n, c))
        canvas = _overlap_add(h, grid.geom, t, self.hidden_channels)
        h2, m2, n2 = _split_patches(canvas, grid.geom)
        assert (m2, n2) == (m, n)
        out = self.fc2(T.gelu(h2))
        return T.reshape(out, t, m, n, c)


class FocalBlock(nn.Module):
    """Pre-norm block: windowed focal attention, then the F3N feed-forward."""

    def __init__(self, rng, token_dim, heads, window, f3n_channels, kernel):
        super().__init__()
        if token_dim % heads:
            raise ValueError(f"token_dim {token_dim} not divisible by heads {heads}")
        self.heads = heads
        self.window = window  # (s_h, s_w); the temporal window spans all frames
        self.ln1 = nn.LayerNorm(token_dim)
        self.ln2 = nn.LayerNorm(token_dim)
        self.f_q = nn.Linear(rng, token_dim, token_dim)
        self.f_kv = nn.Linear(rng, token_dim, 2 * token_dim)
        self.f_p = nn.Linear(rng, window[0] * window[1], 1)
        # pooling starts as the exact spatial mean
        self.f_p.weight.data[:] = 1.0 / (window[0] * window[1])
        self.f_p.bias.data[:] = 0.0
        self.proj = nn.Linear(rng, token_dim, token_dim)
        self.f3n = F3N(rng, token_dim, f3n_channels, kernel)


def _heads_view(x, heads):
    nw, length, c = x.shape
    x = T.reshape(x, nw, length, heads, c // heads)
    return T.permute(x, (0, 2, 1, 3))


def focal_attention(grid, block, mode="focal", probs_out=None):
    """Multi-head windowed attention over fine plus pooled coarse tokens.

    mode: "focal" (fine + pooled neighborhood), "local" (fine only),
    "global" (one window spanning the grid, no coarse stream).
    Appends the detached attention probabilities to probs_out when given.
    """
    global SCORE_EVALS
    t, m, n, c = grid.tokens.shape
    if mode == "global":
        s_t, s_h, s_w = t, m, n
    else:
        s_h, s_w = block.window
        s_t = t
    windows = partition_windows(grid.tokens, s_t, s_h, s_w)
    nw = windows.shape[0]
    length = s_t * s_h * s_w
    fine = T.reshape(windows, nw, length, c)

    q = _heads_view(block.f_q(fine), block.heads)
    kv = block.f_kv(fine)
    k = _heads_view(T.tslice(kv, (slice(None), slice(None), slice(0, c))), block.heads)
    v = _heads_view(T.tslice(kv, (slice(None), slice(None), slice(c, 2 * c))), block.heads)

    if mode == "focal":
        pooled = pool_windows(windows, block.f_p)  # (nw, s_t, c)
        nt, ny, nx = t // s_t, m // s_h, n // s_w
        nbr = _neighborhood_index(nt, ny, nx, s_h, s_w)  # (nw, s_h*s_w)
        rows = T.reshape(pooled, nw, s_t * c)
        coarse = T.gather_rows(rows, nbr.reshape(-1))
        coarse = T.reshape(coarse, nw, s_h * s_w * s_t, c)
        kv_g = block.f_kv(coarse)
        k_g = _heads_view(T.tslice(kv_g, (slice(None), slice(None), slice(0, c))), block.heads)
        v_g = _heads_view(T.tslice(kv_g, (slice(None), slice(None), slice(c, 2 * c))), block.heads)
        k = T.concat([k, k_g], axis=2)
        v = T.concat([v, v_g], axis=2)

    d_head = c // block.heads
    scores = (q @ T.permute(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(d_head))
    probs = T.softmax(scores, axis=-1)
    SCORE_EVALS += nw * block.heads * length * k.shape[2]
    if probs_out is not None:
        probs_out.append(probs.data)
    out = probs @ v  # (nw, heads, length, d_head)
    out = T.reshape(T.permute(out, (0, 2, 1, 3)), nw, length, c)
    out = block.proj(out)
    out = T.reshape(out, nw, s_t, s_h, s_w, c)
    return TokenGrid(unpartition_windows(out, t, m, n), grid.geom)


def focal_block(grid, block, mode="focal"):
    """z' = MFSA(LN1(z)) + z;  z_out = F3N(LN2(z')) + z'."""
    attended = focal_attention(TokenGrid(block.ln1(grid.tokens), grid.geom), block, mode)
    z = attended.tokens + grid.tokens
    mid = TokenGrid(block.ln2(z), grid.geom)
    return TokenGrid(block.f3n(mid) + z, grid.geom)
