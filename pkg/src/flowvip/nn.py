"""Layers and optimizer on top of the tensor engine.

Convolutions run as gather(im2col) -> matmul with index arrays cached per
geometry, which keeps the per-op python overhead flat across training steps.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Parameter container; submodules and parameters register on attribute set."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
            self._params.pop(name, None)
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
            self._children.pop(name, None)
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield (f"{prefix}{name}", p)
        for name, child in self._children.items():
            yield from child.named_parameters(prefix=f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"parameter name mismatch: missing={missing} unexpected={extra}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != expected {p.data.shape}")
            p.data = arr.copy()


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._list = []
        for m in modules:
            self.append(m)

    def append(self, module):
        self._children[str(len(self._list))] = module
        self._list.append(module)

    def __iter__(self):
        return iter(self._list)

    def __len__(self):
        return len(self._list)

    def __getitem__(self, i):
        return self._list[i]


def uniform_init(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in) if fan_in > 0 else 0.0
    return rng.uniform(-bound, bound, size=shape)


def parameter(rng, shape, fan_in):
    return Tensor(uniform_init(rng, shape, fan_in), requires_grad=True)


# -- im2col geometry caches ------------------------------------------------------

_IDX2D = {}
_IDX3D = {}
_UP2X = {}


def _patch_index_2d(n, h, w, k, stride, pad):
    """Row indices into the padded (n*hp*wp) grid for every output patch cell."""
    key = (n, h, w, k, stride, pad)
    cached = _IDX2D.get(key)
    if cached is not None:
        return cached
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    ys = (np.arange(ho) * stride)[:, None] + np.arange(k)[None, :]  # (ho, k)
    xs = (np.arange(wo) * stride)[:, None] + np.arange(k)[None, :]
    # (ho, wo, k, k) -> row index in padded plane
    plane = ys[:, None, :, None] * wp + xs[None, :, None, :]
    base = (np.arange(n) * hp * wp)[:, None, None, None, None]
    idx = (plane[None] + base).reshape(-1).astype(np.intp)
    out = (idx, ho, wo, hp, wp)
    _IDX2D[key] = out
    return out


def conv2d(x, weight, bias=None, stride=1, pad=0):
    """x: (n, h, w, cin); weight: (k, k, cin, cout) -> (n, ho, wo, cout)."""
    n, h, w, cin = x.shape
    k = weight.shape[0]
    idx, ho, wo, hp, wp = _patch_index_2d(n, h, w, k, stride, pad)
    xp = T.pad_zeros(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    rows = T.reshape(xp, n * hp * wp, cin)
    cols = T.gather_rows(rows, idx)  # (n*ho*wo*k*k, cin)
    cols = T.reshape(cols, n * ho * wo, k * k * cin)
    wmat = T.reshape(weight, k * k * cin, weight.shape[3])
    out = cols @ wmat
    if bias is not None:
        out = out + bias
    return T.reshape(out, n, ho, wo, weight.shape[3])


def _patch_index_3d(n, t, h, w, kt, kh, kw, st, sh, sw, pt, ph, pw):
    key = (n, t, h, w, kt, kh, kw, st, sh, sw, pt, ph, pw)
    cached = _IDX3D.get(key)
    if cached is not None:
        return cached
    tp, hp, wp = t + 2 * pt, h + 2 * ph, w + 2 * pw
    to = (tp - kt) // st + 1
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    ts = (np.arange(to) * st)[:, None] + np.arange(kt)[None, :]
    ys = (np.arange(ho) * sh)[:, None] + np.arange(kh)[None, :]
    xs = (np.arange(wo) * sw)[:, None] + np.arange(kw)[None, :]
    plane = (
        ts[:, None, None, :, None, None] * (hp * wp)
        + ys[None, :, None, None, :, None] * wp
        + xs[None, None, :, None, None, :]
    )  # (to, ho, wo, kt, kh, kw)
    base = (np.arange(n) * tp * hp * wp).reshape(n, 1, 1, 1, 1, 1, 1)
    idx = (plane[None] + base).reshape(-1).astype(np.intp)
    out = (idx, to, ho, wo, tp, hp, wp)
    _IDX3D[key] = out
    return out


def conv3d(x, weight, bias=None, stride=(1, 1, 1), pad=(0, 0, 0)):
    """x: (n, t, h, w, cin); weight: (kt, kh, kw, cin, cout)."""
    n, t, h, w, cin = x.shape
    kt, kh, kw = weight.shape[:3]
    st, sh, sw = stride
    pt, ph, pw = pad
    idx, to, ho, wo, tp, hp, wp = _patch_index_3d(n, t, h, w, kt, kh, kw, st, sh, sw, pt, ph, pw)
    xp = T.pad_zeros(x, ((0, 0), (pt, pt), (ph, ph), (pw, pw), (0, 0))) if any(pad) else x
    rows = T.reshape(xp, n * tp * hp * wp, cin)
    cols = T.gather_rows(rows, idx)
    cols = T.reshape(cols, n * to * ho * wo, kt * kh * kw * cin)
    wmat = T.reshape(weight, kt * kh * kw * cin, weight.shape[4])
    out = cols @ wmat
    if bias is not None:
        out = out + bias
    return T.reshape(out, n, to, ho, wo, weight.shape[4])


class Conv2d(Module):
    def __init__(self, rng, cin, cout, kernel, stride=1, pad=None, zero_init=False):
        super().__init__()
        self.stride = stride
        self.pad = kernel // 2 if pad is None else pad
        fan_in = kernel * kernel * cin
        if zero_init:
            self.weight = Tensor(np.zeros((kernel, kernel, cin, cout)), requires_grad=True)
            self.bias = Tensor(np.zeros(cout), requires_grad=True)
        else:
            self.weight = parameter(rng, (kernel, kernel, cin, cout), fan_in)
            self.bias = parameter(rng, (cout,), fan_in)

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class Conv3d(Module):
    def __init__(self, rng, cin, cout, kernel, stride=(1, 1, 1), pad=(0, 0, 0)):
        super().__init__()
        self.stride = stride
        self.pad = pad
        fan_in = kernel[0] * kernel[1] * kernel[2] * cin
        self.weight = parameter(rng, (*kernel, cin, cout), fan_in)
        self.bias = parameter(rng, (cout,), fan_in)

    def __call__(self, x):
        return conv3d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class Linear(Module):
    def __init__(self, rng, cin, cout, zero_init=False):
        super().__init__()
        if zero_init:
            self.weight = Tensor(np.zeros((cin, cout)), requires_grad=True)
            self.bias = Tensor(np.zeros(cout), requires_grad=True)
        else:
            self.weight = parameter(rng, (cin, cout), cin)
            self.bias = parameter(rng, (cout,), cin)

    def __call__(self, x):
        return x @ self.weight + self.bias


class LayerNorm(Module):
    """Normalize the trailing dimension to zero mean / unit variance, then affine."""

    eps = 1e-8

    def __init__(self, dim):
        super().__init__()
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        normed = centered / T.sqrt(var + self.eps)
        return normed * self.gamma + self.beta


def upsample2x_nearest(x):
    """(n, h, w, c) -> (n, 2h, 2w, c) by pixel replication."""
    n, h, w, c = x.shape
    key = ("nearest", n, h, w)
    idx = _UP2X.get(key)
    if idx is None:
        ys = np.repeat(np.arange(h), 2)
        xs = np.repeat(np.arange(w), 2)
        plane = ys[:, None] * w + xs[None, :]
        idx = ((np.arange(n) * h * w)[:, None, None] + plane[None]).reshape(-1).astype(np.intp)
        _UP2X[key] = idx
    rows = T.reshape(x, n * h * w, c)
    return T.reshape(T.gather_rows(rows, idx), n, 2 * h, 2 * w, c)


def upsample2x_bilinear(x):
    """(n, h, w, c) -> (n, 2h, 2w, c), bilinear with half-pixel centers, edge clamp."""
    n, h, w, c = x.shape
    key = ("bilinear", n, h, w)
    cached = _UP2X.get(key)
    if cached is None:
        coords_y = (np.arange(2 * h) + 0.5) / 2.0 - 0.5
        coords_x = (np.arange(2 * w) + 0.5) / 2.0 - 0.5
        y0 = np.clip(np.floor(coords_y), 0, h - 1).astype(np.intp)
        x0 = np.clip(np.floor(coords_x), 0, w - 1).astype(np.intp)
        y1 = np.minimum(y0 + 1, h - 1)
        x1 = np.minimum(x0 + 1, w - 1)
        fy = np.clip(coords_y - y0, 0.0, 1.0)
        fx = np.clip(coords_x - x0, 0.0, 1.0)
        base = (np.arange(n) * h * w)[:, None, None]
        parts = []
        for yy, wy in ((y0, 1 - fy), (y1, fy)):
            for xx, wx in ((x0, 1 - fx), (x1, fx)):
                plane = yy[:, None] * w + xx[None, :]
                idx = (base + plane[None]).reshape(-1).astype(np.intp)
                wgt = (wy[:, None] * wx[None, :])[None].repeat(n, axis=0).reshape(-1, 1)
                parts.append((idx, wgt))
        cached = parts
        _UP2X[key] = cached
    rows = T.reshape(x, n * h * w, c)
    acc = None
    for idx, wgt in cached:
        term = T.gather_rows(rows, idx) * Tensor(wgt)
        acc = term if acc is None else acc + term
    return T.reshape(acc, n, 2 * h, 2 * w, c)


def avgpool2x(x):
    """(n, h, w, c) -> (n, h/2, w/2, c) by 2x2 area mean."""
    n, h, w, c = x.shape
    x = T.reshape(x, n, h // 2, 2, w // 2, 2, c)
    return x.mean(axis=(2, 4))


class Adam(Module):
    """Adam with bias correction; state tensors are checkpointable parameters."""

    def __init__(self, named_params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__()
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._targets = list(named_params)
        self._m = {n: np.zeros_like(p.data) for n, p in self._targets}
        self._v = {n: np.zeros_like(p.data) for n, p in self._targets}

    def zero_grad(self):
        for _, p in self._targets:
            p.zero_grad()

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self._targets:
            g = p.grad
            if g is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_dict(self):
        state = {"step": np.array([float(self.step_count)]), "lr": np.array([self.lr])}
        for name, _ in self._targets:
            state[f"m.{name}"] = self._m[name]
            state[f"v.{name}"] = self._v[name]
        return state

    def load_state_dict(self, state):
        self.step_count = int(state["step"][0])
        self.lr = float(state["lr"][0])
        for name, p in self._targets:
            self._m[name] = np.asarray(state[f"m.{name}"], dtype=p.data.dtype).reshape(p.data.shape).copy()
            self._v[name] = np.asarray(state[f"v.{name}"], dtype=p.data.dtype).reshape(p.data.shape).copy()
