"""Dense n-d tensors with reverse-mode automatic differentiation.

A dynamically recorded tape: every operation returns a new Tensor holding its
parents and a closure that maps the output gradient to parent gradients.
`backward()` walks the tape once in reverse topological order, accumulating
additively at fan-out nodes, then consumes the graph so a second backward
cannot silently double-accumulate.
"""

from __future__ import annotations

import contextlib

import numpy as np

from . import config


class GraphError(RuntimeError):
    """Misuse of the autodiff tape (non-scalar backward, consumed graph, ...)."""


_grad_enabled = True
_strict_finite = False


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def strict_finite():
    """Validate every op result for NaN/Inf inside the block."""
    global _strict_finite
    prev = _strict_finite
    _strict_finite = True
    try:
        yield
    finally:
        _strict_finite = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=config.dtype())
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._consumed = False

    # -- construction helpers -------------------------------------------------
    @staticmethod
    def _result(data, parents, backward):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._consumed = False
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        if _strict_finite and not np.all(np.isfinite(data)):
            raise config.NumericError("non-finite value produced by tensor operation")
        return out

    # -- basics ---------------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def detach(self):
        """A view of the same buffer, cut off from the tape."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out._consumed = False
        return out

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- operator sugar ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    # -- backward ---------------------------------------------------------------
    def backward(self):
        """Reverse-mode pass from a scalar; fills `.grad` on requires_grad leaves."""
        if self.data.size != 1:
            raise GraphError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if self._consumed:
            raise GraphError("backward called twice on the same graph; rebuild the forward pass")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None:
                continue
            gout = node.grad
            if gout is None:
                continue
            grads = node._backward(gout)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g
        # Consume the tape: free closures and intermediate grads, and make a
        # second backward on any node of this graph an explicit error.
        for node in order:
            if node._parents:
                node._consumed = True
                node._parents = ()
                node._backward = None
                if node is not self:
                    node.grad = None


def _toposort(root):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        if node._consumed:
            raise GraphError("graph contains an already-consumed node; rebuild the forward pass")
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def _coerce(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=config.dtype()))


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to `shape` (trailing-dim broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise GraphError(
            f"{op}: shapes {a.data.shape} and {b.data.shape} are not broadcast-compatible"
        ) from None


# -- elementwise arithmetic -----------------------------------------------------

def add(a, b):
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor._result(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return Tensor._result(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return Tensor._result(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a, b, "div")
    inv = 1.0 / b.data

    def backward(g):
        ga = _unbroadcast(g * inv, a.data.shape)
        gb = _unbroadcast(-g * a.data * inv * inv, b.data.shape)
        return ga, gb

    return Tensor._result(a.data * inv, (a, b), backward)


def neg(a):
    a = _coerce(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,))


def tabs(a):
    a = _coerce(a)
    sign = np.sign(a.data)  # subgradient 0 at 0
    return Tensor._result(np.abs(a.data), (a,), lambda g: (g * sign,))


def exp(a):
    a = _coerce(a)
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,))


def log(a):
    a = _coerce(a)
    return Tensor._result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = _coerce(a)
    out = np.sqrt(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (0.5 / out),))


def power(a, exponent):
    a = _coerce(a)
    out = a.data**exponent
    grad_scale = exponent * a.data ** (exponent - 1)
    return Tensor._result(out, (a,), lambda g: (g * grad_scale,))


def relu(a):
    a = _coerce(a)
    mask = a.data > 0  # subgradient at 0 is 0
    return Tensor._result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def leaky_relu(a, slope=0.2):
    a = _coerce(a)
    mask = a.data > 0
    scale = np.where(mask, 1.0, slope)
    return Tensor._result(a.data * scale, (a,), lambda g: (g * scale,))


def sigmoid(a):
    a = _coerce(a)
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return Tensor._result(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    a = _coerce(a)
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1.0 - out * out),))


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a):
    a = _coerce(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
    return Tensor._result(out, (a,), lambda g: (g * deriv,))


def clip(a, lo, hi):
    a = _coerce(a)
    mask = (a.data > lo) & (a.data < hi)
    return Tensor._result(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "abs": tabs,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "gelu": gelu,
}


def elementwise(kind, a, b=None):
    """Dispatch an elementwise op by name; binary kinds take tensor or scalar b."""
    if kind not in _ELEMENTWISE:
        raise GraphError(f"unknown elementwise op {kind!r}")
    fn = _ELEMENTWISE[kind]
    if kind in ("add", "sub", "mul", "div"):
        return fn(a, b)
    if b is not None:
        raise GraphError(f"elementwise op {kind!r} is unary")
    return fn(a)


# -- contractions and reductions --------------------------------------------------

def matmul(a, b):
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise GraphError(f"matmul needs >=2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise GraphError(f"matmul inner dimensions differ: {a.data.shape} vs {b.data.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return Tensor._result(a.data @ b.data, (a, b), backward)


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False):
    a = _coerce(a)
    axes = _axis_tuple(axis, a.data.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.data.shape),)

    return Tensor._result(np.asarray(out), (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = _coerce(a)
    axes = _axis_tuple(axis, a.data.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.data.shape) / count,)

    return Tensor._result(np.asarray(out), (a,), backward)


# -- structural ops ----------------------------------------------------------------

def reshape(a, *shape):
    a = _coerce(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = a.data.shape
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def permute(a, axes):
    a = _coerce(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._result(
        np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inverse),)
    )


def concat(tensors, axis=0):
    tensors = [_coerce(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def pad_zeros(a, pad_width):
    """Zero padding; pad_width is ((before, after), ...) per axis."""
    a = _coerce(a)
    pad_width = tuple(tuple(p) for p in pad_width)
    slices = tuple(slice(b, b + n) for (b, _), n in zip(pad_width, a.data.shape))
    return Tensor._result(np.pad(a.data, pad_width), (a,), lambda g: (g[slices],))


def tslice(a, index):
    """Basic slicing (slices / ints only); backward scatters into a zero buffer."""
    a = _coerce(a)
    shape = a.data.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return Tensor._result(np.ascontiguousarray(a.data[index]), (a,), backward)


def gather_rows(a, idx):
    """Select rows of a 2-d tensor: out[i] = a[idx[i]]. Backward scatter-adds."""
    a = _coerce(a)
    if a.data.ndim != 2:
        raise GraphError(f"gather_rows expects a 2-d tensor, got shape {a.data.shape}")
    rows, cols = a.data.shape
    idx = np.asarray(idx, dtype=np.intp)

    def backward(g):
        flat = (idx[:, None] * cols + np.arange(cols)).ravel()
        acc = np.bincount(flat, weights=g.ravel(), minlength=rows * cols)
        return (acc.reshape(rows, cols).astype(g.dtype, copy=False),)

    return Tensor._result(a.data[idx], (a,), backward)


def scatter_rows(a, idx, num_rows):
    """Scatter-add rows of a 2-d tensor into `num_rows` rows. Backward gathers."""
    a = _coerce(a)
    if a.data.ndim != 2:
        raise GraphError(f"scatter_rows expects a 2-d tensor, got shape {a.data.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    cols = a.data.shape[1]
    flat = (idx[:, None] * cols + np.arange(cols)).ravel()
    out = np.bincount(flat, weights=a.data.ravel(), minlength=num_rows * cols)
    out = out.reshape(num_rows, cols).astype(a.data.dtype, copy=False)
    return Tensor._result(out, (a,), lambda g: (g[idx],))


def softmax(a, axis=-1):
    """Softmax with per-row max subtraction for stability."""
    a = _coerce(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return Tensor._result(out, (a,), backward)


# -- gradient checking ----------------------------------------------------------

class GradcheckReport:
    def __init__(self, passed, max_rel, worst, checked):
        self.passed = passed
        self.max_rel = max_rel
        self.worst = worst  # (input_idx, flat_elem_idx, analytic, numeric)
        self.checked = checked

    def __bool__(self):
        return self.passed

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        if self.worst is None:
            return f"gradcheck {status}: no elements checked"
        i, j, a, n = self.worst
        return (
            f"gradcheck {status}: max rel err {self.max_rel:.3e} over {self.checked} elements "
            f"(worst input {i} elem {j}: analytic {a:.6e} vs numeric {n:.6e})"
        )


def gradcheck(f, inputs, h=1e-3, tol=1e-3, max_samples=64, rng=None):
    """Compare reverse-mode gradients of scalar-valued f against central differences.

    Per element: |a - n| must be within tol * max(|a|, |n|) or within an
    absolute floor of tol * h (the finite-difference noise scale).
    """
    inputs = list(inputs)
    loss = f(*inputs)
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise GraphError("gradcheck requires f to return a scalar Tensor")
    for t in inputs:
        t.zero_grad()
    loss.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    rng = rng or np.random.default_rng(0)
    atol = tol * h
    max_rel, worst, worst_fail, checked, passed = 0.0, None, None, 0, True
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        n = t.data.size
        if max_samples is not None and n > max_samples:
            elems = rng.choice(n, size=max_samples, replace=False)
        else:
            elems = np.arange(n)
        flat = t.data.reshape(-1)
        for j in elems:
            j = int(j)
            orig = flat[j]
            with no_grad():
                flat[j] = orig + h
                fp = f(*inputs).item()
                flat[j] = orig - h
                fm = f(*inputs).item()
            flat[j] = orig
            numeric = (fp - fm) / (2 * h)
            a = float(analytic[i].reshape(-1)[j])
            err = abs(a - numeric)
            denom = max(abs(a), abs(numeric))
            rel = err / denom if denom > 0 else 0.0
            checked += 1
            if rel >= max_rel or worst is None:
                max_rel = rel
                worst = (i, j, a, numeric)
            if not (err <= tol * denom or err <= atol):
                passed = False
                if worst_fail is None or rel >= worst_fail[0]:
                    worst_fail = (rel, (i, j, a, numeric))
    if worst_fail is not None:
        worst = worst_fail[1]
    return GradcheckReport(passed, max_rel, worst, checked)
