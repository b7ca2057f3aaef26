"""Small reverse-mode autodiff engine on top of numpy.

Tensors hold an ``np.ndarray`` plus an optional gradient buffer. Every op
records its parents and a closure that pushes ``out.grad`` back into them.
Leading batch axes broadcast the numpy way; gradients are summed back to the
operand shape.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_over_axis(self, axis, keepdims)

    def relu(self):
        return relu(self)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        dtype = np.float64
    return Tensor(x, dtype=dtype)


def _make(data, parents, backward_fn):
    parents = tuple(parents)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_axis(axis, ndim):
    axes = axis if isinstance(axis, tuple) else (axis,)
    for a in axes:
        if not -ndim <= a < ndim:
            raise DimensionError(f"axis {a} out of range for tensor of rank {ndim}")


def _binary_operands(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    # keep python scalars from promoting float32 graphs to float64
    if a.data.ndim == 0 and not a.requires_grad:
        a = Tensor(a.data.astype(b.dtype))
    if b.data.ndim == 0 and not b.requires_grad:
        b = Tensor(b.data.astype(a.dtype))
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _binary_operands(a, b)

    def bw(out):
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _binary_operands(a, b)

    def bw(out):
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-out.grad, b.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = _binary_operands(a, b)

    def bw(out):
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = _binary_operands(a, b)

    def bw(out):
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), bw)


def scale(a, c):
    a = as_tensor(a)
    c = float(c)

    def bw(out):
        a._accumulate(out.grad * c)

    return _make(a.data * a.data.dtype.type(c), (a,), bw)


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0

    def bw(out):
        a._accumulate(out.grad * mask)

    # np.maximum keeps NaN visible instead of mapping it to 0
    return _make(np.maximum(a.data, 0).astype(a.dtype), (a,), bw)


def sqrt(a):
    a = as_tensor(a)
    val = np.sqrt(a.data)

    def bw(out):
        # subgradient 0 at the origin keeps constant inputs finite
        safe = np.where(val > 0, val, 1)
        a._accumulate(np.where(val > 0, out.grad * 0.5 / safe, 0))

    return _make(val, (a,), bw)


def exp(a):
    a = as_tensor(a)
    val = np.exp(a.data)

    def bw(out):
        a._accumulate(out.grad * val)

    return _make(val, (a,), bw)


def sigmoid(a):
    a = as_tensor(a)
    val = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def bw(out):
        a._accumulate(out.grad * val * (1.0 - val))

    return _make(val.astype(a.dtype), (a,), bw)


# ---------------------------------------------------------------- reductions / shape

def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is not None:
        _check_axis(axis, a.ndim)

    def bw(out):
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def mean_over_axis(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is not None:
        _check_axis(axis, a.ndim)
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    else:
        n = a.data.size

    def bw(out):
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g / n, a.shape))

    return _make(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), bw)


def reshape(a, shape):
    a = as_tensor(a)
    try:
        val = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} into {tuple(shape)}") from None

    def bw(out):
        a._accumulate(out.grad.reshape(a.shape))

    return _make(val, (a,), bw)


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)

    def bw(out):
        a._accumulate(out.grad.transpose(inv))

    return _make(a.data.transpose(axes), (a,), bw)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    _check_axis(axis, tensors[0].ndim)
    try:
        val = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(str(e)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(out):
        for t, g in zip(tensors, np.split(out.grad, bounds, axis=axis)):
            if t.requires_grad:
                t._accumulate(g)

    return _make(val, tensors, bw)


def take_rows(a, index):
    """Gather along axis 0 (used for permutations and batching)."""
    a = as_tensor(a)
    index = np.asarray(index)

    def bw(out):
        g = np.zeros_like(a.data)
        np.add.at(g, index, out.grad)
        a._accumulate(g)

    return _make(a.data[index], (a,), bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(out):
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                # fold batch axes into one big product
                a2 = a.data.reshape(-1, a.shape[-1])
                g2 = g.reshape(-1, g.shape[-1])
                b._accumulate(a2.T @ g2)
            else:
                b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), bw)


def linear(x, w, b=None):
    y = matmul(x, w)
    return y if b is None else add(y, b)


def softmax_lastdim(a):
    a = as_tensor(a)
    if a.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    if np.isnan(a.data).any():
        raise NumericError("softmax input contains NaN")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(out):
        g = out.grad
        a._accumulate(p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _make(p, (a,), bw)


def layer_norm(x, gamma=None, beta=None, eps=1e-5):
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat
    if gamma is not None:
        y = y * gamma.data
    if beta is not None:
        y = y + beta.data
    parents = [x] + [p for p in (gamma, beta) if p is not None]

    def bw(out):
        g = out.grad
        if gamma is not None and gamma.requires_grad:
            gamma._accumulate(_unbroadcast(g * xhat, gamma.shape))
        if beta is not None and beta.requires_grad:
            beta._accumulate(_unbroadcast(g, beta.shape))
        if x.requires_grad:
            gh = g * gamma.data if gamma is not None else g
            n = x.shape[-1]
            dx = inv / n * (n * gh - gh.sum(axis=-1, keepdims=True)
                            - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
            x._accumulate(dx)

    return _make(y.astype(x.dtype), parents, bw)


def dropout(x, p, rng=None, training=True):
    """Inverted dropout. Identity when not training or ``p == 0``."""
    x = as_tensor(x)
    if not 0 <= p < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1 - p)

    def bw(out):
        x._accumulate(out.grad * keep)

    return _make(x.data * keep, (x,), bw)


# ---------------------------------------------------------------- convolution

def conv2d_valid(x, kernels, bias=None):
    """Valid cross-correlation.

    ``x`` is ``(c_in, h, w)`` or batched ``(n, c_in, h, w)``; ``kernels`` is
    ``(c_out, c_in, k, k)``.
    """
    x = as_tensor(x)
    kernels = as_tensor(kernels)
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    c_out, c_in, kh, kw = kernels.shape
    if xd.ndim != 4 or xd.shape[1] != c_in:
        raise DimensionError(f"conv2d input {x.shape} incompatible with kernels {kernels.shape}")
    if kh > xd.shape[2] or kw > xd.shape[3]:
        raise DimensionError(f"kernel {kernels.shape} larger than input {x.shape}")

    win = sliding_window_view(xd, (kh, kw), axis=(2, 3))  # n,c,ho,wo,kh,kw
    out = np.tensordot(win, kernels.data, axes=([1, 4, 5], [1, 2, 3]))  # n,ho,wo,o
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.data[:, None, None]
    parents = [x, kernels] + ([bias] if bias is not None else [])

    def bw(node):
        g = node.grad if not single else node.grad[None]
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if kernels.requires_grad:
            kernels._accumulate(np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])))
        if x.requires_grad:
            gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            gwin = sliding_window_view(gp, (kh, kw), axis=(2, 3))  # n,o,h,w,kh,kw
            flipped = kernels.data[:, :, ::-1, ::-1]
            dx = np.tensordot(gwin, flipped, axes=([1, 4, 5], [0, 2, 3]))  # n,h,w,c
            dx = dx.transpose(0, 3, 1, 2)
            x._accumulate(dx[0] if single else dx)

    return _make(out[0] if single else out, parents, bw)


# ---------------------------------------------------------------- losses

def bce_with_logits(logit, label):
    """Mean binary cross-entropy on raw logits.

    Uses ``max(z, 0) - z*y + log(1 + exp(-|z|))`` so large logits do not
    overflow.
    """
    logit = as_tensor(logit)
    y = np.asarray(label, dtype=logit.dtype)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    if not np.all(np.isfinite(logit.data)):
        raise NumericError("non-finite logit")
    y = np.broadcast_to(y, logit.shape)
    z = logit.data
    losses = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = max(z.size, 1)

    def bw(out):
        s = 0.5 * (1.0 + np.tanh(0.5 * z))
        logit._accumulate(out.grad * (s - y) / n)

    return _make(np.asarray(losses.mean(), dtype=logit.dtype), (logit,), bw)


# ---------------------------------------------------------------- graph driver

def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``.grad`` on every tensor reachable from the scalar ``loss``.

    Gradients accumulate across calls; intermediate buffers are freed.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo(loss)
    for node in order:
        if node._backward is not None:
            node.grad = None
    seed = np.ones_like(loss.data)
    if loss._backward is None:
        loss._accumulate(seed)
    else:
        loss.grad = seed
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node)
    for node in order:
        if node._backward is not None and node is not loss:
            node.grad = None
