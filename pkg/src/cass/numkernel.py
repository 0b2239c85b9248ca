"""Minimal define-by-run reverse-mode autodiff on top of NumPy.

Every differentiable operation returns a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients. Calling
:func:`backward` on a scalar walks the recorded graph once in reverse
topological order.

Precision is controlled globally: parameters and constants are created with
the active default dtype (float32 for training, float64 for gradient checks).
Operations keep the dtype of their inputs.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

_DEFAULT_DTYPE = np.float32


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class GraphError(RuntimeError):
    """Misuse of the computation graph (non-scalar loss, repeated backward)."""


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype, e.g. ``with precision(np.float64):``."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _backward=None, _op=""):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self._op = _op
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def parameter(data):
    """Leaf tensor that receives gradients, stored in the default dtype."""
    return Tensor(np.array(data, dtype=_DEFAULT_DTYPE), requires_grad=True)


def constant(data):
    return Tensor(np.asarray(data, dtype=_DEFAULT_DTYPE))


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents, backward, op):
    requires_grad = any(p.requires_grad for p in parents)
    if not requires_grad:
        return Tensor(data, dtype=data.dtype, _op=op)
    return Tensor(data, requires_grad=True, dtype=data.dtype, _parents=parents, _backward=backward, _op=op)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after NumPy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), backward, "add")


def sub(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(out, (a, b), backward, "sub")


def mul(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), backward, "mul")


def div(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _result(out, (a, b), backward, "div")


def power(x, exponent):
    """Elementwise ``x ** exponent`` for a constant real exponent."""
    exponent = float(exponent)
    out = x.data**exponent

    def backward(g):
        return (g * exponent * x.data ** (exponent - 1.0),)

    return _result(out, (x,), backward, "power")


def exp(x):
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _result(out, (x,), backward, "exp")


def log(x):
    out = np.log(x.data)

    def backward(g):
        return (g / x.data,)

    return _result(out, (x,), backward, "log")


def relu(x):
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def backward(g):
        return (g * mask,)

    return _result(out, (x,), backward, "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """GELU, tanh approximation."""
    u = x.data
    inner = _GELU_C * (u + 0.044715 * u**3)
    th = np.tanh(inner)
    out = 0.5 * u * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * u**2)
        local = 0.5 * (1.0 + th) + 0.5 * u * (1.0 - th**2) * dinner
        return (g * local,)

    return _result(out, (x,), backward, "gelu")


def sigmoid(x):
    u = x.data
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    eu = np.exp(u[~pos])
    out[~pos] = eu / (1.0 + eu)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _result(out, (x,), backward, "sigmoid")


def cast(x, dtype):
    """Differentiable dtype conversion; the gradient is cast back on the way down."""
    dtype = np.dtype(dtype)
    if x.dtype == dtype:
        return x

    def backward(g):
        return (g.astype(x.dtype),)

    return _result(x.data.astype(dtype), (x,), backward, "cast")


# ---------------------------------------------------------------------------
# reductions and shape
# ---------------------------------------------------------------------------


def sum_(x, axis=None, keepdims=False):
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=x.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (x,), backward, "sum")


def mean(x, axis=None, keepdims=False):
    out = np.asarray(np.mean(x.data, axis=axis, keepdims=keepdims), dtype=x.dtype)
    count = x.data.size // max(out.size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _result(out, (x,), backward, "mean")


def reshape(x, shape):
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _result(out, (x,), backward, "reshape")


def transpose(x, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = x.data.transpose(axes)

    def backward(g):
        return (g.transpose(inverse),)

    return _result(out, (x,), backward, "transpose")


def index_select(x, index):
    """Basic/advanced indexing; the backward scatters into zeros."""
    out = x.data[index]

    idx = index if isinstance(index, tuple) else (index,)
    advanced = any(isinstance(i, (np.ndarray, list)) for i in idx)

    def backward(g):
        full = np.zeros_like(x.data)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _result(np.array(out, dtype=x.dtype), (x,), backward, "index")


def gather_rows(x, cols):
    """``out[i] = x[i, cols[i]]`` for a 2-D ``x``; used for target/class selection."""
    cols = np.asarray(cols, dtype=np.int64)
    rows = np.arange(x.shape[0])
    return index_select(x, (rows, cols))


def concat(tensors, axis=0):
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    splits = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(out, tuple(tensors), backward, "concat")


def broadcast_to(x, shape):
    out = np.broadcast_to(x.data, shape).copy()

    def backward(g):
        return (_unbroadcast(g, x.shape),)

    return _result(out, (x,), backward, "broadcast")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Matrix product with NumPy batching over leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), backward, "matmul")


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with ``weight`` of shape (in, out)."""
    y = matmul(x, weight)
    if bias is not None:
        y = add(y, bias)
    return y


def _im2col(xp, kh, kw, stride, out_h, out_w):
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, : stride * (out_h - 1) + 1 : stride, : stride * (out_w - 1) + 1 : stride]
    # (B, C, Ho, Wo, kh, kw) -> (B, Ho, Wo, C, kh, kw)
    return windows.transpose(0, 2, 3, 1, 4, 5)


def conv2d(x, w, stride=1, pad=0):
    """2-D cross-correlation with zero padding (no kernel flip, no bias)."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-D input and weight, got {x.shape} and {w.shape}")
    batch, channels, height, width = x.shape
    filters, wc, kh, kw = w.shape
    if wc != channels:
        raise DimensionError(f"conv2d: input channels {x.shape} do not match weight {w.shape}")
    hp, wp = height + 2 * pad, width + 2 * pad
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {w.shape} larger than padded input {x.shape} (pad={pad})")
    out_h = (hp - kh) // stride + 1
    out_w = (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, out_h, out_w).reshape(batch * out_h * out_w, channels * kh * kw)
    wmat = w.data.reshape(filters, -1)
    out = (cols @ wmat.T).reshape(batch, out_h, out_w, filters).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, filters)
        gw = (g2.T @ cols).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(batch, out_h, out_w, channels, kh, kw)
            gxp = np.zeros((batch, channels, hp, wp), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad : pad + height, pad : pad + width] if pad else gxp
        return gx, gw

    return _result(out, (x, w), backward, "conv2d")


# ---------------------------------------------------------------------------
# normalizations and probability maps
# ---------------------------------------------------------------------------


def softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward, "softmax")


def log_softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), backward, "log_softmax")


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    def backward(g):
        gxhat = g * gain.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead)
        gbias = g.sum(axis=lead)
        return gx, ggain.reshape(gain.shape), gbias.reshape(bias.shape)

    return _result(out, (x, gain, bias), backward, "layer_norm")


def batch_norm(x, gain, bias, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel batch normalization for B×C×H×W (or B×C) input.

    ``running_mean``/``running_var`` are plain arrays updated in place when
    ``training`` is true; eval mode normalizes with them instead of batch
    statistics. Running variance uses the unbiased batch estimate.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        count = x.data.size // x.shape[1]
        if momentum is not None:
            unbiased = var * count / max(count - 1, 1)
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype, copy=False)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gain.data.reshape(bshape) + bias.data.reshape(bshape)

    def backward(g):
        ggain = (g * xhat).sum(axis=axes)
        gbias = g.sum(axis=axes)
        gxhat = g * gain.data.reshape(bshape)
        if training:
            gx = inv.reshape(bshape) * (
                gxhat - gxhat.mean(axis=axes, keepdims=True) - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)
            )
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx, ggain, gbias

    return _result(out.astype(x.dtype, copy=False), (x, gain, bias), backward, "batch_norm")


def l2_normalize(x, eps=1e-12):
    """Divide each row by ``max(||row||_2, eps)``."""
    norm = np.sqrt((x.data**2).sum(axis=-1, keepdims=True))
    clipped = norm < eps
    denom = np.where(clipped, eps, norm).astype(x.dtype, copy=False)
    out = x.data / denom

    def backward(g):
        radial = (g * out).sum(axis=-1, keepdims=True)
        gx = np.where(clipped, g / denom, (g - out * radial) / denom)
        return (gx,)

    return _result(out, (x,), backward, "l2_normalize")


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Populate ``.grad`` on every grad-requiring tensor reachable from ``loss``.

    Gradients are written fresh (not accumulated). A graph may be
    differentiated once; a second call raises :class:`GraphError`.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")
    if loss._consumed:
        raise GraphError("backward already ran on this graph; rebuild it with a new forward pass")
    order = _topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._backward = None
        node._parents = ()
    loss._consumed = True
    return order


def patchify(x, patch):
    """B×C×H×W -> B×N×(C·patch·patch), patches in row-major grid order."""
    batch, channels, height, width = x.shape
    if height % patch or width % patch:
        raise DimensionError(f"patchify: image {height}x{width} not divisible by patch {patch}")
    gh, gw = height // patch, width // patch
    y = reshape(x, (batch, channels, gh, patch, gw, patch))
    y = transpose(y, (0, 2, 4, 1, 3, 5))
    return reshape(y, (batch, gh * gw, channels * patch * patch))
