"""Dense tensor engine with reverse-mode automatic differentiation.

numpy owns the buffers and the arithmetic; this module owns the gradient
tape and the backward rules. Layout is row-major and dense; there are no
strided views beyond reshape/transpose copies. The default compute dtype
is float32, switchable globally to float64 for gradient checks.

A single global `GradTape` records every differentiable operation in
program order. `backward(loss)` replays it once in reverse. The tape is
confined to one training thread; inference under `no_grad()` records
nothing and is safe to run concurrently with shared parameters.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "GradTape", "TAPE", "no_grad", "backward", "grad_check",
    "tensor", "zeros", "ones", "set_default_dtype", "default_dtype",
    "matmul", "softmax", "conv2d", "conv_transpose2d", "layer_norm",
    "group_norm", "concat", "gather_rows", "stop_gradient",
    "DimensionError", "ContractError", "RangeError", "GradCheckError",
]

_DEFAULT_DTYPE = np.dtype(np.float32)

_DTYPE_ALIASES = {
    "f32": np.float32, "float32": np.float32, "f64": np.float64,
    "float64": np.float64, np.float32: np.float32, np.float64: np.float64,
}


def set_default_dtype(dtype):
    """Switch the global compute dtype (float32 or float64)."""
    global _DEFAULT_DTYPE
    key = dtype if not isinstance(dtype, np.dtype) else dtype.type
    if key not in _DTYPE_ALIASES:
        raise ContractError(f"unsupported default dtype {dtype!r}")
    _DEFAULT_DTYPE = np.dtype(_DTYPE_ALIASES[key])


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


class DimensionError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class ContractError(ValueError):
    """An operation precondition was violated."""


class RangeError(ValueError):
    """Input values outside their documented range."""


class GradCheckError(RuntimeError):
    """Non-finite value met while gradient checking; carries the coordinate."""

    def __init__(self, message, coordinate=None):
        super().__init__(message)
        self.coordinate = coordinate


class GradTape:
    """Ordered record of operations: (output, inputs, backward rule).

    Entries are appended in execution order, so the list is topologically
    sorted; replaying it back-to-front visits each node exactly once.
    """

    __slots__ = ("entries", "recording")

    def __init__(self):
        self.entries = []
        self.recording = True

    def record(self, output, inputs, backward_fn):
        self.entries.append((output, inputs, backward_fn))

    def reset(self):
        self.entries.clear()

    def __len__(self):
        return len(self.entries)


TAPE = GradTape()


class no_grad:
    """Context manager disabling tape recording."""

    def __enter__(self):
        self._prev = TAPE.recording
        TAPE.recording = False
        return self

    def __exit__(self, *exc):
        TAPE.recording = self._prev
        return False


class Tensor:
    """Dense n-dimensional array with optional gradient buffer.

    `data` is a row-major numpy array; `grad`, when populated, always has
    the same shape. Tensors are treated as immutable after creation apart
    from gradient accumulation.
    """

    __slots__ = ("data", "requires_grad", "grad", "_grad_owned")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._grad_owned = False

    # -- introspection ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        grad = ", grad" if self.grad is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad})"

    def zero_grad(self):
        self.grad = None
        self._grad_owned = False

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, *axes):
        return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def silu(self):
        return silu(self)

    def detach(self):
        return stop_gradient(self)


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _from_op(data, inputs, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._grad_owned = False
    out.requires_grad = TAPE.recording and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        TAPE.record(out, inputs, backward_fn)
    return out


def _accumulate(t: Tensor, g):
    if g is None or not t.requires_grad:
        return
    if g.shape != t.data.shape:
        raise DimensionError(f"gradient shape {g.shape} != tensor shape {t.data.shape}")
    if t.grad is None:
        t.grad = g
        t._grad_owned = False
    elif t._grad_owned:
        t.grad += g
    else:
        # first buffer may be shared with another node's grad; never mutate it
        t.grad = t.grad + g
        t._grad_owned = True


def backward(loss: Tensor, seed_grad=None):
    """Populate d(loss)/d(leaf) for every recorded leaf, then reset the tape.

    `loss` must be scalar unless an explicit same-shape `seed_grad` is given.
    """
    if seed_grad is None:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        seed_grad = np.ones_like(loss.data)
    _accumulate(loss, np.asarray(seed_grad, dtype=loss.dtype))
    for out, inputs, backward_fn in reversed(TAPE.entries):
        if out.grad is None:
            continue
        grads = backward_fn(out.grad)
        for inp, g in zip(inputs, grads):
            _accumulate(inp, g)
    TAPE.reset()


def _unbroadcast(g, shape):
    """Sum `g` down to `shape`, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise and arithmetic ops -----------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _from_op(a.data + b.data, (a, b), lambda g: (
        _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _from_op(a.data - b.data, (a, b), lambda g: (
        _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _from_op(a.data * b.data, (a, b), lambda g: (
        _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)))


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _from_op(a.data / b.data, (a, b), lambda g: (
        _unbroadcast(g / b.data, a.data.shape),
        _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))


def neg(a):
    a = _as_tensor(a)
    return _from_op(-a.data, (a,), lambda g: (-g,))


def power(a, p):
    a = _as_tensor(a)
    p = float(p)
    return _from_op(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a):
    a = _as_tensor(a)
    out_data = np.exp(a.data)
    return _from_op(out_data, (a,), lambda g: (g * out_data,))


def log(a):
    a = _as_tensor(a)
    return _from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = _as_tensor(a)
    out_data = np.sqrt(a.data)
    return _from_op(out_data, (a,), lambda g: (g * (0.5 / out_data),))


def tanh(a):
    a = _as_tensor(a)
    out_data = np.tanh(a.data)
    return _from_op(out_data, (a,), lambda g: (g * (1.0 - out_data * out_data),))


def sigmoid(a):
    a = _as_tensor(a)
    # stable two-branch logistic
    out_data = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                        np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    out_data = out_data.astype(a.dtype, copy=False)
    return _from_op(out_data, (a,), lambda g: (g * out_data * (1.0 - out_data),))


def relu(a):
    a = _as_tensor(a)
    return _from_op(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0),))


def silu(a):
    a = _as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    return _from_op(a.data * s, (a,), lambda g: (g * (s * (1.0 + a.data * (1.0 - s))),))


# -- reductions and shape ops ------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).astype(a.dtype, copy=False),)
        gg = g
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            gg = np.expand_dims(g, axes)
        return (np.broadcast_to(gg, a.data.shape),)

    return _from_op(np.asarray(out_data), (a,), bw)


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape):
    a = _as_tensor(a)
    in_shape = a.data.shape
    return _from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(in_shape),))


def transpose(a, axes=None):
    a = _as_tensor(a)
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _from_op(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                    lambda g: (g.transpose(inv),))


def expand(a, shape):
    """Broadcast to `shape` (read-only view forward, summed gradient back)."""
    a = _as_tensor(a)
    in_shape = a.data.shape
    return _from_op(np.broadcast_to(a.data, shape), (a,),
                    lambda g: (_unbroadcast(g, in_shape),))


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _from_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def getitem(a, idx):
    """Basic (slice/int/ellipsis) indexing with scatter-back gradient."""
    a = _as_tensor(a)
    out_data = a.data[idx]

    def bw(g):
        da = np.zeros_like(a.data)
        da[idx] = g
        return (da,)

    return _from_op(np.ascontiguousarray(out_data), (a,), bw)


def gather_rows(table, idx):
    """Row lookup `table[idx]` with additive scatter on the way back.

    `idx` is an integer array of any shape; output shape is idx.shape + (D,).
    """
    table = _as_tensor(table)
    idx = np.asarray(idx)

    def bw(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, idx.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        return (dt,)

    return _from_op(table.data[idx], (table,), bw)


def stop_gradient(a):
    a = _as_tensor(a)
    return Tensor(a.data, requires_grad=False, dtype=a.dtype)


# -- linear algebra ------------------------------------------------------------


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands need at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def bw(g):
        da = np.matmul(g, np.swapaxes(b.data, -1, -2))
        db = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(da, a.data.shape), _unbroadcast(db, b.data.shape))

    return _from_op(out_data, (a, b), bw)


def softmax(a, axis=-1):
    """Numerically stabilized softmax; output sums to 1 along `axis`."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        return ((g - inner) * out_data,)

    return _from_op(out_data, (a,), bw)


def layer_norm(x, weight, bias, eps=1e-5):
    """Normalize over the last axis, then scale/shift per feature."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * weight.data + bias.data

    def bw(g):
        dxhat = g * weight.data
        dx = (dxhat - dxhat.mean(axis=-1, keepdims=True)
              - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)) * inv
        red = tuple(range(g.ndim - 1))
        dw = (g * xhat).sum(axis=red)
        db = g.sum(axis=red)
        return (dx, dw, db)

    return _from_op(out_data, (x, weight, bias), bw)


def group_norm(x, weight, bias, groups, eps=1e-5):
    """Normalize (B, C, H, W) per sample over channel groups."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    b, c, h, w = x.shape
    if c % groups:
        raise DimensionError(f"channels {c} not divisible by {groups} groups")
    xg = x.data.reshape(b, groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(b, c, h, w)
    wb = weight.data.reshape(1, c, 1, 1)
    out_data = xhat * wb + bias.data.reshape(1, c, 1, 1)

    def bw(g):
        dxhat = (g * wb).reshape(b, groups, -1)
        xhg = xhat.reshape(b, groups, -1)
        dx = (dxhat - dxhat.mean(axis=-1, keepdims=True)
              - xhg * (dxhat * xhg).mean(axis=-1, keepdims=True)) * inv
        dw = (g * xhat).sum(axis=(0, 2, 3))
        db = g.sum(axis=(0, 2, 3))
        return (dx.reshape(b, c, h, w), dw, db)

    return _from_op(out_data, (x, weight, bias), bw)


# -- convolution ---------------------------------------------------------------
#
# Convolutions run channels-last internally: im2col is filled tap by tap
# with plain slice copies (the innermost channel axis stays contiguous, so
# each copy is memcpy-like), the contraction is one large GEMM, and the
# input gradient is the exact adjoint (col2im scatter-add over the same
# taps). The channels-first API layout is converted at the boundaries.


def _conv_out_extent(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def _to_cl(x):
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def _to_cf(x):
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def _im2col(xp, kh, kw, sh, sw, oh, ow):
    """(B, Hp, Wp, C) padded channels-last input -> (B, OH, OW, kh, kw, C).

    One copy per kernel row: the width-axis sliding window keeps (kw, C)
    blocks contiguous in memory, so each slice assignment is memcpy-like.
    """
    b, _, _, c = xp.shape
    cols = np.empty((b, oh, ow, kh, kw, c), dtype=xp.dtype)
    win = sliding_window_view(xp, kw, axis=2).transpose(0, 1, 2, 4, 3)
    last = (ow - 1) * sw + 1
    for p in range(kh):
        cols[:, :, :, p] = win[:, p:p + sh * oh:sh, :last:sw]
    return cols


def _col2im(dcols, hp, wp, sh, sw):
    """Adjoint of _im2col: scatter-add taps back onto the padded grid."""
    b, oh, ow, kh, kw, c = dcols.shape
    dxp = np.zeros((b, hp, wp, c), dtype=dcols.dtype)
    for p in range(kh):
        for q in range(kw):
            dxp[:, p:p + sh * oh:sh, q:q + sw * ow:sw, :] += dcols[:, :, :, p, q, :]
    return dxp


def _w_mat(w):
    """(F, C, kh, kw) kernel -> (kh*kw*C, F) GEMM operand."""
    f = w.shape[0]
    return np.ascontiguousarray(w.transpose(2, 3, 1, 0).reshape(-1, f))


def _w_unmat(w_mat, kh, kw, c, f):
    return np.ascontiguousarray(w_mat.reshape(kh, kw, c, f).transpose(3, 2, 0, 1))


def _conv_fwd_cols(x, w, stride, pad):
    """Returns (out channels-first, cols) with cols kept for the backward GEMMs."""
    sh, sw = stride
    ph, pw = pad
    f, c, kh, kw = w.shape
    b, _, h, wd = x.shape
    oh, ow = _conv_out_extent(h, kh, sh, ph), _conv_out_extent(wd, kw, sw, pw)
    x_cl = _to_cl(x)
    xp = np.pad(x_cl, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if (ph or pw) else x_cl
    cols = _im2col(xp, kh, kw, sh, sw, oh, ow)
    out = cols.reshape(b * oh * ow, -1) @ _w_mat(w)
    return _to_cf(out.reshape(b, oh, ow, f)), cols


def _conv_fwd(x, w, stride, pad):
    return _conv_fwd_cols(x, w, stride, pad)[0]


def _conv_dw_from_cols(cols, g):
    """cols (B,OH,OW,kh,kw,C) x upstream g (B,F,OH,OW) -> (F,C,kh,kw)."""
    b, oh, ow, kh, kw, c = cols.shape
    f = g.shape[1]
    g_cl = _to_cl(g).reshape(b * oh * ow, f)
    dw_mat = cols.reshape(b * oh * ow, -1).T @ g_cl
    return _w_unmat(dw_mat, kh, kw, c, f)


def _conv_dx(g, w, stride, pad, in_hw):
    """Input gradient of _conv_fwd (also the transposed-conv forward)."""
    sh, sw = stride
    ph, pw = pad
    f, c, kh, kw = w.shape
    b, _, oh, ow = g.shape
    h, wd = in_hw
    g_cl = _to_cl(g).reshape(b * oh * ow, f)
    dcols = g_cl @ _w_mat(w).T
    dxp = _col2im(dcols.reshape(b, oh, ow, kh, kw, c), h + 2 * ph, wd + 2 * pw, sh, sw)
    return _to_cf(dxp[:, ph:ph + h, pw:pw + wd, :])


def _conv_dw(x, g, stride, pad, kshape):
    sh, sw = stride
    ph, pw = pad
    kh, kw = kshape
    b, _, oh, ow = g.shape
    x_cl = _to_cl(x)
    xp = np.pad(x_cl, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if (ph or pw) else x_cl
    return _conv_dw_from_cols(_im2col(xp, kh, kw, sh, sw, oh, ow), g)


def _norm_pair(v, name):
    pair = (v, v) if isinstance(v, int) else tuple(v)
    if len(pair) != 2:
        raise DimensionError(f"{name} must be an int or a pair")
    return pair


def conv2d(x, w, bias=None, stride=1, pad=0):
    """2-D cross-correlation; x (B,C,H,W), w (F,C,kh,kw) -> (B,F,OH,OW)."""
    x, w = _as_tensor(x), _as_tensor(w)
    stride = _norm_pair(stride, "stride")
    pad = _norm_pair(pad, "pad")
    if stride[0] < 1 or stride[1] < 1 or pad[0] < 0 or pad[1] < 0:
        raise DimensionError(f"invalid stride {stride} or pad {pad}")
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv2d expects 4-d input and kernel")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"channel mismatch: input {x.shape}, kernel {w.shape}")
    bb, cc, h, wd = x.shape
    kh, kw = w.shape[2], w.shape[3]
    if kh > h + 2 * pad[0] or kw > wd + 2 * pad[1]:
        raise DimensionError(f"kernel ({kh},{kw}) larger than padded input")
    needs_grad = TAPE.recording and (x.requires_grad or w.requires_grad
                                     or (bias is not None and _as_tensor(bias).requires_grad))
    if needs_grad:
        out_data, cols = _conv_fwd_cols(x.data, w.data, stride, pad)
    else:
        out_data = _conv_fwd(x.data, w.data, stride, pad)
        cols = None
    inputs = (x, w)
    if bias is not None:
        bias = _as_tensor(bias)
        out_data = out_data + bias.data.reshape(1, -1, 1, 1)
        inputs = (x, w, bias)

    def bw(g):
        dx = _conv_dx(g, w.data, stride, pad, (h, wd)) if x.requires_grad else None
        dw = _conv_dw_from_cols(cols, g) if w.requires_grad else None
        if bias is None:
            return (dx, dw)
        return (dx, dw, g.sum(axis=(0, 2, 3)))

    return _from_op(out_data, inputs, bw)


def conv_transpose2d(x, w, bias=None, stride=1, pad=0, out_pad=0):
    """Transposed convolution; x (B,Cin,H,W), w (Cin,Cout,kh,kw).

    Output extent per spatial dim: (n-1)*stride - 2*pad + k + out_pad.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    stride = _norm_pair(stride, "stride")
    pad = _norm_pair(pad, "pad")
    out_pad = _norm_pair(out_pad, "out_pad")
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv_transpose2d expects 4-d input and kernel")
    if x.shape[1] != w.shape[0]:
        raise DimensionError(f"channel mismatch: input {x.shape}, kernel {w.shape}")
    if out_pad[0] >= stride[0] or out_pad[1] >= stride[1]:
        raise DimensionError("out_pad must be smaller than stride")
    _, _, h, wd = x.shape
    cin, cout, kh, kw = w.shape
    oh = (h - 1) * stride[0] - 2 * pad[0] + kh + out_pad[0]
    ow = (wd - 1) * stride[1] - 2 * pad[1] + kw + out_pad[1]
    if oh < 1 or ow < 1:
        raise DimensionError("transposed conv output would be empty")
    # forward pass is exactly the input-gradient of the matching conv2d,
    # with w read as that conv's (F=Cin, C=Cout) kernel
    out_data = _conv_dx(x.data, w.data, stride, pad, (oh, ow))
    inputs = (x, w)
    if bias is not None:
        bias = _as_tensor(bias)
        out_data = out_data + bias.data.reshape(1, -1, 1, 1)
        inputs = (x, w, bias)

    def bw(g):
        if x.requires_grad or w.requires_grad:
            gp_cols = None
            if x.requires_grad and w.requires_grad:
                dx_out, gp_cols = _conv_fwd_cols(g, w.data, stride, pad)
            elif x.requires_grad:
                dx_out = _conv_fwd(g, w.data, stride, pad)
            dx = dx_out if x.requires_grad else None
            if w.requires_grad:
                if gp_cols is None:
                    dw = _conv_dw(g, x.data, stride, pad, (kh, kw))
                else:
                    dw = _conv_dw_from_cols(gp_cols, x.data)
            else:
                dw = None
        else:
            dx = dw = None
        if bias is None:
            return (dx, dw)
        return (dx, dw, g.sum(axis=(0, 2, 3)))

    return _from_op(out_data, inputs, bw)


# -- gradient checking ---------------------------------------------------------


def grad_check(f, x, eps=1e-5, atol=1e-9):
    """Max relative error between analytic and central-difference gradients.

    `f` maps the checked tensor(s) to a scalar Tensor; `x` is one Tensor or
    a sequence of them, all float64 with requires_grad set. Returns
    max over coordinates of |analytic - cd| / (|analytic| + |cd| + 1e-12).
    Differences below `atol` count as zero: for constant-valued maps both
    estimates are pure float noise and the quotient would be meaningless.
    """
    xs = list(x) if isinstance(x, (list, tuple)) else [x]
    for t in xs:
        if t.dtype != np.float64:
            raise ContractError("grad_check requires float64 tensors")
        if not t.requires_grad:
            raise ContractError("grad_check tensors must require grad")
        t.zero_grad()

    TAPE.reset()
    out = f(*xs)
    if out.size != 1:
        raise ContractError("grad_check target must be scalar-valued")
    if not np.isfinite(out.data).all():
        raise GradCheckError("non-finite forward value", coordinate=None)
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]

    worst = 0.0
    with no_grad(), np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        for ti, t in enumerate(xs):
            for i, idx in enumerate(np.ndindex(t.data.shape)):
                orig = t.data[idx]
                t.data[idx] = orig + eps
                fp = float(f(*xs).data)
                t.data[idx] = orig - eps
                fm = float(f(*xs).data)
                t.data[idx] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise GradCheckError(
                        f"non-finite value while perturbing tensor {ti} coordinate {i}",
                        coordinate=(ti, i))
                cd = (fp - fm) / (2.0 * eps)
                an = float(analytic[ti][idx])
                if abs(an - cd) <= atol:
                    continue
                rel = abs(an - cd) / (abs(an) + abs(cd) + 1e-12)
                worst = max(worst, rel)
    return worst
