"""Dense tensors with reverse-mode differentiation.

A Tensor wraps a numpy array plus an optional backward closure; calling
``backward()`` on a scalar replays the recorded closures in reverse
topological order, accumulating gradients into ``.grad``. Gradients are
*never* zeroed implicitly; optimizers call ``zero_grad`` explicitly, so
accumulation across multiple losses is auditable.

``stop_gradient`` is the blockwise-training boundary: identity forward,
exactly zero backward (the result simply has no tape parents).

Precision is configurable per tensor (float32 default, float64 for
gradient-check suites); operations follow numpy promotion.
"""

from __future__ import annotations

from collections import Counter
from contextlib import contextmanager

import numpy as np

from .errors import ShapeError, ConfigurationError

DEFAULT_DTYPE = np.float32

# |divisor| below this is clamped (sign-preserving) instead of dividing by ~0.
division_epsilon = 1e-12

# Counts epsilon clamps by site, e.g. clamp_warnings["div"].
clamp_warnings: Counter = Counter()

_FLOAT_KINDS = ("f",)

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Forwards inside the block build no graph; outputs come out detached."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(value, dtype=None):
    arr = np.asarray(value)
    if arr.dtype.kind not in _FLOAT_KINDS:
        arr = arr.astype(dtype or DEFAULT_DTYPE)
    elif dtype is not None:
        arr = arr.astype(dtype)
    return arr


def _sum_to_shape(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Undo broadcasting: reduce ``grad`` back to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Dense numeric array participating in a differentiation tape."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._prev = ()
        self._backward = None
        self._op = ""

    # ------------------------------------------------------------------
    # construction helpers

    @staticmethod
    def _from_op(data, parents, backward, op: str) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._op = op
        live = tuple(p for p in parents if p.requires_grad) if _GRAD_ENABLED \
            else ()
        if live:
            out.requires_grad = True
            out._prev = live
            out._backward = backward
        else:
            out.requires_grad = False
            out._prev = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            if np.shape(g) == self.data.shape:
                self.grad = np.array(g, dtype=self.data.dtype)
            else:
                self.grad = np.zeros_like(self.data)
                self.grad += g
        else:
            self.grad += g

    # ------------------------------------------------------------------
    # elementwise arithmetic

    @staticmethod
    def _coerce(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    @staticmethod
    def _check_broadcast(a: np.ndarray, b: np.ndarray):
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast") from None

    def __add__(self, other):
        other = Tensor._coerce(other)
        Tensor._check_broadcast(self.data, other.data)
        out_data = self.data + other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_sum_to_shape(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_sum_to_shape(g, other.data.shape))

        return Tensor._from_op(out_data, (self, other), backward, "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = Tensor._coerce(other)
        Tensor._check_broadcast(self.data, other.data)
        out_data = self.data - other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_sum_to_shape(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_sum_to_shape(-g, other.data.shape))

        return Tensor._from_op(out_data, (self, other), backward, "sub")

    def __rsub__(self, other):
        return Tensor._coerce(other) - self

    def __neg__(self):
        def backward(g):
            self._accumulate(-g)

        return Tensor._from_op(-self.data, (self,), backward, "neg")

    def __mul__(self, other):
        other = Tensor._coerce(other)
        Tensor._check_broadcast(self.data, other.data)
        out_data = self.data * other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_sum_to_shape(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_sum_to_shape(g * self.data, other.data.shape))

        return Tensor._from_op(out_data, (self, other), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._coerce(other)
        Tensor._check_broadcast(self.data, other.data)
        denom = other.data
        small = np.abs(denom) < division_epsilon
        if small.any():
            clamp_warnings["div"] += int(np.count_nonzero(small))
            sign = np.where(denom < 0, -1.0, 1.0)
            denom = np.where(small, sign * division_epsilon, denom).astype(denom.dtype, copy=False)
        out_data = self.data / denom

        def backward(g):
            if self.requires_grad:
                self._accumulate(_sum_to_shape(g / denom, self.data.shape))
            if other.requires_grad:
                other._accumulate(_sum_to_shape(-g * self.data / (denom * denom), other.data.shape))

        return Tensor._from_op(out_data, (self, other), backward, "div")

    def __rtruediv__(self, other):
        return Tensor._coerce(other) / self

    # ------------------------------------------------------------------
    # elementwise nonlinearities

    def relu(self):
        out_data = np.maximum(self.data, 0)

        def backward(g):
            self._accumulate(g * (out_data > 0))

        return Tensor._from_op(out_data, (self,), backward, "relu")

    def exp(self):
        out_data = np.exp(self.data)

        def backward(g):
            self._accumulate(g * out_data)

        return Tensor._from_op(out_data, (self,), backward, "exp")

    def log(self):
        out_data = np.log(self.data)

        def backward(g):
            self._accumulate(g / self.data)

        return Tensor._from_op(out_data, (self,), backward, "log")

    def sqrt(self):
        out_data = np.sqrt(self.data)

        def backward(g):
            self._accumulate(g / (2.0 * out_data))

        return Tensor._from_op(out_data, (self,), backward, "sqrt")

    def square(self):
        out_data = self.data * self.data

        def backward(g):
            self._accumulate(g * (2.0 * self.data))

        return Tensor._from_op(out_data, (self,), backward, "square")

    def signed_sqrt(self):
        """sign(v) * sqrt(|v|); derivative clamped near v=0."""
        absval = np.abs(self.data)
        root = np.sqrt(absval)
        out_data = np.sign(self.data) * root

        def backward(g):
            denom = 2.0 * np.maximum(root, 1e-6)
            self._accumulate(g / denom)

        return Tensor._from_op(out_data, (self,), backward, "signed_sqrt")

    # ------------------------------------------------------------------
    # matmul / shape ops

    def __matmul__(self, other):
        other = Tensor._coerce(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ShapeError("matmul expects 2-D operands")
        if self.data.shape[1] != other.data.shape[0]:
            raise ShapeError(
                f"matmul inner dims disagree: {self.data.shape} x {other.data.shape}"
            )
        out_data = self.data @ other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(g @ other.data.T)
            if other.requires_grad:
                other._accumulate(self.data.T @ g)

        return Tensor._from_op(out_data, (self, other), backward, "matmul")

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src_shape = self.data.shape
        out_data = self.data.reshape(shape)

        def backward(g):
            self._accumulate(g.reshape(src_shape))

        return Tensor._from_op(out_data, (self,), backward, "reshape")

    def transpose(self, axes=None):
        out_data = np.transpose(self.data, axes)
        if axes is None:
            inverse = None
        else:
            inverse = np.argsort(axes)

        def backward(g):
            self._accumulate(np.transpose(g, inverse))

        return Tensor._from_op(out_data, (self,), backward, "transpose")

    @property
    def T(self):
        return self.transpose()

    # ------------------------------------------------------------------
    # reductions

    @staticmethod
    def _norm_axes(axes, ndim):
        if axes is None:
            return tuple(range(ndim))
        if isinstance(axes, int):
            axes = (axes,)
        for a in axes:
            if not -ndim <= a < ndim:
                raise ShapeError(f"axis {a} out of range for ndim {ndim}")
        return tuple(a % ndim for a in axes)

    def _check_reduce(self, axes):
        for a in axes:
            if self.data.shape[a] == 0:
                raise ShapeError(f"cannot reduce over empty axis {a}")

    def sum(self, axis=None, keepdims: bool = False):
        axes = Tensor._norm_axes(axis, self.data.ndim)
        self._check_reduce(axes)
        out_data = self.data.sum(axis=axes, keepdims=keepdims)
        src_shape = self.data.shape

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            self._accumulate(np.broadcast_to(g, src_shape).copy())

        return Tensor._from_op(out_data, (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        axes = Tensor._norm_axes(axis, self.data.ndim)
        self._check_reduce(axes)
        count = 1
        for a in axes:
            count *= self.data.shape[a]
        out_data = self.data.mean(axis=axes, keepdims=keepdims)
        src_shape = self.data.shape

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            self._accumulate(np.broadcast_to(g / count, src_shape).copy())

        return Tensor._from_op(out_data, (self,), backward, "mean")

    def max(self, axis=None, keepdims: bool = False):
        axes = Tensor._norm_axes(axis, self.data.ndim)
        self._check_reduce(axes)
        out_data = self.data.max(axis=axes, keepdims=True)
        # ties share the incoming gradient equally (a valid subgradient)
        mask = (self.data == out_data)
        counts = mask.sum(axis=axes, keepdims=True)
        result = out_data if keepdims else out_data.squeeze(axes)

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            self._accumulate(mask * (g / counts))

        return Tensor._from_op(result, (self,), backward, "max")

    # ------------------------------------------------------------------
    # backward driver

    def backward(self):
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.data.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if id(parent) not in visited:
                    stack.append((parent, False))
        seeds = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = seeds.pop(id(node), None)
            if g is None or node._backward is None:
                continue
            node._backward(g)
            # closures accumulate into .grad; gradients landing on interior
            # nodes are swept into the seed map (leaves keep theirs) so each
            # closure sees its complete upstream gradient exactly once
            for parent in node._prev:
                if parent._backward is not None and parent.grad is not None:
                    key = id(parent)
                    if key in seeds:
                        seeds[key] += parent.grad
                    else:
                        seeds[key] = parent.grad
                    parent.grad = None


def stop_gradient(t: Tensor) -> Tensor:
    """Identity forward, exactly zero backward (no tape parents)."""
    return Tensor(t.data)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [Tensor._coerce(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return Tensor._from_op(out_data, tuple(tensors), backward, "concat")


# ----------------------------------------------------------------------
# convolution

def _conv_out_dim(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _check_conv(x_shape, w_shape, stride, padding, groups):
    n, c, h, w = x_shape
    o, cg, kh, kw = w_shape
    if groups < 1 or c % groups != 0 or o % groups != 0:
        raise ConfigurationError(f"groups={groups} incompatible with C={c}, O={o}")
    if cg != c // groups:
        raise ShapeError(f"kernel expects {cg} input channels/group, input has {c // groups}")
    ho = _conv_out_dim(h, kh, stride, padding)
    wo = _conv_out_dim(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ConfigurationError(f"conv output dims collapse: {(ho, wo)}")
    return ho, wo


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N,C,Hp,Wp) -> (N*Ho*Wo, C*kh*kw) patch matrix."""
    n, c = xp.shape[:2]
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (N,C,Ho,Wo,kh,kw)
    patches = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(patches)


def _conv_forward_im2col(x, w, stride, padding, groups):
    n, c, h, wid = x.shape
    o, cg, kh, kw = w.shape
    ho, wo = _conv_out_dim(h, kh, stride, padding), _conv_out_dim(wid, kw, stride, padding)
    if padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x
    cols = []
    outs = []
    og = o // groups
    for gidx in range(groups):
        xg = xp[:, gidx * cg:(gidx + 1) * cg]
        col = _im2col(xg, kh, kw, stride, ho, wo)           # (N*Ho*Wo, cg*kh*kw)
        wm = w[gidx * og:(gidx + 1) * og].reshape(og, -1)   # (og, cg*kh*kw)
        outs.append(col @ wm.T)                             # (N*Ho*Wo, og)
        cols.append(col)
    out = np.concatenate(outs, axis=1) if groups > 1 else outs[0]
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols, (ho, wo)


def _conv_backward_im2col(g, x, w, cols, stride, padding, groups,
                          need_dx=True, need_dw=True):
    n, c, h, wid = x.shape
    o, cg, kh, kw = w.shape
    ho, wo = g.shape[2], g.shape[3]
    og = o // groups
    gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
    grad_w = np.empty_like(w) if need_dw else None
    hp, wp = h + 2 * padding, wid + 2 * padding
    # channel-first accumulator: each kernel-offset slice add below then
    # reads a contiguous (cg, N, Ho, Wo) block
    grad_cn = np.zeros((c, n, hp, wp), dtype=x.dtype) if need_dx else None
    for gidx in range(groups):
        gslice = gm[:, gidx * og:(gidx + 1) * og]                       # (NHW, og)
        wg = w[gidx * og:(gidx + 1) * og].reshape(og, -1)
        if need_dw:
            grad_w[gidx * og:(gidx + 1) * og] = (gslice.T @ cols[gidx]).reshape(og, cg, kh, kw)
        if not need_dx:
            continue
        gcol = (wg.T @ gslice.T).reshape(cg, kh, kw, n, ho, wo)
        dst = grad_cn[gidx * cg:(gidx + 1) * cg]
        for i in range(kh):
            for j in range(kw):
                dst[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcol[:, i, j]
    if not need_dx:
        return None, grad_w
    grad_xp = np.ascontiguousarray(grad_cn.transpose(1, 0, 2, 3))
    if padding:
        grad_x = grad_xp[:, :, padding:hp - padding, padding:wp - padding]
    else:
        grad_x = grad_xp
    return grad_x, grad_w


def _conv_forward_direct(x, w, stride, padding, groups):
    n, c, h, wid = x.shape
    o, cg, kh, kw = w.shape
    ho, wo = _conv_out_dim(h, kh, stride, padding), _conv_out_dim(wid, kw, stride, padding)
    if padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x
    out = np.zeros((n, o, ho, wo), dtype=x.dtype)
    og = o // groups
    for oc in range(o):
        gidx = oc // og
        src = xp[:, gidx * cg:(gidx + 1) * cg]
        for i in range(ho):
            for j in range(wo):
                patch = src[:, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                out[:, oc, i, j] = np.einsum("nchw,chw->n", patch, w[oc])
    return out


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0,
           groups: int = 1, method: str = "im2col") -> Tensor:
    """Cross-correlation convolution, NCHW layout, no kernel flip.

    ``method="direct"`` runs the loop reference (slow, used for verification);
    the im2col path is the default and the one the direct path is checked
    against in the test suite.
    """
    x = Tensor._coerce(x)
    weight = Tensor._coerce(weight)
    _check_conv(x.data.shape, weight.data.shape, stride, padding, groups)
    if method == "direct":
        out_data = _conv_forward_direct(x.data, weight.data, stride, padding, groups)
        cols = None
    elif method == "im2col":
        out_data, cols, _ = _conv_forward_im2col(x.data, weight.data, stride, padding, groups)
    else:
        raise ConfigurationError(f"unknown conv method {method!r}")

    def backward(g):
        nonlocal cols
        if cols is None and weight.requires_grad:
            _, cols, _ = _conv_forward_im2col(x.data, weight.data, stride, padding, groups)
        grad_x, grad_w = _conv_backward_im2col(
            g, x.data, weight.data, cols, stride, padding, groups,
            need_dx=x.requires_grad, need_dw=weight.requires_grad)
        if x.requires_grad:
            x._accumulate(grad_x)
        if weight.requires_grad:
            weight._accumulate(grad_w)

    return Tensor._from_op(out_data, (x, weight), backward, "conv2d")


def batchnorm_train(x: Tensor, gamma: Tensor, beta: Tensor, axes: tuple,
                    eps: float, pshape: tuple):
    """Fused train-mode batch normalization over ``axes`` (biased variance).

    Returns (out, batch_mean, batch_var); the statistics are plain arrays
    with keepdims shape, for the caller's running-stat update.
    """
    x = Tensor._coerce(x)
    mu = x.data.mean(axis=axes, keepdims=True)
    diff = x.data - mu
    var = np.mean(diff * diff, axis=axes, keepdims=True)
    invstd = 1.0 / np.sqrt(var + eps)
    xn = diff * invstd
    gr = gamma.data.reshape(pshape)
    out_data = xn * gr + beta.data.reshape(pshape)

    def backward(g):
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes).reshape(beta.data.shape))
        if gamma.requires_grad:
            gamma._accumulate((g * xn).sum(axis=axes).reshape(gamma.data.shape))
        if x.requires_grad:
            dxn = g * gr
            t1 = dxn.mean(axis=axes, keepdims=True)
            t2 = (dxn * xn).mean(axis=axes, keepdims=True)
            x._accumulate((dxn - t1 - xn * t2) * invstd)

    out = Tensor._from_op(out_data, (x, gamma, beta), backward, "batchnorm")
    return out, mu, var
