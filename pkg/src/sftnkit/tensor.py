"""Dense tensors with reverse-mode automatic differentiation.

Every primitive computes its forward value eagerly with numpy and, when any
operand requires a gradient, records a backward rule on the output.  Calling
:meth:`Tensor.backward` on a scalar walks the recorded graph once in reverse
topological order and accumulates gradients into leaf tensors.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "ShapeError", "GraphError", "no_grad", "grad_enabled", "default_dtype",
    "get_default_dtype", "tensor", "add", "sub", "mul", "div", "neg", "matmul", "pow",
    "exp", "log", "sqrt", "relu", "sum", "mean", "reshape", "transpose", "conv2d",
    "conv_transpose2d", "depthwise_conv2d", "maxpool2d", "global_avgpool",
    "batchnorm2d", "log_softmax", "softmax",
]


class ShapeError(ValueError):
    """Operand shapes are invalid for a primitive."""


class GraphError(RuntimeError):
    """Misuse of the differentiation graph (non-scalar loss, reused graph)."""


_GRAD_ENABLED = True
_DEFAULT_DTYPE = np.dtype(np.float32)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for tensors built from non-float data."""
    global _DEFAULT_DTYPE
    prev, _DEFAULT_DTYPE = _DEFAULT_DTYPE, np.dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "_freed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = _DEFAULT_DTYPE
        self.data: np.ndarray = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"
        self._freed = False

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg}, op={self.op})"

    def __len__(self) -> int:
        return len(self.data)

    # -- differentiation -----------------------------------------------
    def backward(self) -> None:
        """Populate ``.grad`` of every leaf that requires a gradient.

        The graph is released afterwards; a second call on the same loss raises.
        """
        if self.data.size != 1:
            raise GraphError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._freed:
            raise GraphError("graph already consumed by a previous backward(); rebuild the loss")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor that requires grad")

        order = _topo_order(self)
        if any(node._freed for node in order):
            raise GraphError("graph already consumed by a previous backward(); rebuild the loss")
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node.is_leaf:
                if g is not None:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if g is not None:
                parent_grads = node._backward(g)
                for parent, pg in zip(node._parents, parent_grads):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            node._parents = ()
            node._backward = None
            node._freed = True

    # -- operator sugar ------------------------------------------------
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __pow__(self, p): return pow(self, p)

    def sum(self, axis=None, keepdims=False): return sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def transpose(self, *axes): return transpose(self, axes or None)
    def relu(self): return relu(self)
    def exp(self): return exp(self)
    def log(self): return log(self)

    @property
    def T(self): return transpose(self, None)


def _raise_item(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def _topo_order(root: Tensor) -> list:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_check("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_check("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_check("mul", a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_check("div", a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def pow(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out = a.data ** p

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return _result(out, (a,), backward, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


# -- linear algebra and shape -------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out, dtype=a.dtype), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size // max(np.asarray(out).size, 1) if axis is not None else a.data.size

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).astype(a.dtype),)

    return _result(np.asarray(out, dtype=a.dtype), (a,), backward, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(out), (a,), lambda g: (np.transpose(g, inv),), "transpose")


# -- convolutions ---------------------------------------------------------------

def _pair(v) -> tuple:
    return (v, v) if isinstance(v, int) else tuple(v)


def _windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]


def _col2im(cols: np.ndarray, xp_shape: tuple, kh, kw, sh, sw, ho, wo) -> np.ndarray:
    """Scatter-add (B, C, Ho, Wo, kh, kw) patches back into a padded NCHW image."""
    out = np.zeros(xp_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + (ho - 1) * sh + 1 : sh, j : j + (wo - 1) * sw + 1 : sw] += cols[:, :, :, :, i, j]
    return out


def _unpad(xp: np.ndarray, ph: int, pw: int) -> np.ndarray:
    h, w = xp.shape[2], xp.shape[3]
    return xp[:, :, ph : h - ph, pw : w - pw]


# Convolutions run channels-last internally: patches are laid out as
# (B, Ho, Wo, kh, kw, C) so every copy and scatter moves contiguous channel runs.

def _padded_nhwc(a: np.ndarray, ph: int, pw: int) -> np.ndarray:
    B, C, H, W = a.shape
    out = np.zeros((B, H + 2 * ph, W + 2 * pw, C), dtype=a.dtype)
    out[:, ph : ph + H, pw : pw + W, :] = a.transpose(0, 2, 3, 1)
    return out


def _im2col_nhwc(xp: np.ndarray, kh, kw, sh, sw, ho, wo) -> np.ndarray:
    B, C = xp.shape[0], xp.shape[3]
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * ho * wo, kh * kw * C)


def _col2im_nhwc(cols: np.ndarray, xp_shape: tuple, kh, kw, sh, sw, ho, wo) -> np.ndarray:
    out = np.zeros(xp_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + (ho - 1) * sh + 1 : sh, j : j + (wo - 1) * sw + 1 : sw, :] += cols[:, :, :, i, j, :]
    return out


def _nhwc_to_nchw(a: np.ndarray, ph: int = 0, pw: int = 0) -> np.ndarray:
    if ph or pw:
        a = a[:, ph : a.shape[1] - ph, pw : a.shape[2] - pw, :]
    return np.ascontiguousarray(a.transpose(0, 3, 1, 2))


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation; ``x`` is (B, C, H, W), ``w`` is (O, C, kh, kw)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    (sh, sw), (ph, pw) = _pair(stride), _pair(padding)
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    ho, wo = (H + 2 * ph - kh) // sh + 1, (W + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    xp = _padded_nhwc(x.data, ph, pw)
    pointwise = kh == kw == 1 and sh == sw == 1
    cols = xp.reshape(-1, C) if pointwise else _im2col_nhwc(xp, kh, kw, sh, sw, ho, wo)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(O, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = _nhwc_to_nchw(out.reshape(B, ho, wo, O))

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = (cols.T @ g2).T.reshape(O, kh, kw, C).transpose(0, 3, 1, 2) if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            if pointwise:
                gx = _nhwc_to_nchw((g2 @ wmat).reshape(B, H, W, C))
            elif sh == sw == 1 and ph < kh and pw < kw:
                # stride 1: input gradient is a full correlation of g with the flipped kernel
                gp = _padded_nhwc(g, kh - 1 - ph, kw - 1 - pw)
                flipped = w.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(kh * kw * O, C)
                gx = _nhwc_to_nchw((_im2col_nhwc(gp, kh, kw, 1, 1, H, W) @ flipped).reshape(B, H, W, C))
            else:
                gcols = (g2 @ wmat).reshape(B, ho, wo, kh, kw, C)
                gx = _nhwc_to_nchw(_col2im_nhwc(gcols, xp.shape, kh, kw, sh, sw, ho, wo), ph, pw)
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward, "conv2d")


def conv_transpose2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    """Transposed convolution; ``w`` is (C_in, C_out, kh, kw) as in the adjoint of conv2d."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose2d: incompatible shapes {x.shape} and {w.shape}")
    (sh, sw), (ph, pw) = _pair(stride), _pair(padding)
    B, C, H, W = x.shape
    _, O, kh, kw = w.shape
    hp, wp = (H - 1) * sh + kh, (W - 1) * sw + kw
    ho, wo = hp - 2 * ph, wp - 2 * pw
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d: padding too large for shapes {x.shape} and {w.shape}")
    x2 = x.data.transpose(0, 2, 3, 1).reshape(-1, C)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(C, -1)
    cols = (x2 @ wmat).reshape(B, H, W, kh, kw, O)
    out = _nhwc_to_nchw(_col2im_nhwc(cols, (B, hp, wp, O), kh, kw, sh, sw, H, W), ph, pw)
    if b is not None:
        out += b.data.reshape(1, -1, 1, 1)

    def backward(g):
        gcols = _im2col_nhwc(_padded_nhwc(g, ph, pw), kh, kw, sh, sw, H, W)
        gx = _nhwc_to_nchw((gcols @ wmat.T).reshape(B, H, W, C)) if x.requires_grad else None
        gw = (x2.T @ gcols).reshape(C, kh, kw, O).transpose(0, 3, 1, 2) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward, "conv_transpose2d")


def depthwise_conv2d(x: Tensor, w: Tensor, stride=1, padding=0) -> Tensor:
    """Per-channel convolution; ``w`` is (C, 1, kh, kw)."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[0] != x.shape[1] or w.shape[1] != 1:
        raise ShapeError(f"depthwise_conv2d: incompatible shapes {x.shape} and {w.shape}")
    (sh, sw), (ph, pw) = _pair(stride), _pair(padding)
    B, C, H, W = x.shape
    kh, kw = w.shape[2], w.shape[3]
    ho, wo = (H + 2 * ph - kh) // sh + 1, (W + 2 * pw - kw) // sw + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    kern = w.data[:, 0]
    out = np.zeros((B, C, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i : i + (ho - 1) * sh + 1 : sh, j : j + (wo - 1) * sw + 1 : sw] * kern[:, i, j].reshape(1, C, 1, 1)

    def backward(g):
        gx = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(w.data) if w.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(None), slice(i, i + (ho - 1) * sh + 1, sh), slice(j, j + (wo - 1) * sw + 1, sw))
                if gw is not None:
                    gw[:, 0, i, j] = (g * xp[sl]).sum(axis=(0, 2, 3))
                if gx is not None:
                    gx[sl] += g * kern[:, i, j].reshape(1, C, 1, 1)
        return (_unpad(gx, ph, pw) if gx is not None else None), gw

    return _result(out, (x, w), backward, "depthwise_conv2d")


# -- pooling and normalization ---------------------------------------------------

def maxpool2d(x: Tensor, kernel: int = 2, stride: Optional[int] = None) -> Tensor:
    """Max pooling; ties go to the first element in row-major window order."""
    stride = kernel if stride is None else stride
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: expected 4-D input, got {x.shape}")
    B, C, H, W = x.shape
    ho, wo = (H - kernel) // stride + 1, (W - kernel) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"maxpool2d: kernel {kernel} larger than input {x.shape}")
    win = _windows(x.data, kernel, kernel, stride, stride, ho, wo).reshape(B, C, ho, wo, kernel * kernel)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gcols = np.zeros((B, C, ho, wo, kernel * kernel), dtype=g.dtype)
        np.put_along_axis(gcols, idx[..., None], g[..., None], axis=-1)
        gcols = gcols.reshape(B, C, ho, wo, kernel, kernel)
        return (_col2im(gcols, x.shape, kernel, kernel, stride, stride, ho, wo),)

    return _result(np.ascontiguousarray(out), (x,), backward, "maxpool2d")


def global_avgpool(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C) spatial mean."""
    if x.ndim != 4:
        raise ShapeError(f"global_avgpool: expected 4-D input, got {x.shape}")
    hw = x.shape[2] * x.shape[3]

    def backward(g):
        return (np.broadcast_to((g / hw)[:, :, None, None], x.shape).copy(),)

    return _result(x.data.mean(axis=(2, 3)), (x,), backward, "global_avgpool")


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, momentum: float = 0.1,
                eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics are used and the running buffers are
    updated in place; a single-sample batch uses the running statistics instead.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm2d: incompatible shapes {x.shape} and {gamma.shape}")
    C = x.shape[1]
    g_ = gamma.data.reshape(1, C, 1, 1)
    use_batch = training and x.shape[0] > 1
    if use_batch:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    invstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(1, C, 1, 1).astype(x.dtype)) * invstd.reshape(1, C, 1, 1)
    out = xhat * g_ + beta.data.reshape(1, C, 1, 1)

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * g_
            if use_batch:
                mean_d = dxhat.mean(axis=(0, 2, 3), keepdims=True)
                mean_dx = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                gx = (dxhat - mean_d - xhat * mean_dx) * invstd.reshape(1, C, 1, 1)
            else:
                gx = dxhat * invstd.reshape(1, C, 1, 1)
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), backward, "batchnorm2d")


# -- probability ------------------------------------------------------------------

def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable log-softmax via max subtraction."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), backward, "log_softmax")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return exp(log_softmax(x, axis))
