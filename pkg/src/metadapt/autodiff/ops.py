"""Differentiable primitives.

Each op implements ``forward`` on raw numpy arrays and ``vjp`` in terms of
the public ops themselves, which is what makes gradients-of-gradients work:
a backward pass run with recording enabled is just more tape.

Broadcasting is deliberately narrow: operands must have equal shapes, or one
side is a scalar, or both have the same rank with size-1 axes expanding
(covers per-channel parameters).  Anything else needs an explicit reshape.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .engine import AutodiffError, Tensor, apply_op

__all__ = [
    "as_tensor",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "power",
    "exp",
    "log",
    "square",
    "sqrt",
    "relu",
    "leaky_relu",
    "sigmoid",
    "clamp_min",
    "sum_",
    "mean",
    "reshape",
    "transpose",
    "broadcast_to",
    "matmul",
    "softmax",
    "unfold",
    "fold",
    "conv2d",
    "conv_out_hw",
]


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def constant(x) -> Tensor:
    """Non-differentiable tensor (data snapshot, no graph ancestry)."""
    if isinstance(x, Tensor):
        return Tensor(x.data.copy())
    return Tensor(np.array(x, dtype=np.float64))


def _broadcast_ok(sa: tuple, sb: tuple) -> bool:
    if sa == sb:
        return True
    if math.prod(sa) == 1 or math.prod(sb) == 1:
        return True
    if len(sa) == len(sb):
        return all(a == b or a == 1 or b == 1 for a, b in zip(sa, sb))
    return False


def _check_binary(kind: str, a: Tensor, b: Tensor) -> None:
    if not _broadcast_ok(a.shape, b.shape):
        raise AutodiffError(f"{kind}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    """Sum a gradient back down to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    if math.prod(shape) == 1:
        return reshape(sum_(g), shape)
    axes = tuple(i for i, (d, s) in enumerate(zip(g.shape, shape)) if s == 1 and d != 1)
    return sum_(g, axis=axes, keepdims=True)


# -- elementwise arithmetic ----------------------------------------------------


class _Add:
    name = "add"

    def forward(self, a, b):
        return a + b

    def vjp(self, node, g, needs):
        a, b = node.inputs
        ga = _unbroadcast(g, a.shape) if needs[0] else None
        gb = _unbroadcast(g, b.shape) if needs[1] else None
        return ga, gb


class _Sub:
    name = "sub"

    def forward(self, a, b):
        return a - b

    def vjp(self, node, g, needs):
        a, b = node.inputs
        ga = _unbroadcast(g, a.shape) if needs[0] else None
        gb = _unbroadcast(neg(g), b.shape) if needs[1] else None
        return ga, gb


class _Mul:
    name = "mul"

    def forward(self, a, b):
        return a * b

    def vjp(self, node, g, needs):
        a, b = node.inputs
        ga = _unbroadcast(mul(g, b), a.shape) if needs[0] else None
        gb = _unbroadcast(mul(g, a), b.shape) if needs[1] else None
        return ga, gb


class _Div:
    name = "div"

    def forward(self, a, b):
        return a / b

    def vjp(self, node, g, needs):
        a, b = node.inputs
        ga = _unbroadcast(div(g, b), a.shape) if needs[0] else None
        gb = None
        if needs[1]:
            gb = _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb


class _Neg:
    name = "neg"

    def forward(self, a):
        return -a

    def vjp(self, node, g, needs):
        return (neg(g),)


class _Scale:
    name = "scalar-mul"

    def __init__(self, c: float):
        self.c = c

    def forward(self, a):
        return a * self.c

    def vjp(self, node, g, needs):
        return (scale(g, self.c),)


class _Power:
    name = "pow"

    def __init__(self, p: float):
        self.p = p

    def forward(self, a):
        return a**self.p

    def vjp(self, node, g, needs):
        (a,) = node.inputs
        return (scale(mul(g, power(a, self.p - 1.0)), self.p),)


class _Exp:
    name = "exp"

    def forward(self, a):
        return np.exp(a)

    def vjp(self, node, g, needs):
        out = node.out_ref()
        return (mul(g, out),)


class _Log:
    name = "log"

    def forward(self, a):
        return np.log(a)

    def vjp(self, node, g, needs):
        (a,) = node.inputs
        return (div(g, a),)


class _Square:
    name = "square"

    def forward(self, a):
        return a * a

    def vjp(self, node, g, needs):
        (a,) = node.inputs
        return (scale(mul(g, a), 2.0),)


class _Relu:
    name = "relu"

    def forward(self, a):
        return np.maximum(a, 0.0)

    def vjp(self, node, g, needs):
        (a,) = node.inputs
        mask = Tensor((a.data > 0.0).astype(np.float64))
        return (mul(g, mask),)


class _LeakyRelu:
    name = "leaky-relu"

    def __init__(self, slope: float):
        self.slope = slope

    def forward(self, a):
        return np.where(a > 0.0, a, self.slope * a)

    def vjp(self, node, g, needs):
        (a,) = node.inputs
        mask = Tensor(np.where(a.data > 0.0, 1.0, self.slope))
        return (mul(g, mask),)


class _Sigmoid:
    name = "sigmoid"

    def forward(self, a):
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        ea = np.exp(a[~pos])
        out[~pos] = ea / (1.0 + ea)
        return out

    def vjp(self, node, g, needs):
        out = node.out_ref()
        return (mul(g, mul(out, sub(Tensor(np.float64(1.0)), out))),)


class _ClampMin:
    name = "clamp-min"

    def __init__(self, bound: float):
        self.bound = bound

    def forward(self, a):
        return np.maximum(a, self.bound)

    def vjp(self, node, g, needs):
        (a,) = node.inputs
        mask = Tensor((a.data > self.bound).astype(np.float64))
        return (mul(g, mask),)


# -- reductions and shape ops --------------------------------------------------


class _Sum:
    name = "sum"

    def __init__(self, axis, keepdims: bool):
        self.axis = axis
        self.keepdims = keepdims

    def forward(self, a):
        return np.sum(a, axis=self.axis, keepdims=self.keepdims)

    def vjp(self, node, g, needs):
        (a,) = node.inputs
        if self.axis is None:
            gk = reshape(g, (1,) * a.ndim)
        elif self.keepdims:
            gk = g
        else:
            keep_shape = list(a.shape)
            for ax in self.axis:
                keep_shape[ax] = 1
            gk = reshape(g, tuple(keep_shape))
        return (broadcast_to(gk, a.shape),)


class _Reshape:
    name = "reshape"

    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, a):
        return np.reshape(a, self.shape)

    def vjp(self, node, g, needs):
        (a,) = node.inputs
        return (reshape(g, a.shape),)


class _Transpose:
    name = "transpose"

    def __init__(self, axes):
        self.axes = tuple(axes)

    def forward(self, a):
        # 2-d transposes feed gemm, which handles strided views natively;
        # higher-rank results get copied so downstream ufunc chains stay fast
        out = np.transpose(a, self.axes)
        return out if out.ndim <= 2 else out.copy()

    def vjp(self, node, g, needs):
        inv = tuple(np.argsort(self.axes))
        return (transpose(g, inv),)


class _BroadcastTo:
    name = "broadcast"

    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, a):
        return np.ascontiguousarray(np.broadcast_to(a, self.shape))

    def vjp(self, node, g, needs):
        (a,) = node.inputs
        return (_unbroadcast(g, a.shape),)


class _MatMul:
    name = "matmul"

    def forward(self, a, b):
        return a @ b

    def vjp(self, node, g, needs):
        a, b = node.inputs
        ga = matmul(g, transpose(b, (1, 0))) if needs[0] else None
        gb = matmul(transpose(a, (1, 0)), g) if needs[1] else None
        return ga, gb


# -- image patch extraction (the linear core of convolution) --------------------


class _Unfold:
    name = "unfold"

    def __init__(self, in_shape, ksize, stride, padding):
        self.in_shape = tuple(in_shape)
        self.ksize = ksize
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        n, c, h, w = x.shape
        kh, kw = self.ksize
        s, p = self.stride, self.padding
        if p:
            xp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
            xp[:, :, p : p + h, p : p + w] = x
        else:
            xp = x
        ho, wo = conv_out_hw((h, w), self.ksize, s, p)
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
        win = win[:, :, :: s, :: s][:, :, :ho, :wo]
        # row index n*Ho*Wo + ho*Wo + wo, column index c*kh*kw + i*kw + j:
        # ready for a single (N*L, C*kh*kw) @ (C*kh*kw, F) matmul
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)

    def vjp(self, node, g, needs):
        return (fold(g, self.in_shape, self.ksize, self.stride, self.padding),)


class _Fold:
    name = "fold"

    def __init__(self, out_shape, ksize, stride, padding):
        self.out_shape = tuple(out_shape)  # (N, C, H, W) of the image side
        self.ksize = ksize
        self.stride = stride
        self.padding = padding

    def forward(self, cols):
        n, c, h, w = self.out_shape
        kh, kw = self.ksize
        s, p = self.stride, self.padding
        ho, wo = conv_out_hw((h, w), self.ksize, s, p)
        cols6 = np.ascontiguousarray(
            cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        )  # (N, C, kh, kw, Ho, Wo): one gather copy, then aligned adds
        xp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
        for i in range(kh):
            for j in range(kw):
                xp[:, :, i : i + s * ho : s, j : j + s * wo : s] += cols6[:, :, i, j]
        if p:
            return np.ascontiguousarray(xp[:, :, p : p + h, p : p + w])
        return xp

    def vjp(self, node, g, needs):
        return (unfold(g, self.ksize, self.stride, self.padding),)


# -- public functional surface ---------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("add", a, b)
    return apply_op(_Add(), a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("sub", a, b)
    return apply_op(_Sub(), a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("mul", a, b)
    return apply_op(_Mul(), a, b)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("div", a, b)
    return apply_op(_Div(), a, b)


def neg(a: Tensor) -> Tensor:
    return apply_op(_Neg(), as_tensor(a))


def scale(a: Tensor, c: float) -> Tensor:
    return apply_op(_Scale(float(c)), as_tensor(a))


def power(a: Tensor, p: float) -> Tensor:
    return apply_op(_Power(float(p)), as_tensor(a))


def exp(a: Tensor) -> Tensor:
    return apply_op(_Exp(), as_tensor(a))


def log(a: Tensor) -> Tensor:
    return apply_op(_Log(), as_tensor(a))


def square(a: Tensor) -> Tensor:
    return apply_op(_Square(), as_tensor(a))


def sqrt(a: Tensor) -> Tensor:
    return power(a, 0.5)


def relu(a: Tensor) -> Tensor:
    return apply_op(_Relu(), as_tensor(a))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    return apply_op(_LeakyRelu(float(slope)), as_tensor(a))


def sigmoid(a: Tensor) -> Tensor:
    return apply_op(_Sigmoid(), as_tensor(a))


def clamp_min(a: Tensor, bound: float) -> Tensor:
    return apply_op(_ClampMin(float(bound)), as_tensor(a))


def _norm_axis(axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    return apply_op(_Sum(_norm_axis(axis, a.ndim), keepdims), a)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    if ax is None:
        n = a.size
    else:
        n = math.prod(a.shape[i] for i in ax)
    return scale(sum_(a, axis=ax, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if math.prod(shape) != a.size:
        raise AutodiffError(f"reshape: cannot view {a.shape} as {shape}")
    return apply_op(_Reshape(shape), a)


def transpose(a: Tensor, axes) -> Tensor:
    return apply_op(_Transpose(axes), as_tensor(a))


def broadcast_to(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if a.ndim != len(shape) or any(
        d != s and d != 1 for d, s in zip(a.shape, shape)
    ):
        raise AutodiffError(f"broadcast: cannot expand {a.shape} to {shape}")
    return apply_op(_BroadcastTo(shape), a)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise AutodiffError(f"matmul: expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise AutodiffError(f"matmul: inner dims disagree for {a.shape} and {b.shape}")
    return apply_op(_MatMul(), a, b)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along one axis, shift-stabilized by the detached max."""
    a = as_tensor(a)
    ax = axis % a.ndim
    shift = Tensor(np.max(a.data, axis=ax, keepdims=True))
    e = exp(sub(a, shift))
    return div(e, sum_(e, axis=ax, keepdims=True))


def conv_out_hw(hw: tuple, ksize: tuple, stride: int, padding: int) -> tuple:
    h, w = hw
    kh, kw = ksize
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise AutodiffError(
            f"conv2d: kernel {ksize} with stride {stride}, padding {padding} "
            f"does not fit input {hw}"
        )
    return ho, wo


def unfold(x: Tensor, ksize, stride: int = 1, padding: int = 0) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise AutodiffError(f"unfold: expects NCHW input, got {x.shape}")
    return apply_op(_Unfold(x.shape, tuple(ksize), stride, padding), x)


def fold(cols: Tensor, out_shape, ksize, stride: int = 1, padding: int = 0) -> Tensor:
    return apply_op(
        _Fold(tuple(out_shape), tuple(ksize), stride, padding), as_tensor(cols)
    )


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-d cross-correlation over NCHW input with an FCKK kernel.

    Lowered to patch extraction plus one matmul; both pieces have exact
    adjoints, so the whole thing differentiates to any order.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise AutodiffError(
            f"conv2d: expects NCHW input and FCKK kernel, got {x.shape} and {weight.shape}"
        )
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if c != cw:
        raise AutodiffError(
            f"conv2d: channel mismatch between input {x.shape} and kernel {weight.shape}"
        )
    ho, wo = conv_out_hw((h, w), (kh, kw), stride, padding)
    if (kh, kw) == (1, 1) and stride == 1 and padding == 0:
        # pointwise conv: pure channel mixing, no patch gather needed
        flat = reshape(transpose(x, (0, 2, 3, 1)), (n * h * w, c))
    else:
        flat = unfold(x, (kh, kw), stride, padding)  # (N*L, C*kh*kw)
    wmat = transpose(reshape(weight, (f, c * kh * kw)), (1, 0))
    out = matmul(flat, wmat)  # (N*L, F)
    out = transpose(reshape(out, (n, ho, wo, f)), (0, 3, 1, 2))
    if bias is not None:
        if bias.shape != (f,):
            raise AutodiffError(
                f"conv2d: bias shape {bias.shape} does not match {f} filters"
            )
        out = add(out, reshape(bias, (1, f, 1, 1)))
    return out
