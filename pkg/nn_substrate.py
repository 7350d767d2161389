"""
Small reverse-mode autodiff engine and the layers the estimators are built from

Tensors record the op that produced them; `backward()` walks the graph in
reverse topological order. Data layout for images is [batch, height
(antenna), width (subcarrier), channels]; convolution weights are
[kh, kw, C_in, C_out].
"""
import contextlib
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

import dataset_io
from errors import NumericalError

logger = logging.getLogger(__name__)

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference)"""
    global _GRAD_ENABLED
    previous, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    def __init__(self, values, requires_grad: bool = False, name: Optional[str] = None):
        self.values = np.asarray(values)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def dtype(self):
        return self.values.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.values

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None):
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            grad = np.ones_like(self.values)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(_topological_order(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # operators
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _topological_order(root: Tensor) -> List[Tensor]:
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


TensorLike = Union[Tensor, np.ndarray, float, int]


def _raw(x: TensorLike):
    return x.values if isinstance(x, Tensor) else x


def _result(values, op: str, parents: Sequence[TensorLike], backward: Callable) -> Tensor:
    values = np.asarray(values)
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"non-finite values produced by {op}")
    tracked = tuple(p for p in parents if isinstance(p, Tensor))
    out = Tensor(values)
    if _GRAD_ENABLED and any(p.requires_grad for p in tracked):
        out.requires_grad = True
        out._parents = tuple(p if isinstance(p, Tensor) else Tensor(np.asarray(p)) for p in parents)
        out._backward = backward
    return out


def custom_op(values, name: str, parents: Sequence[TensorLike], backward: Callable) -> Tensor:
    """Register an op whose backward returns one gradient per parent"""
    return _result(values, name, parents, backward)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _shape_of(x: TensorLike) -> Tuple[int, ...]:
    return np.shape(_raw(x))


def as_tensor(x: TensorLike, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


# elementwise arithmetic

def add(a: TensorLike, b: TensorLike) -> Tensor:
    sa, sb = _shape_of(a), _shape_of(b)
    return _result(_raw(a) + _raw(b), "add", (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    sa, sb = _shape_of(a), _shape_of(b)
    return _result(_raw(a) - _raw(b), "sub", (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    va, vb = _raw(a), _raw(b)
    sa, sb = np.shape(va), np.shape(vb)
    return _result(va * vb, "mul", (a, b),
                   lambda g: (_unbroadcast(g * vb, sa), _unbroadcast(g * va, sb)))


def div(a: TensorLike, b: TensorLike) -> Tensor:
    va, vb = _raw(a), _raw(b)
    sa, sb = np.shape(va), np.shape(vb)
    return _result(va / vb, "div", (a, b),
                   lambda g: (_unbroadcast(g / vb, sa), _unbroadcast(-g * va / (vb * vb), sb)))


def neg(a: Tensor) -> Tensor:
    return _result(-a.values, "neg", (a,), lambda g: (-g,))


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    va, vb = _raw(a), _raw(b)
    sa, sb = np.shape(va), np.shape(vb)

    def backward(g):
        ga = g @ np.swapaxes(vb, -1, -2)
        gb = np.swapaxes(va, -1, -2) @ g
        return _unbroadcast(ga, sa), _unbroadcast(gb, sb)
    return _result(va @ vb, "matmul", (a, b), backward)


def square(a: Tensor) -> Tensor:
    v = a.values
    return _result(v * v, "square", (a,), lambda g: (2 * g * v,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.values)

    def backward(g):
        # zero subgradient at 0
        return (np.divide(g, 2 * out, out=np.zeros_like(g), where=out > 0),)
    return _result(out, "sqrt", (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.values)
    return _result(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    v = a.values
    return _result(np.log(v), "log", (a,), lambda g: (g / v,))


def cos(a: Tensor) -> Tensor:
    v = a.values
    return _result(np.cos(v), "cos", (a,), lambda g: (-g * np.sin(v),))


def sin(a: Tensor) -> Tensor:
    v = a.values
    return _result(np.sin(v), "sin", (a,), lambda g: (g * np.cos(v),))


# activations

def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.values)
    return _result(out, "tanh", (a,), lambda g: (g * (1 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.values)
    return _result(out, "sigmoid", (a,), lambda g: (g * out * (1 - out),))


def relu(a: Tensor) -> Tensor:
    v = a.values
    return _result(np.maximum(v, 0), "relu", (a,), lambda g: (g * (v > 0),))


def leaky_relu(a: Tensor, slope: float = 0.3) -> Tensor:
    v = a.values
    out = np.where(v > 0, v, slope * v).astype(v.dtype, copy=False)
    return _result(out, "leaky_relu", (a,), lambda g: (np.where(v > 0, g, slope * g),))


def linear(a: Tensor) -> Tensor:
    return a


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(x)) without overflow for large |x|"""
    v = a.values
    return _result(-np.logaddexp(0, -v), "log_sigmoid", (a,), lambda g: (g * expit(-v),))


ACTIVATIONS: Dict[str, Callable[[Tensor], Tensor]] = {
    "tanh": tanh, "sigmoid": sigmoid, "relu": relu, "leaky_relu": leaky_relu, "linear": linear,
}


# reductions and shape ops

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        elif axis is None and not keepdims:
            g = np.reshape(g, (1,) * len(shape))
        return (np.broadcast_to(g, shape).copy(),)
    return _result(np.sum(a.values, axis=axis, keepdims=keepdims), "sum", (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.values.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    original = a.shape
    return _result(a.values.reshape(shape), "reshape", (a,), lambda g: (g.reshape(original),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)
    return _result(np.transpose(a.values, axes), "transpose", (a,), lambda g: (np.transpose(g, inverse),))


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)
    return _result(a.values[index], "getitem", (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.values for t in tensors], axis=axis), "concat", tuple(tensors),
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))
    return _result(np.stack([t.values for t in tensors], axis=axis), "stack", tuple(tensors), backward)


def zero_pad2d(x: Tensor, pad: Union[int, Tuple[int, int]] = 1) -> Tensor:
    ph, pw = (pad, pad) if isinstance(pad, int) else pad
    H, W = x.shape[1], x.shape[2]
    out = np.pad(x.values, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    return _result(out, "zero_pad2d", (x,), lambda g: (g[:, ph:ph + H, pw:pw + W, :],))


# convolution

def _pair(v) -> Tuple[int, int]:
    return (int(v), int(v)) if np.isscalar(v) else (int(v[0]), int(v[1]))


def same_padding(size: int, kernel: int, stride: int) -> Tuple[int, int, int]:
    """(out, pad_before, pad_after); odd totals put the extra zero first"""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total - total // 2, total // 2


def conv_output_size(size: int, kernel: int, stride: int, padding: str) -> int:
    if padding == "same":
        return same_padding(size, kernel, stride)[0]
    if padding == "valid":
        if size < kernel:
            raise ValueError(f"input size {size} smaller than kernel {kernel} with valid padding")
        return (size - kernel) // stride + 1
    raise ValueError(f"unknown padding {padding!r}")


def _conv_pads(H: int, W: int, kh: int, kw: int, sh: int, sw: int, padding: str):
    if padding == "same":
        oh, ph0, ph1 = same_padding(H, kh, sh)
        ow, pw0, pw1 = same_padding(W, kw, sw)
        return oh, ow, (ph0, ph1), (pw0, pw1)
    return conv_output_size(H, kh, sh, padding), conv_output_size(W, kw, sw, padding), (0, 0), (0, 0)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride=1, padding: str = "same") -> Tensor:
    """Cross-correlation; accumulated kernel offset by kernel offset"""
    B, H, W, C = x.shape
    kh, kw, cin, cout = w.shape
    if cin != C:
        raise ValueError(f"conv2d expects {cin} input channels, got {C}")
    sh, sw = _pair(stride)
    oh, ow, ph, pw = _conv_pads(H, W, kh, kw, sh, sw, padding)
    xp = np.pad(x.values, ((0, 0), ph, pw, (0, 0)))
    wv = w.values
    out = np.zeros((B, oh, ow, cout), dtype=np.result_type(xp, wv))

    def window(i, j):
        return (slice(None), slice(i, i + (oh - 1) * sh + 1, sh), slice(j, j + (ow - 1) * sw + 1, sw))

    for i in range(kh):
        for j in range(kw):
            out += xp[window(i, j)] @ wv[i, j]
    if b is not None:
        out += b.values

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wv)
        for i in range(kh):
            for j in range(kw):
                idx = window(i, j)
                gxp[idx] += g @ wv[i, j].T
                gw[i, j] = np.tensordot(xp[idx], g, axes=([0, 1, 2], [0, 1, 2]))
        gx = gxp[:, ph[0]:ph[0] + H, pw[0]:pw[0] + W, :]
        grads = (gx, gw)
        if b is not None:
            grads += (g.sum(axis=(0, 1, 2)),)
        return grads
    parents = (x, w) if b is None else (x, w, b)
    return _result(out, "conv2d", parents, backward)


def conv2d_transpose(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride=1) -> Tensor:
    """
    Adjoint of a same-padded strided convolution: output is input * stride
    per spatial axis.
    """
    B, H, W, C = x.shape
    kh, kw, cin, cout = w.shape
    if cin != C:
        raise ValueError(f"conv2d_transpose expects {cin} input channels, got {C}")
    sh, sw = _pair(stride)
    OH, OW = H * sh, W * sw
    _, ph0, ph1 = same_padding(OH, kh, sh)
    _, pw0, pw1 = same_padding(OW, kw, sw)
    buf_h = max(OH + ph0 + ph1, (H - 1) * sh + kh)
    buf_w = max(OW + pw0 + pw1, (W - 1) * sw + kw)
    xv, wv = x.values, w.values
    buf = np.zeros((B, buf_h, buf_w, cout), dtype=np.result_type(xv, wv))

    def window(i, j):
        return (slice(None), slice(i, i + (H - 1) * sh + 1, sh), slice(j, j + (W - 1) * sw + 1, sw))

    for i in range(kh):
        for j in range(kw):
            buf[window(i, j)] += xv @ wv[i, j]
    out = buf[:, ph0:ph0 + OH, pw0:pw0 + OW, :]
    if b is not None:
        out = out + b.values

    def backward(g):
        gbuf = np.zeros_like(buf)
        gbuf[:, ph0:ph0 + OH, pw0:pw0 + OW, :] = g
        gx = np.zeros_like(xv)
        gw = np.zeros_like(wv)
        for i in range(kh):
            for j in range(kw):
                gslice = gbuf[window(i, j)]
                gx += gslice @ wv[i, j].T
                gw[i, j] = np.tensordot(xv, gslice, axes=([0, 1, 2], [0, 1, 2]))
        grads = (gx, gw)
        if b is not None:
            grads += (g.sum(axis=(0, 1, 2)),)
        return grads
    parents = (x, w) if b is None else (x, w, b)
    return _result(out, "conv2d_transpose", parents, backward)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5, update_stats: bool = True) -> Tensor:
    """
    Per-channel normalization over every axis but the last. Training mode
    uses batch statistics and, unless update_stats is False, updates the
    running buffers in place.
    """
    axes = tuple(range(x.ndim - 1))
    xv = x.values
    count = xv.size // xv.shape[-1]
    if training:
        if count < 2:
            raise ValueError(f"batch norm needs at least 2 values per channel in training, got {count}")
        mu = xv.mean(axis=axes)
        var = xv.var(axis=axes)
        if update_stats:
            running_mean *= 1 - momentum
            running_mean += momentum * mu
            running_var *= 1 - momentum
            running_var += momentum * var
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xv.dtype, copy=False)
    xhat = (xv - mu) * inv_std
    gv = gamma.values
    out = gv * xhat + beta.values

    def backward(g):
        dxhat = g * gv
        if training:
            gx = inv_std / count * (count * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
        else:
            gx = dxhat * inv_std
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    return _result(out, "batch_norm", (x, gamma, beta), backward)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _result(x.values * mask, "dropout", (x,), lambda g: (g * mask,))


# parameters and layers

def init_normal(shape, mean: float = 0.0, std: float = 0.2, rng: Optional[np.random.Generator] = None,
                dtype=np.float32, name: Optional[str] = None) -> Tensor:
    rng = rng if rng is not None else np.random.default_rng()
    values = rng.normal(mean, std, size=tuple(shape)).astype(dtype)
    return Tensor(values, requires_grad=True, name=name)


class LayerKind(Enum):
    CONV2D = "conv2d"
    CONV2D_TRANSPOSE = "conv2d_transpose"
    BATCH_NORM = "batch_norm"
    LEAKY_RELU = "leaky_relu"
    RELU = "relu"
    TANH = "tanh"
    SIGMOID = "sigmoid"
    DROPOUT = "dropout"
    ZERO_PAD2D = "zero_pad2d"
    CONCAT = "concat"


@dataclass
class LayerConfig:
    kind: LayerKind
    filters: int = 0
    kernel: Tuple[int, int] = (5, 5)
    stride: Tuple[int, int] = (1, 1)
    slope: float = 0.3
    rate: float = 0.5
    padding: Union[str, int] = "same"
    use_bias: bool = True

    def __post_init__(self):
        self.kind = LayerKind(self.kind)
        self.kernel = _pair(self.kernel)
        self.stride = _pair(self.stride)
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ValueError(f"kernel and stride must be positive, got {self.kernel} / {self.stride}")
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")


class Layer:
    """Base layer: named parameters plus non-trainable buffers"""

    def parameters(self) -> Dict[str, Tensor]:
        return {}

    def buffers(self) -> Dict[str, np.ndarray]:
        return {}

    def output_shape(self, in_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        return tuple(in_shape)

    def __call__(self, x: Tensor, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        return self.forward(x, training, rng)

    def forward(self, x, training, rng):
        raise NotImplementedError


class Conv2DLayer(Layer):
    def __init__(self, cfg: LayerConfig, in_channels: int, rng: np.random.Generator, std: float, dtype):
        self.cfg = cfg
        self.weight = init_normal(cfg.kernel + (in_channels, cfg.filters), std=std, rng=rng, dtype=dtype)
        self.bias = Tensor(np.zeros(cfg.filters, dtype=dtype), requires_grad=True) if cfg.use_bias else None

    def parameters(self):
        params = {"weight": self.weight}
        if self.bias is not None:
            params["bias"] = self.bias
        return params

    def output_shape(self, in_shape):
        H, W, _ = in_shape
        kh, kw = self.cfg.kernel
        sh, sw = self.cfg.stride
        return (conv_output_size(H, kh, sh, self.cfg.padding), conv_output_size(W, kw, sw, self.cfg.padding),
                self.cfg.filters)

    def forward(self, x, training, rng):
        return conv2d(x, self.weight, self.bias, self.cfg.stride, self.cfg.padding)


class Conv2DTransposeLayer(Conv2DLayer):
    def output_shape(self, in_shape):
        H, W, _ = in_shape
        sh, sw = self.cfg.stride
        return H * sh, W * sw, self.cfg.filters

    def forward(self, x, training, rng):
        return conv2d_transpose(x, self.weight, self.bias, self.cfg.stride)


class BatchNormLayer(Layer):
    def __init__(self, channels: int, dtype, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self.track_stats = True

    def parameters(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, training, rng):
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                          training, self.momentum, self.eps, self.track_stats)


class ActivationLayer(Layer):
    def __init__(self, fn: Callable[[Tensor], Tensor]):
        self.fn = fn

    def forward(self, x, training, rng):
        return self.fn(x)


class DropoutLayer(Layer):
    def __init__(self, rate: float):
        self.rate = rate
        self.active_at_inference = False

    def forward(self, x, training, rng):
        return dropout(x, self.rate, rng, training or self.active_at_inference)


class ZeroPadLayer(Layer):
    def __init__(self, pad: int):
        self.pad = pad

    def output_shape(self, in_shape):
        H, W, C = in_shape
        return H + 2 * self.pad, W + 2 * self.pad, C

    def forward(self, x, training, rng):
        return zero_pad2d(x, self.pad)


class ConcatLayer(Layer):
    """Channel concatenation; called with a list of tensors"""

    def output_shape(self, in_shapes):
        first = in_shapes[0]
        if any(tuple(s[:-1]) != tuple(first[:-1]) for s in in_shapes):
            raise ValueError(f"cannot concatenate shapes {in_shapes}")
        return tuple(first[:-1]) + (sum(s[-1] for s in in_shapes),)

    def forward(self, xs, training, rng):
        return concat(xs, axis=-1)


def build_layer(cfg: LayerConfig, in_channels: int = 0, rng: Optional[np.random.Generator] = None,
                init_std: float = 0.2, dtype=np.float32) -> Layer:
    kind = cfg.kind
    if kind in (LayerKind.CONV2D, LayerKind.CONV2D_TRANSPOSE):
        if in_channels < 1 or cfg.filters < 1:
            raise ValueError(f"{kind.value} needs positive channel counts, got in={in_channels} out={cfg.filters}")
        rng = rng if rng is not None else np.random.default_rng()
        if kind == LayerKind.CONV2D:
            return Conv2DLayer(cfg, in_channels, rng, init_std, dtype)
        return Conv2DTransposeLayer(cfg, in_channels, rng, init_std, dtype)
    if kind == LayerKind.BATCH_NORM:
        return BatchNormLayer(in_channels, dtype)
    if kind == LayerKind.LEAKY_RELU:
        return ActivationLayer(lambda x: leaky_relu(x, cfg.slope))
    if kind == LayerKind.RELU:
        return ActivationLayer(relu)
    if kind == LayerKind.TANH:
        return ActivationLayer(tanh)
    if kind == LayerKind.SIGMOID:
        return ActivationLayer(sigmoid)
    if kind == LayerKind.DROPOUT:
        return DropoutLayer(cfg.rate)
    if kind == LayerKind.ZERO_PAD2D:
        return ZeroPadLayer(int(cfg.padding))
    if kind == LayerKind.CONCAT:
        return ConcatLayer()
    raise ValueError(f"unsupported layer kind {kind}")


class Sequential:
    """Layers applied in order; channel counts are threaded through at build time"""

    def __init__(self, configs: Iterable[LayerConfig], in_channels: int, rng: np.random.Generator,
                 init_std: float = 0.2, dtype=np.float32):
        self.configs = list(configs)
        self.layers: List[Layer] = []
        channels = in_channels
        for cfg in self.configs:
            self.layers.append(build_layer(cfg, channels, rng, init_std, dtype))
            if cfg.kind in (LayerKind.CONV2D, LayerKind.CONV2D_TRANSPOSE):
                channels = cfg.filters
        self.out_channels = channels

    def __call__(self, x, training=False, rng=None):
        for layer in self.layers:
            x = layer(x, training, rng)
        return x

    def output_shape(self, in_shape):
        for layer in self.layers:
            in_shape = layer.output_shape(in_shape)
        return in_shape

    def parameters(self) -> Dict[str, Tensor]:
        return {f"{i}.{name}": p for i, layer in enumerate(self.layers) for name, p in layer.parameters().items()}

    def buffers(self) -> Dict[str, np.ndarray]:
        return {f"{i}.{name}": b for i, layer in enumerate(self.layers) for name, b in layer.buffers().items()}

    @contextlib.contextmanager
    def frozen_stats(self):
        """Batch norm layers keep using batch statistics but leave their running buffers alone"""
        norms = [layer for layer in self.layers if isinstance(layer, BatchNormLayer)]
        previous = [layer.track_stats for layer in norms]
        for layer in norms:
            layer.track_stats = False
        try:
            yield
        finally:
            for layer, flag in zip(norms, previous):
                layer.track_stats = flag


# optimizer

@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, Tensor], state: AdamState,
              grads: Optional[Dict[str, np.ndarray]] = None) -> Dict[str, Tensor]:
    """In-place Adam update; parameters without a gradient are skipped"""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.values)
            state.v[name] = np.zeros_like(p.values)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        p.values -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)
    return params


def zero_grads(params: Dict[str, Tensor]):
    for p in params.values():
        p.grad = None


# checkpoints

def state_arrays(params: Dict[str, Tensor], buffers: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    arrays = {f"param/{name}": p.values for name, p in params.items()}
    arrays.update({f"buffer/{name}": b for name, b in buffers.items()})
    return arrays


def load_state_arrays(arrays: Dict[str, np.ndarray], params: Dict[str, Tensor], buffers: Dict[str, np.ndarray]):
    expected = set(state_arrays(params, buffers))
    missing = expected - set(arrays)
    if missing:
        raise ValueError(f"checkpoint is missing {sorted(missing)[:5]}")
    for name, p in params.items():
        values = arrays[f"param/{name}"]
        if values.shape != p.shape:
            raise ValueError(f"checkpoint shape {values.shape} for {name} does not match {p.shape}")
        p.values = values.astype(p.dtype)
    for name, b in buffers.items():
        b[...] = arrays[f"buffer/{name}"]


def save_checkpoint(path: Union[str, Path], params: Dict[str, Tensor], buffers: Dict[str, np.ndarray]):
    dataset_io.write_checkpoint(path, state_arrays(params, buffers))
    logger.debug("Saved %d parameters to %s", len(params), path)


def load_checkpoint(path: Union[str, Path], params: Dict[str, Tensor], buffers: Dict[str, np.ndarray]):
    load_state_arrays(dataset_io.read_checkpoint(path), params, buffers)
