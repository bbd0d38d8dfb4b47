#!/usr/bin/env python3
"""
Autodiff - a small reverse-mode differentiation engine on numpy arrays.

Only the operators the segmentation network needs are provided: 3-D
convolution, instance normalization, 2x pooling, trilinear resizing,
pointwise activations, channel/spatial softmax and a few reductions.

Every operator is a Function subclass; ``Function.apply`` runs the forward
pass and records the node when any input requires a gradient. Calling
``backward()`` on a scalar walks the graph once in reverse topological order
and then releases it (pass ``retain_graph=True`` to keep it).

Precision defaults to float32; gradient checks switch to float64 with
``precision("f64")``.

Usage:
    x = Tensor(np.random.rand(1, 2, 4, 4, 4), requires_grad=True)
    k = Parameter(np.random.rand(3, 2, 3, 3, 3))
    loss = conv3d(x, k, None, padding=1).relu().sum()
    loss.backward()
"""

import logging
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import special

from errors import AutogradError, DataError, NumericError

logger = logging.getLogger("tubule_seg.autodiff")

PRECISIONS = {"f32": np.float32, "f64": np.float64}

_state = {"dtype": np.float32}
_local = threading.local()  # no_grad flag, per thread


def get_dtype():
    return _state["dtype"]


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


def set_precision(name: str):
    """Set the default floating type for new tensors ("f32" or "f64")."""
    if name not in PRECISIONS:
        raise DataError(f"Unknown precision {name!r}; expected one of {sorted(PRECISIONS)}")
    _state["dtype"] = PRECISIONS[name]


@contextmanager
def precision(name: str):
    """Temporarily switch the default floating type."""
    previous = _state["dtype"]
    set_precision(name)
    try:
        yield
    finally:
        _state["dtype"] = previous


@contextmanager
def no_grad():
    """Build no graph inside this block (inference, finite differences)."""
    previous = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


# ==============================================================================
# TENSOR
# ==============================================================================

class Tensor:
    """A dense array with an optional gradient and a link to the op that produced it."""

    def __init__(self, data, requires_grad: bool = False, _ctx: Optional["Function"] = None):
        array = np.asarray(data)
        if array.dtype != get_dtype():
            array = array.astype(get_dtype())
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.ctx = _ctx
        self._consumed = False

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        """Same values, cut from the graph; nothing upstream receives gradient through it."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # arithmetic
    def __add__(self, other): return Add.apply(self, other)
    def __radd__(self, other): return Add.apply(other, self)
    def __sub__(self, other): return Sub.apply(self, other)
    def __rsub__(self, other): return Sub.apply(other, self)
    def __mul__(self, other): return Mul.apply(self, other)
    def __rmul__(self, other): return Mul.apply(other, self)
    def __neg__(self): return Mul.apply(self, -1.0)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def relu(self) -> "Tensor":
        return ReLU.apply(self)

    def sigmoid(self) -> "Tensor":
        return Sigmoid.apply(self)

    def backward(self, retain_graph: bool = False):
        """Accumulate d(self)/d(leaf) into every leaf that requires a gradient."""
        if self.data.size != 1:
            raise AutogradError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._consumed and not retain_graph:
            raise AutogradError("backward was already called on this graph; rebuild it first")
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            if node.ctx is None:
                if node.requires_grad:
                    node.grad = grad.copy() if node.grad is None else node.grad + grad
                continue
            if node.ctx.released:
                raise AutogradError("graph was already released by an earlier backward call")
            parent_grads = node.ctx.backward(grad)
            for parent, parent_grad in zip(node.ctx.parents, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                if parent_grad.shape != parent.shape:
                    raise AutogradError(
                        f"{type(node.ctx).__name__} returned gradient of shape {parent_grad.shape} "
                        f"for input of shape {parent.shape}")
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad
        if not retain_graph:
            for node in order:
                if node.ctx is not None:
                    node.ctx.release()
            self._consumed = True


def _topological_order(root: Tensor) -> list:
    """Post-order of the graph below root; raises on cycles."""
    order: list = []
    state: dict = {}  # id -> 1 visiting, 2 done
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        if state.get(key) == 2:
            continue
        if state.get(key) == 1:
            raise AutogradError("computation graph contains a cycle")
        state[key] = 1
        stack.append((node, True))
        if node.ctx is not None:
            for parent in node.ctx.parents:
                pstate = state.get(id(parent))
                if pstate == 1:
                    raise AutogradError("computation graph contains a cycle")
                if pstate is None and parent.requires_grad:
                    stack.append((parent, False))
    return order


class Parameter(Tensor):
    """A leaf tensor that a Module registers and an optimizer updates."""

    def __init__(self, data):
        super().__init__(np.array(data, copy=True), requires_grad=True)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# ==============================================================================
# FUNCTION BASE
# ==============================================================================

class Function:
    """One differentiable operator; forward/backward work on raw arrays."""

    def __init__(self, *parents: Tensor):
        self.parents = parents
        self.saved: tuple = ()
        self.released = False

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        tensors = [as_tensor(x) for x in inputs]
        ctx = cls(*tensors)
        out = ctx.forward(*[t.data for t in tensors], **kwargs)
        needs_grad = grad_enabled() and any(t.requires_grad for t in tensors)
        if not needs_grad:
            ctx.release()
        return Tensor(out, requires_grad=needs_grad, _ctx=ctx if needs_grad else None)

    def save(self, *arrays):
        self.saved = arrays

    def release(self):
        self.saved = ()
        self.released = True

    def forward(self, *args, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple:
        raise NotImplementedError


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad over the axes that broadcasting expanded to reach shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DataError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ==============================================================================
# POINTWISE AND REDUCTIONS
# ==============================================================================

class Add(Function):
    def forward(self, x, y):
        _check_broadcast(x, y, "add")
        self.save(x.shape, y.shape)
        return x + y

    def backward(self, grad):
        xs, ys = self.saved
        return _unbroadcast(grad, xs), _unbroadcast(grad, ys)


class Sub(Function):
    def forward(self, x, y):
        _check_broadcast(x, y, "sub")
        self.save(x.shape, y.shape)
        return x - y

    def backward(self, grad):
        xs, ys = self.saved
        return _unbroadcast(grad, xs), _unbroadcast(-grad, ys)


class Mul(Function):
    def forward(self, x, y):
        _check_broadcast(x, y, "mul")
        self.save(x, y)
        return x * y

    def backward(self, grad):
        x, y = self.saved
        return _unbroadcast(grad * y, x.shape), _unbroadcast(grad * x, y.shape)


class Reshape(Function):
    def forward(self, x, shape):
        self.save(x.shape)
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.saved[0]),)


def _expand_reduced(grad: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(grad.reshape((1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        for a in sorted(a % len(shape) for a in axes):
            grad = np.expand_dims(grad, a)
    return np.broadcast_to(grad, shape)


class Sum(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.save(x.shape, axis, keepdims)
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        shape, axis, keepdims = self.saved
        return (np.array(_expand_reduced(grad, shape, axis, keepdims)),)


class Mean(Function):
    def forward(self, x, axis=None, keepdims=False):
        count = x.size / max(1, np.asarray(x.sum(axis=axis, keepdims=keepdims)).size)
        self.save(x.shape, axis, keepdims, count)
        return np.asarray(x.mean(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        shape, axis, keepdims, count = self.saved
        return (np.array(_expand_reduced(grad, shape, axis, keepdims)) / count,)


class ReLU(Function):
    def forward(self, x):
        self.save(x > 0)
        return np.maximum(x, 0)

    def backward(self, grad):
        return (grad * self.saved[0],)


class Sigmoid(Function):
    def forward(self, x):
        out = special.expit(x)
        self.save(out)
        return out

    def backward(self, grad):
        out = self.saved[0]
        return (grad * out * (1.0 - out),)


class AbsPow(Function):
    """|x|^p with subgradient 0 at x = 0."""

    def forward(self, x, p=2.0):
        if p < 1:
            raise DataError(f"abs_pow exponent must be >= 1, got {p}")
        self.save(x, p)
        return np.abs(x) ** p

    def backward(self, grad):
        x, p = self.saved
        return (grad * p * np.abs(x) ** (p - 1) * np.sign(x),)


class Concat(Function):
    def forward(self, *xs, axis=1):
        ref = xs[0].shape
        for x in xs[1:]:
            if x.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(x.shape, ref)) if i != axis):
                raise DataError(f"concat: shapes {ref} and {x.shape} differ off axis {axis}")
        self.save(axis, np.cumsum([x.shape[axis] for x in xs])[:-1])
        return np.concatenate(xs, axis=axis)

    def backward(self, grad):
        axis, splits = self.saved
        return tuple(np.split(grad, splits, axis=axis))


class ChannelMax(Function):
    """Max over axis 1 (keepdims); gradient to the first maximal channel."""

    def forward(self, x):
        index = np.argmax(x, axis=1)[:, np.newaxis]
        self.save(x.shape, index)
        return np.take_along_axis(x, index, axis=1)

    def backward(self, grad):
        shape, index = self.saved
        out = np.zeros(shape, dtype=grad.dtype)
        np.put_along_axis(out, index, grad, axis=1)
        return (out,)


class ChannelSoftmax(Function):
    def forward(self, x):
        out = special.softmax(x, axis=1)
        self.save(out)
        return out

    def backward(self, grad):
        s = self.saved[0]
        return (s * (grad - (grad * s).sum(axis=1, keepdims=True)),)


class SpatialSoftmax(Function):
    """Softmax over all spatial positions of each (n, c) map."""

    def forward(self, x):
        flat = x.reshape(x.shape[0], x.shape[1], -1)
        out = special.softmax(flat, axis=2).reshape(x.shape)
        self.save(out)
        return out

    def backward(self, grad):
        s = self.saved[0]
        axes = tuple(range(2, s.ndim))
        return (s * (grad - (grad * s).sum(axis=axes, keepdims=True)),)


class FrobeniusSq(Function):
    def forward(self, x):
        self.save(x)
        return np.asarray((x * x).sum())

    def backward(self, grad):
        return (2.0 * grad * self.saved[0],)


class TakeChannel(Function):
    def forward(self, x, channel=0):
        if not 0 <= channel < x.shape[1]:
            raise DataError(f"channel {channel} out of range for shape {x.shape}")
        self.save(x.shape, channel)
        return x[:, channel:channel + 1]

    def backward(self, grad):
        shape, channel = self.saved
        out = np.zeros(shape, dtype=grad.dtype)
        out[:, channel:channel + 1] = grad
        return (out,)


# ==============================================================================
# CONVOLUTION, NORMALIZATION, POOLING, RESIZING
# ==============================================================================

def _triple(value, name: str) -> tuple:
    if isinstance(value, int):
        return (value, value, value)
    out = tuple(int(v) for v in value)
    if len(out) != 3:
        raise DataError(f"{name} needs 3 components, got {value}")
    return out


class Conv3d(Function):
    """Direct cross-correlation, one tensordot per kernel offset."""

    def forward(self, x, k, bias=None, padding=(0, 0, 0), stride=(1, 1, 1)):
        if x.ndim != 5 or k.ndim != 5:
            raise DataError(f"conv3d expects 5-D input and kernel, got {x.shape} and {k.shape}")
        if x.shape[1] != k.shape[1]:
            raise DataError(f"conv3d: input has {x.shape[1]} channels, kernel expects {k.shape[1]}")
        if bias is not None and bias.shape != (k.shape[0],):
            raise DataError(f"conv3d: bias shape {bias.shape} does not match {k.shape[0]} output channels")
        if min(stride) < 1:
            raise DataError(f"conv3d: stride must be positive, got {stride}")
        pads = ((0, 0), (0, 0)) + tuple((p, p) for p in padding)
        xp = np.pad(x, pads) if any(padding) else x
        out_dims = tuple((xp.shape[2 + i] - k.shape[2 + i]) // stride[i] + 1 for i in range(3))
        if min(out_dims) < 1:
            raise DataError(f"conv3d: kernel {k.shape[2:]} does not fit padded input {xp.shape[2:]}")

        out = np.zeros((k.shape[0], x.shape[0]) + out_dims, dtype=np.result_type(x, k))
        for offset in np.ndindex(*k.shape[2:]):
            window = xp[self._window(offset, out_dims, stride)]
            out += np.tensordot(k[(slice(None), slice(None)) + offset], window, axes=([1], [1]))
        out = np.moveaxis(out, 0, 1)
        if bias is not None:
            out = out + bias.reshape(1, -1, 1, 1, 1)
        self.save(xp, k, x.shape, padding, stride, out_dims, bias is not None)
        return out

    @staticmethod
    def _window(offset, out_dims, stride) -> tuple:
        return (slice(None), slice(None)) + tuple(
            slice(o, o + s * (n - 1) + 1, s) for o, n, s in zip(offset, out_dims, stride))

    def backward(self, grad):
        xp, k, x_shape, padding, stride, out_dims, has_bias = self.saved
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(k)
        for offset in np.ndindex(*k.shape[2:]):
            index = self._window(offset, out_dims, stride)
            window = xp[index]
            gk[(slice(None), slice(None)) + offset] = np.tensordot(grad, window, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
            contribution = np.tensordot(grad, k[(slice(None), slice(None)) + offset], axes=([1], [0]))
            gxp[index] += np.moveaxis(contribution, -1, 1)
        crop = (slice(None), slice(None)) + tuple(slice(p, p + n) for p, n in zip(padding, x_shape[2:]))
        gx = gxp[crop]
        gbias = grad.sum(axis=(0, 2, 3, 4)) if has_bias else None
        return (gx, gk, gbias) if has_bias else (gx, gk)


class InstanceNorm(Function):
    """Per-(n, c) normalization over spatial positions with biased variance."""

    def forward(self, x, gamma, beta, eps=1e-5):
        axes = (2, 3, 4)
        mean = x.mean(axis=axes, keepdims=True)
        var = x.var(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean) * inv_std
        self.save(xhat, inv_std, gamma)
        return xhat * gamma.reshape(1, -1, 1, 1, 1) + beta.reshape(1, -1, 1, 1, 1)

    def backward(self, grad):
        xhat, inv_std, gamma = self.saved
        axes = (2, 3, 4)
        count = xhat[0, 0].size
        ggamma = (grad * xhat).sum(axis=(0,) + axes)
        gbeta = grad.sum(axis=(0,) + axes)
        gxhat = grad * gamma.reshape(1, -1, 1, 1, 1)
        gx = inv_std / count * (
            count * gxhat
            - gxhat.sum(axis=axes, keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
        return gx, ggamma, gbeta


def _pad_even(x: np.ndarray) -> tuple[np.ndarray, tuple]:
    """Replicate the last slice along every odd spatial axis."""
    extra = tuple(n % 2 for n in x.shape[2:])
    if any(extra):
        x = np.pad(x, ((0, 0), (0, 0)) + tuple((0, e) for e in extra), mode="edge")
    return x, extra


def _fold_pad(grad: np.ndarray, extra: tuple) -> np.ndarray:
    """Send the gradient of replicated slices back to the slice they copied."""
    for axis, e in enumerate(extra, start=2):
        if e:
            n = grad.shape[axis] - 1
            body = np.take(grad, np.arange(n), axis=axis).copy()
            last = [slice(None)] * grad.ndim
            last[axis] = slice(n - 1, n)
            body[tuple(last)] += np.take(grad, [n], axis=axis)
            grad = body
    return grad


def _windows(x: np.ndarray) -> np.ndarray:
    """[N, C, D, H, W] (even dims) -> [N, C, D/2, H/2, W/2, 8], window entries in scan order."""
    n, c, d, h, w = x.shape
    blocks = x.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2)
    return blocks.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(n, c, d // 2, h // 2, w // 2, 8)


def _unwindows(blocks: np.ndarray) -> np.ndarray:
    n, c, d2, h2, w2, _ = blocks.shape
    x = blocks.reshape(n, c, d2, h2, w2, 2, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4, 7)
    return x.reshape(n, c, 2 * d2, 2 * h2, 2 * w2)


class MaxPool2(Function):
    def forward(self, x):
        xp, extra = _pad_even(x)
        blocks = _windows(xp)
        index = np.argmax(blocks, axis=-1)[..., np.newaxis]
        self.save(blocks.shape, index, extra)
        return np.take_along_axis(blocks, index, axis=-1)[..., 0]

    def backward(self, grad):
        shape, index, extra = self.saved
        blocks = np.zeros(shape, dtype=grad.dtype)
        np.put_along_axis(blocks, index, grad[..., np.newaxis], axis=-1)
        return (_fold_pad(_unwindows(blocks), extra),)


class AvgPool2(Function):
    def forward(self, x):
        xp, extra = _pad_even(x)
        blocks = _windows(xp)
        self.save(blocks.shape, extra)
        return blocks.mean(axis=-1)

    def backward(self, grad):
        shape, extra = self.saved
        blocks = np.broadcast_to(grad[..., np.newaxis] / 8.0, shape)
        return (_fold_pad(_unwindows(np.ascontiguousarray(blocks)), extra),)


def interpolation_matrix(in_size: int, out_size: int) -> np.ndarray:
    """Linear interpolation weights (out x in), half-pixel centers, edge-clamped."""
    matrix = np.zeros((out_size, in_size), dtype=np.float64)
    scale = in_size / out_size
    for i in range(out_size):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), in_size - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, in_size - 1)
        frac = src - i0
        matrix[i, i0] += 1.0 - frac
        matrix[i, i1] += frac
    return matrix


def _along(x: np.ndarray, matrix: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(np.tensordot(matrix, x, axes=([1], [axis])), 0, axis)


class TrilinearResize(Function):
    def forward(self, x, size=None):
        size = _triple(size, "resize target")
        if min(size) < 1:
            raise DataError(f"resize target must be positive, got {size}")
        matrices = [interpolation_matrix(n, m).astype(x.dtype) for n, m in zip(x.shape[2:], size)]
        out = x
        for axis, matrix in enumerate(matrices, start=2):
            if matrix.shape[0] != matrix.shape[1]:
                out = _along(out, matrix, axis)
        self.save(matrices)
        return np.ascontiguousarray(out)

    def backward(self, grad):
        out = grad
        for axis, matrix in enumerate(self.saved[0], start=2):
            if matrix.shape[0] != matrix.shape[1]:
                out = _along(out, matrix.T, axis)
        return (np.ascontiguousarray(out),)


# ==============================================================================
# FUNCTIONAL API
# ==============================================================================

def conv3d(x: Tensor, k: Tensor, bias: Optional[Tensor] = None, padding=0, stride=1) -> Tensor:
    padding, stride = _triple(padding, "padding"), _triple(stride, "stride")
    if bias is None:
        return Conv3d.apply(x, k, padding=padding, stride=stride)
    return Conv3d.apply(x, k, bias, padding=padding, stride=stride)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    return InstanceNorm.apply(x, gamma, beta, eps=eps)


def max_pool(x: Tensor) -> Tensor:
    return MaxPool2.apply(x)


def avg_pool(x: Tensor) -> Tensor:
    return AvgPool2.apply(x)


def trilinear_resize(x: Tensor, size) -> Tensor:
    return TrilinearResize.apply(x, size=tuple(size))


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def abs_pow(x: Tensor, p: float) -> Tensor:
    return AbsPow.apply(x, p=p)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def channel_sum(x: Tensor) -> Tensor:
    return Sum.apply(x, axis=1, keepdims=True)


def channel_mean(x: Tensor) -> Tensor:
    return Mean.apply(x, axis=1, keepdims=True)


def channel_max(x: Tensor) -> Tensor:
    return ChannelMax.apply(x)


def channel_softmax(x: Tensor) -> Tensor:
    return ChannelSoftmax.apply(x)


def spatial_softmax(x: Tensor) -> Tensor:
    return SpatialSoftmax.apply(x)


def frobenius_sq(x: Tensor) -> Tensor:
    return FrobeniusSq.apply(x)


def take_channel(x: Tensor, channel: int) -> Tensor:
    return TakeChannel.apply(x, channel=channel)


# ==============================================================================
# MODULES AND CHECKPOINTS
# ==============================================================================

class Module:
    """Container of named parameters and child modules."""

    def __init__(self):
        self._parameters: dict = {}
        self._modules: dict = {}

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self.__dict__.setdefault("_parameters", {})[name] = value
        elif isinstance(value, Module):
            self.__dict__.setdefault("_modules", {})[name] = value
        super().__setattr__(name, value)

    def add_module(self, name: str, module: "Module") -> "Module":
        setattr(self, name, module)
        return module

    def named_parameters(self, prefix: str = "") -> list:
        named = [(f"{prefix}{name}", p) for name, p in self._parameters.items()]
        for name, module in self._modules.items():
            named.extend(module.named_parameters(f"{prefix}{name}."))
        return named

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict):
        named = dict(self.named_parameters())
        missing = sorted(set(named) - set(state))
        unexpected = sorted(set(state) - set(named))
        if missing or unexpected:
            raise DataError(f"checkpoint does not match model (missing {missing[:3]}, unexpected {unexpected[:3]})")
        for name, p in named.items():
            array = np.asarray(state[name])
            if array.shape != p.shape:
                raise DataError(f"checkpoint entry {name} has shape {array.shape}, model expects {p.shape}")
            p.data = array.astype(p.data.dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError(f"{type(self).__name__} does not implement forward")


def save_checkpoint(state: dict, path: Union[str, Path]):
    """Write named arrays as (name length, name, rank, dims, little-endian f32 values), sorted by name."""
    chunks = []
    for name in sorted(state):
        array = np.asarray(state[name])
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))
    logger.debug(f"Saved {len(state)} arrays to {path}")


def load_checkpoint(path: Union[str, Path]) -> dict:
    raw = Path(path).read_bytes()
    state: dict = {}
    pos = 0

    def take(count: int) -> bytes:
        nonlocal pos
        if pos + count > len(raw):
            raise DataError(f"checkpoint {path} is truncated")
        chunk = raw[pos:pos + count]
        pos += count
        return chunk

    while pos < len(raw):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        state[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
    return state


# ==============================================================================
# GRADIENT CHECKS
# ==============================================================================

def relative_error(a: float, n: float, floor: float = 1e-8) -> float:
    return abs(a - n) / max(floor, abs(a) + abs(n))


def difference_floor(f0: float, step: float) -> float:
    """Smallest slope a central difference at this step resolves above float64 rounding in f."""
    return max(1e-8, 1e-9 * abs(f0) / step)


@dataclass
class GradCheckReport:
    max_rel_err: float = 0.0
    worst_input: int = -1
    worst_coordinate: tuple = ()
    analytic: float = 0.0
    numeric: float = 0.0
    checked: int = 0
    kinks: list = field(default_factory=list)   # (input, coordinate) pairs excluded as non-differentiable

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_rel_err < tolerance

    def record(self, input_index: int, coordinate: tuple, analytic: float, numeric: float,
               floor: float = 1e-8):
        self.checked += 1
        err = relative_error(analytic, numeric, floor)
        if err >= self.max_rel_err:
            self.max_rel_err = err
            self.worst_input, self.worst_coordinate = input_index, coordinate
            self.analytic, self.numeric = analytic, numeric


def _scalar(f: Callable, inputs: Sequence[Tensor]) -> float:
    with no_grad():
        value = f(*inputs).data
    if value.size != 1:
        raise AutogradError(f"gradient check needs a scalar function, got shape {value.shape}")
    value = float(value.reshape(-1)[0])
    if not np.isfinite(value):
        raise NumericError("function value is not finite")
    return value


def is_kink(f0: float, fp: float, fm: float, step: float, kink_tol: float) -> bool:
    """One-sided slopes disagree beyond rounding: the step may straddle a point where f is not differentiable."""
    forward, backward = (fp - f0) / step, (f0 - fm) / step
    gap = abs(forward - backward)
    return gap > max(difference_floor(f0, step), kink_tol * (abs(forward) + abs(backward)))


def confirm_kink(evaluate: Callable[[float], float], f0: float, fp: float, fm: float,
                 step: float, kink_tol: float) -> bool:
    """is_kink, re-tested at half the step.

    ``evaluate(delta)`` returns f with the probed coordinate moved by delta.
    Curvature shrinks the slope gap in proportion to the step, so a smooth f
    halves it; a corner inside the step keeps it or loses it entirely.
    """
    if not is_kink(f0, fp, fm, step, kink_tol):
        return False
    half = step / 2
    gap = (fp - 2.0 * f0 + fm) / step
    half_gap = (evaluate(half) - 2.0 * f0 + evaluate(-half)) / half
    return abs(half_gap / gap - 0.5) > 0.15


def gradient_check(f: Callable, inputs: Sequence[Tensor], step: float = 1e-5,
                   kink_tol: float = 1e-3, coordinates: Optional[dict] = None) -> GradCheckReport:
    """Compare analytic gradients of scalar f(*inputs) with central differences.

    All inputs must be float64. Coordinates where f has a corner inside the
    step (a ReLU or max switching) are reported in ``kinks`` and left out of
    max_rel_err. Slopes below ``difference_floor`` are compared absolutely.
    ``coordinates`` optionally maps an input index to the list of coordinates
    to probe (default: all).
    """
    for t in inputs:
        if t.data.dtype != np.float64:
            raise AutogradError("gradient checks need float64 tensors; build them under precision('f64')")
    for t in inputs:
        t.zero_grad()
    out = f(*inputs)
    if out.data.size != 1:
        raise AutogradError(f"gradient check needs a scalar function, got shape {out.shape}")
    if not np.all(np.isfinite(out.data)):
        raise NumericError("function value is not finite")
    out.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    f0 = _scalar(f, inputs)
    floor = difference_floor(f0, step)
    report = GradCheckReport()
    for i, t in enumerate(inputs):
        selected = coordinates.get(i) if coordinates else None
        for coordinate in (selected if selected is not None else np.ndindex(*t.shape)):
            original = t.data[coordinate]

            def evaluate(delta: float, t=t, coordinate=coordinate, original=original) -> float:
                t.data[coordinate] = original + delta
                try:
                    return _scalar(f, inputs)
                finally:
                    t.data[coordinate] = original

            fp, fm = evaluate(step), evaluate(-step)
            if confirm_kink(evaluate, f0, fp, fm, step, kink_tol):
                report.kinks.append((i, tuple(coordinate)))
                continue
            report.record(i, tuple(coordinate), float(analytic[i][coordinate]), (fp - fm) / (2 * step), floor)
    return report
