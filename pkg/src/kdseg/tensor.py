"""Dense float tensors with reverse-mode automatic differentiation.

Arrays live in numpy; every op that touches a tensor requiring gradients
records its parents and a closure mapping the output gradient to parent
gradients. ``backward`` walks that graph in reverse topological order.

Feature maps use a batch x height x width x channel layout throughout.
"""
from __future__ import annotations

import contextlib
import logging
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ParameterError, ShapeError

logger = logging.getLogger(__name__)

_state = {"dtype": np.float32, "grad_enabled": True}

LOG_CLAMP = 1e-12


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def check_mode():
    """Create new tensors in 64-bit precision (used by gradient checks)."""
    prev = _state["dtype"]
    _state["dtype"] = np.float64
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


class Tensor:
    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != default_dtype():
            arr = arr.astype(default_dtype())
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable | None = None
        self._op = ""

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], grad_fn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._op = op
        track = _state["grad_enabled"] and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._grad_fn = grad_fn if track else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._result(self.data, (), None, "detach")

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(a.data * b.data, (a, b), grad_fn, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(a.data / b.data, (a, b), grad_fn, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def grad_fn(g):
        return (g * mask,)

    return Tensor._result(np.where(mask, a.data, 0).astype(a.data.dtype), (a,), grad_fn, "relu")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    """Natural log with the input clamped at 1e-12; clamped entries get zero gradient."""
    a = as_tensor(a)
    clamped = np.maximum(a.data, LOG_CLAMP)
    live = a.data > LOG_CLAMP

    def grad_fn(g):
        return (np.where(live, g / clamped, 0).astype(g.dtype),)

    return Tensor._result(np.log(clamped), (a,), grad_fn, "log")


def square(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(a.data * a.data, (a,), lambda g: (2 * g * a.data,), "square")


# ---------------------------------------------------------------- reductions / shape


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._result(np.asarray(out, dtype=a.data.dtype), (a,), grad_fn, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / max(count, 1))


def channel_sum(a) -> Tensor:
    """Sum over the trailing channel axis, keeping it as extent 1."""
    return tsum(a, axis=-1, keepdims=True)


def spatial_sum(a) -> Tensor:
    """Sum a B x H x W x C map over H and W, giving B x C."""
    a = as_tensor(a)
    if a.ndim != 4:
        raise ShapeError(f"spatial_sum expects a 4-d tensor, got shape {a.shape}")
    return tsum(a, axis=(1, 2))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from exc
    return Tensor._result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return Tensor._result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def grad_fn(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return Tensor._result(a.data @ b.data, (a, b), grad_fn, "matmul")


def frobenius_sq(a, b) -> Tensor:
    """Squared Frobenius distance: sum of (a - b)^2 over every element."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"frobenius_sq shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = np.asarray(np.sum(diff * diff), dtype=diff.dtype)

    def grad_fn(g):
        return 2 * g * diff, -2 * g * diff

    return Tensor._result(out, (a, b), grad_fn, "frobenius_sq")


def normalize_rows(a) -> Tensor:
    """L2-normalize each row of a 2-d tensor. All-zero rows stay zero."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"normalize_rows expects a matrix, got shape {a.shape}")
    norms = np.sqrt(np.sum(a.data * a.data, axis=1, keepdims=True))
    zero = norms == 0
    if np.any(zero):
        logger.debug("normalize_rows: %d zero row(s) left unnormalized", int(zero.sum()))
    denom = np.where(zero, 1, norms).astype(a.data.dtype)
    out = a.data / denom

    def grad_fn(g):
        proj = np.sum(g * out, axis=1, keepdims=True)
        gx = (g - np.where(zero, 0, out * proj)) / denom
        return (gx.astype(g.dtype),)

    return Tensor._result(out, (a,), grad_fn, "normalize_rows")


# ---------------------------------------------------------------- softmax family


def _check_temperature(T: float) -> None:
    if not T > 0 or not math.isfinite(T):
        raise ParameterError(f"temperature must be a positive finite number, got {T}")


def softmax_T(logits, T: float = 1.0) -> Tensor:
    """Softmax over the last axis of logits / T, with max subtraction."""
    _check_temperature(T)
    z = as_tensor(logits)
    scaled = z.data / np.asarray(T, dtype=z.data.dtype)
    scaled = scaled - scaled.max(axis=-1, keepdims=True)
    e = np.exp(scaled)
    s = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        inner = np.sum(g * s, axis=-1, keepdims=True)
        return (s * (g - inner) / np.asarray(T, dtype=g.dtype),)

    return Tensor._result(s, (z,), grad_fn, "softmax_T")


def log_softmax_T(logits, T: float = 1.0) -> Tensor:
    """log(softmax_T(logits)) evaluated without forming the probabilities."""
    _check_temperature(T)
    z = as_tensor(logits)
    scaled = z.data / np.asarray(T, dtype=z.data.dtype)
    scaled = scaled - scaled.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(scaled).sum(axis=-1, keepdims=True))
    out = scaled - lse
    s = np.exp(out)

    def grad_fn(g):
        return ((g - s * g.sum(axis=-1, keepdims=True)) / np.asarray(T, dtype=g.dtype),)

    return Tensor._result(out, (z,), grad_fn, "log_softmax_T")


# ---------------------------------------------------------------- convolution


def same_padding(kernel: int, dilation: int = 1) -> int:
    return dilation * (kernel - 1) // 2


def conv_output_size(size: int, kernel: int, stride: int, dilation: int, padding: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def conv2d(x, weight, bias=None, stride: int = 1, dilation: int = 1, padding: int | None = None) -> Tensor:
    """2-d cross-correlation on B x H x W x Cin input with a kh x kw x Cin x Cout kernel.

    ``padding=None`` selects "same" padding, giving ceil(H / stride) output rows.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    kh, kw, cin, cout = weight.shape
    if x.shape[3] != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {x.shape[3]}, weight expects {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if stride < 1 or dilation < 1:
        raise ParameterError(f"stride and dilation must be >= 1, got {stride}, {dilation}")
    if padding is None:
        padding = same_padding(max(kh, kw), dilation)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d bias must have shape ({cout},), got {bias.shape}")

    B, H, W, _ = x.shape
    Ho = conv_output_size(H, kh, stride, dilation, padding)
    Wo = conv_output_size(W, kw, stride, dilation, padding)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}")
    p = padding
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.data
    cols = np.empty((B, Ho, Wo, kh, kw, cin), dtype=x.data.dtype)
    for i in range(kh):
        r0 = i * dilation
        for j in range(kw):
            c0 = j * dilation
            cols[:, :, :, i, j, :] = xp[:, r0:r0 + stride * (Ho - 1) + 1:stride, c0:c0 + stride * (Wo - 1) + 1:stride, :]
    cols2 = cols.reshape(B * Ho * Wo, kh * kw * cin)
    w2 = weight.data.reshape(kh * kw * cin, cout)
    out = cols2 @ w2
    if bias is not None:
        out += bias.data
    out = out.reshape(B, Ho, Wo, cout)

    def grad_fn(g):
        g2 = g.reshape(B * Ho * Wo, cout)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (cols2.T @ g2).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(B, Ho, Wo, kh, kw, cin)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                r0 = i * dilation
                for j in range(kw):
                    c0 = j * dilation
                    gxp[:, r0:r0 + stride * (Ho - 1) + 1:stride, c0:c0 + stride * (Wo - 1) + 1:stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, p:p + H, p:p + W, :] if p else gxp
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._result(out, parents, grad_fn, "conv2d")


def pointwise_conv(x, weight, bias=None) -> Tensor:
    """1x1 convolution evaluated one output channel at a time.

    Each output channel's arithmetic is independent of how many channels the
    kernel has, so appending output channels leaves existing ones bit-identical.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim == 4:
        if weight.shape[:2] != (1, 1):
            raise ShapeError(f"pointwise_conv expects a 1x1 kernel, got {weight.shape}")
        wmat = weight.data.reshape(weight.shape[2], weight.shape[3])
    else:
        wmat = weight.data
    cin, cout = wmat.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"pointwise_conv channel mismatch: input has {x.shape[-1]}, weight expects {cin}")
    flat = x.data.reshape(-1, cin)
    out = np.empty((flat.shape[0], cout), dtype=x.data.dtype)
    for c in range(cout):
        out[:, c] = flat @ np.ascontiguousarray(wmat[:, c])
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
    out = out.reshape(x.shape[:-1] + (cout,))

    def grad_fn(g):
        g2 = g.reshape(-1, cout)
        gx = (g2 @ wmat.T).reshape(x.shape) if x.requires_grad else None
        gw = (flat.T @ g2).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if bias.requires_grad else None)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._result(out, parents, grad_fn, "pointwise_conv")


# ---------------------------------------------------------------- resizing


def _linear_taps(in_size: int, out_size: int):
    """Half-pixel bilinear source indices and weights along one axis."""
    scale = in_size / out_size
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0, in_size - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, in_size - 1)
    w1 = src - i0
    return i0, i1, 1.0 - w1, w1


def _lerp_axis(data: np.ndarray, axis: int, out_size: int) -> np.ndarray:
    i0, i1, w0, w1 = _linear_taps(data.shape[axis], out_size)
    shape = [1] * data.ndim
    shape[axis] = out_size
    w0 = w0.astype(data.dtype).reshape(shape)
    w1 = w1.astype(data.dtype).reshape(shape)
    return np.take(data, i0, axis=axis) * w0 + np.take(data, i1, axis=axis) * w1


def _lerp_axis_adjoint(g: np.ndarray, axis: int, in_size: int) -> np.ndarray:
    i0, i1, w0, w1 = _linear_taps(in_size, g.shape[axis])
    shape = [1] * g.ndim
    shape[axis] = g.shape[axis]
    g0 = np.moveaxis(g * w0.astype(g.dtype).reshape(shape), axis, 0)
    g1 = np.moveaxis(g * w1.astype(g.dtype).reshape(shape), axis, 0)
    acc = np.zeros((in_size,) + g0.shape[1:], dtype=g.dtype)
    np.add.at(acc, i0, g0)
    np.add.at(acc, i1, g1)
    return np.moveaxis(acc, 0, axis)


def bilinear_resize_array(data: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an array whose axes 1 and 2 are height and width."""
    return _lerp_axis(_lerp_axis(data, 1, out_h), 2, out_w)


def bilinear_resize(x, out_h: int, out_w: int) -> Tensor:
    """Half-pixel (align_corners=False) bilinear resize of a B x H x W x C tensor.

    Every output element is a fixed two-tap blend per axis, so results do not
    depend on the channel count.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize expects a 4-d tensor, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ParameterError(f"bad output size {out_h}x{out_w}")
    H, W = x.shape[1], x.shape[2]
    out = bilinear_resize_array(x.data, out_h, out_w)

    def grad_fn(g):
        return (_lerp_axis_adjoint(_lerp_axis_adjoint(g, 2, W), 1, H),)

    return Tensor._result(out, (x,), grad_fn, "bilinear_resize")


# ---------------------------------------------------------------- backward


class Tape:
    """The graph behind a scalar loss, in topological order (inputs first)."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor, tape: Tape | None = None, params: Iterable[Tensor] = ()) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf requiring grad.

    Leaves in ``params`` that the loss does not reach get a zero gradient.
    """
    if loss.size != 1:
        raise ParameterError(f"backward needs a scalar loss, got shape {loss.shape}")
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    if not loss.requires_grad:
        return
    tape = tape or Tape.from_loss(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- gradient check


def finite_diff_check(fn: Callable[..., Tensor], params: Sequence, eps: float = 1e-6) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``fn`` receives one Tensor per entry of ``params`` and returns a scalar
    Tensor. Everything runs in 64-bit precision. Relative error per element is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8); a NaN anywhere
    yields ``inf``.
    """
    if not 1e-6 <= eps <= 1e-2:
        raise ParameterError(f"eps must lie in [1e-6, 1e-2], got {eps}")
    base = [np.array(p.data if isinstance(p, Tensor) else p, dtype=np.float64) for p in params]
    with check_mode():
        leaves = [Tensor(b.copy(), requires_grad=True) for b in base]
        loss = fn(*leaves)
        backward(loss, params=leaves)
        analytic = [leaf.grad for leaf in leaves]

        def evaluate(arrays):
            return float(fn(*[Tensor(a) for a in arrays]).data)

        worst = 0.0
        for k, b in enumerate(base):
            flat = b.reshape(-1)
            for idx in range(flat.size):
                trial = [a.copy() for a in base]
                tflat = trial[k].reshape(-1)
                tflat[idx] = flat[idx] + eps
                f_plus = evaluate(trial)
                tflat[idx] = flat[idx] - eps
                f_minus = evaluate(trial)
                numeric = (f_plus - f_minus) / (2 * eps)
                a = float(analytic[k].reshape(-1)[idx])
                if not (math.isfinite(numeric) and math.isfinite(a)):
                    return math.inf
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
    return worst
