"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active (see :func:`recording`) are
appended to it in execution order; :meth:`Tape.backward` replays the record in
exact reverse.  Outside a tape every operation is a plain numpy computation, so
evaluation code pays no bookkeeping cost.

Each differentiable primitive is a :class:`Function` subclass with a static
``forward`` on numpy arrays and a static ``backward`` returning one gradient per
input.  Gradients of broadcast inputs are summed back to the input shape by the
tape, so elementwise rules may return full-shape gradients.
"""

from __future__ import annotations

import contextlib
import dataclasses
import json
import os
import tempfile
import threading
from typing import Any, Callable, Iterator, Mapping, Sequence

import numpy as np

from .errors import DimensionError, FormatError, NumericError

__all__ = [
    "Tensor",
    "Tape",
    "Function",
    "recording",
    "no_grad",
    "active_tape",
    "backward",
    "as_tensor",
    "matmul",
    "masked_softmax",
    "softmax",
    "log_softmax",
    "layer_norm",
    "relu",
    "gelu",
    "exp",
    "log",
    "sqrt",
    "concat",
    "stack",
    "take",
    "conv2d",
    "finite_diff_grad",
    "named_parameters",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_FORMAT_VERSION",
]

CHECKPOINT_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# tape management
# ---------------------------------------------------------------------------

_state = threading.local()


def _stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> "Tape | None":
    """The innermost tape on this thread, or None when recording is off."""
    stack = _stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def recording(tape: "Tape | None" = None) -> Iterator["Tape"]:
    """Record operations on ``tape`` (a fresh one by default) inside the block."""
    tape = Tape() if tape is None else tape
    stack = _stack()
    stack.append(tape)
    try:
        yield tape
    finally:
        stack.pop()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording, even when an outer tape is active."""
    stack = _stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


@dataclasses.dataclass
class _Node:
    fn: type
    ctx: "_Context"
    inputs: tuple
    output: "Tensor"


class _Context:
    """Scratch space a Function uses to pass saved values to its backward."""


class Tape:
    """Ordered record of executed operations.

    Inputs of every recorded node were created before the node itself, so the
    record is topologically sorted by construction.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, fn: type, ctx: _Context, inputs: tuple, output: "Tensor") -> None:
        output._tape = self
        self.nodes.append(_Node(fn, ctx, inputs, output))

    def backward(self, loss: "Tensor") -> None:
        if loss._tape is not self:
            raise NumericError("loss was not produced on this tape")
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            grad = pending.pop(id(node.output), None)
            if grad is None:
                continue
            node.output.grad = grad
            input_grads = node.fn.backward(node.ctx, grad)
            for tensor, g in zip(node.inputs, input_grads):
                if g is None or not tensor.requires_grad:
                    continue
                if g.shape != tensor.data.shape:
                    g = _unbroadcast(g, tensor.data.shape)
                if tensor._tape is None:
                    if tensor.grad is None:
                        tensor.grad = np.array(g, dtype=np.float64)
                    else:
                        tensor.grad = tensor.grad + g
                else:
                    key = id(tensor)
                    pending[key] = pending[key] + g if key in pending else g


def backward(loss: "Tensor") -> None:
    """Populate ``grad`` of every leaf that ``loss`` depends on."""
    if loss._tape is None:
        raise NumericError("loss was not produced on an active tape")
    loss._tape.backward(loss)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# tensor
# ---------------------------------------------------------------------------


class Tensor:
    """An n-dimensional float64 array that can take part in a tape.

    ``data`` is a C-contiguous numpy array (row-major flat storage with an
    explicit shape).  ``grad`` is filled by :meth:`backward` with the same shape.
    """

    __array_priority__ = 100.0

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64, order="C")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(array, dtype=np.float64)
        out.requires_grad = False
        out.grad = None
        out.name = None
        out._tape = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_non_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic
    def __add__(self, other):
        return Add.apply(self, other)

    def __radd__(self, other):
        return Add.apply(other, self)

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    def __rmul__(self, other):
        return Mul.apply(other, self)

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(other, self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, exponent: float):
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    # shape and reductions
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(count))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return Transpose.apply(self, axes=tuple(axes))

    @property
    def T(self) -> "Tensor":
        return self.swapaxes(-1, -2)


def _raise_non_scalar(t: Tensor):
    raise DimensionError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor._wrap(np.asarray(value, dtype=np.float64))


# ---------------------------------------------------------------------------
# function base
# ---------------------------------------------------------------------------


class Function:
    """A differentiable primitive; subclasses implement forward and backward."""

    @staticmethod
    def forward(ctx: _Context, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(ctx: _Context, grad: np.ndarray) -> tuple:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Any, **kwargs: Any) -> Tensor:
        tensors = tuple(as_tensor(x) for x in inputs)
        ctx = _Context()
        out = Tensor._wrap(cls.forward(ctx, *(t.data for t in tensors), **kwargs))
        tape = active_tape()
        if tape is not None and any(t.requires_grad for t in tensors):
            out.requires_grad = True
            tape.record(cls, ctx, tensors, out)
        return out


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


class Add(Function):
    @staticmethod
    def forward(ctx, a, b):
        return a + b

    @staticmethod
    def backward(ctx, grad):
        return grad, grad


class Sub(Function):
    @staticmethod
    def forward(ctx, a, b):
        return a - b

    @staticmethod
    def backward(ctx, grad):
        return grad, -grad


class Mul(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.a, ctx.b = a, b
        return a * b

    @staticmethod
    def backward(ctx, grad):
        return grad * ctx.b, grad * ctx.a


class Div(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.a, ctx.b = a, b
        return a / b

    @staticmethod
    def backward(ctx, grad):
        ga = grad / ctx.b
        return ga, -ga * ctx.a / ctx.b


class Neg(Function):
    @staticmethod
    def forward(ctx, a):
        return -a

    @staticmethod
    def backward(ctx, grad):
        return (-grad,)


class Pow(Function):
    @staticmethod
    def forward(ctx, a, exponent):
        ctx.a, ctx.exponent = a, exponent
        return a**exponent

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx.exponent * ctx.a ** (ctx.exponent - 1.0),)


class Exp(Function):
    @staticmethod
    def forward(ctx, a):
        ctx.out = np.exp(a)
        return ctx.out

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx.out,)


class Log(Function):
    @staticmethod
    def forward(ctx, a):
        ctx.a = a
        return np.log(a)

    @staticmethod
    def backward(ctx, grad):
        return (grad / ctx.a,)


class Relu(Function):
    @staticmethod
    def forward(ctx, a):
        ctx.positive = a > 0
        return np.where(ctx.positive, a, 0.0)

    @staticmethod
    def backward(ctx, grad):
        return (np.where(ctx.positive, grad, 0.0),)


_GELU_C = float(np.sqrt(2.0 / np.pi))


class Gelu(Function):
    """GELU, tanh approximation."""

    @staticmethod
    def forward(ctx, a):
        inner = _GELU_C * (a + 0.044715 * a**3)
        t = np.tanh(inner)
        ctx.a, ctx.t = a, t
        return 0.5 * a * (1.0 + t)

    @staticmethod
    def backward(ctx, grad):
        a, t = ctx.a, ctx.t
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * a**2)
        return (grad * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * d_inner),)


# ---------------------------------------------------------------------------
# linear algebra, shapes, reductions
# ---------------------------------------------------------------------------


class MatMul(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.a, ctx.b = a, b
        return a @ b

    @staticmethod
    def backward(ctx, grad):
        return grad @ np.swapaxes(ctx.b, -1, -2), np.swapaxes(ctx.a, -1, -2) @ grad


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return MatMul.apply(a, b)


class Sum(Function):
    @staticmethod
    def forward(ctx, a, axis, keepdims):
        ctx.shape, ctx.axis, ctx.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    @staticmethod
    def backward(ctx, grad):
        if ctx.axis is not None and not ctx.keepdims:
            grad = np.expand_dims(grad, ctx.axis)
        return (np.broadcast_to(grad, ctx.shape),)


class Reshape(Function):
    @staticmethod
    def forward(ctx, a, shape):
        ctx.shape = a.shape
        return a.reshape(shape)

    @staticmethod
    def backward(ctx, grad):
        return (grad.reshape(ctx.shape),)


class Transpose(Function):
    @staticmethod
    def forward(ctx, a, axes):
        ctx.axes = axes
        return np.transpose(a, axes)

    @staticmethod
    def backward(ctx, grad):
        if ctx.axes is None:
            return (np.transpose(grad),)
        return (np.transpose(grad, np.argsort(ctx.axes)),)


def _is_advanced(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


class GetItem(Function):
    @staticmethod
    def forward(ctx, a, index):
        ctx.shape, ctx.index = a.shape, index
        return np.array(a[index])

    @staticmethod
    def backward(ctx, grad):
        out = np.zeros(ctx.shape)
        if _is_advanced(ctx.index):
            np.add.at(out, ctx.index, grad)
        else:
            out[ctx.index] += grad
        return (out,)


class Take(Function):
    @staticmethod
    def forward(ctx, table, indices):
        ctx.shape, ctx.indices = table.shape, indices
        return table[indices]

    @staticmethod
    def backward(ctx, grad):
        out = np.zeros(ctx.shape)
        np.add.at(out, ctx.indices, grad)
        return (out,)


def take(table: Tensor, indices: Sequence[int] | np.ndarray) -> Tensor:
    """Gather rows of ``table`` (an embedding lookup)."""
    idx = np.asarray(indices, dtype=np.int64)
    table = as_tensor(table)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DimensionError(f"row index out of range for table of shape {table.shape}")
    return Take.apply(table, indices=idx)


class Concat(Function):
    @staticmethod
    def forward(ctx, *arrays, axis):
        ctx.axis = axis
        ctx.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    @staticmethod
    def backward(ctx, grad):
        return tuple(np.split(grad, ctx.splits, axis=ctx.axis))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


class Stack(Function):
    @staticmethod
    def forward(ctx, *arrays, axis):
        ctx.axis, ctx.count = axis, len(arrays)
        return np.stack(arrays, axis=axis)

    @staticmethod
    def backward(ctx, grad):
        return tuple(np.take(grad, i, axis=ctx.axis) for i in range(ctx.count))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Stack.apply(*tensors, axis=axis)


# ---------------------------------------------------------------------------
# softmax family and normalization
# ---------------------------------------------------------------------------


class MaskedSoftmax(Function):
    @staticmethod
    def forward(ctx, logits, mask):
        keep = np.broadcast_to(mask, logits.shape)
        if not keep.any(axis=-1).all():
            raise NumericError("masked_softmax: a row has every position masked")
        z = np.where(keep, logits, -np.inf)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.where(keep, np.exp(z), 0.0)
        p = e / e.sum(axis=-1, keepdims=True)
        ctx.p = p
        return p

    @staticmethod
    def backward(ctx, grad):
        p = ctx.p
        return (p * (grad - (grad * p).sum(axis=-1, keepdims=True)),)


def masked_softmax(logits: Tensor, mask: Any) -> Tensor:
    """Softmax over the last axis restricted to positions where ``mask`` is True.

    ``mask`` broadcasts against ``logits``.  Masked positions get probability
    exactly zero and receive zero gradient.
    """
    mask = np.asarray(mask, dtype=bool)
    logits = as_tensor(logits)
    try:
        np.broadcast_shapes(mask.shape, logits.shape)
    except ValueError as exc:
        raise DimensionError(f"mask shape {mask.shape} does not broadcast to {logits.shape}") from exc
    return MaskedSoftmax.apply(logits, mask=mask)


def softmax(logits: Tensor) -> Tensor:
    logits = as_tensor(logits)
    return masked_softmax(logits, np.ones(logits.shape[-1], dtype=bool))


class LogSoftmax(Function):
    @staticmethod
    def forward(ctx, x, axis):
        shifted = x - x.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        out = shifted - lse
        ctx.p, ctx.axis = np.exp(out), axis
        return out

    @staticmethod
    def backward(ctx, grad):
        return (grad - ctx.p * grad.sum(axis=ctx.axis, keepdims=True),)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return LogSoftmax.apply(x, axis=axis)


class LayerNorm(Function):
    @staticmethod
    def forward(ctx, x, gain, bias, eps):
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
        xhat = centered * inv_std
        ctx.xhat, ctx.inv_std, ctx.gain = xhat, inv_std, gain
        return xhat * gain + bias

    @staticmethod
    def backward(ctx, grad):
        xhat, inv_std = ctx.xhat, ctx.inv_std
        n = xhat.shape[-1]
        dxhat = grad * ctx.gain
        dx = inv_std / n * (
            n * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        lead = tuple(range(grad.ndim - 1))
        return dx, (grad * xhat).sum(axis=lead), grad.sum(axis=lead)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then apply gain and bias."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}, {bias.shape} do not match last axis {d}")
    return LayerNorm.apply(x, gain, bias, eps=eps)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def gelu(x: Tensor) -> Tensor:
    return Gelu.apply(x)


def exp(x: Tensor) -> Tensor:
    return Exp.apply(x)


def log(x: Tensor) -> Tensor:
    return Log.apply(x)


def sqrt(x: Tensor) -> Tensor:
    return Pow.apply(x, exponent=0.5)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


class Conv2d(Function):
    """NHWC convolution via im2col; weight layout is [kh, kw, c_in, c_out]."""

    @staticmethod
    def forward(ctx, x, w, b, stride, padding):
        kh, kw, cin, cout = w.shape
        xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
        windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
        windows = windows[:, ::stride, ::stride]  # [B, Ho, Wo, C, kh, kw]
        bsz, ho, wo = windows.shape[:3]
        cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(bsz * ho * wo, kh * kw * cin)
        ctx.cols, ctx.w, ctx.xp_shape = cols, w, xp.shape
        ctx.out_shape, ctx.stride, ctx.padding = (bsz, ho, wo), stride, padding
        return (cols @ w.reshape(-1, cout) + b).reshape(bsz, ho, wo, cout)

    @staticmethod
    def backward(ctx, grad):
        kh, kw, cin, cout = ctx.w.shape
        bsz, ho, wo = ctx.out_shape
        s, p = ctx.stride, ctx.padding
        g2 = grad.reshape(-1, cout)
        dw = (ctx.cols.T @ g2).reshape(ctx.w.shape)
        db = g2.sum(axis=0)
        dcols = (g2 @ ctx.w.reshape(-1, cout).T).reshape(bsz, ho, wo, kh, kw, cin)
        dxp = np.zeros(ctx.xp_shape)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + s * ho : s, j : j + s * wo : s, :] += dcols[:, :, :, i, j, :]
        hp, wp = ctx.xp_shape[1:3]
        return dxp[:, p : hp - p, p : wp - p, :], dw, db


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[-1] != weight.shape[2] or bias.shape != (weight.shape[3],):
        raise DimensionError(f"conv2d shape mismatch: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    return Conv2d.apply(x, weight, bias, stride=int(stride), padding=int(padding))


# ---------------------------------------------------------------------------
# independent gradient oracle
# ---------------------------------------------------------------------------


def finite_diff_grad(f: Callable[[Tensor], Any], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``; runs with recording off.

    ``x.data`` is perturbed in place one coordinate at a time and restored.
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    flat = x.data.reshape(-1)
    grad = np.zeros(flat.shape)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = _scalar(f(x))
            flat[i] = orig - h
            f_minus = _scalar(f(x))
            flat[i] = orig
            grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad.reshape(x.shape)


def _scalar(value: Any) -> float:
    if isinstance(value, Tensor):
        return value.item()
    return float(value)


# ---------------------------------------------------------------------------
# parameters and checkpoints
# ---------------------------------------------------------------------------


def named_parameters(obj: Any, prefix: str = "") -> dict[str, Tensor]:
    """Collect every Tensor reachable through dataclass fields, lists and dicts."""
    found: dict[str, Tensor] = {}

    def visit(value: Any, path: str) -> None:
        if isinstance(value, Tensor):
            found[path] = value
        elif dataclasses.is_dataclass(value) and not isinstance(value, type):
            for field in dataclasses.fields(value):
                visit(getattr(value, field.name), f"{path}.{field.name}" if path else field.name)
        elif isinstance(value, (list, tuple)):
            for i, item in enumerate(value):
                visit(item, f"{path}.{i}" if path else str(i))
        elif isinstance(value, dict):
            for key, item in value.items():
                visit(item, f"{path}.{key}" if path else str(key))

    visit(obj, prefix)
    return found


def save_checkpoint(path: str | os.PathLike, params: Mapping[str, Tensor], metadata: Mapping | None = None) -> None:
    """Write parameters as JSON (shape + flat float64 list); the replace is atomic."""
    doc = {
        "format": "gicon-checkpoint",
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "metadata": dict(metadata or {}),
        "parameters": {
            name: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()} for name, t in params.items()
        },
    }
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(doc, fh, allow_nan=False)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "gicon-checkpoint":
        raise FormatError(f"{path}: not a gicon checkpoint")
    version = doc.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint format_version {version!r}")
    arrays = {}
    for name, entry in doc["parameters"].items():
        data = np.asarray(entry["data"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if data.size != int(np.prod(shape, dtype=np.int64)):
            raise FormatError(f"{path}: parameter {name} has {data.size} values for shape {shape}")
        arrays[name] = data.reshape(shape)
    return arrays, doc.get("metadata", {})
