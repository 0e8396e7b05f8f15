"""Dense 4-D tensors with reverse-mode differentiation.

The engine is deliberately small: every value is a float64 array of
shape ``(batch, channel, height, width)``, and gradients are produced by
a tape of whole-tensor operations recorded as the forward pass runs.
Each operation that sees a gradient-requiring input creates a graph node
holding its parents and a closure that maps the incoming gradient to
parent gradients; :func:`backward` replays the recorded graph in reverse
topological order.

Only the operations the flow model needs are provided. There is no
general broadcasting: binary ops accept equal shapes plus the
per-channel ``(1, C, 1, 1)`` and scalar ``(1, 1, 1, 1)`` parameter
shapes, which covers every layer in the package.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .linalg import SquareMatrix, logdet_and_inverse


class ShapeError(ValueError):
    """An operation received tensors whose shapes violate its contract."""


class NonFiniteError(FloatingPointError):
    """A computation produced NaN or Inf where finite values are required."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / inverse passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A float64 array of shape (N, C, H, W) with an optional gradient slot.

    Tensors are immutable once written, except that ``grad`` accumulates
    across :func:`backward` calls until cleared. Only leaf tensors
    (created directly with ``requires_grad=True``) receive gradients;
    intermediate nodes propagate them.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ShapeError(f"tensor must be 4-D (N, C, H, W), got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable | None = None

    # -- introspection ----------------------------------------------------

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same values, no graph, no gradient requirement."""
        return Tensor(self.data)

    def assert_finite(self, context: str = "tensor") -> "Tensor":
        if not np.isfinite(self.data).all():
            bad = int(np.size(self.data) - np.isfinite(self.data).sum())
            raise NonFiniteError(f"{bad} non-finite value(s) in {context}")
        return self

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def exp(self) -> "Tensor":
        return exp(self)

    def sum_all(self) -> "Tensor":
        return sum_all(self)

    def sum_per_sample(self) -> "Tensor":
        return sum_per_sample(self)

    def mean_all(self) -> "Tensor":
        return mean_all(self)


def scalar(value: float) -> Tensor:
    return Tensor(np.full((1, 1, 1, 1), float(value)))


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=requires_grad)


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float)):
        return scalar(float(x))
    raise TypeError(f"cannot use {type(x).__name__} as a tensor operand")


def _node(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._grad_fn = None
    return out


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient over the axes the forward op broadcast along."""
    if g.shape == shape:
        return g
    axes = tuple(i for i in range(4) if shape[i] == 1 and g.shape[i] > 1)
    return g.sum(axis=axes, keepdims=True)


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def backward(loss: Tensor) -> None:
    """Populate gradients of every requires_grad leaf reachable from ``loss``.

    Gradients accumulate into ``.grad`` across calls until cleared by the
    caller. ``loss`` must be scalar-shaped (1, 1, 1, 1).
    """
    if loss.shape != (1, 1, 1, 1):
        raise ShapeError(f"backward requires a scalar tensor, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1, 1, 1))}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._grad_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "add")
    return _node(a.data + b.data, (a, b),
                 lambda g: (_sum_to(g, a.shape), _sum_to(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "sub")
    return _node(a.data - b.data, (a, b),
                 lambda g: (_sum_to(g, a.shape), _sum_to(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "mul")
    return _node(a.data * b.data, (a, b),
                 lambda g: (_sum_to(g * b.data, a.shape), _sum_to(g * a.data, b.shape)))


def scale(a: Tensor, s: float) -> Tensor:
    return _node(a.data * s, (a,), lambda g: (g * s,))


def shift(a: Tensor, s: float) -> Tensor:
    return _node(a.data + s, (a,), lambda g: (g,))


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return _node(out_data, (a,), lambda g: (g * out_data,))


def log_abs(a: Tensor) -> Tensor:
    """log|x| elementwise; derivative 1/x (caller guarantees x != 0)."""
    return _node(np.log(np.abs(a.data)), (a,), lambda g: (g / a.data,))


def reciprocal(a: Tensor) -> Tensor:
    out_data = 1.0 / a.data
    return _node(out_data, (a,), lambda g: (-g * out_data * out_data,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _node(out_data, (a,), lambda g: (g * out_data * (1.0 - out_data),))


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)
    return _node(out_data, (a,), lambda g: (g * (1.0 - out_data * out_data),))


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x); smooth everywhere, which keeps finite-difference
    gradient checks honest (no kink crossings)."""
    x = a.data
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _node(x * sig, (a,), lambda g: (g * sig * (1.0 + x * (1.0 - sig)),))


def square(a: Tensor) -> Tensor:
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    return _node(a.data.sum().reshape(1, 1, 1, 1), (a,),
                 lambda g: (np.broadcast_to(g, a.shape),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return _node(a.data.mean().reshape(1, 1, 1, 1), (a,),
                 lambda g: (np.broadcast_to(g / n, a.shape),))


def sum_per_sample(a: Tensor) -> Tensor:
    """Reduce (N, C, H, W) -> (N, 1, 1, 1); the per-batch-element total."""
    return _node(a.data.sum(axis=(1, 2, 3), keepdims=True), (a,),
                 lambda g: (np.broadcast_to(g, a.shape),))


# ---------------------------------------------------------------------------
# shape movement
# ---------------------------------------------------------------------------

def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    sizes = [p.shape[1] for p in parts]

    def grad_fn(g):
        out, c = [], 0
        for s in sizes:
            out.append(g[:, c:c + s])
            c += s
        return tuple(out)

    return _node(np.concatenate([p.data for p in parts], axis=1), parts, grad_fn)


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    def grad_fn(g):
        full = np.zeros(a.shape)
        full[:, start:stop] = g
        return (full,)

    return _node(a.data[:, start:stop], (a,), grad_fn)


def _space_to_channel_data(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    return (x.reshape(n, c, h // 2, 2, w // 2, 2)
             .transpose(0, 1, 3, 5, 2, 4)
             .reshape(n, 4 * c, h // 2, w // 2))


def _channel_to_space_data(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    return (x.reshape(n, c // 4, 2, 2, h, w)
             .transpose(0, 1, 4, 2, 5, 3)
             .reshape(n, c // 4, 2 * h, 2 * w))


def space_to_channel(a: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, 4C, H/2, W/2).

    Output channel ``4c + 2*dy + dx`` holds input channel ``c`` at the
    sub-pixel offset ``(dy, dx)`` of each 2x2 block (channel-major
    ordering; the exact inverse is :func:`channel_to_space`).
    """
    n, c, h, w = a.shape
    if h % 2 or w % 2:
        raise ShapeError(f"space_to_channel needs even spatial dims, got {h}x{w}")
    return _node(_space_to_channel_data(a.data), (a,),
                 lambda g: (_channel_to_space_data(g),))


def channel_to_space(a: Tensor) -> Tensor:
    n, c, h, w = a.shape
    if c % 4:
        raise ShapeError(f"channel_to_space needs channels divisible by 4, got {c}")
    return _node(_channel_to_space_data(a.data), (a,),
                 lambda g: (_space_to_channel_data(g),))


def nearest_upsample2(a: Tensor) -> Tensor:
    out_data = a.data.repeat(2, axis=2).repeat(2, axis=3)

    def grad_fn(g):
        n, c, h, w = g.shape
        return (g.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)),)

    return _node(out_data, (a,), grad_fn)


def subsample2(a: Tensor) -> Tensor:
    """Keep every second pixel in each axis (stride-2 decimation)."""

    def grad_fn(g):
        full = np.zeros(a.shape)
        full[:, :, ::2, ::2] = g
        return (full,)

    return _node(a.data[:, :, ::2, ::2], (a,), grad_fn)


# ---------------------------------------------------------------------------
# convolution and channel mixing
# ---------------------------------------------------------------------------

def _corr2d(x_pad: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Valid cross-correlation of a padded input with a (O, C, kh, kw) kernel."""
    win = sliding_window_view(x_pad, (w.shape[2], w.shape[3]), axis=(2, 3))
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return out.transpose(0, 3, 1, 2)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           padding: str = "same") -> Tensor:
    """2-D convolution (cross-correlation), stride 1, float64.

    ``weight`` is (C_out, C_in, kH, kW); ``bias`` is (1, C_out, 1, 1) or
    None. ``padding`` is "same" (odd kernels) or "valid". Gradients flow
    to input, weight and bias.
    """
    co, ci, kh, kw = weight.shape
    if x.shape[1] != ci:
        raise ShapeError(f"conv2d: input channels {x.shape} do not match weight {weight.shape}")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"conv2d: same-padding requires odd kernels, got {kh}x{kw}")
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
    elif padding == "valid":
        ph = pw = 0
        if x.shape[2] < kh or x.shape[3] < kw:
            raise ShapeError(f"conv2d: input {x.shape} smaller than kernel {weight.shape}")
    else:
        raise ValueError(f"unknown padding mode {padding!r}")

    if kh == 1 and kw == 1:
        out_data = np.tensordot(weight.data[:, :, 0, 0], x.data, axes=([1], [1])).transpose(1, 0, 2, 3)
    else:
        x_pad = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
        out_data = _corr2d(x_pad, weight.data)
    if bias is not None:
        if bias.shape != (1, co, 1, 1):
            raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {co} output channels")
        out_data = out_data + bias.data

    def grad_fn(g):
        g = np.ascontiguousarray(g)
        if kh == 1 and kw == 1:
            dw = np.tensordot(g, x.data, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
            dx = np.tensordot(weight.data[:, :, 0, 0], g, axes=([0], [1])).transpose(1, 0, 2, 3)
        else:
            x_pad = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
            win = sliding_window_view(x_pad, (kh, kw), axis=(2, 3))
            dw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
            w_swap = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            g_pad = np.pad(g, ((0, 0), (0, 0), (kh - 1 - ph, kh - 1 - ph),
                               (kw - 1 - pw, kw - 1 - pw)))
            dx = _corr2d(g_pad, w_swap)
        db = g.sum(axis=(0, 2, 3)).reshape(1, co, 1, 1) if bias is not None else None
        return dx, dw, db

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out_data, parents, grad_fn)


def channel_matmul(x: Tensor, weight: Tensor) -> Tensor:
    """Multiply every spatial position's channel vector by a square matrix.

    ``weight`` is stored in 1x1-convolution layout (C, C, 1, 1).
    """
    c = x.shape[1]
    if weight.shape != (c, c, 1, 1):
        raise ShapeError(f"channel_matmul: weight {weight.shape} does not match {c} channels")
    m = weight.data[:, :, 0, 0]
    out_data = np.tensordot(m, x.data, axes=([1], [1])).transpose(1, 0, 2, 3)

    def grad_fn(g):
        dw = np.tensordot(g, x.data, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
        dx = np.tensordot(m, g, axes=([0], [1])).transpose(1, 0, 2, 3)
        return dx, dw

    return _node(out_data, (x, weight), grad_fn)


def matrix_log_abs_det(weight: Tensor) -> Tensor:
    """log|det M| of a (C, C, 1, 1) weight, as a scalar tensor.

    Gradient is the classic inverse-transpose rule. Raises
    :class:`~ncsr.linalg.SingularMatrixError` when M is singular.
    """
    c = weight.shape[0]
    if weight.shape != (c, c, 1, 1):
        raise ShapeError(f"matrix_log_abs_det expects (C, C, 1, 1), got {weight.shape}")
    logdet, inv = logdet_and_inverse(SquareMatrix(weight.data[:, :, 0, 0]))
    inv_t = inv.entries.T.copy()
    return _node(np.full((1, 1, 1, 1), logdet), (weight,),
                 lambda g: (float(g.reshape(())) * inv_t[:, :, None, None],))
