"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations the colorization networks need are provided. Every
operation takes and returns :class:`Tensor` objects; when any input requires
a gradient (and recording is enabled) the operation appends a node to the
active :class:`Tape`. :func:`backward` then walks that tape in reverse.

Example:
    >>> x = Tensor([3.0], requires_grad=True)
    >>> backward(sum_all(x * x))
    >>> x.grad
    array([6.], dtype=float32)
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "DimensionError",
    "PreconditionError",
    "Tape",
    "Tensor",
    "active_tape",
    "add",
    "backward",
    "batchnorm2d",
    "broadcast_spatial",
    "channel_affine",
    "concat_channels",
    "conv2d",
    "dense",
    "flatten",
    "get_dtype",
    "global_avg_pool",
    "log_clamped",
    "maxpool2",
    "mean_all",
    "mean_per_example",
    "mul",
    "no_grad",
    "precision",
    "relu",
    "scale",
    "set_dtype",
    "sigmoid",
    "square",
    "sub",
    "sum_all",
    "tape",
    "upsample2",
]

ArrayLike = Union[np.ndarray, Sequence, float, int]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class DimensionError(ValueError):
    """Raised when tensor shapes disagree; ``axis`` names the offending axis."""

    def __init__(self, message: str, axis: str):
        super().__init__(f"{message} (axis: {axis})")
        self.axis = axis


class PreconditionError(ValueError):
    pass


# --------------------------------------------------------------------------
# precision

_dtype = np.dtype(np.float32)


def get_dtype() -> np.dtype:
    return _dtype


def set_dtype(dtype) -> None:
    """Set the global storage precision (float32 or float64)."""
    global _dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _dtype = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the global precision, e.g. ``precision("float64")``."""
    previous = _dtype
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(previous)


# --------------------------------------------------------------------------
# tapes


class _Node:
    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op: str, inputs: Tuple["Tensor", ...], backward: BackwardFn):
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Append-only record of differentiable operations.

    Node order is the topological order. ``generation`` is bumped whenever
    the tape is reset so stale handles held by old tensors are detected.
    """

    def __init__(self) -> None:
        self.nodes: List[_Node] = []
        self.generation = 0

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Tuple["Tensor", ...], backward_fn: BackwardFn) -> int:
        self.nodes.append(_Node(op, inputs, backward_fn))
        return len(self.nodes) - 1

    def reset(self) -> None:
        self.nodes = []
        self.generation += 1


_tape_stack: List[Tape] = [Tape()]
_grad_enabled = True


def active_tape() -> Tape:
    return _tape_stack[-1]


@contextlib.contextmanager
def tape() -> Iterator[Tape]:
    """Record operations on a fresh tape for the duration of the block."""
    t = Tape()
    _tape_stack.append(t)
    try:
        yield t
    finally:
        _tape_stack.pop()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


# --------------------------------------------------------------------------
# tensor


class Tensor:
    """N-dimensional real array that may participate in a tape.

    Args:
        data: array-like values, cast to the current global precision unless
            ``dtype`` is given.
        requires_grad: leaves with this flag receive ``.grad`` on backward.
        name: optional label used in diagnostics and checkpoints.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_tape", "_generation", "tape_id")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype=None,
    ):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else _dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Optional[Tape] = None
        self._generation = -1
        self.tape_id: Optional[int] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Return a leaf sharing this tensor's values but no graph history."""
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # arithmetic sugar; no broadcasting except python scalars
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else _add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else _add_scalar(self, -other)

    def __rsub__(self, other):
        return _add_scalar(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return scale(self, 1.0 / other)


def _result(op: str, data: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        t = active_tape()
        out.requires_grad = True
        out._tape = t
        out._generation = t.generation
        out.tape_id = t.record(op, inputs, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from a scalar ``loss``.

    Gradients accumulate into existing ``.grad`` arrays. The tape the loss
    was recorded on is consumed.
    """
    if loss.size != 1:
        raise PreconditionError(f"backward needs a scalar loss, got shape {loss.shape}")
    t = loss._tape
    if t is None or loss.tape_id is None:
        raise PreconditionError("loss was not recorded on a tape")
    if loss._generation != t.generation:
        raise PreconditionError("tape was already consumed by an earlier backward")

    pending = {loss.tape_id: np.ones_like(loss.data)}
    for idx in range(len(t.nodes) - 1, -1, -1):
        g = pending.pop(idx, None)
        if g is None:
            continue
        node = t.nodes[idx]
        for inp, ig in zip(node.inputs, node.backward(g)):
            if ig is None or not inp.requires_grad:
                continue
            if inp.tape_id is None:
                inp.grad = np.array(ig, dtype=inp.dtype) if inp.grad is None else inp.grad + ig
            elif inp._tape is t and inp._generation == t.generation:
                prev = pending.get(inp.tape_id)
                pending[inp.tape_id] = ig if prev is None else prev + ig
    t.reset()


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        for i, (x, y) in enumerate(zip(a.shape, b.shape)):
            if x != y:
                raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ", f"dim {i}")
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ", "rank")


# --------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    x, y = a.data, b.data
    return _result("mul", x * y, (a, b), lambda g: (g * y, g * x))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _result("scale", a.data * c, (a,), lambda g: (g * c,))


def _add_scalar(a: Tensor, c: float) -> Tensor:
    return _result("add_scalar", a.data + a.dtype.type(c), (a,), lambda g: (g,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _result("square", x * x, (a,), lambda g: (2 * g * x,))


def relu(x: Tensor) -> Tensor:
    """Rectifier; the derivative at exactly zero is taken as zero."""
    mask = x.data > 0
    return _result("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, kept strictly inside (0, 1) at the working precision."""
    info = np.finfo(x.dtype)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    # 1.0 and 0.0 are reachable in float32 for |x| > ~17
    y = np.clip(y, info.tiny, 1.0 - info.epsneg).astype(x.dtype)
    return _result("sigmoid", y, (x,), lambda g: (g * y * (1 - y),))


def log_clamped(x: Tensor, floor: float = 1e-12) -> Tensor:
    """``log(max(x, floor))``; clamped positions receive no gradient."""
    keep = x.data >= floor
    safe = np.where(keep, x.data, floor).astype(x.dtype)
    return _result("log", np.log(safe), (x,), lambda g: (np.where(keep, g / safe, 0).astype(x.dtype),))


# --------------------------------------------------------------------------
# reductions and reshapes


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                   lambda g: (np.broadcast_to(g, shape).astype(x.dtype),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _result("mean", np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                   lambda g: (np.full(shape, g / n, dtype=x.dtype),))


def mean_per_example(x: Tensor) -> Tensor:
    """Mean over every axis except the leading batch axis: [B, ...] -> [B]."""
    shape = x.shape
    n = int(np.prod(shape[1:]))
    out = x.data.reshape(shape[0], -1).mean(axis=1)

    def grad(g):
        return (np.broadcast_to((g / n).reshape((-1,) + (1,) * (len(shape) - 1)), shape).astype(x.dtype),)

    return _result("mean_per_example", out, (x,), grad)


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    return _result("flatten", x.data.reshape(shape[0], -1), (x,), lambda g: (g.reshape(shape),))


def global_avg_pool(x: Tensor) -> Tensor:
    """[B, C, H, W] -> [B, C] spatial mean."""
    b, c, h, w = x.shape
    return _result("global_avg_pool", x.data.mean(axis=(2, 3)), (x,),
                   lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype),))


def broadcast_spatial(v: Tensor, height: int, width: int) -> Tensor:
    """[B, F] -> [B, F, H, W] by replicating each feature over the plane."""
    if v.ndim != 2:
        raise DimensionError(f"broadcast_spatial expects [B, F], got {v.shape}", "rank")
    out = np.ascontiguousarray(np.broadcast_to(v.data[:, :, None, None], v.shape + (height, width)))
    return _result("broadcast_spatial", out, (v,), lambda g: (g.sum(axis=(2, 3)),))


# --------------------------------------------------------------------------
# layers


def _require_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{op} expects a [B, C, H, W] tensor, got shape {x.shape}", "rank")


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    """[B, C, H, W] -> ([B*Ho*Wo, C*k*k] patches, Ho, Wo)."""
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k), ho, wo


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation with a square odd kernel.

    ``padding="same"`` zero-pads by ``(k - 1) // 2`` on every side, so stride 1
    preserves the spatial size; ``"valid"`` does not pad.
    """
    _require_4d(x, "conv2d")
    if kernel.ndim != 4:
        raise DimensionError(f"conv2d kernel must be [Cout, Cin, k, k], got {kernel.shape}", "rank")
    b, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise DimensionError(f"conv2d: input has {cin} channels, kernel expects {kcin}", "channels")
    if kh != kw or kh % 2 == 0:
        raise PreconditionError(f"conv2d kernel must be square and odd, got {kh}x{kw}")
    if bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({cout},)", "out_channels")
    if stride < 1:
        raise PreconditionError(f"stride must be >= 1, got {stride}")
    if padding not in ("same", "valid"):
        raise PreconditionError(f"padding must be 'same' or 'valid', got {padding!r}")
    k = kh
    pad = (k - 1) // 2 if padding == "same" else 0
    if h + 2 * pad < k or w + 2 * pad < k:
        raise DimensionError(f"conv2d: input {h}x{w} smaller than kernel {k}x{k}", "height" if h + 2 * pad < k else "width")

    cols, ho, wo = _im2col(x.data, k, stride, pad)
    wmat = kernel.data.reshape(cout, cin * k * k)
    out = cols @ wmat.T
    out += bias.data
    out = np.ascontiguousarray(out.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2))

    def grad(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        dkernel = (g2.T @ cols).reshape(kernel.shape)
        dbias = g2.sum(axis=0)
        dx = None
        if not x.requires_grad:
            pass
        elif stride == 1:
            # correlation of the output gradient with the flipped, transposed kernel
            flipped = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, cout * k * k)
            gcols, _, _ = _im2col(g, k, 1, k - 1 - pad)
            dx = np.ascontiguousarray((gcols @ flipped.T).reshape(b, h, w, cin).transpose(0, 3, 1, 2))
        else:
            dcols = (g2 @ wmat).reshape(b, ho, wo, cin, k, k).transpose(0, 3, 4, 5, 1, 2)
            dxp = np.zeros((b, cin, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += dcols[:, :, i, j]
            dx = dxp[:, :, pad:pad + h, pad:pad + w]
        return dx, dkernel, dbias

    return _result("conv2d", out, (x, kernel, bias), grad)


def maxpool2(x: Tensor) -> Tensor:
    """Disjoint 2x2 max pooling.

    The gradient goes to a single argmax per window; ties resolve to the
    first position in row-major order.
    """
    _require_4d(x, "maxpool2")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise PreconditionError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    windows = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def grad(g):
        onehot = np.zeros(windows.shape, dtype=x.dtype)
        np.put_along_axis(onehot, idx[..., None], g[..., None], axis=-1)
        return (onehot.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w),)

    return _result("maxpool2", out, (x,), grad)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    _require_4d(x, "upsample2")
    b, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _result("upsample2", out, (x,), lambda g: (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _require_4d(a, "concat_channels")
    _require_4d(b, "concat_channels")
    for axis, name in ((0, "batch"), (2, "height"), (3, "width")):
        if a.shape[axis] != b.shape[axis]:
            raise DimensionError(f"concat_channels: {a.shape} vs {b.shape}", name)
    c1 = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _result("concat_channels", out, (a, b), lambda g: (g[:, :c1], g[:, c1:]))


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weights + bias`` for x of shape [B, N]."""
    if x.ndim != 2 or weights.ndim != 2:
        raise DimensionError(f"dense expects [B, N] and [N, M], got {x.shape} and {weights.shape}", "rank")
    if x.shape[1] != weights.shape[0]:
        raise DimensionError(f"dense: input width {x.shape[1]} != weight rows {weights.shape[0]}", "features")
    if bias.shape != (weights.shape[1],):
        raise DimensionError(f"dense: bias shape {bias.shape} != ({weights.shape[1]},)", "outputs")
    xd, wd = x.data, weights.data
    out = xd @ wd + bias.data
    return _result("dense", out, (x, weights, bias), lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)))


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    """Batch normalisation over (B, H, W) using the batch's own statistics.

    Returns the normalised tensor along with the batch mean and (biased)
    variance so callers can maintain running estimates.
    """
    _require_4d(x, "batchnorm2d")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm2d: affine params must be ({c},)", "channels")
    xd = x.data
    m = xd.shape[0] * xd.shape[2] * xd.shape[3]
    mu = xd.mean(axis=(0, 2, 3))
    var = xd.var(axis=(0, 2, 3))
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def grad(g):
        dbeta = g.sum(axis=(0, 2, 3))
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        gx = g * gamma.data[None, :, None, None]
        dx = (inv[None, :, None, None] / m) * (
            m * gx - gx.sum(axis=(0, 2, 3))[None, :, None, None]
            - xhat * (gx * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
        )
        return dx.astype(x.dtype), dgamma, dbeta

    return _result("batchnorm2d", out.astype(x.dtype), (x, gamma, beta), grad), mu, var


def channel_affine(x: Tensor, multiplier: np.ndarray, shift: np.ndarray) -> Tensor:
    """Per-channel ``x * multiplier + shift`` with constant (untracked) coefficients."""
    _require_4d(x, "channel_affine")
    m = np.asarray(multiplier, dtype=x.dtype)[None, :, None, None]
    s = np.asarray(shift, dtype=x.dtype)[None, :, None, None]
    return _result("channel_affine", x.data * m + s, (x,), lambda g: (g * m,))
