"""Dense tensors with reverse-mode automatic differentiation.

Every operation the patch network needs lives here: convolution, pooling,
fully connected layers, ReLU, row-wise unit normalisation, concatenation,
and the handful of elementwise and reduction ops used by the losses.

Activations are laid out logically as ``(N, C, H, W)``.  Convolution and
pooling outputs are backed by channels-last memory (a transposed view), which
keeps the im2col copies cache friendly; callers only ever see the logical
shape.

Gradients are recorded on the fly.  Each op that touches a tensor with
``requires_grad`` appends a :class:`Node` carrying a monotonically increasing
sequence number; :func:`backward` replays the reachable nodes in descending
sequence order, which is exactly the reverse of execution order.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from . import _kernels

__all__ = [
    "Tensor",
    "Node",
    "Tape",
    "TensorShapeError",
    "backward",
    "no_grad",
    "precision",
    "get_default_dtype",
    "tensor",
    "conv2d",
    "maxpool2d",
    "linear",
    "relu",
    "unit_normalize",
    "concat",
    "flatten",
    "take_rows",
    "row_distance",
    "log_softmax",
    "add",
    "sub",
    "mul",
    "tsum",
    "mean",
]


class TensorShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


_state = threading.local()
_seq = itertools.count()


def _get(name, default):
    return getattr(_state, name, default)


def get_default_dtype() -> np.dtype:
    return _get("dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for newly created tensors.

    Training runs in float32; gradient checks switch to float64.
    """
    prev = get_default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    prev = _get("grad_enabled", True)
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _grad_enabled() -> bool:
    return _get("grad_enabled", True)


class Tape:
    """Records the primitive ops executed inside a ``with`` block.

    Backpropagation does not need an active tape (nodes are linked through
    their outputs), but a tape makes the executed op sequence inspectable,
    which the tests use as an op-count probe.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        stack = _get("tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()

    def count(self, op: str) -> int:
        return sum(1 for n in self.nodes if n.op == op)

    @property
    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    seq: int = field(default_factory=lambda: next(_seq))


class Tensor:
    """An ndarray plus gradient bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(get_default_dtype())
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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

    def __neg__(self):
        return mul(self, -1.0)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    """Build a tensor in the current default precision."""
    return Tensor(np.array(data, dtype=get_default_dtype()), requires_grad, name)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else get_default_dtype()
    return Tensor(np.asarray(x, dtype=dtype))


def _record(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    result = Tensor(out)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result.node = Node(op, inputs, backward_fn)
        for tape in _get("tapes", ()):
            tape.nodes.append(result.node)
    return result


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaves used more than once (shared weights) receive the sum of all
    contributions, and repeated calls keep accumulating.
    """
    if loss.size != 1:
        raise TensorShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss.node is None:
        _accumulate(loss, np.ones_like(loss.data))
        return

    # collect reachable nodes; replay in reverse execution order
    owners: dict[int, Tensor] = {}
    stack = [loss]
    seen: set[int] = set()
    while stack:
        t = stack.pop()
        if t.node is None or id(t.node) in seen:
            continue
        seen.add(id(t.node))
        owners[t.node.seq] = t
        stack.extend(i for i in t.node.inputs if i.requires_grad)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for seq in sorted(owners, reverse=True):
        out = owners[seq]
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = out.node.backward_fn(g)
        for inp, gi in zip(out.node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                _accumulate(inp, gi)
            elif id(inp) in grads:
                grads[id(inp)] = grads[id(inp)] + gi
            else:
                grads[id(inp)] = gi


def _accumulate(leaf: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
    if leaf.grad is None:
        leaf.grad = np.array(g, copy=True, order="C")
    else:
        leaf.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", out, (a, b), bw)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", out, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data * b.data

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", out, (a, b), bw)


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    out = np.sum(x.data, axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _record("sum", np.asarray(out), (x,), bw)


def mean(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(np.mean(x.data))

    def bw(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return _record("mean", out, (x,), bw)


def relu(x: Tensor) -> Tensor:
    """Elementwise ``max(0, x)``; the subgradient at 0 is taken as 0."""
    out = np.maximum(x.data, 0)

    def bw(g):
        return (g * (x.data > 0),)

    return _record("relu", out, (x,), bw)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading axis, in logical (C, H, W) order."""
    n = x.shape[0]
    out = np.ascontiguousarray(x.data).reshape(n, -1)

    def bw(g):
        return (g.reshape(x.shape),)

    return _record("flatten", out, (x,), bw)


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise concatenation of two ``(N, D)`` tensors."""
    if a.shape[0] != b.shape[0]:
        raise TensorShapeError(f"concat needs equal leading dims, got {a.shape} and {b.shape}")
    d1 = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def bw(g):
        return g[:, :d1], g[:, d1:]

    return _record("concat", out, (a, b), bw)


def take_rows(x: Tensor, index) -> Tensor:
    """Gather rows ``x[index]``; repeated indices accumulate in backward."""
    index = np.asarray(index, dtype=np.intp)
    out = x.data[index]

    def bw(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(gx, index, g)
        return (gx,)

    return _record("take_rows", out, (x,), bw)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape ``(N, D)`` and weight ``(K, D)``."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise TensorShapeError(
            f"linear: input {x.shape} incompatible with weight {weight.shape}"
        )
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise TensorShapeError(f"linear: bias {bias.shape} for weight {weight.shape}")
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _record("linear", out, inputs, bw)


def unit_normalize(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Divide each row by ``max(||row||_2, eps)``."""
    norm = np.sqrt(np.sum(x.data * x.data, axis=1, keepdims=True))
    denom = np.maximum(norm, eps)
    out = x.data / denom

    def bw(g):
        # quotient rule; rows clamped at eps behave like a constant scale
        active = norm > eps
        proj = np.sum(g * out, axis=1, keepdims=True)
        gx = np.where(active, (g - out * proj) / denom, g / denom)
        return (gx,)

    return _record("unit_normalize", out, (x,), bw)


def row_distance(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Per-row Euclidean distance ``sqrt(sum((a-b)^2) + eps)`` with shape ``(N,)``.

    ``eps`` keeps the gradient finite for identical rows.
    """
    if a.shape != b.shape:
        raise TensorShapeError(f"row_distance: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    d = np.sqrt(np.sum(diff * diff, axis=1) + eps)

    def bw(g):
        coef = (g / d)[:, None] * diff
        return coef, -coef

    return _record("row_distance", d, (a, b), bw)


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax, stabilised by max subtraction."""
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    out = shifted - lse

    def bw(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _record("log_softmax", out, (x,), bw)


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

# im2col is done on batch chunks so the column matrix stays bounded in memory
_CHUNK_ELEMS = 4_000_000


def _nhwc_empty(n, c, h, w, dtype) -> np.ndarray:
    return np.empty((n, h, w, c), dtype=dtype).transpose(0, 3, 1, 2)


def _windows(xp: np.ndarray, k: tuple[int, int], stride: int, out_hw: tuple[int, int]):
    """Strided (N, Ho, Wo, kh, kw, C) view over a padded NHWC array."""
    n, _, _, c = xp.shape
    s0, s1, s2, s3 = xp.strides
    return as_strided(
        xp,
        (n, out_hw[0], out_hw[1], k[0], k[1], c),
        (s0, s1 * stride, s2 * stride, s1, s2, s3),
        writeable=False,
    )


def _pad_nhwc(x: np.ndarray, pad: int) -> np.ndarray:
    nhwc = x.transpose(0, 2, 3, 1)
    if pad == 0:
        return np.ascontiguousarray(nhwc)
    n, h, w, c = nhwc.shape
    xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
    xp[:, pad : pad + h, pad : pad + w, :] = nhwc
    return xp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation.

    Parameters
    ----------
    x : Tensor
        Input of shape ``(N, Cin, H, W)``.
    weight : Tensor
        Kernel of shape ``(Cout, Cin, kh, kw)``.
    bias : Tensor, optional
        Per-output-channel bias ``(Cout,)``.
    stride, pad : int
        Step between windows and symmetric zero padding.

    Returns
    -------
    Tensor
        ``(N, Cout, H', W')`` with ``H' = (H + 2*pad - kh) // stride + 1``.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise TensorShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise TensorShapeError(
            f"conv2d: input has {cin} channels but weight expects {wcin} (weight shape {weight.shape})"
        )
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: need stride >= 1 and pad >= 0, got stride={stride}, pad={pad}")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise TensorShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})")
    if bias is not None and bias.shape != (cout,):
        raise TensorShapeError(f"conv2d: bias shape {bias.shape}, expected ({cout},)")

    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = _pad_nhwc(x.data, pad)
    wmat = np.ascontiguousarray(weight.data.transpose(0, 2, 3, 1)).reshape(cout, -1)
    out = _nhwc_empty(n, cout, ho, wo, x.dtype)
    out_nhwc = out.transpose(0, 2, 3, 1)
    step = max(1, _CHUNK_ELEMS // max(1, ho * wo * kh * kw * cin))
    for n0 in range(0, n, step):
        cols = _windows(xp[n0 : n0 + step], (kh, kw), stride, (ho, wo)).reshape(-1, kh * kw * cin)
        res = cols @ wmat.T
        if bias is not None:
            res += bias.data
        out_nhwc[n0 : n0 + step] = res.reshape(-1, ho, wo, cout)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1))  # N, Ho, Wo, Cout
        gwm = np.zeros((cout, kh * kw * cin), dtype=g.dtype) if weight.requires_grad else None
        gxp = np.zeros(xp.shape, dtype=g.dtype) if x.requires_grad else None
        for n0 in range(0, n, step):
            g2 = gm[n0 : n0 + step].reshape(-1, cout)
            if gwm is not None:
                cols = _windows(xp[n0 : n0 + step], (kh, kw), stride, (ho, wo)).reshape(-1, kh * kw * cin)
                gwm += g2.T @ cols
            if gxp is not None:
                gcols = (g2 @ wmat).reshape(-1, ho, wo, kh, kw, cin)
                _kernels.col2im_add(gcols, stride, gxp, n0)
        gw = None if gwm is None else gwm.reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
        gx = None if gxp is None else gxp[:, pad : pad + h, pad : pad + w, :].transpose(0, 3, 1, 2)
        if bias is None:
            return gx, gw
        return gx, gw, gm.sum(axis=(0, 1, 2))

    return _record("conv2d", out, inputs, bw)


def pool_output_size(size: int, k: int, stride: int, ceil_mode: bool) -> int:
    if ceil_mode:
        return -(-(size - k) // stride) + 1
    return (size - k) // stride + 1


def maxpool2d(x: Tensor, k: int, stride: int, ceil_mode: bool = True) -> Tensor:
    """Max pooling over ``k x k`` windows.

    With ``ceil_mode`` the last window may run past the border; it is clamped
    to the valid region.  Backward routes each window's gradient to its
    argmax, taking the first position in row-major scan order on ties.
    """
    if k < 1 or stride < 1:
        raise ValueError(f"maxpool2d: need k >= 1 and stride >= 1, got k={k}, stride={stride}")
    n, c, h, w = x.shape
    if not ceil_mode and (k > h or k > w):
        raise TensorShapeError(f"maxpool2d: window {k} exceeds input {h}x{w} with ceil_mode off")
    ho = max(1, pool_output_size(h, k, stride, ceil_mode))
    wo = max(1, pool_output_size(w, k, stride, ceil_mode))
    xd = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))
    best = np.empty((n, ho, wo, c), dtype=x.dtype)
    arg = np.empty((n, ho, wo, c), dtype=np.int32)
    _kernels.pool_forward(xd, k, stride, ho, wo, best, arg)

    def bw(g):
        gx = np.zeros((n, h, w, c), dtype=g.dtype)
        _kernels.pool_backward(np.ascontiguousarray(g.transpose(0, 2, 3, 1)), arg, k, stride, gx)
        return (gx.transpose(0, 3, 1, 2),)

    return _record("maxpool2d", best.transpose(0, 3, 1, 2), (x,), bw)
