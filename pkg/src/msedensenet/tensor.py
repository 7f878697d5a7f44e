"""Dense n-dimensional arrays with reverse-mode automatic differentiation.

Every operation that produces a :class:`Tensor` from inputs that require
gradients records a tape node (its parents plus a closure implementing the
backward rule).  Nodes carry a monotonically increasing creation id, so the
reverse of creation order is always a valid topological order for
:meth:`Tensor.backward`.

Layout is row-major NCHW throughout.
"""

from __future__ import annotations

import itertools
import logging
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_node_ids = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block (evaluation, feature extraction)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """n-dimensional float array with an optional gradient.

    Args:
        data: Anything ``np.asarray`` accepts. Integer input is promoted to
            float64; float32 and float64 are kept as given unless ``dtype``
            is passed.
        requires_grad: Whether gradients should be accumulated into ``grad``.
        dtype: Optional explicit numpy float dtype.
        name: Optional label, used by diagnostics.
    """

    __array_priority__ = 100

    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward", "_id")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype: Optional[np.dtype] = None,
        name: Optional[str] = None,
    ):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.op = "leaf"
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._id = next(_node_ids)

    # -- basic properties -------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff ---------------------------------------------------------

    def backward(self, grad: Optional[ArrayLike] = None) -> None:
        """Propagate gradients from this scalar to every reachable tensor.

        Gradients accumulate: calling ``backward`` twice without zeroing
        doubles every ``grad``. Zero parameters between optimizer steps.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(grad, dtype=self.dtype)
            if seed.shape != self.shape:
                raise ValueError(f"seed gradient shape {seed.shape} != tensor shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor that does not require grad")

        nodes = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if node._id in nodes:
                continue
            nodes[node._id] = node
            stack.extend(p for p in node._parents if p.requires_grad and p._id not in nodes)

        pending = {self._id: seed}
        for node_id in sorted(nodes, reverse=True):
            node = nodes[node_id]
            g = pending.pop(node_id, None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise RuntimeError(
                        f"{node.op}: gradient shape {pg.shape} does not match input {parent.shape}"
                    )
                prev = pending.get(parent._id)
                pending[parent._id] = pg if prev is None else prev + pg

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / np.asarray(other, dtype=self.dtype))

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __pow__(self, exponent: float) -> "Tensor":
        return power(self, exponent)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(value: ArrayLike, dtype: Optional[np.dtype] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def apply(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: BackwardFn,
    op: str,
) -> Tensor:
    """Wrap ``data`` as the output of ``op``; records a tape node when needed."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return apply(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return apply(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return apply(a.data * b.data, (a, b), backward, "mul")


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data**exponent

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return apply(out, (a,), backward, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return apply(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return apply(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient is zero where the clamp is active."""
    mask = (a.data >= lo) & (a.data <= hi)
    return apply(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,), "clip")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return apply(np.asarray(out), (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return apply(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def getitem(a: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return apply(np.ascontiguousarray(a.data[index]), (a,), backward, "getitem")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return apply(a.data @ b.data, (a, b), backward, "matmul")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Join along ``axis`` (the feature/channel axis by default).

    Output order follows the argument order, so ``concat([a, b])`` places
    ``a``'s features first.
    """
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref):
            raise ValueError(f"concat rank mismatch: {ref} vs {t.shape}")
        for d, (x, y) in enumerate(zip(ref, t.shape)):
            if d != axis % len(ref) and x != y:
                raise ValueError(f"concat shape mismatch on axis {d}: {ref} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(lo, hi), axis=axis))
            for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return apply(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    """Rectifier; the subgradient at exactly 0 is taken as 0."""
    mask = x.data > 0
    return apply(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    out = np.exp(-np.logaddexp(0.0, -x.data)).astype(x.dtype, copy=False)
    return apply(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def linear(x: Tensor) -> Tensor:
    """Identity activation."""
    return x


# ---------------------------------------------------------------------------
# Layer primitives
# ---------------------------------------------------------------------------


def _same_padding(size: int, kernel: int, stride: int) -> Tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: str = "valid",
) -> Tensor:
    """2-D cross-correlation, NCHW input, FCkhkw weights.

    ``"same"`` pads symmetrically with any odd leftover row/column going to
    the bottom/right; ``"valid"`` does not pad.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise ValueError(f"conv2d stride must be a positive integer, got {stride!r}")
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if c != cw:
        raise ValueError(f"conv2d channel mismatch: input has {c} channels, weight expects {cw}")
    if bias is not None and bias.shape != (f,):
        raise ValueError(f"conv2d bias shape {bias.shape} != ({f},)")
    if padding == "same":
        pt, pb = _same_padding(h, kh, stride)
        pl, pr = _same_padding(w, kw, stride)
    elif padding == "valid":
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    hp, wp = h + pt + pb, w + pl + pr
    if kh > hp or kw > wp:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else x.data
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    # im2col in [kh, kw, C, N, Ho, Wo] order so each kernel tap is one block copy
    xpt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((kh, kw, c, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[i, j] = xpt[:, :, i : i + span_h : stride, j : j + span_w : stride]
    cols = cols.reshape(kh * kw * c, n * ho * wo)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(f, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(f, n, ho, wo).transpose(1, 0, 2, 3))

    def backward(g):
        gt = g.transpose(1, 0, 2, 3).reshape(f, -1)
        gw = None
        if weight.requires_grad:
            gw = np.ascontiguousarray((gt @ cols.T).reshape(f, kh, kw, c).transpose(0, 3, 1, 2))
        gb = gt.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ gt).reshape(kh, kw, c, n, ho, wo)
            gxp = np.zeros((c, n, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + span_h : stride, j : j + span_w : stride] += dcols[i, j]
            gx = np.ascontiguousarray(gxp[:, :, pt : pt + h, pl : pl + w].transpose(1, 0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return apply(out, parents, backward, "conv2d")


class RunningStats:
    """Mutable per-channel running mean/variance owned by a batch-norm layer."""

    def __init__(self, channels: int, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


BN_EPSILON = 1e-5


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running: Optional[RunningStats] = None,
    momentum: float = 0.9,
    training: bool = True,
    eps: float = BN_EPSILON,
) -> Tensor:
    """Batch normalization over every axis except channels (axis 1).

    Works for ``[N, C]`` and ``[N, C, H, W]``. In training mode the batch
    statistics normalize the input and ``running`` is updated as
    ``momentum * running + (1 - momentum) * batch``; inference mode uses
    ``running`` unchanged.
    """
    if x.ndim not in (2, 4):
        raise ValueError(f"batch_norm expects [N,C] or [N,C,H,W], got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm parameter shape mismatch for {c} channels")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    m = x.data.size // c

    if training:
        mean = x.data.mean(axis=axes)
        centered = x.data - mean.reshape(bshape)
        var = (centered * centered).mean(axis=axes)
        if running is not None:
            running.mean *= momentum
            running.mean += (1.0 - momentum) * mean.astype(running.mean.dtype)
            running.var *= momentum
            running.var += (1.0 - momentum) * var.astype(running.var.dtype)
    else:
        if running is None:
            raise ValueError("inference-mode batch_norm needs running statistics")
        mean = running.mean.astype(x.dtype)
        var = running.var.astype(x.dtype)
        centered = x.data - mean.reshape(bshape)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = centered * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        gg = g * xhat
        dgamma = gg.sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            dx = (inv_std.reshape(bshape) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            dx = dxhat * inv_std.reshape(bshape)
        return dx, dgamma, dbeta

    return apply(out, (x, gamma, beta), backward, "batch_norm")


def avg_pool2d(x: Tensor, window: int, stride: Optional[int] = None) -> Tensor:
    """Average pooling without padding; trailing rows/columns that do not fill
    a window are dropped (floor rule)."""
    stride = window if stride is None else stride
    if window < 1 or stride < 1:
        raise ValueError("avg_pool2d window and stride must be positive")
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ValueError(f"pool window {window} larger than input {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    scale = 1.0 / (window * window)
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for i in range(window):
        for j in range(window):
            out += x.data[:, :, i : i + span_h : stride, j : j + span_w : stride]
    out *= scale

    def backward(g):
        gx = np.zeros_like(x.data)
        gs = g * scale
        for i in range(window):
            for j in range(window):
                gx[:, :, i : i + span_h : stride, j : j + span_w : stride] += gs
        return (gx,)

    return apply(out, (x,), backward, "avg_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C] channel means."""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    scale = 1.0 / (h * w)

    def backward(g):
        return (np.broadcast_to((g * scale)[:, :, None, None], x.shape).copy(),)

    return apply(x.data.mean(axis=(2, 3)), (x,), backward, "global_avg_pool")


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight + bias`` with ``weight`` shaped [D, U]."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ValueError(f"dense expects [N,D] input and [D,U] weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ValueError(f"dense inner-dimension mismatch: {x.shape[1]} vs {weight.shape[0]}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return apply(out, parents, backward, "dense")


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each [H, W] map of ``x`` by the matching entry of ``s`` [N, C]."""
    if s.shape != x.shape[:2]:
        raise ValueError(f"scale shape {s.shape} does not match {x.shape[:2]}")
    scale = s.data[:, :, None, None]

    def backward(g):
        gx = g * scale if x.requires_grad else None
        gs = (g * x.data).sum(axis=(2, 3)) if s.requires_grad else None
        return gx, gs

    return apply(x.data * scale, (x, s), backward, "scale_channels")
