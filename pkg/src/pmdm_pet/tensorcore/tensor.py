"""Dense tensors with a minimal reverse-mode tape.

Every differentiable op builds its output through :func:`_make`, which
records the parents and a closure mapping the output gradient to one
gradient per parent. :meth:`Tensor.backward` walks the tape once in
reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_state = {"dtype": np.dtype(np.float32), "grad": True, "check_finite": True, "kinks": None}


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


def get_default_dtype() -> np.dtype:
    return _state["dtype"]


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype new tensors are created with."""
    old = _state["dtype"]
    _state["dtype"] = np.dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


class _KinkLog:
    def __init__(self, replay: list | None = None):
        self.masks = [] if replay is None else replay
        self.replay = replay is not None
        self.pos = 0

    def mask(self, positive: np.ndarray) -> np.ndarray:
        if not self.replay:
            self.masks.append(positive)
            return positive
        if self.pos >= len(self.masks) or self.masks[self.pos].shape != positive.shape:
            raise RuntimeError("replayed graph differs from the recorded one")
        m = self.masks[self.pos]
        self.pos += 1
        return m


@contextlib.contextmanager
def record_kinks():
    """Record the sign pattern of every piecewise-linear op run in the block.

    Yields the list of masks, which :func:`replay_kinks` can impose on a
    later evaluation of the same graph.
    """
    log = _KinkLog()
    old = _state["kinks"]
    _state["kinks"] = log
    try:
        yield log.masks
    finally:
        _state["kinks"] = old


@contextlib.contextmanager
def replay_kinks(masks: list):
    """Evaluate with recorded sign patterns, i.e. on one smooth piece."""
    log = _KinkLog(masks)
    old = _state["kinks"]
    _state["kinks"] = log
    try:
        yield
    finally:
        _state["kinks"] = old


def _positive(x: np.ndarray) -> np.ndarray:
    mask = x > 0
    log = _state["kinks"]
    return mask if log is None else log.mask(mask)


def is_grad_enabled() -> bool:
    return _state["grad"]


class Tensor:
    """An n-d array plus the bookkeeping needed for reverse-mode AD.

    Parameters
    ----------
    data : array_like
        Values; converted to the current default dtype unless already a
        floating array of that dtype.
    requires_grad : bool
        Leaf tensors with this flag receive ``.grad`` on backward.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = "leaf"):
        arr = np.asarray(data)
        if arr.dtype != _state["dtype"]:
            arr = arr.astype(_state["dtype"])
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable | None = _backward
        self.op = op

    # -- basic properties -------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators --------------------------------------------------------
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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a constant")
        return mul(self, 1.0 / other)

    def __pow__(self, p):
        if p != 2:
            raise NotImplementedError("only squaring is supported")
        return mul(self, self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.size != 1:
                raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        order = _topo_order(self)
        pending: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def tensor(data, requires_grad: bool = False) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if _state["check_finite"] and not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by {op}")
    needs = _state["grad"] and any(p.requires_grad for p in parents)
    if needs:
        return Tensor(data, True, tuple(parents), backward, op)
    return Tensor(data, False, (), None, op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / shape ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bw, "mul")


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(src),), "reshape")


def tsum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)
    return _make(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(x.data.mean(dtype=np.float64), dtype=x.dtype)
    return _make(out, (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),), "mean")


def relu(x: Tensor) -> Tensor:
    mask = _positive(x.data)
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    scale = np.where(_positive(x.data), 1.0, slope).astype(x.dtype)
    return _make(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def silu(x: Tensor) -> Tensor:
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    out = x.data * sig

    def bw(g):
        return (g * (sig * (1.0 + x.data * (1.0 - sig))),)

    return _make(out.astype(x.dtype), (x,), bw, "silu")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped ``(out, in)``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: incompatible shapes {x.shape} and {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _make(out, parents, bw, "linear")


def concat_channels(tensors: Iterable[Tensor]) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(f"concat_channels: incompatible shapes {ref} and {t.shape}")
    sizes = np.cumsum([t.shape[1] for t in ts])[:-1]
    out = np.concatenate([t.data for t in ts], axis=1)
    return _make(out, ts, lambda g: tuple(np.split(g, sizes, axis=1)), "concat")


def mse(a: Tensor, b) -> Tensor:
    """Mean of squared differences (mean reduction over all elements)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    out = np.asarray(np.mean(np.square(diff, dtype=np.float64)), dtype=a.dtype)

    def bw(g):
        d = (2.0 / n) * g * diff
        return d, -d

    return _make(out, (a, b), bw, "mse")


# ---------------------------------------------------------------------------
# convolution / resampling
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input and KCkk weights."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    k, cw, kh, kw = weight.shape
    if c != cw:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {cw}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d: kernel extents must be odd")
    if bias is not None and bias.shape != (k,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({k},)")
    s, p = int(stride), int(padding)
    ho = (h + 2 * p - kh) // s + 1
    wo = (w + 2 * p - kw) // s + 1
    if ho < 1 or wo < 1:
        raise ValueError("conv2d: kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]
    # im2col: rows are (c, i, j), columns are output pixels (n, y, x)
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, n * ho * wo)
    wmat = weight.data.reshape(k, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(k, n, ho, wo).transpose(1, 0, 2, 3))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gk = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(k, -1)
        gw = (gk @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ gk).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros((n, c) + xp.shape[2:], dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s] += dcols[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, p : p + h, p : p + w] if p else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(gk.sum(axis=1))
        return grads

    return _make(out, parents, bw, "conv2d")


def nearest_upsample2x(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ValueError("nearest_upsample2x expects NCHW input")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.shape

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), bw, "upsample2x")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def _normalize_backward(g_hat: np.ndarray, xhat: np.ndarray, inv_std: np.ndarray, axes) -> np.ndarray:
    # 64-bit reductions: the three terms nearly cancel
    m1 = g_hat.mean(axis=axes, keepdims=True, dtype=np.float64)
    m2 = (g_hat.astype(np.float64) * xhat).mean(axis=axes, keepdims=True)
    return (inv_std * (g_hat - m1 - xhat * m2)).astype(g_hat.dtype)


class RunningStats:
    """Per-channel running mean/variance buffers for batch norm."""

    def __init__(self, channels: int, momentum: float = 0.1):
        dt = get_default_dtype()
        self.mean = np.zeros(channels, dtype=dt)
        self.var = np.ones(channels, dtype=dt)
        self.momentum = momentum


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running: RunningStats | None = None,
    training: bool = True,
    eps: float = 1e-5,
) -> Tensor:
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ValueError(f"batch_norm2d: bad shapes {x.shape}, {gamma.shape}, {beta.shape}")
    axes = (0, 2, 3)
    if training:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count < 2:
            raise ValueError("batch_norm2d: training mode needs more than one value per channel")
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        if running is not None:
            m = running.momentum
            unbiased = var.reshape(-1) * (count / (count - 1))
            running.mean[:] = (1 - m) * running.mean + m * mu.reshape(-1)
            running.var[:] = (1 - m) * running.var + m * unbiased
    else:
        if running is None:
            raise ValueError("batch_norm2d: eval mode requires running statistics")
        mu = running.mean.reshape(1, -1, 1, 1)
        var = running.var.reshape(1, -1, 1, 1)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu) * inv_std
    g4 = gamma.data.reshape(1, -1, 1, 1)
    out = xhat * g4 + beta.data.reshape(1, -1, 1, 1)

    def bw(g):
        g_hat = g * g4
        if training:
            gx = _normalize_backward(g_hat, xhat, inv_std, axes)
        else:
            gx = g_hat * inv_std
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make(out.astype(x.dtype), (x, gamma, beta), bw, "batch_norm2d")


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    n, c, h, w = x.shape
    if c % groups:
        raise ValueError(f"group_norm: {c} channels not divisible into {groups} groups")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = ((xg - mu) * inv_std).reshape(n, c, h, w)
    g4 = gamma.data.reshape(1, -1, 1, 1)
    out = xhat * g4 + beta.data.reshape(1, -1, 1, 1)

    def bw(g):
        g_hat = (g * g4).reshape(n, groups, -1)
        gx = _normalize_backward(g_hat, xhat.reshape(n, groups, -1), inv_std, 2).reshape(n, c, h, w)
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _make(out.astype(x.dtype), (x, gamma, beta), bw, "group_norm")
