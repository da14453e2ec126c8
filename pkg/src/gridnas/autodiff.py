"""Reverse-mode automatic differentiation on dense float64 numpy arrays.

A :class:`Tensor` wraps an ``np.float64`` array and, while gradients are
enabled, records the operation that produced it.  ``backward(loss)`` walks
the recorded graph once in reverse topological order and accumulates
gradients into every reachable tensor that has ``requires_grad`` set.
Repeated backward calls accumulate; callers reset ``.grad`` explicitly
between optimizer steps.

Everything is CPU numpy and deterministic: the same seed and inputs give
bitwise-identical values and gradients run to run.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation / rollouts)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Dense n-dimensional float64 value participating in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._bwd = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, bwd) -> Tensor:
    """Create an op output, recording the graph edge when grads are live."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._bwd = bwd
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0.0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 1.0 / (1.0 + np.exp(-x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes through inside the bounds."""
    x = as_tensor(x)
    mask = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data
    return _make(
        np.minimum(a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)),
    )


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data >= b.data
    return _make(
        np.maximum(a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)),
    )


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


# -- reductions and shape ------------------------------------------------------


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).copy(),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), bwd)


def tmean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, x.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, x.shape).copy(),)

    return _make(x.data.mean(axis=axis, keepdims=keepdims), (x,), bwd)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def take_row(x, row: int) -> Tensor:
    """Select one row of a 2-D tensor; gradient scatters back to that row."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"take_row expects a 2-D tensor, got {x.shape}")

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[row] = g
        return (gx,)

    return _make(x.data[row].copy(), (x,), bwd)


def index_select_last(x, idx) -> Tensor:
    """Pick one entry per row of a [N, A] tensor; returns shape [N]."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(f"index_select_last: got {x.shape} and index shape {idx.shape}")
    rows = np.arange(x.shape[0])

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[rows, idx] = g
        return (gx,)

    return _make(x.data[rows, idx].copy(), (x,), bwd)


# -- linear algebra ------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1 and b.ndim == 2:
        a2 = a.data[None, :]
        out = a2 @ b.data
        return _make(out[0], (a, b), lambda g: ((g[None, :] @ b.data.T)[0], a2.T @ g[None, :]))
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul supports 2-D (or 1-D lhs) operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x, weight, bias) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for x of shape [n] or [N, n]."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.ndim != 2 or bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: weight {weight.shape} / bias {bias.shape}")
    single = x.ndim == 1
    x2 = x.data[None, :] if single else x.data
    if x2.ndim != 2 or x2.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    out = x2 @ weight.data.T + bias.data

    def bwd(g):
        g2 = g[None, :] if single else g
        gx = g2 @ weight.data
        return (gx[0] if single else gx, g2.T @ x2, g2.sum(axis=0))

    return _make(out[0] if single else out, (x, weight, bias), bwd)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lsm = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    sm = np.exp(lsm)

    def bwd(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(lsm, (x,), bwd)


# -- spatial ops ---------------------------------------------------------------


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def same_size_dims(size: int, k: int, stride: int) -> tuple[int, int, int]:
    """Output size and (low, high) zero padding for same_size mode."""
    out = _ceil_div(size, stride)
    total = max((out - 1) * stride + k - size, 0)
    lo = total // 2
    return out, lo, total - lo


def _check_spatial_args(stride, k):
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise ContractError(f"stride must be a positive integer, got {stride!r}")
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise ContractError(f"kernel size must be a positive integer, got {k!r}")


def _window_view(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, (n, c, oh, ow, k, k), (sn, sc, sh * stride, sw * stride, sh, sw)
    )


def conv2d(x, weight, stride: int = 1, pad_mode: str = "same_size") -> Tensor:
    """2-D convolution (cross-correlation) over [C,H,W] or [N,C,H,W] input.

    same_size mode zero-pads symmetrically (extra cell bottom/right) so the
    output spatial dims are ceil(input / stride).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    single = x.ndim == 3
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be [C_out,C_in,k,k], got {weight.shape}")
    c_out, c_in, k, k2 = weight.shape
    if k != k2:
        raise ShapeError(f"conv2d kernels must be square, got {weight.shape}")
    _check_spatial_args(stride, k)
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or xd.shape[1] != c_in:
        raise ShapeError(f"conv2d input {x.shape} does not match weight {weight.shape}")
    n, _, h, w = xd.shape

    if pad_mode == "same_size":
        oh, pt, pb = same_size_dims(h, k, stride)
        ow, pl, pr = same_size_dims(w, k, stride)
    elif pad_mode == "valid":
        if k > h or k > w:
            raise ShapeError(f"valid conv2d: kernel {k} exceeds input {h}x{w}")
        oh, ow = (h - k) // stride + 1, (w - k) // stride + 1
        pt = pb = pl = pr = 0
    else:
        raise ContractError(f"unknown pad_mode {pad_mode!r}")

    xp = np.pad(xd, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    cols = (
        _window_view(xp, k, stride, oh, ow)
        .transpose(0, 2, 3, 1, 4, 5)
        .reshape(n * oh * ow, c_in * k * k)
    )
    w_mat = weight.data.reshape(c_out, c_in * k * k)
    out = (cols @ w_mat.T).reshape(n, oh, ow, c_out).transpose(0, 3, 1, 2)

    def bwd(g):
        g_mat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, c_out)
        g_w = (g_mat.T @ cols).reshape(weight.shape)
        g_cols = (g_mat @ w_mat).reshape(n, oh, ow, c_in, k, k).transpose(0, 3, 4, 5, 1, 2)
        g_xp = np.zeros_like(xp)
        for ki in range(k):
            for kj in range(k):
                g_xp[:, :, ki : ki + (oh - 1) * stride + 1 : stride,
                     kj : kj + (ow - 1) * stride + 1 : stride] += g_cols[:, :, ki, kj]
        g_x = g_xp[:, :, pt : pt + h, pl : pl + w]
        return (g_x[0] if single else g_x, g_w)

    return _make(np.ascontiguousarray(out[0] if single else out), (x, weight), bwd)


def maxpool2d(x, k: int, stride: int, pad_mode: str = "same_size") -> Tensor:
    """Max pooling; the gradient flows only to each window's argmax.

    Ties break toward the lowest flat input index (row-major scan order).
    """
    x = as_tensor(x)
    _check_spatial_args(stride, k)
    if pad_mode != "same_size":
        raise ContractError(f"maxpool2d supports pad_mode='same_size', got {pad_mode!r}")
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4:
        raise ShapeError(f"maxpool2d input must be [C,H,W] or [N,C,H,W], got {x.shape}")
    n, c, h, w = xd.shape
    oh, pt, pb = same_size_dims(h, k, stride)
    ow, pl, pr = same_size_dims(w, k, stride)
    xp = np.pad(xd, ((0, 0), (0, 0), (pt, pb), (pl, pr)), constant_values=-np.inf)
    windows = _window_view(xp, k, stride, oh, ow).reshape(n, c, oh, ow, k * k)
    amax = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, amax[..., None], axis=-1)[..., 0]

    def bwd(g):
        g_xp = np.zeros(xp.shape)
        ni, ci, ohi, owi = np.indices((n, c, oh, ow))
        hi = ohi * stride + amax // k
        wi = owi * stride + amax % k
        np.add.at(g_xp, (ni, ci, hi, wi), g)
        g_x = g_xp[:, :, pt : pt + h, pl : pl + w]
        return (g_x[0] if single else g_x,)

    return _make(out[0] if single else out, (x,), bwd)


def add_channel_bias(x, bias) -> Tensor:
    """Add a per-channel bias to a [C,H,W] or [N,C,H,W] feature map."""
    x, bias = as_tensor(x), as_tensor(bias)
    single = x.ndim == 3
    c_axis = 0 if single else 1
    if bias.ndim != 1 or x.shape[c_axis] != bias.shape[0]:
        raise ShapeError(f"channel bias {bias.shape} does not match input {x.shape}")
    shape = (-1, 1, 1) if single else (1, -1, 1, 1)

    def bwd(g):
        axes = (1, 2) if single else (0, 2, 3)
        return (g, g.sum(axis=axes))

    return _make(x.data + bias.data.reshape(shape), (x, bias), bwd)


def center_fit2d(x, target: int) -> Tensor:
    """Center zero-pad (or center-crop when larger) spatial dims to target x target."""
    x = as_tensor(x)
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4:
        raise ShapeError(f"center_fit2d input must be [C,H,W] or [N,C,H,W], got {x.shape}")
    n, c, h, w = xd.shape
    t = int(target)

    def span(size):
        if size <= t:
            lo = (t - size) // 2
            return slice(lo, lo + size), slice(0, size)
        lo = (size - t) // 2
        return slice(0, t), slice(lo, lo + t)

    dst_h, src_h = span(h)
    dst_w, src_w = span(w)
    out = np.zeros((n, c, t, t))
    out[:, :, dst_h, dst_w] = xd[:, :, src_h, src_w]

    def bwd(g):
        g4 = g[None] if single else g
        gx = np.zeros_like(xd)
        gx[:, :, src_h, src_w] = g4[:, :, dst_h, dst_w]
        return (gx[0] if single else gx,)

    return _make(out[0] if single else out, (x,), bwd)


# -- categorical distribution ---------------------------------------------------


class Categorical:
    """Action distribution over the last axis of a logits tensor.

    Sampling draws through a caller-provided ``np.random.Generator``;
    ``log_prob`` and ``entropy`` stay on the gradient tape.
    """

    def __init__(self, logits):
        logits = as_tensor(logits)
        if logits.ndim not in (1, 2) or logits.shape[-1] < 1:
            raise ShapeError(f"categorical logits must be [A] or [N,A], got {logits.shape}")
        if not np.isfinite(logits.data).all():
            raise NumericError("categorical logits must be finite")
        self.logits = logits
        self.log_probs = log_softmax(logits, axis=-1)

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs.data)

    def sample(self, rng: np.random.Generator):
        p = self.probs
        if p.ndim == 1:
            cdf = np.cumsum(p)
            cdf[-1] = 1.0
            return int(np.argmax(rng.random() < cdf))
        cdf = np.cumsum(p, axis=-1)
        cdf[:, -1] = 1.0
        return (rng.random(p.shape[0])[:, None] < cdf).argmax(axis=-1)

    def log_prob(self, action) -> Tensor:
        if self.log_probs.ndim == 1:
            a = int(action)
            if not 0 <= a < self.log_probs.shape[0]:
                raise ContractError(f"action {a} out of range")
            return index_select_last(reshape(self.log_probs, (1, -1)), [a]).sum()
        return index_select_last(self.log_probs, action)

    def entropy(self) -> Tensor:
        p_logp = mul(exp(self.log_probs), self.log_probs)
        return -tsum(p_logp, axis=-1)


# -- the backward pass -----------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor reachable from a scalar loss."""
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any tensor requiring gradients")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._bwd is None:
            continue
        for parent, pg in zip(node._parents, node._bwd(g)):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in flowing:
                flowing[pid] = flowing[pid] + pg
            else:
                flowing[pid] = pg


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Scale a gradient dict so its global L2 norm is at most max_norm."""
    norm = global_grad_norm(grads)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}
    return grads
