"""Dense float64 tensor with reverse-mode automatic differentiation.

Every operation records its parents and a backward closure on the output
tensor; ``backward()`` on a scalar replays the recorded graph in reverse
topological order. All math is double precision so finite-difference
gradient checks are meaningful to ~1e-7.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .errors import ConfigError, DimensionError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (detached evaluation)."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_backward_ran")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None
        self._backward_ran = False

    # ------------------------------------------------------------------
    # basics
    # ------------------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() requires a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def assert_finite(self, name: str = "tensor"):
        if not np.all(np.isfinite(self.data)):
            raise ConfigError(f"{name} contains non-finite values")
        return self

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------------
    # graph machinery
    # ------------------------------------------------------------------

    def backward(self):
        """Populate ``grad`` on every requires_grad ancestor of this scalar."""
        if self.data.size != 1:
            raise DimensionError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ConfigError("backward on a detached tensor: no computation was recorded")
        if self._backward_ran:
            raise ConfigError("backward already ran for this tensor; rebuild the graph first")
        self._backward_ran = True

        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # ------------------------------------------------------------------
    # elementwise arithmetic (broadcasting, gradients reduced to match)
    # ------------------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        out = _make(self.data + other.data, (self, other))

        def backward(g):
            _accum(self, _unbroadcast(g, self.data.shape))
            _accum(other, _unbroadcast(g, other.data.shape))

        return _attach(out, backward)

    __radd__ = __add__

    def __mul__(self, other):
        other = _as_tensor(other)
        out = _make(self.data * other.data, (self, other))

        def backward(g):
            _accum(self, _unbroadcast(g * other.data, self.data.shape))
            _accum(other, _unbroadcast(g * self.data, other.data.shape))

        return _attach(out, backward)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __rsub__(self, other):
        return _as_tensor(other) + (-self)

    def __truediv__(self, other):
        other = _as_tensor(other)
        out = _make(self.data / other.data, (self, other))

        def backward(g):
            _accum(self, _unbroadcast(g / other.data, self.data.shape))
            _accum(other, _unbroadcast(-g * self.data / (other.data ** 2), other.data.shape))

        return _attach(out, backward)

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise DimensionError("pow supports scalar exponents only")
        out = _make(self.data ** exponent, (self,))

        def backward(g):
            _accum(self, g * exponent * self.data ** (exponent - 1))

        return _attach(out, backward)

    def sqrt(self):
        return self ** 0.5

    # ------------------------------------------------------------------
    # reductions and shape ops
    # ------------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = _make(np.sum(self.data, axis=axis, keepdims=keepdims), (self,))

        def backward(g):
            _accum(self, _expand_reduced(g, self.data.shape, axis, keepdims))

        return _attach(out, backward)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else _axis_count(self.data.shape, axis)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def max(self, axis=None, keepdims: bool = False):
        data = np.max(self.data, axis=axis, keepdims=keepdims)
        out = _make(data, (self,))
        mask_ref = np.equal(self.data, _expand_reduced(data, self.data.shape, axis, keepdims))
        # ties split the gradient evenly; max is used for stability shifts
        counts = _expand_reduced(
            np.sum(mask_ref, axis=axis, keepdims=keepdims), self.data.shape, axis, keepdims
        )

        def backward(g):
            _accum(self, _expand_reduced(g, self.data.shape, axis, keepdims) * mask_ref / counts)

        return _attach(out, backward)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = _make(self.data.reshape(shape), (self,))
        src_shape = self.data.shape

        def backward(g):
            _accum(self, g.reshape(src_shape))

        return _attach(out, backward)

    def transpose(self, axes):
        axes = tuple(axes)
        inverse = tuple(np.argsort(axes))
        out = _make(np.transpose(self.data, axes), (self,))

        def backward(g):
            _accum(self, np.transpose(g, inverse))

        return _attach(out, backward)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.data.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(axes)

    def __getitem__(self, index):
        out = _make(self.data[index], (self,))
        src_shape = self.data.shape
        parts = index if isinstance(index, tuple) else (index,)
        advanced = any(isinstance(p, np.ndarray) or isinstance(p, (list,))
                       for p in parts)

        def backward(g):
            full = np.zeros(src_shape)
            if advanced:
                np.add.at(full, index, g)  # repeated indices accumulate
            else:
                full[index] += g
            _accum(self, full)

        return _attach(out, backward)

    def pad2d(self, padding: int):
        """Zero-pad the two trailing spatial axes symmetrically."""
        if padding == 0:
            return self
        spec = [(0, 0)] * (self.data.ndim - 2) + [(padding, padding)] * 2
        out = _make(np.pad(self.data, spec), (self,))

        def backward(g):
            sl = tuple(
                slice(None) for _ in range(self.data.ndim - 2)
            ) + (slice(padding, -padding), slice(padding, -padding))
            _accum(self, g[sl])

        return _attach(out, backward)

    def clip(self, low: float, high: float):
        out = _make(np.clip(self.data, low, high), (self,))
        interior = (self.data > low) & (self.data < high)

        def backward(g):
            _accum(self, g * interior)

        return _attach(out, backward)

    # ------------------------------------------------------------------
    # transcendental / activation
    # ------------------------------------------------------------------

    def exp(self):
        data = np.exp(self.data)
        out = _make(data, (self,))

        def backward(g):
            _accum(self, g * data)

        return _attach(out, backward)

    def log(self):
        out = _make(np.log(self.data), (self,))

        def backward(g):
            _accum(self, g / self.data)

        return _attach(out, backward)

    def tanh(self):
        data = np.tanh(self.data)
        out = _make(data, (self,))

        def backward(g):
            _accum(self, g * (1.0 - data ** 2))

        return _attach(out, backward)

    def sigmoid(self):
        data = np.empty_like(self.data)
        pos = self.data >= 0
        data[pos] = 1.0 / (1.0 + np.exp(-self.data[pos]))
        ez = np.exp(self.data[~pos])
        data[~pos] = ez / (1.0 + ez)
        out = _make(data, (self,))

        def backward(g):
            _accum(self, g * data * (1.0 - data))

        return _attach(out, backward)

    # ------------------------------------------------------------------
    # linear algebra
    # ------------------------------------------------------------------

    def matmul(self, other):
        other = _as_tensor(other)
        a, b = self.data, other.data
        if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
            raise DimensionError(
                f"matmul inner axes differ: {a.shape} vs {b.shape}"
            )
        out = _make(np.matmul(a, b), (self, other))

        def backward(g):
            if b.ndim == 1:
                ga = np.multiply.outer(g, b) if a.ndim > 1 else np.outer(g, b)
                gb = np.tensordot(g, a, axes=(range(g.ndim), range(a.ndim - 1)))
                if a.ndim == 1:
                    ga = g * b
                    gb = g * a
                _accum(self, _unbroadcast(ga, a.shape))
                _accum(other, _unbroadcast(gb, b.shape))
                return
            ga = np.matmul(g, np.swapaxes(b, -1, -2))
            gb = np.matmul(np.swapaxes(a, -1, -2), g)
            _accum(self, _unbroadcast(ga, a.shape))
            _accum(other, _unbroadcast(gb, b.shape))

        return _attach(out, backward)

    def __matmul__(self, other):
        return self.matmul(other)


# ----------------------------------------------------------------------
# construction helpers
# ----------------------------------------------------------------------


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
    return out


def _attach(out: Tensor, backward) -> Tensor:
    if out.requires_grad and out._parents:
        out._backward_fn = backward
    return out


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)  # owned copy, correct shape
    else:
        t.grad += g


def _topo_order(root: Tensor):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _expand_reduced(g, shape, axis, keepdims):
    """Broadcast a reduced gradient back to the pre-reduction shape."""
    g = np.asarray(g)
    if axis is None:
        return np.broadcast_to(g, shape).copy() if g.shape != tuple(shape) else g
    axes = axis if isinstance(axis, tuple) else (axis,)
    if not keepdims:
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def _axis_count(shape, axis) -> int:
    axes = axis if isinstance(axis, tuple) else (axis,)
    n = 1
    for ax in axes:
        n *= shape[ax]
    return n


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _attach(out, backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors))

    def backward(g):
        for i, t in enumerate(tensors):
            _accum(t, np.take(g, i, axis=axis))

    return _attach(out, backward)


def where(condition: np.ndarray, a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    cond = np.asarray(condition, dtype=bool)
    out = _make(np.where(cond, a.data, b.data), (a, b))

    def backward(g):
        _accum(a, _unbroadcast(g * cond, a.data.shape))
        _accum(b, _unbroadcast(g * ~cond, b.data.shape))

    return _attach(out, backward)


# ----------------------------------------------------------------------
# neural-network primitives
# ----------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted exponent normalization along ``axis``."""
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    ex = np.exp(shifted)
    probs = ex / np.sum(ex, axis=axis, keepdims=True)
    out = _make(probs, (x,))

    def backward(g):
        dot = np.sum(g * probs, axis=axis, keepdims=True)
        _accum(x, probs * (g - dot))

    return _attach(out, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = _make(x.data * mask, (x,))

    def backward(g):
        _accum(x, g * mask)

    return _attach(out, backward)


def prelu(x: Tensor, alpha: Tensor, channel_axis: int = 1) -> Tensor:
    """Parametric ReLU with one slope per channel along ``channel_axis``."""
    alpha = _as_tensor(alpha)
    if alpha.data.ndim != 1:
        raise DimensionError("prelu slope must be a vector (one value per channel)")
    axis = channel_axis % x.data.ndim
    if alpha.data.shape[0] not in (1, x.data.shape[axis]):
        raise DimensionError(
            f"prelu slope length {alpha.data.shape[0]} does not match axis {axis} "
            f"of input shape {x.shape}"
        )
    bshape = [1] * x.data.ndim
    bshape[axis] = alpha.data.shape[0]
    a = alpha.data.reshape(bshape)
    neg = x.data <= 0
    out = _make(np.where(neg, a * x.data, x.data), (x, alpha))

    def backward(g):
        _accum(x, g * np.where(neg, np.broadcast_to(a, x.data.shape), 1.0))
        reduce_axes = tuple(i for i in range(x.data.ndim) if i != axis)
        ga = np.sum(g * x.data * neg, axis=reduce_axes)
        if alpha.data.shape[0] == 1:
            ga = np.array([ga.sum()]) if np.ndim(ga) else ga.reshape(1)
        _accum(alpha, ga.reshape(alpha.data.shape))

    return _attach(out, backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight.T + bias with weight shaped (out_features, in_features)."""
    if x.data.shape[-1] != weight.data.shape[1]:
        raise DimensionError(
            f"linear: input features {x.data.shape[-1]} != weight in-features "
            f"{weight.data.shape[1]}"
        )
    out = x.matmul(weight.swapaxes(0, 1))
    if bias is not None:
        out = out + bias
    return out


def dropout(x: Tensor, p: float, train: bool, rng=None) -> Tensor:
    """Inverted dropout; identity when ``train`` is False or p == 0."""
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in train mode requires an rng stream")
    mask = (rng.random(x.data.shape) >= p) / (1.0 - p)
    out = _make(x.data * mask, (x,))

    def backward(g):
        _accum(x, g * mask)

    return _attach(out, backward)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW (or CHW) input with OIHW kernels."""
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError(
            f"conv2d expects (N,C,H,W) input and (O,I,kH,kW) kernel, got "
            f"{x.shape} and {kernel.shape}"
        )
    n, c, h, w = xd.shape
    co, ci, kh, kw = kernel.data.shape
    if ci != c:
        raise DimensionError(f"conv2d channel mismatch: input C={c}, kernel I={ci}")
    if stride < 1:
        raise DimensionError("conv2d stride must be >= 1")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(
            f"conv2d kernel ({kh}x{kw}) exceeds padded input ({hp}x{wp})"
        )
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]          # (N,C,Ho,Wo,kh,kw)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = kernel.data.reshape(co, -1)
    res = cols @ wmat.T
    res = res.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    if bias is not None:
        if bias.data.shape != (co,):
            raise DimensionError(f"conv2d bias shape {bias.shape} != ({co},)")
        res = res + bias.data.reshape(1, co, 1, 1)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    out = _make(res[0] if squeeze else res, parents)

    def backward(g):
        gd = g[None] if squeeze else g
        # one permute of the output gradient feeds both GEMMs
        gt = np.ascontiguousarray(gd.transpose(1, 0, 2, 3)).reshape(co, -1)
        _accum(kernel, (gt @ cols).reshape(kernel.data.shape))
        if bias is not None:
            _accum(bias, gt.sum(axis=1))
        # (C*kh*kw, N*Ho*Wo): kernel-offset slices come out contiguous
        gcols = (wmat.T @ gt).reshape(c, kh, kw, n, ho, wo)
        gxp = np.zeros((c, n, hp, wp))
        for ki in range(kh):
            for kj in range(kw):
                gxp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += \
                    gcols[:, ki, kj]
        if padding:
            gxp = gxp[:, :, padding:-padding, padding:-padding]
        gx = gxp.transpose(1, 0, 2, 3)
        _accum(x, gx[0] if squeeze else gx)

    return _attach(out, backward)


def max_pool2d(x: Tensor, kernel: int = 2, stride: int | None = None) -> Tensor:
    """Spatial max pooling; gradient at ties goes to the first (row-major) max."""
    stride = kernel if stride is None else stride
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    n, c, h, w = xd.shape
    if kernel > h or kernel > w:
        raise DimensionError(f"max_pool2d kernel {kernel} exceeds spatial ({h}x{w})")
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1

    windows = np.lib.stride_tricks.sliding_window_view(xd, (kernel, kernel), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride].reshape(n, c, ho, wo, kernel * kernel)
    arg = np.argmax(windows, axis=-1)                     # first max, row-major
    res = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
    out = _make(res[0] if squeeze else res, (x,))

    tiled = stride == kernel and h == ho * kernel and w == wo * kernel

    def backward(g):
        gd = g[None] if squeeze else g
        if tiled:
            gw = np.zeros((n, c, ho, wo, kernel * kernel))
            np.put_along_axis(gw, arg[..., None], gd[..., None], axis=-1)
            gx = gw.reshape(n, c, ho, wo, kernel, kernel) \
                .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        else:
            gx = np.zeros_like(xd)
            ni, ci_, hi, wi = np.ogrid[:n, :c, :ho, :wo]
            rows = hi * stride + arg // kernel
            cols_ = wi * stride + arg % kernel
            np.add.at(gx, (np.broadcast_to(ni, arg.shape),
                           np.broadcast_to(ci_, arg.shape), rows, cols_), gd)
        _accum(x, gx[0] if squeeze else gx)

    return _attach(out, backward)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float,
               mean: np.ndarray | None = None,
               var: np.ndarray | None = None) -> Tensor:
    """Channel normalization over (N, H, W) with a closed-form backward.

    Batch statistics are used when ``mean``/``var`` are omitted; passing
    stored statistics gives the eval-mode affine map.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"batch_norm expects (N,C,H,W), got {x.shape}")
    axes = (0, 2, 3)
    shape = (1, x.data.shape[1], 1, 1)
    from_batch = mean is None
    if from_batch:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(shape)) * inv.reshape(shape)
    out = _make(xhat * gamma.data.reshape(shape) + beta.data.reshape(shape),
                (x, gamma, beta))
    m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        _accum(beta, g.sum(axis=axes))
        _accum(gamma, dgamma)
        scale = (gamma.data * inv).reshape(shape)
        if from_batch:
            gx = scale * (g - (g.mean(axis=axes).reshape(shape)
                               + xhat * (dgamma / m).reshape(shape)))
        else:
            gx = scale * g
        _accum(x, gx)

    return _attach(out, backward)
