"""Dense tensors with reverse-mode differentiation.

Every op takes :class:`Tensor` inputs, computes its result with numpy and, when
any input requires a gradient, records a local backward rule. ``backward``
walks the recorded graph in reverse topological order and accumulates
gradients additively, so fan-out is handled by the sum rule.

Broadcasting is deliberately limited to ``add_bias`` and ``scale``; every
other binary op requires identical shapes.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True
_sabotaged: set[str] = set()


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up where finite values are required."""


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def sabotage(*ops: str):
    """Negate the backward rule of the named ops. Test-only negative control."""
    added = [op for op in ops if op not in _sabotaged]
    _sabotaged.update(added)
    try:
        yield
    finally:
        _sabotaged.difference_update(added)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not self.is_finite():
            bad = int((~np.isfinite(self.data)).sum())
            raise NonFiniteError(f"{what}: {bad} non-finite value(s) in shape {self.shape}")
        return self

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other) if self.ndim == 2 and other.ndim == 2 else bmm(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        return permute(self, axes)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], rule: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = rule
        out.op = op
    return out


# ----------------------------------------------------------------------
# Graph and backward
# ----------------------------------------------------------------------
class Graph:
    """Operations reachable from an output, in topological (execution) order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
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
        return cls(order)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if not n._parents]

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is detached from every leaf that requires a gradient")
    graph = graph or Graph.trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        if node.op in _sabotaged:
            parent_grads = tuple(None if pg is None else -pg for pg in parent_grads)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between the analytic gradient of ``f`` at ``x`` and
    central differences.

    ``f`` must return a scalar tensor and be deterministic.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    xv = Tensor(x.data.copy(), requires_grad=True)
    out = f(xv)
    if not out.is_finite():
        raise NonFiniteError("f(x) is not finite")
    backward(out)
    analytic = np.zeros_like(xv.data) if xv.grad is None else xv.grad
    numeric = np.empty_like(xv.data)
    flat = xv.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(Tensor(xv.data.copy())).item()
            flat[i] = orig - step
            fm = f(Tensor(xv.data.copy())).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError("f(x) is not finite near x")
            nflat[i] = (fp - fm) / (2.0 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom))


# ----------------------------------------------------------------------
# Elementwise
# ----------------------------------------------------------------------
def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def add_bias(x: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """x + b with the 1-D ``b`` broadcast along ``axis`` of ``x``."""
    axis = axis % x.ndim
    if b.ndim != 1 or b.shape[0] != x.shape[axis]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = -1
    others = tuple(i for i in range(x.ndim) if i != axis)
    return _make(x.data + b.data.reshape(view), (x, b), lambda g: (g, g.sum(axis=others)), "add_bias")


def add_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Add a constant (non-differentiable) array of identical shape."""
    if c.shape != x.shape:
        raise ShapeError(f"add_const: shape mismatch {x.shape} vs {c.shape}")
    return _make(x.data + c.astype(x.dtype, copy=False), (x,), lambda g: (g,), "add_const")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    v = x.data
    s = _sigmoid(v)
    return _make(v * s, (x,), lambda g: (g * (s * (1 + v * (1 - s))),), "silu")


def softplus(x: Tensor) -> Tensor:
    v = x.data
    y = np.log1p(np.exp(-np.abs(v))) + np.maximum(v, 0)
    return _make(y, (x,), lambda g: (g * _sigmoid(v),), "softplus")


def relu(x: Tensor) -> Tensor:
    v = x.data
    mask = v > 0
    return _make(np.where(mask, v, 0).astype(v.dtype), (x,), lambda g: (g * mask,), "relu")


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    v2 = v * v
    inner = _GELU_C * (v + 0.044715 * v2 * v)
    t = np.tanh(inner)
    y = 0.5 * v * (1 + t)

    def rule(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * v2)
        return (g * (0.5 * (1 + t) + 0.5 * v * (1 - t * t) * dinner),)

    return _make(y.astype(v.dtype), (x,), rule, "gelu")


def smooth_l1(x: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise Huber-style penalty on ``x``."""
    v = x.data
    small = np.abs(v) < beta
    y = np.where(small, 0.5 * v * v / beta, np.abs(v) - 0.5 * beta).astype(v.dtype)
    return _make(y, (x,), lambda g: (g * np.where(small, v / beta, np.sign(v)),), "smooth_l1")


# ----------------------------------------------------------------------
# Reductions
# ----------------------------------------------------------------------
def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                 lambda g: (np.full(shape, g, dtype=x.dtype),), "sum")


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _make(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                 lambda g: (np.full(shape, g / n, dtype=x.dtype),), "mean")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    v = x.data
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), rule, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the per-channel affine map."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm: expected affine params of shape ({c},), got {gamma.shape}, {beta.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def rule(g):
        gg = (g * xhat).sum(axis=lead)
        gb = g.sum(axis=lead)
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make(y.astype(v.dtype, copy=False), (x, gamma, beta), rule, "layer_norm")


# ----------------------------------------------------------------------
# Linear algebra
# ----------------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects rank-2 operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over identical leading axes: [..., m, k] @ [..., k, n]."""
    if a.ndim < 3 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"bmm: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(np.matmul(ad, bd), (a, b),
                 lambda g: (np.matmul(g, np.swapaxes(bd, -1, -2)), np.matmul(np.swapaxes(ad, -1, -2), g)),
                 "bmm")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Apply ``x @ weight (+ bias)`` over the last axis of ``x``; weight is [Cin, Cout]."""
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), weight)
    if bias is not None:
        y = add_bias(y, bias, axis=-1)
    return reshape(y, lead + (weight.shape[1],))


# ----------------------------------------------------------------------
# Shape manipulation
# ----------------------------------------------------------------------
def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    y = x.data.reshape(tuple(shape))
    return _make(y, (x,), lambda g: (g.reshape(old),), "reshape")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),), "permute")


def flip(x: Tensor, axis: int) -> Tensor:
    return _make(np.ascontiguousarray(np.flip(x.data, axis)), (x,),
                 lambda g: (np.ascontiguousarray(np.flip(g, axis)),), "flip")


def roll(x: Tensor, shift: int | tuple[int, ...], axis: int | tuple[int, ...]) -> Tensor:
    if isinstance(shift, int):
        shift, axis = (shift,), (axis,)
    back = tuple(-s for s in shift)
    return _make(np.roll(x.data, shift, axis), (x,), lambda g: (np.roll(g, back, axis),), "roll")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    axis = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != axis
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def rule(g):
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            out.append(np.ascontiguousarray(g[tuple(idx)]))
        return tuple(out)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), rule, "concat")


def getitem(x: Tensor, idx) -> Tensor:
    """Basic (slice/int) indexing; the backward scatters into zeros."""
    shape, dtype = x.shape, x.dtype

    def rule(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _make(np.ascontiguousarray(x.data[idx]), (x,), rule, "slice")


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    return getitem(x, tuple(idx))


def pad(x: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` holds one (before, after) pair per axis."""
    widths = tuple(tuple(w) for w in widths)
    if len(widths) != x.ndim or any(w < 0 for pair in widths for w in pair):
        raise ShapeError(f"pad: bad widths {widths} for shape {x.shape}")
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, x.shape))
    return _make(np.pad(x.data, widths), (x,), lambda g: (np.ascontiguousarray(g[crop]),), "pad")


# ----------------------------------------------------------------------
# Convolution, pooling, resampling (FeatureMap layout B, C, H, W)
# ----------------------------------------------------------------------
def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d expects a [B,C,H,W] input and [Cout,Cin,kh,kw] weight")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    b, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if cin != wcin:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    wd = weight.data
    # win: [B, Cin, Ho, Wo, kh, kw]
    y = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    y = np.ascontiguousarray(y)
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
        y += bias.data.reshape(1, -1, 1, 1)
        parents = (x, weight, bias)

    def rule(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # [Cout, Cin, kh, kw]
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g, wd[:, :, i, j], axes=([1], [0]))  # [B, Ho, Wo, Cin]
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib.transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        grads = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(y, parents, rule, "conv2d")


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 1) -> Tensor:
    """Per-channel convolution, stride 1; weight is [C, kh, kw]."""
    b, c, h, w = x.shape
    wc, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(f"depthwise_conv2d: input has {c} channels, weight expects {wc}")
    ho, wo = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError("depthwise_conv2d: kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    wd = weight.data
    y = np.zeros((b, c, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            y += xp[:, :, i:i + ho, j:j + wo] * wd[None, :, i, j, None, None]
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        y += bias.data.reshape(1, -1, 1, 1)
        parents = (x, weight, bias)

    def rule(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wd)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + ho, j:j + wo] += g * wd[None, :, i, j, None, None]
                gw[:, i, j] = (g * xp[:, :, i:i + ho, j:j + wo]).sum(axis=(0, 2, 3))
        grads = [np.ascontiguousarray(gxp[:, :, padding:padding + h, padding:padding + w]), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(y, parents, rule, "depthwise_conv2d")


def avg_pool2x2(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2x2 needs even spatial extents, got {h}x{w}")
    y = x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def rule(g):
        return (np.repeat(np.repeat(g * 0.25, 2, axis=2), 2, axis=3).astype(x.dtype, copy=False),)

    return _make(y, (x,), rule, "avg_pool2x2")


def upsample_nearest2x(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    y = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _make(y, (x,), lambda g: (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),), "upsample_nearest2x")


def _bilinear_matrix(n: int, dtype) -> np.ndarray:
    """[2n, n] interpolation matrix, half-pixel centers (align_corners=False)."""
    m = np.zeros((2 * n, n), dtype=dtype)
    for dst in range(2 * n):
        src = max((dst + 0.5) / 2.0 - 0.5, 0.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n - 1)
        frac = src - i0
        m[dst, i0] += 1.0 - frac
        m[dst, i1] += frac
    return m


def upsample_bilinear2x(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    mh = _bilinear_matrix(h, x.dtype)
    mw = _bilinear_matrix(w, x.dtype)
    y = np.matmul(mh, np.matmul(x.data, mw.T))

    def rule(g):
        return (np.matmul(mh.T, np.matmul(g, mw)),)

    return _make(y, (x,), rule, "upsample_bilinear2x")


# ----------------------------------------------------------------------
# Convenience constructors
# ----------------------------------------------------------------------
def zeros(shape: Iterable[int], dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=dtype), requires_grad=requires_grad)


def ones(shape: Iterable[int], dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(tuple(shape), dtype=dtype), requires_grad=requires_grad)
