"""Dense NCHW tensors with reverse-mode automatic differentiation.

The op set is deliberately small: it is the closure needed by the dense
probes and their training losses, nothing more.  Every op is a module-level
function that takes and returns :class:`Tensor`.  Results record their
parents and a backward closure, so the computation graph is implicit in the
tensor links; :func:`backward` linearizes it once (topological order) and
walks it in reverse, accumulating gradients by summation.

Conventions
    * Image-like data is NCHW.  Reductions return 0-d tensors.
    * Storage defaults to float32.  Gradient checking runs the same graph
      at float64 (build the leaves with ``dtype=np.float64``).
    * Elementwise binary ops accept equal shapes or a scalar on one side;
      anything else raises :class:`~p3d.errors.ShapeError` naming both
      shapes.  There is no general broadcasting.
    * Forward results are checked finite (disable via ``FINITE_CHECKS``
      for throughput; the desk-scale default keeps it on).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NumericError, ShapeError

__all__ = [
    "Tensor",
    "Graph",
    "tensor",
    "constant",
    "astensor",
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "relu",
    "softplus",
    "log",
    "absolute",
    "acos",
    "softmax_channels",
    "l2normalize_channels",
    "channel_slice",
    "channel_dot",
    "reduce_sum",
    "reduce_mean",
    "hdiff",
    "vdiff",
    "subsample2",
    "conv2d",
    "bilinear_upsample",
    "backward",
    "grad_check",
]

# Toggle for the per-op finiteness guard on forward results.
FINITE_CHECKS = True

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A dense array plus the bookkeeping for reverse-mode autodiff.

    ``values`` is the forward result (never mutated by ops), ``grad`` is
    filled by :func:`backward` for tensors with ``requires_grad``.  Non-leaf
    tensors carry the op name, their parent tensors, and a closure mapping
    the output gradient to per-parent gradients.
    """

    __slots__ = ("values", "requires_grad", "grad", "name", "_op", "_parents", "_backward")

    def __init__(
        self,
        values: np.ndarray,
        requires_grad: bool = False,
        op: str = "leaf",
        parents: tuple["Tensor", ...] = (),
        backward_fn: Callable[[np.ndarray], tuple] | None = None,
        name: str = "",
    ):
        values = np.asarray(values)
        if values.dtype not in _FLOAT_DTYPES:
            values = values.astype(np.float32)
        if FINITE_CHECKS and not np.all(np.isfinite(values)):
            raise NumericError(f"op '{op}' produced non-finite values")
        self.values = values
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._op = op
        self._parents = parents
        self._backward = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def op(self) -> str:
        return self._op

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single-value tensor, got shape {self.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(op={self._op!r}, shape={self.shape}, dtype={self.dtype}{tag})"

    # Arithmetic sugar; maps onto the fixed op set.
    def __add__(self, other):
        return scale_or(add, self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return scale_or(sub, self, other)

    def __mul__(self, other):
        return scale_or(mul, self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def scale_or(op_fn, a: "Tensor", b) -> "Tensor":
    """Route tensor-scalar arithmetic through scalar ops."""
    if isinstance(b, Tensor):
        return op_fn(a, b)
    b = float(b)
    if op_fn is add:
        return add_scalar(a, b)
    if op_fn is sub:
        return add_scalar(a, -b)
    if op_fn is mul:
        return scale(a, b)
    raise ConfigError(f"unsupported scalar arithmetic for {op_fn}")


def tensor(values, requires_grad: bool = False, dtype=None, name: str = "") -> Tensor:
    """Build a leaf tensor. float32 storage unless float64 is passed/asked."""
    arr = np.asarray(values)
    if dtype is not None:
        arr = arr.astype(dtype)
    elif arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    else:
        arr = arr.copy()
    return Tensor(arr, requires_grad=requires_grad, name=name)


def constant(values, dtype=None) -> Tensor:
    return tensor(values, requires_grad=False, dtype=dtype)


def astensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return tensor(x)


def _result(values, op, parents, backward_fn) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    return Tensor(
        values,
        requires_grad=requires,
        op=op,
        parents=parents if requires else (),
        backward_fn=backward_fn if requires else None,
    )


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match")


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = astensor(a), astensor(b)
    _check_same_shape("add", a, b)
    out = a.values + b.values

    def bw(g):
        return g, g

    return _result(out, "add", (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = astensor(a), astensor(b)
    _check_same_shape("sub", a, b)
    out = a.values - b.values

    def bw(g):
        return g, -g

    return _result(out, "sub", (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = astensor(a), astensor(b)
    _check_same_shape("mul", a, b)
    out = a.values * b.values
    av, bv = a.values, b.values

    def bw(g):
        return g * bv, g * av

    return _result(out, "mul", (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant (no gradient through c)."""
    x = astensor(x)
    c = float(c)
    out = x.values * c

    def bw(g):
        return (g * c,)

    return _result(out, "scale", (x,), bw)


def add_scalar(x: Tensor, c: float) -> Tensor:
    x = astensor(x)
    out = x.values + float(c)

    def bw(g):
        return (g,)

    return _result(out, "add_scalar", (x,), bw)


def relu(x: Tensor) -> Tensor:
    x = astensor(x)
    out = np.maximum(x.values, 0)
    pos = x.values > 0

    def bw(g):
        return (g * pos,)

    return _result(out, "relu", (x,), bw)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)) computed without overflow for large |x|."""
    x = astensor(x)
    v = x.values
    out = np.maximum(v, 0) + np.log1p(np.exp(-np.abs(v)))
    sig = 1.0 / (1.0 + np.exp(-v.astype(np.float64)))
    sig = sig.astype(v.dtype)

    def bw(g):
        return (g * sig,)

    return _result(out, "softplus", (x,), bw)


def log(x: Tensor) -> Tensor:
    """Natural log; rejects non-positive inputs instead of returning -inf."""
    x = astensor(x)
    if np.any(x.values <= 0):
        raise NumericError("log: input must be strictly positive")
    out = np.log(x.values)
    xv = x.values

    def bw(g):
        return (g / xv,)

    return _result(out, "log", (x,), bw)


def absolute(x: Tensor) -> Tensor:
    x = astensor(x)
    out = np.abs(x.values)
    sign = np.sign(x.values)

    def bw(g):
        return (g * sign,)

    return _result(out, "absolute", (x,), bw)


def acos(x: Tensor) -> Tensor:
    """arccos with the input clamped into [-1, 1].

    The derivative is -1/sqrt(1-x^2) strictly inside the interval and 0 at
    or beyond the clamp boundary (the clamp has zero slope there).
    """
    x = astensor(x)
    clipped = np.clip(x.values, -1.0, 1.0)
    out = np.arccos(clipped)
    inside = np.abs(x.values) < 1.0
    denom = np.sqrt(np.maximum(1.0 - clipped * clipped, np.finfo(np.float64).tiny))

    def bw(g):
        return (np.where(inside, -g / denom, 0.0).astype(g.dtype),)

    return _result(out, "acos", (x,), bw)


# ---------------------------------------------------------------------------
# Channel-axis ops (NCHW, axis=1)
# ---------------------------------------------------------------------------


def _require_nchw(op: str, x: Tensor) -> None:
    if x.values.ndim != 4:
        raise ShapeError(f"{op}: expected NCHW input, got shape {x.shape}")


def softmax_channels(x: Tensor) -> Tensor:
    """Stable softmax over the channel axis of an NCHW tensor."""
    _require_nchw("softmax_channels", astensor(x))
    x = astensor(x)
    shifted = x.values - x.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - dot),)

    return _result(p, "softmax_channels", (x,), bw)


def l2normalize_channels(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Scale each pixel's channel vector to unit L2 norm.

    Pixels whose norm falls below ``eps`` are divided by ``eps`` instead,
    which keeps the op finite and linear near zero.
    """
    x = astensor(x)
    _require_nchw("l2normalize_channels", x)
    norm = np.sqrt((x.values * x.values).sum(axis=1, keepdims=True))
    denom = np.maximum(norm, eps)
    y = x.values / denom
    small = norm <= eps

    def bw(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        grad_unit = (g - y * dot) / denom
        grad_linear = g / denom
        return (np.where(small, grad_linear, grad_unit),)

    return _result(y, "l2normalize_channels", (x,), bw)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    """View channels [start, stop) of an NCHW tensor."""
    x = astensor(x)
    _require_nchw("channel_slice", x)
    c = x.shape[1]
    if not (0 <= start < stop <= c):
        raise ShapeError(f"channel_slice: range [{start}, {stop}) invalid for {c} channels")
    out = x.values[:, start:stop]
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[:, start:stop] = g
        return (gx,)

    return _result(out.copy(), "channel_slice", (x,), bw)


def channel_dot(x: Tensor, weights: np.ndarray) -> Tensor:
    """Per-pixel dot product of the channel vector with a constant vector.

    (N, C, H, W) -> (N, 1, H, W); ``weights`` has length C and is not part
    of the gradient.
    """
    x = astensor(x)
    _require_nchw("channel_dot", x)
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.shape[0] != x.shape[1]:
        raise ShapeError(
            f"channel_dot: weights shape {w.shape} does not match {x.shape[1]} channels"
        )
    w = w.astype(x.dtype)
    out = np.einsum("nchw,c->nhw", x.values, w)[:, None]
    wcol = w.reshape(1, -1, 1, 1)

    def bw(g):
        return (g * wcol,)

    return _result(out, "channel_dot", (x,), bw)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def reduce_sum(x: Tensor) -> Tensor:
    x = astensor(x)
    out = x.values.sum()
    shape, dt = x.shape, x.dtype

    def bw(g):
        return (np.full(shape, g, dtype=dt),)

    return _result(np.asarray(out), "reduce_sum", (x,), bw)


def reduce_mean(x: Tensor) -> Tensor:
    x = astensor(x)
    n = x.values.size
    if n == 0:
        raise ShapeError("reduce_mean: empty tensor")
    out = x.values.mean()
    shape, dt = x.shape, x.dtype

    def bw(g):
        return (np.full(shape, g / n, dtype=dt),)

    return _result(np.asarray(out), "reduce_mean", (x,), bw)


# ---------------------------------------------------------------------------
# Spatial ops
# ---------------------------------------------------------------------------


def hdiff(x: Tensor) -> Tensor:
    """Forward difference along width: out[..., j] = x[..., j+1] - x[..., j]."""
    x = astensor(x)
    _require_nchw("hdiff", x)
    if x.shape[3] < 2:
        raise ShapeError(f"hdiff: width must be >= 2, got shape {x.shape}")
    out = x.values[..., 1:] - x.values[..., :-1]
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[..., 1:] += g
        gx[..., :-1] -= g
        return (gx,)

    return _result(out, "hdiff", (x,), bw)


def vdiff(x: Tensor) -> Tensor:
    """Forward difference along height: out[..., i, :] = x[..., i+1, :] - x[..., i, :]."""
    x = astensor(x)
    _require_nchw("vdiff", x)
    if x.shape[2] < 2:
        raise ShapeError(f"vdiff: height must be >= 2, got shape {x.shape}")
    out = x.values[..., 1:, :] - x.values[..., :-1, :]
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[..., 1:, :] += g
        gx[..., :-1, :] -= g
        return (gx,)

    return _result(out, "vdiff", (x,), bw)


def subsample2(x: Tensor) -> Tensor:
    """Keep every second row and column (dyadic downsampling)."""
    x = astensor(x)
    _require_nchw("subsample2", x)
    out = x.values[..., ::2, ::2]
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[..., ::2, ::2] = g
        return (gx,)

    return _result(out.copy(), "subsample2", (x,), bw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW x OIHW -> NOHW, with zero padding.

    ``out[n,o,i,j] = bias[o] + sum_{c,p,q} x[n,c,i*s+p-pad,j*s+q-pad] * weight[o,c,p,q]``
    """
    x, weight, bias = astensor(x), astensor(weight), astensor(bias)
    if x.values.ndim != 4:
        raise ShapeError(f"conv2d: input must be NCHW, got {x.shape}")
    if weight.values.ndim != 4:
        raise ShapeError(f"conv2d: weight must be OIHW, got {weight.shape}")
    n, c, h, w = x.shape
    o, i, kh, kw = weight.shape
    if c != i:
        raise ShapeError(f"conv2d: input channels {c} vs weight input channels {i}")
    if bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} must be ({o},)")
    stride = int(stride)
    padding = int(padding)
    if stride < 1:
        raise ConfigError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ConfigError(f"conv2d: padding must be >= 0, got {padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(
            f"conv2d: kernel ({kh}, {kw}) larger than padded input ({hp}, {wp})"
        )
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1

    xp = x.values
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # (n, c, oh, ow, kh, kw) windows, stride applied on the spatial axes.
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, oh * ow, c * kh * kw)
    wmat = weight.values.reshape(o, c * kh * kw)
    out = cols @ wmat.T + bias.values
    out = out.transpose(0, 2, 1).reshape(n, o, oh, ow)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n, oh * ow, o)
        grad_bias = g2.sum(axis=(0, 1))
        grad_w = np.einsum("npo,npk->ok", g2, cols).reshape(o, c, kh, kw)
        gcols = (g2 @ wmat).reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        gx = np.zeros((n, c, hp, wp), dtype=g.dtype)
        for p in range(kh):
            for q in range(kw):
                gx[:, :, p : p + stride * oh : stride, q : q + stride * ow : stride] += gcols[
                    :, :, p, q
                ]
        if padding:
            gx = gx[:, :, padding:-padding, padding:-padding]
        return gx, grad_w, grad_bias

    return _result(out, "conv2d", (x, weight, bias), bw)


def _interp_matrix(in_size: int, factor: int) -> np.ndarray:
    """Row-stochastic (out x in) matrix for 1-D bilinear upsampling.

    Output sample i reads the continuous position (i + 0.5)/factor - 0.5 in
    input coordinates (half-pixel centers, no corner alignment); positions
    beyond the borders clamp to the edge samples.
    """
    out_size = in_size * factor
    m = np.zeros((out_size, in_size), dtype=np.float64)
    for i in range(out_size):
        src = (i + 0.5) / factor - 0.5
        i0 = math.floor(src)
        frac = src - i0
        j0 = min(max(i0, 0), in_size - 1)
        j1 = min(max(i0 + 1, 0), in_size - 1)
        m[i, j0] += 1.0 - frac
        m[i, j1] += frac
    return m


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Upsample H and W by an integer factor with half-pixel-center bilinear
    interpolation (edge samples replicate past the border).

    Factor 1 is the identity.  Constant inputs stay exactly constant because
    each interpolation row sums to 1.
    """
    x = astensor(x)
    _require_nchw("bilinear_upsample", x)
    factor = int(factor)
    if factor < 1:
        raise ConfigError(f"bilinear_upsample: factor must be >= 1, got {factor}")
    if factor == 1:
        out = x.values.copy()

        def bw_id(g):
            return (g,)

        return _result(out, "bilinear_upsample", (x,), bw_id)

    n, c, h, w = x.shape
    lh = _interp_matrix(h, factor).astype(x.dtype)
    lw = _interp_matrix(w, factor).astype(x.dtype)
    # out[n,c,o,p] = sum_{i,j} lh[o,i] x[n,c,i,j] lw[p,j]
    out = np.einsum("oi,ncij,pj->ncop", lh, x.values, lw, optimize=True)

    def bw(g):
        return (np.einsum("oi,ncop,pj->ncij", lh, g, lw, optimize=True),)

    return _result(out, "bilinear_upsample", (x,), bw)


# ---------------------------------------------------------------------------
# Graph linearization and backpropagation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Record:
    """One graph node: op kind, parent tensors, produced tensor."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor


class Graph:
    """Topologically ordered records of the ops reachable from a root.

    Every parent appears before the record that consumes it, and each
    non-leaf tensor contributes exactly one record.
    """

    def __init__(self, records: list[Record]):
        self.records = records

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        order: list[Record] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                if node._parents:
                    order.append(Record(node._op, node._parents, node))
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.records)


def backward(loss: Tensor, params: Sequence[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(tensor) into ``.grad`` for every requires_grad
    tensor reachable from ``loss``.

    ``loss`` must hold a single value.  Gradients sum into any existing
    ``.grad`` (call :meth:`Tensor.zero_grad` between steps).  Parameters
    passed in ``params`` that the graph never touches receive a zero
    gradient rather than ``None``.  Returns ``{id(tensor): grad}`` for every
    tensor that received a gradient.
    """
    if loss.values.size != 1:
        raise ShapeError(f"backward: loss must be a single value, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ConfigError("backward: loss does not depend on any requires_grad tensor")

    graph = Graph.trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}

    for rec in reversed(graph.records):
        g_out = grads.pop(id(rec.output), None)
        if g_out is None:
            continue
        parent_grads = rec.output._backward(g_out)
        for parent, g in zip(rec.inputs, parent_grads):
            if not parent.requires_grad:
                continue
            if g.shape != parent.values.shape:
                g = np.ascontiguousarray(np.broadcast_to(g, parent.values.shape))
            prev = grads.get(id(parent))
            grads[id(parent)] = g if prev is None else prev + g

    # Whatever is left belongs to leaves (or to the loss itself if a leaf).
    result: dict[int, np.ndarray] = {}
    leaves = _collect_leaves(loss)
    for t in leaves:
        if t.requires_grad and id(t) in grads:
            g = np.asarray(grads[id(t)], dtype=t.values.dtype)
            t.grad = g if t.grad is None else t.grad + g
            result[id(t)] = t.grad
    if params is not None:
        for p in params:
            if not p.requires_grad:
                continue
            if id(p) not in result:
                p.grad = np.zeros_like(p.values) if p.grad is None else p.grad
                result[id(p)] = p.grad
    return result


def _collect_leaves(root: Tensor) -> list[Tensor]:
    leaves: list[Tensor] = []
    seen: set[int] = set()
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._parents:
            stack.extend(node._parents)
        else:
            leaves.append(node)
    return leaves


def grad_check(
    f: Callable[..., Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords_per_param: int | None = None,
    seed: int = 0,
) -> float:
    """Compare analytic gradients of ``f(*params)`` against central finite
    differences and return the worst relative error.

    The error for one coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    Parameters must be float64 leaves; float32 has too little headroom for
    the difference quotient to be trustworthy.  For large compositions,
    ``max_coords_per_param`` probes a seeded random coordinate subset of
    each parameter instead of every entry.
    """
    for p in params:
        if p.dtype != np.float64:
            raise ConfigError("grad_check: parameters must be float64 tensors")
        if not p.requires_grad:
            raise ConfigError("grad_check: parameters must have requires_grad=True")

    for p in params:
        p.zero_grad()
    loss = f(*params)
    if loss.values.size != 1:
        raise ShapeError("grad_check: f must return a single-value tensor")
    backward(loss, params)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.values)
        analytic = analytic.reshape(-1)
        flat = p.values.reshape(-1)
        if flat.size == 0:
            continue
        if max_coords_per_param is not None and flat.size > max_coords_per_param:
            coords = rng.choice(flat.size, size=max_coords_per_param, replace=False)
        else:
            coords = np.arange(flat.size)
        for k in coords:
            orig = flat[k]
            flat[k] = orig + eps
            hi = f(*params).item()
            flat[k] = orig - eps
            lo = f(*params).item()
            flat[k] = orig
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(analytic[k] - numeric) / max(1.0, abs(analytic[k]))
            worst = max(worst, err)
    return worst
