"""Minimal reverse-mode differentiation over numpy arrays.

Operations executed while a :class:`Tape` is active are appended to it in
execution order, which is already a topological order of the computation.
``Tape.backward`` replays the record in reverse. Outside a tape nothing is
recorded, so plain forward passes cost no bookkeeping.

Only tensors created with ``requires_grad=True`` (and values derived from
them) receive gradients; anything else is treated as a constant.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "advmix_tape", default=None
)


class Tensor:
    """Array value that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


@dataclass
class Node:
    """One recorded operation: tag, input/output ids and its reverse rule."""

    tag: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]

    @property
    def input_ids(self) -> tuple[int | None, ...]:
        return tuple(t.node_id for t in self.inputs)

    @property
    def output_id(self) -> int | None:
        return self.output.node_id


@dataclass
class Tape:
    """Computation record used for one reverse sweep.

    Use as a context manager; every differentiable op run inside the block
    is recorded. Tapes nest; the innermost one is active.
    """

    nodes: list[Node] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        node.output.node_id = len(self.nodes)
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def backward(self, root: Tensor, seed: np.ndarray | None = None) -> None:
        """Accumulate d(root)/d(t) into ``t.grad`` for every tracked tensor."""
        if seed is None:
            if root.size != 1:
                raise ValueError("backward from a non-scalar root needs a seed")
            seed = np.ones_like(root.data)
        if not root.requires_grad:
            return
        _accumulate(root, np.asarray(seed, dtype=root.dtype))
        stop = root.node_id
        if stop is None:
            return
        for node in reversed(self.nodes[: stop + 1]):
            g = node.output.grad
            if g is None:
                continue
            grads = node.backward(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is not None and inp.requires_grad:
                    _accumulate(inp, gi)


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.shape:
        g = np.broadcast_to(g, t.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True)
    else:
        t.grad += g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], tag: str, backward) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        tape.record(Node(tag, inputs, out, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_finite(x: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(x))[0]
        raise FloatingPointError(f"{name}: non-finite input at index {tuple(bad)}")


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ValueError(f"axis {axis} out of range for {ndim}-d input")
    return axis % ndim


# ----------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(
        a.data + b.data,
        (a, b),
        "add",
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(
        a.data - b.data,
        (a, b),
        "sub",
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Tensor:
    """Hadamard product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad * bd, (a, b), "mul", backward)


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return _result(a.data * s, (a,), "scale", lambda g: (g * s,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), "relu", lambda g: (g * mask,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _result(y, (x,), "exp", lambda g: (g * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _result(np.log(xd), (x,), "log", lambda g: (g / xd,))


# ------------------------------------------------------------------- structure


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _result(x.data.reshape(shape), (x,), "reshape", lambda g: (g.reshape(old),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(
        np.transpose(x.data, axes), (x,), "transpose", lambda g: (np.transpose(g, inv),)
    )


def take(x, index) -> Tensor:
    """Basic or advanced indexing; the reverse rule scatters with ``add.at``."""
    x = as_tensor(x)
    shape, dtype = x.shape, x.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, index, g)
        return (out,)

    return _result(x.data[index], (x,), "take", backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    axis = _norm_axis(axis, tensors[0].ndim)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(
        np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", backward
    )


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


# ------------------------------------------------------------------ reductions


def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), "sum", backward)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    count = x.size if axis is None else int(np.prod([shape[a] for a in np.atleast_1d(axis)]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape),)

    return _result(np.mean(x.data, axis=axis, keepdims=keepdims), (x,), "mean", backward)


def global_avg_pool(x) -> Tensor:
    """(B, C, H, W) -> (B, C)."""
    return mean(x, axis=(2, 3))


# ------------------------------------------------------------------ linear alg


def matmul(a, b) -> Tensor:
    """``np.matmul`` semantics, including broadcast batch dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-d")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), "matmul", backward)


def linear(x, weight, bias=None) -> Tensor:
    """x (B, in) with weight (out, in) -> (B, out)."""
    out = matmul(x, transpose(weight))
    return out if bias is None else add(out, bias)


# -------------------------------------------------------------------- softmax


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _norm_axis(axis, x.ndim)
    _check_finite(x.data, "softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), "softmax", backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _norm_axis(axis, x.ndim)
    _check_finite(x.data, "log_softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _result(y, (x,), "log_softmax", backward)


def cross_entropy_soft(logits, target, reduction: str = "mean") -> Tensor:
    """Cross entropy of ``softmax(logits)`` against probability targets.

    ``logits`` and ``target`` share shape ``(..., K)``. ``reduction`` is
    ``"mean"`` over leading rows, ``"sum"`` or ``"none"``.
    """
    logits = as_tensor(logits)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=logits.dtype)
    if target.shape != logits.shape:
        raise ValueError(f"target shape {target.shape} != logits shape {logits.shape}")
    if np.any(target < 0) or np.any(np.abs(target.sum(axis=-1) - 1.0) > 1e-6):
        raise ValueError("target rows must be nonnegative and sum to 1")
    per_row = scale(sum_(mul(log_softmax(logits, -1), target), axis=-1), -1.0)
    if reduction == "none":
        return per_row
    if reduction == "sum":
        return sum_(per_row)
    if reduction == "mean":
        return mean(per_row)
    raise ValueError(f"unknown reduction {reduction!r}")


class ZeroNormError(ValueError):
    """A cosine operand has zero norm."""


def cosine_similarity(a, b, axis: int = -1) -> Tensor:
    """Cosine of the angle between ``a`` and ``b`` along ``axis``.

    No epsilon is added: a zero-norm vector raises :class:`ZeroNormError`.
    """
    a, b = as_tensor(a), as_tensor(b)
    na = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    nb = np.sqrt((b.data * b.data).sum(axis=axis, keepdims=True))
    if np.any(na == 0) or np.any(nb == 0):
        raise ZeroNormError("cosine_similarity: zero-norm input (collapsed representation)")
    ad, bd = a.data, b.data
    dot = (ad * bd).sum(axis=axis, keepdims=True)
    cos = dot / (na * nb)

    def backward(g):
        g = np.expand_dims(g, axis)
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g * (bd / (na * nb) - cos * ad / (na * na)), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(g * (ad / (na * nb) - cos * bd / (nb * nb)), bd.shape)
        return ga, gb

    return _result(np.squeeze(cos, axis=axis), (a, b), "cosine", backward)


# ---------------------------------------------------------------- convolution


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. x (B, C, H, W), weight (O, C, kh, kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    xd, wd = x.data, weight.data
    B, C, H, W = xd.shape
    O, Cw, kh, kw = wd.shape
    if C != Cw:
        raise ValueError(f"conv2d: input has {C} channels, weight expects {Cw}")
    if kh == 1 and kw == 1 and padding == 0:
        xs = xd[:, :, ::stride, ::stride]
        w2 = wd[:, :, 0, 0]
        out = np.einsum("oc,bchw->bohw", w2, xs, optimize=True)

        def backward_1x1(g):
            gx = gw = None
            if x.requires_grad:
                gxs = np.einsum("oc,bohw->bchw", w2, g, optimize=True)
                if stride == 1:
                    gx = gxs
                else:
                    gx = np.zeros_like(xd)
                    gx[:, :, ::stride, ::stride] = gxs
            if weight.requires_grad:
                gw = np.einsum("bohw,bchw->oc", g, xs, optimize=True)[:, :, None, None]
            return gx, gw

        result = _result(out, (x, weight), "conv2d_1x1", backward_1x1)
    else:
        p = padding
        xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
        Ho = (H + 2 * p - kh) // stride + 1
        Wo = (W + 2 * p - kw) // stride + 1
        # columns ordered (kh, kw, C) x (B, Ho, Wo)
        xc = np.ascontiguousarray(xp.transpose(1, 0, 2, 3))
        cols = np.empty((kh, kw, C, B, Ho, Wo), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[i, j] = xc[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
        cols = cols.reshape(kh * kw * C, B * Ho * Wo)
        w2 = wd.transpose(0, 2, 3, 1).reshape(O, -1)
        out = (w2 @ cols).reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3)

        def backward(g):
            gx = gw = None
            g2 = g.transpose(1, 0, 2, 3).reshape(O, -1)
            if weight.requires_grad:
                gw = (g2 @ cols.T).reshape(O, kh, kw, C).transpose(0, 3, 1, 2)
            if x.requires_grad:
                dcols = (w2.T @ g2).reshape(kh, kw, C, B, Ho, Wo)
                gxc = np.zeros_like(xc)
                for i in range(kh):
                    for j in range(kw):
                        gxc[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[i, j]
                gx = gxc[:, :, p : p + H, p : p + W].transpose(1, 0, 2, 3)
            return gx, gw

        result = _result(np.ascontiguousarray(out), (x, weight), "conv2d", backward)
    if bias is not None:
        result = add(result, reshape(bias, (1, -1, 1, 1)))
    return result


# ------------------------------------------------------------- normalization


def batch_norm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    update_stats: bool = True,
) -> Tensor:
    """Per-channel batch normalization over (B, H, W) of a (B, C, H, W) input.

    In training mode batch statistics are used and, if ``update_stats``,
    the running buffers are updated in place. Inference mode uses the
    running buffers and is an affine map of ``x``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    gd = gamma.data.reshape(1, -1, 1, 1)
    if training:
        axes = (0, 2, 3)
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mu = xd.mean(axis=axes, keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        if update_stats:
            unbiased = var.reshape(-1) * (m / max(m - 1, 1))
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu.reshape(-1)
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased

        def backward(g):
            gxhat = g * gd
            gx = None
            if x.requires_grad:
                gx = inv * (
                    gxhat
                    - gxhat.mean(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)
                )
            ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
            gbeta = g.sum(axis=axes) if beta.requires_grad else None
            return gx, ggamma, gbeta

    else:
        inv = 1.0 / np.sqrt(running_var.reshape(1, -1, 1, 1) + eps)
        xhat = (xd - running_mean.reshape(1, -1, 1, 1)) * inv

        def backward(g):
            gx = g * gd * inv if x.requires_grad else None
            ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
            gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
            return gx, ggamma, gbeta

    out = xhat * gd + beta.data.reshape(1, -1, 1, 1)
    return _result(out, (x, gamma, beta), "batch_norm", backward)


# --------------------------------------------------------------- resampling


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) interpolation matrix, half-pixel centres (align_corners=False).

    Every row is a convex combination, so row sums are exactly 1.
    """
    A = np.zeros((n_out, n_in))
    scale_ = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale_ - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        A[o, i0] += 1.0 - frac
        A[o, i1] += frac
    return A


def upsample_bilinear(x, size: tuple[int, int]) -> Tensor:
    """Resize the last two axes of ``x`` to ``size`` by bilinear interpolation."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    H, W = size
    if H < h or W < w:
        raise ValueError(f"upsample target {size} smaller than source {(h, w)}")
    Ah = bilinear_matrix(h, H).astype(x.dtype)
    Aw = bilinear_matrix(w, W).astype(x.dtype)
    out = Ah @ x.data @ Aw.T

    def backward(g):
        return (Ah.T @ g @ Aw,)

    return _result(out, (x,), "upsample_bilinear", backward)


# ---------------------------------------------------------------- grad check


def grad_check(f: Callable[..., Tensor], x, eps: float = 1e-6) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``x`` is an array or a sequence of arrays passed positionally to ``f``.
    The error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    multi = isinstance(x, (list, tuple))
    xs = [np.array(v, dtype=np.float64) for v in (x if multi else [x])]

    with Tape() as tape:
        ts = [Tensor(v.copy(), requires_grad=True) for v in xs]
        out = f(*ts)
        tape.backward(out)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]

    def evaluate(vals):
        return float(f(*[Tensor(v) for v in vals]).data)

    worst = 0.0
    for k, base in enumerate(xs):
        for idx in np.ndindex(base.shape):
            plus = [v.copy() for v in xs]
            minus = [v.copy() for v in xs]
            plus[k][idx] += eps
            minus[k][idx] -= eps
            fp, fm = evaluate(plus), evaluate(minus)
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"grad_check: non-finite value at input {k}, index {idx}")
            numeric = (fp - fm) / (2 * eps)
            err = abs(analytic[k][idx] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
