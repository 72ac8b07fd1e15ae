"""Dense float64 tensors with reverse-mode automatic differentiation.

Operations record themselves on a dynamic tape (each output keeps its
parents and a closure mapping the output gradient to parent gradients).
``Tensor.backward`` walks the tape in reverse topological order and
accumulates into the ``grad`` of every leaf that requires gradients.

Batched variants of the spatial ops accept a leading batch axis
(``B x C x H x W``) as well as the single-sample ``C x H x W`` form.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import instrument, kernels


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation, optimizer steps)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) or data.dtype != np.float64 else data
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autograd -----------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        Only scalars may be differentiated without an explicit seed gradient.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64).reshape(self.shape)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar -----------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def abs(self):
        return tabs(self)

    def exp(self):
        return texp(self)

    def log(self):
        return tlog(self)


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def texp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def tlog(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes only strictly inside the range."""
    a = as_tensor(a)
    inside = (a.data > lo) & (a.data < hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def norm(a, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at the origin is 0."""
    a = as_tensor(a)
    n = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))

    def backward(g):
        safe = np.where(n > 0, n, 1.0)
        return (np.expand_dims(g, axis) * np.where(n > 0, a.data / safe, 0.0),)

    return _make(np.squeeze(n, axis=axis), (a,), backward)


_ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "relu": relu,
    "sigmoid": sigmoid,
    "abs": tabs,
}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch one of ``add, mul, relu, sigmoid, abs, scale``.

    ``scale`` takes a python float as ``b``.
    """
    if kind == "scale":
        if b is None:
            raise ValueError("scale needs a factor")
        return scale(a, float(b.item() if isinstance(b, Tensor) else b))
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    if kind in ("add", "mul"):
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return fn(a, b)
    return fn(a)


# ---------------------------------------------------------------------------
# reductions and shape plumbing


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    return scale(tsum(a, axis, keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def index(a, idx) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.asarray(a.data[idx], dtype=np.float64), (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return _make(
        np.stack([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(ts))),
    )


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product; leading axes broadcast like ``numpy.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul batch mismatch: {a.shape} @ {b.shape}") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _make(out, (a, b), backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    if instrument.active():
        instrument.report("softmax", y, axis)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward)


# ---------------------------------------------------------------------------
# spatial ops


def _as_batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected C x H x W or B x C x H x W, got {x.shape}")
    return x, False


def _pads(padding) -> tuple[int, int, int, int]:
    if isinstance(padding, (int, np.integer)):
        p = int(padding)
        pads = (p, p, p, p)
    else:
        pads = tuple(int(v) for v in padding)
        if len(pads) != 4:
            raise ValueError("padding must be an int or (top, bottom, left, right)")
    if min(pads) < 0:
        raise ValueError(f"padding must be non-negative, got {padding}")
    return pads


def conv_output_size(size: int, k: int, stride: int, pad_lo: int, pad_hi: int) -> int:
    span = size + pad_lo + pad_hi - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"non-integral conv output: size {size}, kernel {k}, stride {stride}, padding ({pad_lo}, {pad_hi})"
        )
    return span // stride + 1


def conv2d(x, w, stride: int = 1, padding=0, groups: int = 1, bias=None) -> Tensor:
    """Zero-padded cross-correlation.

    ``x`` is ``C x H x W`` or ``B x C x H x W``; ``w`` is
    ``C_out x (C_in / groups) x k x k``. ``padding`` is an int or a
    ``(top, bottom, left, right)`` tuple.
    """
    x, w = as_tensor(x), as_tensor(w)
    x4, squeeze = _as_batched(x)
    if stride < 1:
        raise ValueError("stride must be >= 1")
    O, Cg, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"kernel must be square with odd size, got {w.shape}")
    B, C, H, W = x4.shape
    if C % groups or O % groups or C // groups != Cg:
        raise ShapeError(f"channel mismatch: input {x4.shape}, kernels {w.shape}, groups {groups}")
    pt, pb, pl, pr = _pads(padding)
    Ho = conv_output_size(H, k, stride, pt, pb)
    Wo = conv_output_size(W, k, stride, pl, pr)
    xp = np.pad(x4.data, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else x4.data
    Hp, Wp = xp.shape[2], xp.shape[3]
    cols = kernels.im2col(xp, k, stride)  # B, C, Ho, Wo, k, k
    Og = O // groups

    if groups == 1:
        cols2d = cols.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
        w2d = w.data.reshape(O, C * k * k)
        out = (cols2d @ w2d.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    elif Cg == 1 and Og == 1:
        out = np.einsum("bchwij,cij->bchw", cols, w.data[:, 0], optimize=True)
    else:
        cg = cols.reshape(B, groups, Cg, Ho, Wo, k, k)
        wg = w.data.reshape(groups, Og, Cg, k, k)
        out = np.einsum("bgchwij,gocij->bgohw", cg, wg, optimize=True).reshape(B, O, Ho, Wo)
    out = np.ascontiguousarray(out)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, O, 1, 1)

    def backward(g):
        gw = gx = gb = None
        if groups == 1:
            g2d = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
            if w.requires_grad:
                gw = (g2d.T @ cols2d).reshape(w.shape)
            if x4.requires_grad:
                dcols = (g2d @ w2d).reshape(B, Ho, Wo, C, k, k).transpose(0, 3, 1, 2, 4, 5)
        elif Cg == 1 and Og == 1:
            if w.requires_grad:
                gw = np.einsum("bchw,bchwij->cij", g, cols, optimize=True)[:, None]
            if x4.requires_grad:
                dcols = g[..., None, None] * w.data[:, 0][None, :, None, None]
        else:
            gg = g.reshape(B, groups, Og, Ho, Wo)
            if w.requires_grad:
                gw = np.einsum("bgohw,bgchwij->gocij", gg, cg, optimize=True).reshape(w.shape)
            if x4.requires_grad:
                dcols = np.einsum("bgohw,gocij->bgchwij", gg, wg, optimize=True).reshape(B, C, Ho, Wo, k, k)
        if x4.requires_grad:
            gxp = kernels.col2im(np.ascontiguousarray(dcols), Hp, Wp, stride)
            gx = gxp[:, :, pt:pt + H, pl:pl + W]
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3)).reshape(bias.shape)
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x4, w) if bias is None else (x4, w, bias)
    res = _make(out, parents, backward)
    return reshape(res, res.shape[1:]) if squeeze else res


def global_avg_pool(x) -> Tensor:
    """Per-channel spatial mean: ``C x H x W -> C`` or ``B x C x H x W -> B x C``."""
    x = as_tensor(x)
    if x.ndim not in (3, 4):
        raise ShapeError(f"expected C x H x W or B x C x H x W, got {x.shape}")
    if x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ShapeError(f"empty spatial extent in {x.shape}")
    return tmean(x, axis=(-2, -1))


def maxpool2(x) -> Tensor:
    """2x2 max pooling with stride 2; odd sizes round up (ceil mode)."""
    x = as_tensor(x)
    x4, squeeze = _as_batched(x)
    H, W = x4.shape[2], x4.shape[3]
    out, arg = kernels.maxpool2(np.ascontiguousarray(x4.data))
    res = _make(out, (x4,), lambda g: (kernels.maxpool2_backward(np.ascontiguousarray(g), arg, H, W),))
    return reshape(res, res.shape[1:]) if squeeze else res


def upsample2x(x, size: tuple[int, int] | None = None) -> Tensor:
    """Nearest-neighbour 2x upsampling, cropped to ``size`` when given."""
    x = as_tensor(x)
    x4, squeeze = _as_batched(x)
    B, C, H, W = x4.shape
    Ht, Wt = size if size is not None else (2 * H, 2 * W)
    if not (2 * H - 1 <= Ht <= 2 * H and 2 * W - 1 <= Wt <= 2 * W):
        raise ShapeError(f"cannot upsample {H}x{W} to {Ht}x{Wt}")
    out = x4.data.repeat(2, axis=2).repeat(2, axis=3)[:, :, :Ht, :Wt]

    def backward(g):
        full = np.zeros((B, C, 2 * H, 2 * W))
        full[:, :, :Ht, :Wt] = g
        return (full.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    res = _make(np.ascontiguousarray(out), (x4,), backward)
    return reshape(res, res.shape[1:]) if squeeze else res


# ---------------------------------------------------------------------------
# randomness and initialisation


@dataclass
class RandomSource:
    """Seeded PCG64 stream. Same seed, same draws, on every platform."""

    seed: int
    algorithm: str = "PCG64"
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.seed = int(self.seed) & 0xFFFFFFFFFFFFFFFF
        if self.algorithm != "PCG64":
            raise ValueError(f"unsupported generator {self.algorithm!r}")
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def derive(self, index: int) -> "RandomSource":
        """Independent stream for item ``index`` (seed XOR index)."""
        return RandomSource(self.seed ^ int(index))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, size=None, loc=0.0, scale=1.0):
        return self._gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def beta(self, a, b, size=None):
        return self._gen.beta(a, b, size)

    def random(self, size=None):
        return self._gen.random(size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        return self._gen.choice(a, size=size, replace=replace, p=p)


def he_normal(rng: RandomSource, shape: Iterable[int], fan_in: int, name: str | None = None) -> Tensor:
    """Parameter tensor drawn from N(0, 2 / fan_in)."""
    shape = tuple(shape)
    return Tensor(rng.normal(shape, scale=math.sqrt(2.0 / fan_in)), requires_grad=True, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[Tensor], Tensor], x, epsilon: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences.

    Error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    y = f(xt)
    if y.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {y.shape}")
    if not np.all(np.isfinite(y.data)):
        raise FloatingPointError("f(x) is not finite")
    y.backward()
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)

    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    probe = x0.copy()
    pflat = probe.reshape(-1)
    with no_grad():
        for i in range(pflat.size):
            orig = pflat[i]
            pflat[i] = orig + epsilon
            fp = f(Tensor(probe.copy())).item()
            pflat[i] = orig - epsilon
            fm = f(Tensor(probe.copy())).item()
            pflat[i] = orig
            flat[i] = (fp - fm) / (2.0 * epsilon)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if x0.size else 0.0
