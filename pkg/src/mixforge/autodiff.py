"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ndarray. Operations on tensors that require
gradients record a node holding a backward closure; :meth:`Tensor.backward`
replays those closures in exact reverse creation order, accumulating into
``.grad``. Broadcasting is limited to scalars (python numbers or 0-d
tensors); anything else must be expanded explicitly with
:func:`broadcast_to`.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

_counter = itertools.count()


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_id", "_freed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._id = next(_counter)
        self._freed = False

    # construction ---------------------------------------------------------
    @classmethod
    def _make(cls, data, parents, backward):
        """Create an op output; *backward(g)* returns one gradient per parent."""
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # autodiff -------------------------------------------------------------
    def backward(self):
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor that requires grad")
        if self._freed:
            raise GraphError("graph already consumed by an earlier backward(); rebuild it")

        nodes = {}
        stack = [self]
        while stack:
            t = stack.pop()
            if t._id in nodes:
                continue
            nodes[t._id] = t
            stack.extend(p for p in t._parents if p.requires_grad)
        order = sorted(nodes.values(), key=lambda t: t._id, reverse=True)

        grads = {self._id: np.ones_like(self.data)}
        for t in order:
            g = grads.pop(t._id, None)
            if t.is_leaf:
                if g is not None:
                    t.grad = g if t.grad is None else t.grad + g
                continue
            if t._freed:
                raise GraphError("graph already consumed by an earlier backward(); rebuild it")
            if g is not None:
                for p, pg in zip(t._parents, t._backward(g)):
                    if pg is None or not p.requires_grad:
                        continue
                    if pg.shape != p.shape:
                        raise ShapeError(f"internal: gradient shape {pg.shape} for tensor {p.shape}")
                    prev = grads.get(p._id)
                    grads[p._id] = pg if prev is None else prev + pg
            t._freed = True
            t._backward = None

    # operators ------------------------------------------------------------
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def __pow__(self, k):
        return power(self, k)

    def __abs__(self):
        return abs_(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0


def _sum_to_scalar(g):
    return np.asarray(g.sum(), dtype=g.dtype)


def _binary_shapes(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g, t: Tensor):
    return _sum_to_scalar(g) if _is_scalar(t) and g.ndim else g


# elementwise --------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    _binary_shapes(a, b, "add")
    return Tensor._make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    _binary_shapes(a, b, "sub")
    return Tensor._make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    _binary_shapes(a, b, "mul")
    return Tensor._make(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a), _unbroadcast(g * a.data, b)),
    )


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python constant."""
    c = float(c)
    return Tensor._make(x.data * c, (x,), lambda g: (g * c,))


def power(x: Tensor, k: float) -> Tensor:
    k = float(k)
    return Tensor._make(x.data ** k, (x,), lambda g: (g * k * x.data ** (k - 1),))


def abs_(x: Tensor) -> Tensor:
    # subgradient 0 at the kink
    return Tensor._make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return Tensor._make(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return Tensor._make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return Tensor._make(y, (x,), lambda g: (g * 0.5 / y,))


def sigmoid(x: Tensor) -> Tensor:
    y = _stable_sigmoid(x.data)
    return Tensor._make(y, (x,), lambda g: (g * y * (1.0 - y),))


def _stable_sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    y = x.data * cdf

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return Tensor._make(y.astype(x.dtype, copy=False), (x,), backward)


def atan2(y: Tensor, x: Tensor) -> Tensor:
    """Four-quadrant angle of (x, y) in (-pi, pi]; gradient 0 at the origin."""
    _binary_shapes(y, x, "atan2")
    theta = np.arctan2(y.data, x.data)
    theta = np.where(theta <= -np.pi, np.pi, theta)
    r2 = x.data * x.data + y.data * y.data
    safe = np.where(r2 > 0, r2, 1.0)
    nz = r2 > 0

    def backward(g):
        return (np.where(nz, g * x.data / safe, 0.0), np.where(nz, -g * y.data / safe, 0.0))

    return Tensor._make(theta, (y, x), backward)


def wrap_angle(x: Tensor) -> Tensor:
    """Map angles to (-pi, pi]; derivative 1 away from the wrap points."""
    d = x.data
    w = d - 2.0 * np.pi * np.floor((d + np.pi) / (2.0 * np.pi))
    w = np.where(w <= -np.pi, w + 2.0 * np.pi, w)
    return Tensor._make(w, (x,), lambda g: (g,))


# linear algebra / shape ---------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy semantics for equal batch dims or a 2-D right/left operand."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            if ga.ndim > a.ndim:
                ga = ga.reshape(-1, *a.shape).sum(axis=0)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
                if gb.ndim > b.ndim:
                    gb = gb.reshape(-1, *b.shape).sum(axis=0)
        return ga, gb

    return Tensor._make(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis; weight is ``(in, out)``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} vs weight {weight.shape}")
    flat = x.data.reshape(-1, x.shape[-1])
    y = flat @ weight.data
    if bias is not None:
        y = y + bias.data
    y = y.reshape(*x.shape[:-1], weight.shape[1])
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = flat.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gbias = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gbias

    return Tensor._make(y, parents, backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape) -> Tensor:
    return Tensor._make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Explicit numpy-style expansion; the gradient is summed back."""
    shape = tuple(shape)
    try:
        y = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot expand {x.shape} to {shape}") from None
    lead = len(shape) - x.ndim
    expanded = tuple(i for i, n in enumerate(x.shape) if n == 1 and shape[lead + i] != 1)

    def backward(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        if expanded:
            g = g.sum(axis=expanded, keepdims=True)
        return (g,)

    return Tensor._make(y, (x,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise ShapeError(f"concat: shape mismatch {ref.shape} vs {t.shape} along axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward)


def slice_(x: Tensor, idx) -> Tensor:
    """Basic (view) indexing."""
    y = x.data[idx]

    def backward(g):
        out = np.zeros_like(x.data)
        out[idx] = g
        return (out,)

    return Tensor._make(np.array(y), (x,), backward)


# reductions ---------------------------------------------------------------
def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    return Tensor._make(y, (x,), lambda g: (np.array(_expand_reduced(g, x.shape, axis, keepdims)),))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    count = x.data.size // max(y.size, 1)
    return Tensor._make(
        y, (x,), lambda g: (np.array(_expand_reduced(g, x.shape, axis, keepdims)) / count,)
    )


def std(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Population standard deviation."""
    mu = x.data.mean(axis=axis, keepdims=True)
    centered = x.data - mu
    s_keep = np.sqrt((centered ** 2).mean(axis=axis, keepdims=True))
    y = s_keep if keepdims else np.asarray(s_keep.squeeze(axis=axis) if axis is not None else s_keep.squeeze())
    count = x.data.size // max(y.size, 1)

    def backward(g):
        g = np.array(_expand_reduced(g, x.shape, axis, keepdims))
        safe = np.where(s_keep > 0, s_keep, 1.0)
        return (np.where(s_keep > 0, g * centered / (count * safe), 0.0),)

    return Tensor._make(y, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._make(y, (x,), backward)


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply scale and shift."""
    d = x.shape[-1]
    for p, what in ((weight, "weight"), (bias, "bias")):
        if p is not None and p.shape != (d,):
            raise ShapeError(f"layer_norm: {what} {p.shape} vs features {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    y = xhat
    if weight is not None:
        y = y * weight.data
    if bias is not None:
        y = y + bias.data
    parents = tuple(t for t in (x, weight, bias) if t is not None)

    def backward(g):
        gxhat = g * weight.data if weight is not None else g
        gx = None
        if x.requires_grad:
            gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        out = [gx]
        red = tuple(range(g.ndim - 1))
        if weight is not None:
            out.append((g * xhat).sum(axis=red) if weight.requires_grad else None)
        if bias is not None:
            out.append(g.sum(axis=red) if bias.requires_grad else None)
        return tuple(out)

    return Tensor._make(y.astype(x.dtype, copy=False), parents, backward)


# gradient checking --------------------------------------------------------
@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    max_abs_error: float
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)


def numeric_grad(f, x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f(x)`` w.r.t. every entry of *x*."""
    x.data = np.ascontiguousarray(x.data)
    flat = x.data.reshape(-1)
    out = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data)
        flat[i] = orig - h
        fm = float(f(x).data)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(x.shape)


def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(f, x: Tensor, h: float = 1e-5, tol: float = 1e-6, floor: float = 1e-8,
               check_abs_kinks: bool = False) -> GradCheckReport:
    """Compare ``backward`` against central differences for scalar ``f``.

    *x* must be a float64 tensor with ``requires_grad``. With
    ``check_abs_kinks`` every ``|x_i|`` must exceed ``10*h`` so the
    perturbation never straddles the kink of ``abs``.
    """
    if x.dtype != np.float64:
        raise TypeError("grad_check needs float64 tensors")
    if check_abs_kinks and np.any(np.abs(x.data) <= 10 * h):
        raise ValueError("grad_check point too close to a kink of abs (|x_i| <= 10h)")
    x.requires_grad = True
    x.grad = None
    f(x).backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None
    numeric = numeric_grad(f, x, h)
    rel = relative_error(analytic, numeric, floor)
    return GradCheckReport(
        passed=bool(rel.max() <= tol) if rel.size else True,
        max_rel_error=float(rel.max()) if rel.size else 0.0,
        max_abs_error=float(np.abs(analytic - numeric).max()) if rel.size else 0.0,
        analytic=analytic,
        numeric=numeric,
    )
