"""Reverse-mode automatic differentiation over dense float64 arrays.

Everything downstream (attention blocks, voting head, losses) runs on the
`Tensor` class defined here.  Design constraints:

- float64 only, so finite-difference gradient checks are meaningful;
- row-major storage (numpy C order) with explicit shapes;
- broadcasting restricted to leading batch dimensions: two shapes combine
  only when the shorter one equals a trailing suffix of the longer one;
- all randomness flows through an explicit, counter-based `Rng` owned by
  the caller -- there is no global random state;
- any operation that produces a non-finite value raises instead of
  propagating NaN/Inf.
"""

from __future__ import annotations

import hashlib
import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Rng",
    "ShapeError",
    "ConfigError",
    "NumericOverflowError",
    "matmul",
    "affine",
    "softmax",
    "layer_norm",
    "dropout",
    "gelu",
    "sigmoid",
    "exp",
    "log",
    "concat",
    "backward",
    "zero_grad",
    "no_grad",
    "Sgd",
    "Adam",
]

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class ConfigError(ValueError):
    """Raised when a parameter is outside its documented range."""


class NumericOverflowError(ArithmeticError):
    """Raised when an operation produces NaN or Inf from finite inputs."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    # A single sum detects any NaN/Inf in one pass with no bool temporary.
    # Magnitudes stay far below overflow for the array sizes used here,
    # so a finite array can never sum to a non-finite value.
    if not math.isfinite(float(arr.sum())):
        raise NumericOverflowError(f"{op} produced a non-finite value")
    return arr


def _suffix_broadcastable(a: tuple, b: tuple) -> bool:
    """True when one shape equals a trailing suffix of the other."""
    short, long = (a, b) if len(a) <= len(b) else (b, a)
    return short == long[len(long) - len(short):]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over the leading axes added by broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(extra)))


class Tensor:
    """Dense float64 array with an optional gradient and autodiff hooks.

    `data` is the value array, `grad` (same shape, lazily allocated) the
    accumulated gradient.  Non-leaf tensors carry `_parents` and a
    `_backward` closure that routes the output gradient to the parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.size == 0:
            raise ShapeError("tensors must have at least one element")
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple["Tensor", ...],
                 backward: Callable[[np.ndarray], None], op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = _check_finite(data, op)
        out.grad = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- introspection -------------------------------------------------

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
        """Flat row-major view of the stored values."""
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- gradient plumbing ---------------------------------------------

    def _accumulate(self, g: np.ndarray, owned: bool) -> None:
        # `owned` means the closure hands over a freshly allocated array;
        # views or shared arrays must be copied before they become `grad`.
        if self.grad is None:
            self.grad = g if owned else g.copy()
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    # -- elementwise arithmetic ----------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(other)

    def __add__(self, other):
        return add(self, self._coerce(other))

    def __radd__(self, other):
        return add(self._coerce(other), self)

    def __sub__(self, other):
        return subtract(self, self._coerce(other))

    def __rsub__(self, other):
        return subtract(self._coerce(other), self)

    def __mul__(self, other):
        return multiply(self, self._coerce(other))

    def __rmul__(self, other):
        return multiply(self._coerce(other), self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("tensor/tensor division is not supported; multiply by a reciprocal")
        return multiply(self, Tensor(1.0 / other))

    def __neg__(self):
        return multiply(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    # -- shape ops ------------------------------------------------------

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int] | None = None) -> "Tensor":
        return transpose(self, axes)

    # -- reductions -----------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if not _suffix_broadcastable(a.shape, b.shape):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast "
                         "(only leading batch dimensions may differ)")


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "add")

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape), owned=g.shape != a.shape)
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape), owned=g.shape != b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), bwd, "add")


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "subtract")

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape), owned=g.shape != a.shape)
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape), owned=True)

    return Tensor._from_op(a.data - b.data, (a, b), bwd, "subtract")


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "multiply")

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape), owned=True)
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape), owned=True)

    return Tensor._from_op(a.data * b.data, (a, b), bwd, "multiply")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with optional leading batch dimensions.

    a: [..., m, k], b: [..., k, n] -> [..., m, n].  Batch dimensions
    follow the suffix-broadcast rule.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} x {b.shape}")
    if not _suffix_broadcastable(a.shape[:-2], b.shape[:-2]):
        raise ShapeError(f"matmul: batch dimensions disagree for {a.shape} x {b.shape}")

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape), owned=True)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape), owned=True)

    return Tensor._from_op(np.matmul(a.data, b.data), (a, b), bwd, "matmul")


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight + bias in one graph node.  x may be rank 1 or higher."""
    if weight.ndim != 2 or bias.ndim != 1 or weight.shape[1] != bias.shape[0]:
        raise ShapeError(f"affine: bad parameter shapes {weight.shape} / {bias.shape}")
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"affine: input width {x.shape[-1]} != weight rows {weight.shape[0]}")

    fan_in, fan_out = weight.shape

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(np.matmul(g, weight.data.T), owned=True)
        if weight.requires_grad:
            if x.ndim == 1:
                gw = np.outer(x.data, g)
            else:
                # one flat GEMM sums the leading batch axes implicitly
                x2 = np.ascontiguousarray(x.data).reshape(-1, fan_in)
                g2 = np.ascontiguousarray(g).reshape(-1, fan_out)
                gw = np.matmul(x2.T, g2)
            weight._accumulate(gw, owned=True)
        if bias.requires_grad:
            gb = g if g.ndim == 1 else \
                np.ascontiguousarray(g).reshape(-1, fan_out).sum(axis=0)
            bias._accumulate(gb, owned=g.ndim != 1)

    out = np.matmul(x.data, weight.data)
    out += bias.data
    return Tensor._from_op(out, (x, weight, bias), bwd, "affine")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along `axis`; slices sum to 1."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            dot = (g * y).sum(axis=axis, keepdims=True)
            x._accumulate((g - dot) * y, owned=True)

    return Tensor._from_op(y, (x,), bwd, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({n},), "
                         f"got {gain.shape} / {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv

    def bwd(g: np.ndarray) -> None:
        if gain.requires_grad:
            gg = (g * xh).reshape(-1, n).sum(axis=0)
            gain._accumulate(gg, owned=True)
        if bias.requires_grad:
            gb = g.reshape(-1, n).sum(axis=0)
            bias._accumulate(gb, owned=True)
        if x.requires_grad:
            gxh = g * gain.data
            m1 = gxh.mean(axis=-1, keepdims=True)
            m2 = (gxh * xh).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (gxh - m1 - xh * m2), owned=True)

    return Tensor._from_op(xh * gain.data + bias.data, (x, gain, bias), bwd, "layer_norm")


def dropout(x: Tensor, rate: float, rng: "Rng", active: bool) -> Tensor:
    """Inverted dropout: zero with probability `rate`, scale survivors by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not active or rate == 0.0:
        return x
    keep = (rng.uniform(x.shape) >= rate) / (1.0 - rate)

    def bwd(g: np.ndarray) -> None:
        x._accumulate(g * keep, owned=True)

    return Tensor._from_op(x.data * keep, (x,), bwd, "dropout")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def bwd(g: np.ndarray) -> None:
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        x._accumulate(g * (cdf + x.data * pdf), owned=True)

    return Tensor._from_op(x.data * cdf, (x,), bwd, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    y = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                 np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def bwd(g: np.ndarray) -> None:
        x._accumulate(g * y * (1.0 - y), owned=True)

    return Tensor._from_op(y, (x,), bwd, "sigmoid")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def bwd(g: np.ndarray) -> None:
        x._accumulate(g * y, owned=True)

    return Tensor._from_op(y, (x,), bwd, "exp")


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise NumericOverflowError("log of a non-positive value")

    def bwd(g: np.ndarray) -> None:
        x._accumulate(g / x.data, owned=True)

    return Tensor._from_op(np.log(x.data), (x,), bwd, "log")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is not None:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        for ax in axes:
            if not -x.ndim <= ax < x.ndim:
                raise ShapeError(f"sum axis {ax} out of range for shape {x.shape}")

    def bwd(g: np.ndarray) -> None:
        if axis is None:
            gx = np.broadcast_to(g, x.shape)
        else:
            shape = list(x.shape)
            if not keepdims:
                for ax in sorted(a % x.ndim for a in axes):
                    g = np.expand_dims(g, ax)
            gx = np.broadcast_to(g, shape)
        x._accumulate(gx, owned=False)

    return Tensor._from_op(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)),
                           (x,), bwd, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for ax in axes:
            count *= x.shape[ax]
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    parts = tuple(tensors)
    sizes = [t.shape[axis] for t in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g: np.ndarray) -> None:
        for t, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)], owned=False)

    return Tensor._from_op(np.concatenate([t.data for t in parts], axis=axis),
                           parts, bwd, "concat")


def slice_(x: Tensor, index) -> Tensor:
    out = x.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    def bwd(g: np.ndarray) -> None:
        gx = np.zeros_like(x.data)
        gx[index] = g
        x._accumulate(gx, owned=True)

    return Tensor._from_op(out, (x,), bwd, "slice")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)

    def bwd(g: np.ndarray) -> None:
        x._accumulate(g.reshape(x.shape), owned=False)

    return Tensor._from_op(x.data.reshape(shape), (x,), bwd, "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    else:
        axes = tuple(axes)
    inverse = [0] * len(axes)
    for pos, ax in enumerate(axes):
        inverse[ax % len(axes)] = pos

    def bwd(g: np.ndarray) -> None:
        x._accumulate(np.transpose(g, inverse), owned=False)

    return Tensor._from_op(np.transpose(x.data, axes), (x,), bwd, "transpose")


def backward(loss: Tensor) -> None:
    """Populate grads for every requires_grad ancestor of a scalar loss.

    Repeated calls without `zero_grad` accumulate into leaf gradients;
    intermediate gradients are released as soon as they are consumed.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)
            node.grad = None  # intermediate; leaves keep accumulating


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Random numbers
# ---------------------------------------------------------------------------


class Rng:
    """Deterministic counter-based random stream (Philox under the hood).

    The same seed and the same call sequence reproduce the stream
    bit-exactly.  Child streams derived via `child(...)` are independent
    and themselves deterministic, which lets per-sample work fan out
    without sharing state.
    """

    __slots__ = ("seed", "_gen")

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        # Generator construction is deferred: child streams that never
        # draw (eval-mode dropout sites) cost only the key derivation.
        self._gen: np.random.Generator | None = None

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            self._gen = np.random.Generator(np.random.Philox(key=self.seed))
        return self._gen

    def child(self, *tags) -> "Rng":
        """Derive an independent stream keyed on (seed, *tags)."""
        h = hashlib.blake2b(repr((self.seed,) + tags).encode(), digest_size=8)
        return Rng(int.from_bytes(h.digest(), "little"))

    def uniform(self, shape=()) -> np.ndarray:
        return self.generator.random(shape)

    def normal(self, shape=()) -> np.ndarray:
        return self.generator.standard_normal(shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self.generator.integers(low, high, size=shape)

    def poisson(self, lam: float) -> int:
        return int(self.generator.poisson(lam))

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


class Sgd:
    """Plain gradient descent: p <- p - lr * grad."""

    def __init__(self, lr: float):
        if lr < 0:
            raise ConfigError(f"learning rate must be nonnegative, got {lr}")
        self.lr = lr

    def step(self, params: Iterable[Tensor]) -> None:
        for p in params:
            if p.grad is not None:
                p.data -= self.lr * p.grad


class Adam:
    """Adam with bias correction; state is keyed on parameter identity."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        if lr < 0:
            raise ConfigError(f"learning rate must be nonnegative, got {lr}")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}

    def step(self, params: Iterable[Tensor]) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p in params:
            if p.grad is None:
                continue
            key = id(p)
            m = self._m.get(key)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
                self._m[key] = m
                self._v[key] = v
            else:
                v = self._v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
