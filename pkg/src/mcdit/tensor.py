"""Dense tensors with reverse-mode automatic differentiation.

Small numpy-backed engine: every differentiable op records its parents and a
backward closure on the output tensor, and ``Tensor.backward()`` walks the
resulting DAG once in reverse topological order. Gradients accumulate (add,
never overwrite) so weight sharing across branches works; call ``zero_grad``
between steps.

Scalars are 32-bit by default; verification suites switch to 64-bit via
``use_dtype(np.float64)``. Any op that produces NaN/Inf raises NumericError.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_FINITE_CHECKS = True


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported dtype {dtype!r}")
    _DEFAULT_DTYPE = dtype


@contextmanager
def use_dtype(dtype):
    """Temporarily switch the default scalar width (e.g. float64 for checks)."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference/sampling)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_finite_checks(enabled: bool) -> None:
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not _FINITE_CHECKS:
        return
    # one-pass screen; the sum is non-finite iff some entry is, except for
    # overflow of the sum itself, which the exact re-check below absolves
    if not np.isfinite(arr.sum()) and not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {what}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """N-dimensional array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], tuple] | None = None
        self._op = "leaf"

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple, backward_fn, op: str) -> "Tensor":
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = parents if track else ()
        out._backward_fn = backward_fn if track else None
        out._op = op
        return out

    # -- introspection -------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- arithmetic ----------------------------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))

    def __add__(self, other):
        other = self._lift(other)
        a, b = self, other
        out = a.data + b.data
        return Tensor._from_op(
            out, (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
            "add",
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = self._lift(other)
        a, b = self, other
        out = a.data - b.data
        return Tensor._from_op(
            out, (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
            "sub",
        )

    def __rsub__(self, other):
        return self._lift(other).__sub__(self)

    def __mul__(self, other):
        other = self._lift(other)
        a, b = self, other
        out = a.data * b.data
        return Tensor._from_op(
            out, (a, b),
            lambda g: (
                _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
            ),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        a, b = self, other
        out = a.data / b.data
        return Tensor._from_op(
            out, (a, b),
            lambda g: (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            ),
            "div",
        )

    def __rtruediv__(self, other):
        return self._lift(other).__truediv__(self)

    def __neg__(self):
        a = self
        return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise ContractError("only scalar exponents are supported")
        a, n = self, float(exponent)
        out = a.data ** n
        return Tensor._from_op(
            out, (a,), lambda g: (g * n * a.data ** (n - 1.0),), "pow",
        )

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        out = a.data.reshape(shape)
        return Tensor._from_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")

    def transpose(self, *axes) -> "Tensor":
        a = self
        if not axes:
            axes = tuple(reversed(range(a.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        out = a.data.transpose(axes)
        return Tensor._from_op(out, (a,), lambda g: (g.transpose(inv),), "transpose")

    def __getitem__(self, key) -> "Tensor":
        a = self
        out = a.data[key]
        if not isinstance(out, np.ndarray):
            out = np.asarray(out, dtype=a.data.dtype)

        def bw(g):
            full = np.zeros_like(a.data)
            full[key] = g.reshape(full[key].shape)
            return (full,)

        return Tensor._from_op(out, (a,), bw, "slice")

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        out = a.data.sum(axis=axis, keepdims=keepdims)
        out = np.asarray(out, dtype=a.data.dtype)

        def bw(g):
            if axis is None:
                return (np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=False),)
            g2 = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(g2, a.shape).astype(a.data.dtype, copy=False),)

        return Tensor._from_op(out, (a,), bw, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        out = a.data.mean(axis=axis, keepdims=keepdims)
        out = np.asarray(out, dtype=a.data.dtype)
        count = a.size if axis is None else np.prod(
            [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
        )

        def bw(g):
            if axis is None:
                g2 = np.broadcast_to(g, a.shape)
            else:
                g2 = np.broadcast_to(g if keepdims else np.expand_dims(g, axis), a.shape)
            return ((g2 / count).astype(a.data.dtype, copy=False),)

        return Tensor._from_op(out, (a,), bw, "mean")

    # -- reverse pass --------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode accumulation from a scalar seed.

        Populates ``.grad`` on every reachable tensor with requires_grad;
        repeated calls accumulate.
        """
        if self.size != 1:
            raise ContractError(f"backward seed must be scalar, got shape {self.shape}")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        flows: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = flows.pop(id(node), None)
            if g is None:
                continue
            if node._backward_fn is None:
                # leaf: this is where gradients land and accumulate
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in flows:
                    flows[key] = flows[key] + pg
                else:
                    flows[key] = pg


# -- free-function primitives -------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2-D pairs or batched 3-D pairs with equal batch dims."""
    a, b = Tensor._lift(a), Tensor._lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.ndim != b.ndim:
        raise DimensionError(f"matmul rank mismatch: {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner-dimension mismatch: {a.shape} @ {b.shape}")
    # normalize layout before BLAS: kernel packing (and thus summation order)
    # depends on strides, and results must be a function of values alone
    ad = np.ascontiguousarray(a.data)
    bd = np.ascontiguousarray(b.data)
    out = ad @ bd

    def bw(g):
        return (
            np.ascontiguousarray(g) @ bd.swapaxes(-1, -2) if a.requires_grad else None,
            ad.swapaxes(-1, -2) @ np.ascontiguousarray(g) if b.requires_grad else None,
        )

    return Tensor._from_op(out, (a, b), bw, "matmul")


def softmax_scaled(x: Tensor, scale: float) -> Tensor:
    """Softmax of ``scale * x`` along the last axis, row-max stabilized.

    Each output row sums to 1; rows must be non-empty and scale positive.
    """
    x = Tensor._lift(x)
    if x.ndim < 1 or x.shape[-1] < 1:
        raise DimensionError(f"softmax needs a non-empty last axis, got {x.shape}")
    if not scale > 0:
        raise ContractError(f"softmax scale must be positive, got {scale}")
    s = x.data * scale
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return ((y * (g - inner) * scale).astype(x.data.dtype, copy=False),)

    return Tensor._from_op(y.astype(x.data.dtype, copy=False), (x,), bw, "softmax")


def layer_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    x = Tensor._lift(x)
    if x.shape[-1] < 1:
        raise DimensionError(f"layer_norm needs a non-empty last axis, got {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.data - mu) * inv

    def bw(g):
        gy = (g * y).mean(axis=-1, keepdims=True)
        gm = g.mean(axis=-1, keepdims=True)
        return ((inv * (g - gm - y * gy)).astype(x.data.dtype, copy=False),)

    return Tensor._from_op(y.astype(x.data.dtype, copy=False), (x,), bw, "layer_norm")


def silu(x: Tensor) -> Tensor:
    x = Tensor._lift(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def bw(g):
        return (g * sig * (1.0 + x.data * (1.0 - sig)),)

    return Tensor._from_op(out.astype(x.data.dtype, copy=False), (x,), bw, "silu")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [Tensor._lift(t) for t in tensors]
    if not parts:
        raise DimensionError("concat of an empty list")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(parts))
        )

    return Tensor._from_op(out, tuple(parts), bw, "concat")


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup into an embedding table; gradient scatter-adds by id."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise DimensionError(f"ids must be 1-D, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"token id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return Tensor._from_op(out, (table,), bw, "embedding")


def zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE))


def ones(*shape) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DEFAULT_DTYPE))


def randn(rng: np.random.Generator, *shape, std: float = 1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * std)


# -- verification --------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs in 64-bit regardless of the ambient default. Relative error per
    coordinate is |a - n| / max(1, |a|, |n|).
    """
    if not step > 0:
        raise ContractError(f"grad_check step must be positive, got {step}")
    with use_dtype(np.float64):
        xt = Tensor(np.asarray(x.data, dtype=np.float64), requires_grad=True)
        y = f(xt)
        if y.size != 1:
            raise ContractError("grad_check target must be scalar-valued")
        if not np.isfinite(y.data).all():
            raise NumericError("non-finite output in grad_check")
        y.backward()
        analytic = xt.grad if xt.grad is not None else np.zeros_like(xt.data)

        numeric = np.zeros_like(xt.data)
        flat = xt.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f(Tensor(xt.data.copy())).item()
            flat[i] = orig - step
            lo = f(Tensor(xt.data.copy())).item()
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError("non-finite output in grad_check")
            nflat[i] = (hi - lo) / (2.0 * step)

        denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
        return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
