"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor`. When any input requires a
gradient the result keeps references to its parents plus a closure that maps
the upstream gradient to per-parent gradients. :meth:`Tensor.backward` walks
that graph once in reverse topological order.

Gradients accumulate additively on leaves; call :meth:`Tensor.zero_grad`
between optimizer steps.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, InputError, NonFiniteError, OracleError, ShapeError

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_mode = threading.local()


@contextmanager
def no_grad() -> Iterator[None]:
    """Skip graph recording in this thread (evaluation, teacher passes)."""
    prev = getattr(_mode, "no_grad", False)
    _mode.no_grad = True
    try:
        yield
    finally:
        _mode.no_grad = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- basic accessors -------------------------------------------------
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
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{flag})"

    # -- autodiff --------------------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` on every reachable leaf that requires one."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() on a tensor that does not require grad")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division by a tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _topological_order(root: Tensor) -> list[Tensor]:
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = not getattr(_mode, "no_grad", False) and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc
    return _result(
        data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from exc
    return _result(
        data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), backward, "mul")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported as NonFiniteError
        data = np.exp(x.data)
    return _result(data, (x,), lambda g: (g * data,), "exp")


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise NonFiniteError("log of a non-positive value")
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def tanh(x: Tensor) -> Tensor:
    data = np.tanh(x.data)
    return _result(data, (x,), lambda g: (g * (1.0 - data * data),), "tanh")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    v2 = v * v
    t = np.tanh(_SQRT_2_OVER_PI * v * (1.0 + 0.044715 * v2))
    data = 0.5 * v * (1.0 + t)

    def backward(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * v2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return _result(data, (x,), backward, "gelu")


# -- shape ops -----------------------------------------------------------
def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {x.shape} -> {tuple(shape)}") from exc
    return _result(data, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes (default: swap the last two). Copies the data."""
    if axes is None:
        axes = list(range(x.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = np.ascontiguousarray(x.data.transpose(axes))
    return _result(data, (x,), lambda g: (g.transpose(inverse),), "transpose")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(data, (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# -- linear algebra ------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either 2-D (shared across the
    batch) or has the same leading axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} x {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        data = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _result(data, (a, b), backward, "matmul")


# -- normalisation / probability ------------------------------------------
def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm params must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    rstd = 1.0 / np.sqrt((centred * centred).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * rstd
    data = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        dbias = g.sum(axis=lead) if bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gain.data
            dx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return dx, dgain, dbias

    return _result(data, (x, gain, bias), backward, "layer_norm")


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. Entries where ``mask`` is False get
    probability exactly zero; a fully masked row yields all zeros."""
    v = x.data
    if mask is not None:
        v = np.where(mask, v, -np.inf)
    m = v.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(v - m)
    s = e.sum(axis=-1, keepdims=True)
    p = e / np.where(s == 0.0, 1.0, s)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (x,), backward, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax with max subtraction."""
    if x.ndim < 1 or x.shape[-1] < 2:
        raise ShapeError(f"log_softmax needs at least 2 classes, got shape {x.shape}")
    if not np.isfinite(x.data).all():
        raise NonFiniteError("log_softmax input is not finite")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - lse

    def backward(g):
        return (g - np.exp(data) * g.sum(axis=-1, keepdims=True),)

    return _result(data, (x,), backward, "log_softmax")


def pick(x: Tensor, index: Sequence[int]) -> Tensor:
    """``x[i, index[i]]`` for a 2-D ``x``; returns shape [b]."""
    idx = np.asarray(index, dtype=np.int64)
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(f"pick: need [b, c] input and b indices, got {x.shape} and {idx.shape}")
    if (idx < 0).any() or (idx >= x.shape[1]).any():
        raise IndexError(f"pick: index out of range [0, {x.shape[1]})")
    rows = np.arange(x.shape[0])
    data = x.data[rows, idx]

    def backward(g):
        out = np.zeros_like(x.data)
        out[rows, idx] = g
        return (out,)

    return _result(data, (x,), backward, "pick")


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under row-wise softmax."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy needs [b, c] logits, got {logits.shape}")
    c = logits.shape[1]
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: {labels.shape[0]} labels for {logits.shape[0]} rows")
    if (labels < 0).any() or (labels >= c).any():
        raise IndexError(f"cross_entropy: label out of range [0, {c})")
    return -mean(pick(log_softmax(logits), labels))


# -- indexing ------------------------------------------------------------
def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; ids of any integer shape."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if (ids < 0).any() or (ids >= n).any():
        raise InputError(f"embedding: id out of range [0, {n})")
    data = table.data[ids]

    def backward(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _result(data, (table,), backward, "embedding")


def select_positions(x: Tensor, positions: Sequence[int]) -> Tensor:
    """From ``x`` [b, T, d] take ``x[i, positions[i]]`` -> [b, d]."""
    pos = np.asarray(positions, dtype=np.int64)
    rows = np.arange(x.shape[0])
    data = x.data[rows, pos]

    def backward(g):
        out = np.zeros_like(x.data)
        out[rows, pos] = g
        return (out,)

    return _result(data, (x,), backward, "select_positions")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout: scale kept units by 1/(1-p) in training, identity otherwise."""
    if not train or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must be in [0, 1), got {p}")
    if rng is None:
        raise ContractError("dropout in train mode needs an RNG")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# -- gradient oracle -----------------------------------------------------
def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    indices: Sequence[int] | None = None,
) -> float:
    """Compare analytic gradients of scalar ``f`` at ``x`` with central
    differences and return the worst relative error

        |analytic - numeric| / (|analytic| + |numeric| + 1e-12).

    ``x`` is perturbed in place and restored. ``indices`` limits the check to
    a subset of flat positions. Any gradient already on ``x`` is discarded.
    """
    if h <= 0:
        raise ContractError("finite_diff_check needs h > 0")
    x.requires_grad = True
    x.grad = None
    if not x.data.flags.c_contiguous:
        x.data = np.ascontiguousarray(x.data)
    loss = f(x)
    loss.backward()
    analytic = (x.grad if x.grad is not None else np.zeros_like(x.data)).reshape(-1).copy()
    x.grad = None

    flat = x.data.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in positions:
        orig = flat[i]
        try:
            flat[i] = orig + h
            fp = f(x).item()
            flat[i] = orig - h
            fm = f(x).item()
        except NonFiniteError as exc:
            raise OracleError(f"f is not finite near entry {i}") from exc
        finally:
            flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise OracleError(f"f is not finite near entry {i}")
        numeric = (fp - fm) / (2.0 * h)
        a = analytic[i]
        worst = max(worst, abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12))
    return worst
