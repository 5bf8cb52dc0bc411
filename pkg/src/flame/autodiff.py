"""Reverse-mode differentiation over dense float64 arrays.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their inputs requires a gradient.  Outside a tape the same functions
run as plain numpy, which is what inference uses.

Broadcasting is limited to the bias-add case: in binary elementwise ops one
operand's shape must equal, or be a trailing suffix of, the other's.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_LOG_2PI = float(np.log(2 * np.pi))
_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "is_leaf")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

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
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by constants")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    ``parameters`` collects every leaf tensor with ``requires_grad`` that was
    used while the tape was active, in first-use order.
    """

    nodes: list[Node] = field(default_factory=list)
    parameters: list[Tensor] = field(default_factory=list)
    _seen: set = field(default_factory=set, repr=False)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def record(self, kind: str, inputs: tuple[Tensor, ...], output: Tensor, vjp) -> None:
        for t in inputs:
            if t.is_leaf and t.requires_grad and id(t) not in self._seen:
                self._seen.add(id(t))
                self.parameters.append(t)
        self.nodes.append(Node(kind, inputs, output, vjp))


def apply(kind: str, inputs: Sequence, out_data: np.ndarray, vjp) -> Tensor:
    """Wrap ``out_data`` as the result of a primitive and record it if needed.

    ``vjp(g)`` maps the output adjoint to one adjoint (or None) per input.
    New primitives elsewhere in the package are built on this.
    """
    inputs = tuple(as_tensor(x) for x in inputs)
    out = Tensor(out_data)
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        _TAPES[-1].record(kind, inputs, out, vjp)
    return out


def backward(tape: Tape, loss: Tensor) -> list[np.ndarray]:
    """Accumulate d(loss)/d(param) into ``param.grad`` for the tape's parameters.

    Returns the gradients of this call, aligned with ``tape.parameters``.
    Parameters the loss does not reach get zeros.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.array(gi, dtype=np.float64, copy=True)
    out = []
    for p in tape.parameters:
        g = grads.get(id(p))
        if g is None:
            g = np.zeros_like(p.data)
        p.grad = g.copy() if p.grad is None else p.grad + g
        out.append(g)
    return out


# --- shape helpers -----------------------------------------------------------


def _check_suffix(a: np.ndarray, b: np.ndarray, kind: str) -> None:
    if a.shape == b.shape:
        return
    small, big = (a, b) if a.ndim <= b.ndim else (b, a)
    if small.ndim == 0 or big.shape[big.ndim - small.ndim:] == small.shape:
        return
    raise ValueError(f"{kind}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def _operand(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


# --- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    x, y = _operand(a), _operand(b)
    _check_suffix(x, y, "add")
    return apply("add", (a, b), x + y, lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)))


def sub(a, b) -> Tensor:
    x, y = _operand(a), _operand(b)
    _check_suffix(x, y, "sub")
    return apply("sub", (a, b), x - y, lambda g: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)))


def mul(a, b) -> Tensor:
    x, y = _operand(a), _operand(b)
    _check_suffix(x, y, "mul")
    return apply("mul", (a, b), x * y, lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return apply("exp", (a,), y, lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return apply("log", (a,), np.log(x), lambda g: (g / x,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return apply("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return apply("sigmoid", (a,), y, lambda g: (g * y * (1.0 - y),))


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = 0.5 * (1.0 + np.tanh(0.5 * x))
    return apply("silu", (a,), x * s, lambda g: (g * (s + x * s * (1.0 - s)),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    y = np.logaddexp(0.0, x)
    return apply("softplus", (a,), y, lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * x)),))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2 * np.pi)
    return apply("gelu", (a,), x * cdf, lambda g: (g * (cdf + x * pdf),))


def gaussian_logpdf(a: Tensor) -> Tensor:
    """Elementwise standard-normal log density."""
    x = a.data
    return apply("gaussian_logpdf", (a,), -0.5 * x * x - 0.5 * _LOG_2PI, lambda g: (-g * x,))


# --- reductions and shape ops -------------------------------------------------


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    x = a.data

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return apply("sum", (a,), x.sum(axis=axis), vjp)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    x = a.data
    return apply("reshape", (a,), x.reshape(shape), lambda g: (g.reshape(x.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return apply("transpose", (a,), a.data.transpose(axes), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    x = a.data

    def vjp(g):
        out = np.zeros_like(x)
        np.add.at(out, idx, g)
        return (out,)

    return apply("slice", (a,), x[idx], vjp)


slice_ = getitem


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    arrays = [_operand(t) for t in tensors]
    ref = arrays[0].shape
    ax = axis % len(ref)
    for arr in arrays[1:]:
        if arr.ndim != len(ref) or arr.shape[:ax] + arr.shape[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ValueError(f"concat: incompatible shapes {ref} and {arr.shape} along axis {axis}")
    bounds = np.cumsum([arr.shape[ax] for arr in arrays])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return apply("concat", tuple(tensors), np.concatenate(arrays, axis=ax), vjp)


# --- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (a weight shared across ``a``'s leading axes) or has
    the same leading axes as ``a``.
    """
    x, y = _operand(a), _operand(b)
    if x.ndim < 2 or y.ndim < 2 or x.shape[-1] != y.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {x.shape} and {y.shape}")
    if y.ndim > 2 and x.shape[:-2] != y.shape[:-2]:
        raise ValueError(f"matmul: incompatible shapes {x.shape} and {y.shape}")

    def vjp(g):
        gx = g @ np.swapaxes(y, -1, -2)
        if y.ndim == 2:
            gy = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gy = np.swapaxes(x, -1, -2) @ g
        return gx, gy

    return apply("matmul", (a, b), x @ y, vjp)


def masked_linear(x: Tensor, W: Tensor, M: np.ndarray, b: Tensor | None = None) -> Tensor:
    """``x @ (W * M) + b`` with a fixed binary mask ``M`` (shape in x out).

    ``M[n, k] == 0`` removes every path from input ``n`` to output ``k``, so
    the corresponding Jacobian entry is exactly zero.
    """
    xd, Wd = _operand(x), _operand(W)
    M = np.asarray(M, dtype=np.float64)
    if Wd.shape != M.shape or xd.shape[-1] != Wd.shape[0]:
        raise ValueError(f"masked_linear: incompatible shapes x{xd.shape}, W{Wd.shape}, M{M.shape}")
    Wm = Wd * M
    out = xd @ Wm
    inputs: tuple = (x, W)
    if b is not None:
        bd = _operand(b)
        if bd.shape != (Wd.shape[1],):
            raise ValueError(f"masked_linear: bias shape {bd.shape} does not match {Wd.shape[1]} outputs")
        out = out + bd
        inputs = (x, W, b)

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ Wm.T
        gW = (xd.reshape(-1, xd.shape[-1]).T @ g2) * M
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    return apply("masked_linear", inputs, out, vjp)


def linear(x, W, b=None) -> Tensor:
    out = matmul(x, W)
    return out if b is None else add(out, b)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    return apply("softmax", (a,), y, lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gm, bt = a.data, _operand(gamma), _operand(beta)
    if gm.shape != (x.shape[-1],) or bt.shape != (x.shape[-1],):
        raise ValueError(f"layer_norm: parameter shapes {gm.shape}/{bt.shape} do not match {x.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    def vjp(g):
        gxhat = g * gm
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return apply("layer_norm", (a, gamma, beta), xhat * gm + bt, vjp)
