"""Dense numpy-backed tensors with define-by-run reverse-mode autodiff.

Broadcasting is deliberately limited to scalar-vs-tensor and equal shapes;
row-wise bias addition has its own op (:func:`add_bias`).
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

DEFAULT_DTYPE = np.float32

_grad_enabled = True


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


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(dtype or DEFAULT_DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor contains non-finite values")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op} produced non-finite values")
    return arr


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _check_finite(data, op)
    out.grad = None
    out.name = None
    out._op = op
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


@dataclass(frozen=True)
class CustomGradRule:
    """A forward function paired with a hand-written backward rule.

    ``forward(*arrays) -> (out, ctx)`` and ``backward(upstream, ctx) -> grads``,
    one gradient (or None) per input.
    """

    name: str
    forward: Callable
    backward: Callable

    def __call__(self, *inputs: Tensor) -> Tensor:
        inputs = tuple(as_tensor(t) for t in inputs)
        out, ctx = self.forward(*(t.data for t in inputs))

        def bw(g):
            grads = self.backward(g, ctx)
            for t, gr in zip(inputs, grads):
                if gr is not None and np.shape(gr) != t.shape:
                    raise DimensionError(
                        f"{self.name}: backward produced shape {np.shape(gr)} for input {t.shape}"
                    )
            return grads

        return _make(out, inputs, bw, self.name)


# ---------------------------------------------------------------------------
# elementwise


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(dtype=np.float64), dtype=g.dtype).reshape(shape)


def _coerce_pair(a, b):
    # python scalars adopt the tensor's dtype
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    else:
        a, b = as_tensor(a), as_tensor(b)
    return a, b


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _binary_shapes(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _binary_shapes(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _binary_shapes(a, b, "div")
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise NumericError("div: division by zero")
    out = ad / bd
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
        "div",
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor, eps: float = 0.0) -> Tensor:
    """Natural log of ``x + eps``; raises on non-positive arguments."""
    shifted = x.data + np.asarray(eps, dtype=x.dtype) if eps else x.data
    if np.any(shifted <= 0):
        raise NumericError("log: non-positive argument")
    return _make(np.log(shifted), (x,), lambda g: (g / shifted,), "log")


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch by tag: add/sub/mul/div take two operands, relu/exp/log one."""
    binary = {"add": add, "sub": sub, "mul": mul, "div": div}
    unary = {"relu": relu, "exp": exp, "log": log}
    if op in binary:
        if b is None:
            raise ContractError(f"{op} needs two operands")
        return binary[op](a, b)
    if op in unary:
        return unary[op](as_tensor(a))
    raise ContractError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    with np.errstate(over="ignore", invalid="ignore"):  # _make raises on non-finite output
        out = ad @ bd
    return _make(out, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """``x[B, N] + bias[N]`` row-wise."""
    if x.data.ndim != 2 or bias.data.ndim != 1 or x.shape[1] != bias.shape[0]:
        raise DimensionError(f"add_bias: {x.shape} + {bias.shape}")

    def bw(g):
        return g, g.sum(axis=0, dtype=np.float64).astype(g.dtype)

    return _make(x.data + bias.data, (x, bias), bw, "add_bias")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _make(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def sum(x: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, dtype=np.float64).astype(x.dtype)
    src = x.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).astype(x.dtype, copy=True),)

    return _make(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    out = (np.sum(x.data, axis=axis, dtype=np.float64) / n).astype(x.dtype)
    src = x.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return ((np.broadcast_to(g, src) / n).astype(x.dtype),)

    return _make(np.asarray(out), (x,), bw, "mean")


def softmax(logits: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    if logits.data.ndim == 0 or logits.shape[-1] < 1:
        raise DimensionError("softmax needs a last dimension of size >= 1")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / np.sum(e, axis=-1, keepdims=True, dtype=np.float64).astype(e.dtype)

    def bw(g):
        dot = np.sum(g * p, axis=-1, keepdims=True, dtype=np.float64).astype(p.dtype)
        return (p * (g - dot),)

    return _make(p, (logits,), bw, "softmax")


def im2col(x: Tensor, k: int = 3, stride: int = 1, pad: int = 1) -> Tensor:
    """NHWC image batch -> patch matrix ``[B*Ho*Wo, k*k*C]``."""
    if x.data.ndim != 4:
        raise DimensionError(f"im2col expects NHWC input, got {x.shape}")
    B, H, W, C = x.shape
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"im2col: kernel {k} does not fit input {H}x{W}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ii = (np.arange(Ho) * stride)[:, None] + np.arange(k)[None, :]  # Ho x k
    jj = (np.arange(Wo) * stride)[:, None] + np.arange(k)[None, :]  # Wo x k
    # B, Ho, Wo, k, k, C
    patches = xp[:, ii[:, None, :, None], jj[None, :, None, :], :]
    out = patches.reshape(B * Ho * Wo, k * k * C)

    def bw(g):
        gp = np.zeros_like(xp)
        g6 = g.reshape(B, Ho, Wo, k, k, C)
        np.add.at(gp, (slice(None), ii[:, None, :, None], jj[None, :, None, :], slice(None)), g6)
        return (gp[:, pad:pad + H, pad:pad + W, :],)

    return _make(np.ascontiguousarray(out), (x,), bw, "im2col")


# ---------------------------------------------------------------------------
# graph and backward


class Graph:
    """Topologically ordered operation records reachable from a root tensor."""

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        order: list = []
        seen: set = set()
        stack = [(root, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, graph: Optional[Graph] = None, wrt: Optional[Iterable[Tensor]] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every trainable leaf.

    Leaves listed in ``wrt`` that the loss does not reach get a zero gradient.
    """
    if loss.size != 1 or loss.data.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        _propagate(loss, graph or Graph.from_root(loss))
    for p in wrt or ():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


def _propagate(loss: Tensor, graph: Graph) -> None:
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
