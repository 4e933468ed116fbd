"""Reverse-mode automatic differentiation on numpy arrays.

The graph is built on the fly: every op on a :class:`Tensor` that requires a
gradient records its parents and a backward closure.  Backward closures are
written in terms of Tensor ops themselves, so running :func:`grad` with
``create_graph=True`` records the backward pass as a new graph and a second
:func:`grad` call yields second-order derivatives.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradError",
    "concat",
    "grad",
    "no_grad",
    "is_grad_enabled",
]

_GRAD_ENABLED = True
_SEQ = itertools.count()


class GradError(RuntimeError):
    """Raised for invalid differentiation requests."""


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = enabled
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def no_grad():
    """Context manager under which ops record nothing."""
    return _grad_mode(False)


def _as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


# backward(g, needs) -> one Tensor (or None) per parent
BackwardFn = Callable[["Tensor", Sequence[bool]], Sequence["Tensor | None"]]


class Tensor:
    # seq: creation order; a node can only depend on nodes with a smaller seq
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op", "seq")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf" if requires_grad else "const"
        self.seq = next(_SEQ)

    # -- construction -------------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: tuple["Tensor", ...], backward: BackwardFn, op: str) -> "Tensor":
        # hot path: skip __init__ (data is already a float64 array)
        out = object.__new__(Tensor)
        out.data = data
        out.seq = next(_SEQ)
        if _GRAD_ENABLED:
            for p in parents:
                if p.requires_grad:
                    out.requires_grad = True
                    out._parents = parents
                    out._backward = backward
                    out.op = op
                    return out
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out.op = "const"
        return out

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
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- arithmetic ---------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = _as_tensor(other)
        a, b = self, other

        def backward(g, needs):
            return (
                _unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None,
            )

        return Tensor._make(a.data + b.data, (a, b), backward, "add")

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.data, (self,), lambda g, needs: (-g,), "neg")

    def __sub__(self, other) -> "Tensor":
        other = _as_tensor(other)
        a, b = self, other

        def backward(g, needs):
            return (
                _unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None,
            )

        return Tensor._make(a.data - b.data, (a, b), backward, "sub")

    def __rsub__(self, other) -> "Tensor":
        return _as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        if not isinstance(other, Tensor):
            c = float(other)
            return Tensor._make(self.data * c, (self,), lambda g, needs: (g * c,), "scale")
        a, b = self, other

        def backward(g, needs):
            return (
                _unbroadcast(g * b, a.shape) if needs[0] else None,
                _unbroadcast(g * a, b.shape) if needs[1] else None,
            )

        return Tensor._make(a.data * b.data, (a, b), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a Python scalar")
        return self * (1.0 / float(other))

    def __matmul__(self, other) -> "Tensor":
        a, b = self, _as_tensor(other)
        if a.ndim != 2 or b.ndim != 2:
            raise ValueError(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

        def backward(g, needs):
            return (
                g @ b.T if needs[0] else None,
                a.T @ g if needs[1] else None,
            )

        return Tensor._make(a.data @ b.data, (a, b), backward, "matmul")

    # -- shape ops ----------------------------------------------------
    @property
    def T(self) -> "Tensor":
        return Tensor._make(self.data.T, (self,), lambda g, needs: (g.T,), "transpose")

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g, needs: (g.reshape(src),), "reshape")

    def broadcast_to(self, shape) -> "Tensor":
        src = self.shape
        data = np.broadcast_to(self.data, shape)
        return Tensor._make(data, (self,), lambda g, needs: (_unbroadcast(g, src),), "broadcast")

    def __getitem__(self, idx) -> "Tensor":
        src = self.shape
        return Tensor._make(self.data[idx], (self,), lambda g, needs: (_scatter(g, idx, src),), "slice")

    # -- reductions ---------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        src = self.shape
        if axis is None:
            kept = (1,) * len(src)
        else:
            axes = {a % len(src) for a in ((axis,) if isinstance(axis, int) else axis)}
            kept = tuple(1 if i in axes else n for i, n in enumerate(src))

        def backward(g, needs):
            if not keepdims:
                g = g.reshape(kept)
            return (g.broadcast_to(src),)

        return Tensor._make(np.asarray(np.sum(self.data, axis=axis, keepdims=keepdims)), (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            n = int(np.prod([self.shape[ax] for ax in axes]))
        if n == 0:
            raise ValueError("mean of an empty tensor")
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- elementwise nonlinearities -------------------------------------
    def square(self) -> "Tensor":
        x = self
        return Tensor._make(x.data * x.data, (x,), lambda g, needs: (g * x * 2.0,), "square")

    def relu(self) -> "Tensor":
        x = self
        mask = x.data > 0

        def backward(g, needs):
            return (g * Tensor(mask.astype(np.float64)),)

        return Tensor._make(np.where(mask, x.data, 0.0), (x,), backward, "relu")

    def tanh(self) -> "Tensor":
        out_data = np.tanh(self.data)
        holder: list[Tensor] = []

        def backward(g, needs):
            t = holder[0]
            return (g * (1.0 - t.square()),)

        out = Tensor._make(out_data, (self,), backward, "tanh")
        holder.append(out if out.requires_grad else Tensor(out_data))
        return out

    def softmax(self, axis: int = -1) -> "Tensor":
        z = self.data - np.max(self.data, axis=axis, keepdims=True)
        e = np.exp(z)
        s_data = e / np.sum(e, axis=axis, keepdims=True)
        holder: list[Tensor] = []

        def backward(g, needs):
            s = holder[0]
            gs = g * s
            return (gs - s * gs.sum(axis=axis, keepdims=True),)

        out = Tensor._make(s_data, (self,), backward, "softmax")
        holder.append(out if out.requires_grad else Tensor(s_data))
        return out


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _scatter(g: Tensor, idx, shape: tuple[int, ...]) -> Tensor:
    """Place ``g`` at ``idx`` inside a zero tensor of ``shape``."""
    data = np.zeros(shape)
    data[idx] = g.data
    return Tensor._make(data, (g,), lambda gg, needs: (gg[idx],), "scatter")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of no tensors")
    ndim = tensors[0].ndim
    ax = axis % ndim
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g, needs):
        out = []
        for i, need in enumerate(needs):
            if not need:
                out.append(None)
                continue
            sl = [slice(None)] * ndim
            sl[ax] = slice(int(bounds[i]), int(bounds[i + 1]))
            out.append(g[tuple(sl)])
        return out

    data = np.concatenate([t.data for t in tensors], axis=ax)
    return Tensor._make(data, tuple(tensors), backward, "concat")


def _toposort(root: Tensor, min_seq: int = 0) -> list[Tensor]:
    """Post-order of grad-requiring ancestors of ``root`` created at or after ``min_seq``."""
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
            if p.requires_grad and p.seq >= min_seq and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(
    output: Tensor,
    inputs: Iterable[Tensor],
    create_graph: bool = False,
    allow_unused: bool = False,
) -> list[Tensor]:
    """Gradients of scalar ``output`` with respect to each tensor in ``inputs``.

    With ``create_graph=True`` the returned gradients are graph nodes
    themselves and can be differentiated again.  Otherwise they are constants.
    """
    inputs = list(inputs)
    if output.size != 1:
        raise GradError(f"grad needs a scalar output, got shape {output.shape}")
    if not np.all(np.isfinite(output.data)):
        raise FloatingPointError("non-finite output in grad")
    input_ids = {id(t): i for i, t in enumerate(inputs)}
    results: list[Tensor | None] = [None] * len(inputs)

    if not output.requires_grad:
        order: list[Tensor] = []
    else:
        order = _toposort(output, min((t.seq for t in inputs), default=0))

    # nodes from which some input is reachable (by walking parents)
    reach: set[int] = set()
    for node in order:
        if id(node) in input_ids or any(id(p) in reach for p in node._parents):
            reach.add(id(node))

    missing = [i for i, t in enumerate(inputs) if id(t) not in reach]
    if missing and not allow_unused:
        raise GradError(f"inputs {missing} do not participate in the graph of the output")

    grads: dict[int, Tensor] = {}
    with _grad_mode(create_graph):
        if id(output) in reach:
            grads[id(output)] = Tensor(np.ones(output.shape))
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            slot = input_ids.get(id(node))
            if slot is not None:
                results[slot] = g
            if node._backward is None:
                continue
            needs = [id(p) in reach for p in node._parents]
            if not any(needs):
                continue
            pgrads = node._backward(g, needs)
            for p, need, pg in zip(node._parents, needs, pgrads):
                if not need or pg is None:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg

    out = []
    for t, r in zip(inputs, results):
        out.append(r if r is not None else Tensor(np.zeros(t.shape)))
    return out
