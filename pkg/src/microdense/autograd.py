"""Dense tensors and a small reverse-mode differentiation engine.

Every differentiable operation produces a :class:`Tensor` that remembers its
inputs and a closure mapping the upstream gradient to one gradient per input.
:func:`backward` walks the reachable nodes in reverse topological order.

A :class:`Graph` is a recording context: operations executed while it is
active are appended to ``graph.nodes`` in creation order, which is a valid
topological order.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_state = threading.local()


class ShapeError(ValueError):
    """Raised when an operation receives tensors of incompatible shape."""

    def __init__(self, node: str, expected, actual, detail: str = ""):
        self.node = node
        self.expected = expected
        self.actual = actual
        msg = f"{node}: expected {expected}, got {actual}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class Tensor:
    """N-dimensional array node.

    ``data`` is a contiguous numpy array; ``grad`` is populated by
    :func:`backward` for every node reachable from the loss.
    """

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        op: str = "leaf",
        inputs: Sequence["Tensor"] = (),
        backward_fn: Optional[Callable] = None,
        name: Optional[str] = None,
    ):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim == 0:
            pass
        elif min(arr.shape) < 1:
            raise ShapeError(name or op, "all extents >= 1", arr.shape)
        self.data = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = op
        self.inputs = tuple(inputs)
        self._backward = backward_fn
        self.name = name
        graph = getattr(_state, "graph", None)
        if graph is not None:
            graph.nodes.append(self)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return not self.inputs

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(self.name or self.op, "single-element tensor", self.shape)
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{label})"

    # arithmetic sugar; the real work is in the functions below
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.dtype)))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """Trainable tensor with an optimizer momentum buffer.

    ``decay_exempt`` marks batch-norm affine terms and biases, which the
    optimizer never weight-decays.
    """

    def __init__(self, data, name: Optional[str] = None, decay_exempt: bool = False):
        super().__init__(data, requires_grad=True, op="param", name=name)
        self.momentum = np.zeros_like(self.data)
        self.decay_exempt = decay_exempt

    @property
    def value(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.shape})"


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), op="const")


class no_grad:
    """Context in which new nodes record no gradient closures."""

    def __enter__(self):
        self._prev = getattr(_state, "no_grad", False)
        _state.no_grad = True
        return self

    def __exit__(self, *exc):
        _state.no_grad = self._prev


def make_node(data, op: str, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Create an op output; gradient closure is kept only if an input needs it."""
    requires = not getattr(_state, "no_grad", False) and any(t.requires_grad for t in inputs)
    return Tensor(
        data,
        requires_grad=requires,
        op=op,
        inputs=inputs,
        backward_fn=backward_fn if requires else None,
    )


class Graph:
    """Recorded computation.

    ``Graph(fn)`` wraps a function of named tensors; :meth:`forward` runs it
    under recording and :meth:`backward` differentiates the scalar it returned.
    When used as a bare context manager it records whatever runs inside.
    """

    def __init__(self, fn: Optional[Callable[..., Tensor]] = None):
        self.fn = fn
        self.nodes: list[Tensor] = []
        self.output: Optional[Tensor] = None
        self._prev = None

    def __enter__(self) -> "Graph":
        self._prev = getattr(_state, "graph", None)
        _state.graph = self
        return self

    def __exit__(self, *exc) -> None:
        _state.graph = self._prev

    def forward(self, **inputs) -> Tensor:
        if self.fn is None:
            raise RuntimeError("graph has no function to run")
        self.nodes = []
        with self:
            self.output = self.fn(**inputs)
        return self.output

    def backward(self) -> None:
        if self.output is None:
            raise RuntimeError("forward() must run before backward()")
        backward(self.output)

    def parameters(self) -> list[Parameter]:
        seen, out = set(), []
        for node in _topo_order(self.output) if self.output is not None else []:
            if isinstance(node, Parameter) and id(node) not in seen:
                seen.add(id(node))
                out.append(node)
        return out


def forward(graph: Graph, inputs: dict) -> Tensor:
    return graph.forward(**inputs)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.inputs:
            if id(parent) not in visited and parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(target) -> None:
    """Populate gradients of every node reachable from a scalar ``target``.

    Leaf gradients accumulate across calls until :func:`zero_grad`; interior
    node gradients are recomputed on each call.
    """
    root = target.output if isinstance(target, Graph) else target
    if root.data.size != 1:
        raise ShapeError(root.name or root.op, "scalar terminal node", root.shape)
    order = _topo_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        if node._backward is None:
            continue
        input_grads = node._backward(g)
        for parent, pg in zip(node.inputs, input_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(f"{node.op} backward", parent.shape, pg.shape)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape, "not broadcastable") from None

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(out, "add", (a, b), back)


def neg(a: Tensor) -> Tensor:
    return make_node(-a.data, "neg", (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape, "not broadcastable") from None

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_node(out, "mul", (a, b), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", f"(m,k)@(k,n)", (a.shape, b.shape))
    out = a.data @ b.data

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return make_node(out, "matmul", (a, b), back)


def tsum(a: Tensor) -> Tensor:
    return make_node(a.data.sum(), "sum", (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    return make_node(
        a.data.mean(), "mean", (a,), lambda g: (np.full(a.shape, g / n, dtype=a.dtype),)
    )


def reshape(a: Tensor, shape: tuple) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", shape, a.shape) from None
    return make_node(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def identity(a: Tensor) -> Tensor:
    return make_node(a.data.copy(), "identity", (a,), lambda g: (g,))


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array.

    ``x`` may be a Tensor (its ``data`` is perturbed in place and restored)
    or an array.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DEFAULT_DTYPE)
    grad = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(arr))
        flat[i] = orig - h
        fm = float(f(arr))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at element {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, atol: float = 1e-8,
                   rtol: float = 1e-4) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, atol / rtol).

    The floor makes the value a plain relative error for gradients larger
    than atol/rtol and an absolute error scaled by rtol/atol below it, so
    ``relative_error(...) < rtol`` means every element is within rtol
    relatively or within atol absolutely near zero.
    """
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol / rtol)
    return float((diff / scale).max()) if diff.size else 0.0


def gradcheck(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-5,
    atol: float = 1e-8,
    rtol: float = 1e-4,
) -> dict[str, float]:
    """Compare backward() against central differences for each tensor.

    ``loss_fn`` rebuilds the graph from the current tensor values. Returns
    a mapping from tensor name (or index) to max relative error.
    """
    zero_grad(tensors)
    loss = loss_fn()
    backward(loss)
    errors = {}
    for idx, t in enumerate(tensors):
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.copy()
        numeric = finite_diff_grad(lambda _: loss_fn().item(), t, h)
        errors[t.name or str(idx)] = relative_error(analytic, numeric, atol, rtol)
    zero_grad(tensors)
    return errors
