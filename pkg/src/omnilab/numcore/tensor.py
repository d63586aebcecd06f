"""Define-by-run reverse-mode autodiff over dense numpy arrays.

A :class:`Graph` records every operation executed while it is active. Nodes are
appended in execution order, which is a valid topological order, so the
backward pass is a single reverse sweep that visits each node once.
"""
from __future__ import annotations

import math
import threading
import weakref
from typing import Callable, Iterable, Sequence

import numpy as np

from .. import kernels


class GraphError(RuntimeError):
    """Raised by an operation; ``node`` names the failing node (``op#index``)."""

    def __init__(self, node: str, message: str):
        super().__init__(f"{node}: {message}")
        self.node = node


class ShapeError(GraphError, ValueError):
    pass


class NonFiniteError(GraphError, FloatingPointError):
    pass


_local = threading.local()


def current_graph() -> "Graph":
    stack = getattr(_local, "stack", None)
    if not stack:
        raise RuntimeError("no active Graph; use `with Graph() as g:`")
    return stack[-1]


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "op", "index", "requires_grad", "_graph", "label")

    def __init__(self, graph, data, op, parents=(), backward_fn=None, requires_grad=False, label=None):
        # weak: the graph owns its nodes, so a strong back-reference would form
        # a cycle that keeps every activation alive until the cyclic GC runs
        self._graph = weakref.ref(graph)
        self.data = data
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.index = -1
        self.requires_grad = requires_grad
        self.label = label

    @property
    def graph(self) -> "Graph":
        g = self._graph()
        if g is None:
            raise RuntimeError(f"graph of {self.op}#{self.index} no longer exists")
        return g

    @property
    def name(self) -> str:
        base = f"{self.op}#{self.index}"
        return f"{base}({self.label})" if self.label else base

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor({self.name}, shape={self.data.shape})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


class Graph:
    """Records operations for one forward/backward evaluation.

    ``dtype`` fixes the floating type of every leaf created in the graph.
    ``check_finite`` makes every op verify its output; a NaN or Inf raises
    :class:`NonFiniteError` naming the producing node.
    """

    def __init__(self, dtype=np.float32, check_finite: bool = True):
        self.dtype = np.dtype(dtype)
        self.check_finite = check_finite
        self.nodes: list[Tensor] = []

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def _record(self, t: Tensor) -> Tensor:
        t.index = len(self.nodes)
        self.nodes.append(t)
        if self.check_finite and t.data.dtype.kind == "f" and not _all_finite(t.data):
            raise NonFiniteError(t.name, "non-finite value in forward pass")
        return t

    def constant(self, value, label=None) -> Tensor:
        arr = np.asarray(value, dtype=self.dtype)
        return self._record(Tensor(self, arr, "const", label=label))

    def param(self, value, label=None) -> Tensor:
        arr = np.asarray(value, dtype=self.dtype)
        return self._record(Tensor(self, arr, "param", requires_grad=True, label=label))

    def op(self, name: str, inputs: Sequence[Tensor], value: np.ndarray, backward: Callable | None) -> Tensor:
        """Record a custom operation.

        ``backward(grad)`` must return one gradient (or ``None``) per input.
        """
        needs = any(i.requires_grad for i in inputs)
        t = Tensor(self, value, name, tuple(inputs), backward if needs else None, needs)
        return self._record(t)

    def backward(self, root: Tensor, grad=None):
        if grad is None:
            if root.data.size != 1:
                raise ShapeError(root.name, "backward from a non-scalar needs an explicit gradient")
            grad = np.ones_like(root.data)
        root.grad = np.asarray(grad, dtype=root.data.dtype)
        for node in reversed(self.nodes[: root.index + 1]):
            if node.grad is None or node.backward_fn is None:
                continue
            grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if g.shape != parent.data.shape:
                    raise ShapeError(node.name, f"gradient shape {g.shape} != input shape {parent.data.shape}")
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g


def _all_finite(x: np.ndarray) -> bool:
    # a sum is non-finite whenever any term is; only then pay for the exact check
    with np.errstate(over="ignore", invalid="ignore"):
        if np.isfinite(x.sum()):
            return True
    return bool(np.isfinite(x).all())


def _graph_of(*xs) -> Graph:
    for x in xs:
        if isinstance(x, Tensor):
            return x.graph
    return current_graph()


def _as_tensor(g: Graph, x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return g.constant(x)


def _pending_name(g: Graph, op: str) -> str:
    return f"{op}#{len(g.nodes)}"


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_shapes(g, op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(_pending_name(g, op), f"cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    g = _graph_of(a, b)
    a, b = _as_tensor(g, a), _as_tensor(g, b)
    _broadcast_shapes(g, "add", a, b)
    sa, sb = a.shape, b.shape
    return g.op("add", (a, b), a.data + b.data, lambda gr: (_unbroadcast(gr, sa), _unbroadcast(gr, sb)))


def sub(a, b) -> Tensor:
    g = _graph_of(a, b)
    a, b = _as_tensor(g, a), _as_tensor(g, b)
    _broadcast_shapes(g, "sub", a, b)
    sa, sb = a.shape, b.shape
    return g.op("sub", (a, b), a.data - b.data, lambda gr: (_unbroadcast(gr, sa), _unbroadcast(-gr, sb)))


def mul(a, b) -> Tensor:
    g = _graph_of(a, b)
    a, b = _as_tensor(g, a), _as_tensor(g, b)
    _broadcast_shapes(g, "mul", a, b)
    ad, bd = a.data, b.data

    def bw(gr):
        return (
            _unbroadcast(gr * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(gr * ad, bd.shape) if b.requires_grad else None,
        )

    return g.op("mul", (a, b), ad * bd, bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return x.graph.op("scale", (x,), x.data * c, lambda gr: (gr * c,))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    return x.graph.op("silu", (x,), kernels.silu(xd), lambda gr: (kernels.silu_bwd(xd, gr),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    u = _GELU_C * (xd + 0.044715 * xd**3)
    th = np.tanh(u)
    out = 0.5 * xd * (1.0 + th)

    def bw(gr):
        du = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (gr * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * du),)

    return x.graph.op("gelu", (x,), out.astype(xd.dtype, copy=False), bw)


# ---------------------------------------------------------------------------
# linear algebra and shape ops
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matmul. ``b`` may be 2-D (shared weight) or match ``a``'s batch dims."""
    g = _graph_of(a, b)
    a, b = _as_tensor(g, a), _as_tensor(g, b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(_pending_name(g, "matmul"), f"incompatible operands {ad.shape} @ {bd.shape}")
    if bd.ndim > 2 and bd.shape[:-2] != ad.shape[:-2]:
        raise ShapeError(_pending_name(g, "matmul"), f"batch dims differ {ad.shape} @ {bd.shape}")

    def bw(gr):
        ga = gr @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ gr.reshape(-1, gr.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ gr
        return ga, gb

    return g.op("matmul", (a, b), ad @ bd, bw)


def linear(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ w + bias`` with ``w`` of shape (in, out)."""
    g = x.graph
    xd, wd = x.data, w.data
    if wd.ndim != 2 or xd.shape[-1] != wd.shape[0]:
        raise ShapeError(_pending_name(g, "linear"), f"input {xd.shape} vs weight {wd.shape}")
    if bias is not None and bias.shape != (wd.shape[1],):
        raise ShapeError(_pending_name(g, "linear"), f"bias {bias.shape} vs weight {wd.shape}")
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd
    if bias is not None:
        out += bias.data
    out = out.reshape(xd.shape[:-1] + (wd.shape[1],))

    def bw(gr):
        g2 = gr.reshape(-1, gr.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if bias is None else (x, w, bias)
    return g.op("linear", inputs, out, bw)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(_pending_name(x.graph, "reshape"), f"cannot reshape {src} to {tuple(shape)}") from None
    return x.graph.op("reshape", (x,), out, lambda gr: (gr.reshape(src),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(_pending_name(x.graph, "transpose"), f"bad axes {axes} for rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    return x.graph.op("transpose", (x,), x.data.transpose(axes), lambda gr: (gr.transpose(inv),))


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    g = _graph_of(*xs)
    xs = [_as_tensor(g, x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as e:
        raise ShapeError(_pending_name(g, "concat"), str(e)) from None
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def bw(gr):
        return tuple(
            np.take(gr, np.arange(bounds[i], bounds[i + 1]), axis=axis) if xs[i].requires_grad else None
            for i in range(len(xs))
        )

    return g.op("concat", xs, out, bw)


def split(x: Tensor, sizes: Sequence[int], axis: int = 1) -> list[Tensor]:
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(_pending_name(x.graph, "split"), f"sizes {list(sizes)} do not sum to {x.shape[axis]}")
    outs = []
    start = 0
    for n in sizes:
        outs.append(slice_axis(x, start, start + n, axis))
        start += n
    return outs


def slice_axis(x: Tensor, start: int, stop: int, axis: int = 1) -> Tensor:
    axis = axis % x.ndim
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    src_shape, dtype = x.shape, x.data.dtype

    def bw(gr):
        full = np.zeros(src_shape, dtype=dtype)
        full[idx] = gr
        return (full,)

    return x.graph.op("slice", (x,), x.data[idx], bw)


def embedding(table: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(_pending_name(table.graph, "embedding"), f"index out of range for table of {n} rows")
    shape, dtype = table.shape, table.data.dtype

    def bw(gr):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx.reshape(-1), gr.reshape(-1, shape[-1]))
        return (full,)

    return table.graph.op("embedding", (table,), table.data[idx], bw)


# ---------------------------------------------------------------------------
# normalisation, softmax, reductions
# ---------------------------------------------------------------------------


def softmax(x: Tensor) -> Tensor:
    y = kernels.softmax(x.data)
    return x.graph.op("softmax", (x,), y, lambda gr: (kernels.softmax_bwd(y, gr),))


def rms_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Scale each row (last axis) to unit RMS; no learned gain."""
    xd = x.data
    y, r = kernels.rms_norm(xd, eps)
    return x.graph.op("rms_norm", (x,), y, lambda gr: (kernels.rms_norm_bwd(xd, r, gr),))


def sum_all(x: Tensor) -> Tensor:
    shape, dtype = x.shape, x.data.dtype
    return x.graph.op("sum", (x,), np.asarray(x.data.sum(dtype=dtype)), lambda gr: (np.full(shape, gr, dtype=dtype),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    shape, dtype = x.shape, x.data.dtype
    out = np.asarray(x.data.mean(dtype=np.float64), dtype=dtype)
    return x.graph.op("mean", (x,), out, lambda gr: (np.full(shape, gr / n, dtype=dtype),))


def mse(pred, target) -> Tensor:
    """Mean of squared differences over all elements."""
    g = _graph_of(pred, target)
    pred, target = _as_tensor(g, pred), _as_tensor(g, target)
    if pred.shape != target.shape:
        raise ShapeError(_pending_name(g, "mse"), f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    dtype = diff.dtype
    out = np.asarray(np.mean(np.square(diff, dtype=np.float64)), dtype=dtype)

    def bw(gr):
        gd = diff * dtype.type(2.0 * float(gr) / n)
        return gd, -gd

    return g.op("mse", (pred, target), out, bw)


# ---------------------------------------------------------------------------
# functional entry point
# ---------------------------------------------------------------------------


def evaluate_with_gradients(
    fn: Callable[..., dict],
    inputs: dict,
    wrt: dict,
    objective: str = "loss",
    dtype=np.float32,
) -> tuple[dict, dict]:
    """Run ``fn`` on a fresh graph and differentiate one of its outputs.

    ``fn`` receives every entry of ``inputs`` (as constants) and ``wrt`` (as
    parameters) as keyword arguments and returns a dict of output tensors.
    Returns ``(outputs, grads)`` as numpy arrays; parameters that do not
    influence the objective get zero gradients.
    """
    clash = set(inputs) & set(wrt)
    if clash:
        raise ValueError(f"names used for both inputs and parameters: {sorted(clash)}")
    with Graph(dtype=dtype) as g:
        args = {k: g.constant(v, label=k) for k, v in inputs.items()}
        params = {k: g.param(v, label=k) for k, v in wrt.items()}
        out = fn(**args, **params)
        if objective not in out:
            raise KeyError(f"objective {objective!r} not among outputs {sorted(out)}")
        g.backward(out[objective])
    outputs = {k: v.data for k, v in out.items()}
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    return outputs, grads


def numeric_gradient(f: Callable[[], float], arr: np.ndarray, step: float = 1e-3, indices: Iterable | None = None):
    """Central finite differences of scalar ``f()`` w.r.t. ``arr`` (mutated in place, then restored)."""
    grad = np.zeros(arr.shape, dtype=np.float64)
    it = indices if indices is not None else np.ndindex(arr.shape)
    for ix in it:
        orig = arr[ix]
        arr[ix] = orig + step
        fp = f()
        arr[ix] = orig - step
        fm = f()
        arr[ix] = orig
        grad[ix] = (fp - fm) / (2 * step)
    return grad


def relative_error(analytic, numeric) -> float:
    """``max|a - n| / max(max|a|, max|n|)``; 0 when both are identically zero."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if denom == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / denom)
