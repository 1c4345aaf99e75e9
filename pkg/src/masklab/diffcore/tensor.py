"""Tape-based reverse-mode autodiff over float64 numpy arrays.

Every differentiable kernel records a node on the active :class:`Graph`.
Vector-Jacobian products are themselves written with the same kernels, so
running :func:`backward` with ``create_graph=True`` leaves the gradients on
the tape and they can be differentiated again (gradient of a gradient).
"""
import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import expit

from ..errors import ContractViolation, DomainError

__all__ = [
    "Tensor", "Graph", "Node", "backward", "second_order_grad", "op_kernel",
    "no_record", "as_tensor", "constant",
    "add", "sub", "mul", "div", "neg", "scale", "matmul", "transpose",
    "reshape", "concat", "stack", "getitem", "scatter_add", "sum", "mean",
    "tanh", "sigmoid", "exp", "log", "relu", "softmax", "log_softmax",
    "broadcast_to", "sum_to",
]

_local = threading.local()


def _stack():
    s = getattr(_local, "stack", None)
    if s is None:
        s = _local.stack = []
        _local.paused = 0
    return s


def _recording_graph():
    s = _stack()
    if not s or _local.paused:
        return None
    return s[-1]


@contextmanager
def no_record():
    """Evaluate kernels without recording nodes (values only)."""
    _stack()
    _local.paused += 1
    try:
        yield
    finally:
        _local.paused -= 1


@contextmanager
def _resume(graph):
    s = _stack()
    paused = _local.paused
    _local.paused = 0
    s.append(graph)
    try:
        yield
    finally:
        s.pop()
        _local.paused = paused


class Node:
    __slots__ = ("kind", "inputs", "payload", "out")

    def __init__(self, kind, inputs, payload, out):
        self.kind = kind
        self.inputs = inputs
        self.payload = payload
        self.out = out


class Graph:
    """Append-only tape. Use as a context manager to make it active.

    Inputs always precede outputs on the tape, so a reverse sweep over
    node indices is a valid topological order.
    """

    def __init__(self):
        self.nodes = []
        self.params = {}

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def param(self, name, value):
        """Register a named leaf; gradients can be requested for it by name."""
        if name in self.params:
            raise ContractViolation(f"parameter {name!r} already registered")
        t = Tensor(value)
        self._append(Node("param", (), name, t), t)
        self.params[name] = t
        return t

    def bind(self, arrays, prefix=""):
        """Register every ``name -> array`` entry as a leaf; returns Tensors."""
        return {name: self.param(prefix + name, arr) for name, arr in arrays.items()}

    def _append(self, node, out):
        out.node = len(self.nodes)
        out.graph = self
        self.nodes.append(node)


class Tensor:
    __slots__ = ("data", "node", "graph")
    __array_priority__ = 100

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.node = None
        self.graph = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = "" if self.node is None else f", node={self.node}"
        return f"Tensor({self.data!r}{tag})"

    def __len__(self):
        return self.data.shape[0]

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: scale(self, -1.0)
    __getitem__ = lambda self, key: getitem(self, key)

    def __mul__(self, o):
        if isinstance(o, (int, float)):
            return scale(self, float(o))
        return mul(self, o)

    def __rmul__(self, o):
        if isinstance(o, (int, float)):
            return scale(self, float(o))
        return mul(o, self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


constant = as_tensor


def _make(kind, data, inputs, payload=None):
    out = Tensor.__new__(Tensor)
    out.data = data if type(data) is np.ndarray else np.asarray(data, dtype=np.float64)
    out.node = None
    out.graph = None
    g = _recording_graph()
    if g is not None:
        for t in inputs:
            if t.graph is g:
                g._append(Node(kind, inputs, payload, out), out)
                break
    return out


# ---------------------------------------------------------------------------
# shape helpers

def _broadcast_shape(a, b, kind):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractViolation(f"{kind}: shapes {a.shape} and {b.shape} do not conform") from None


def _sum_to_np(x, shape):
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1)
    return x.sum(axis=axes, keepdims=True).reshape(shape)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


# ---------------------------------------------------------------------------
# kernels

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        _broadcast_shape(a, b, "add")
        raise
    return _make("add", data, (a, b))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        _broadcast_shape(a, b, "sub")
        raise
    return _make("sub", data, (a, b))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        _broadcast_shape(a, b, "mul")
        raise
    return _make("mul", data, (a, b))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        _broadcast_shape(a, b, "div")
    if not np.all(b.data):
        idx = tuple(int(i) for i in np.argwhere(b.data == 0)[0])
        raise DomainError(f"div: zero divisor at index {idx}", idx)
    return _make("div", a.data / b.data, (a, b))


def scale(a, c):
    a = as_tensor(a)
    return _make("scale", a.data * c, (a,), float(c))


def neg(a):
    return scale(a, -1.0)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    return _make("matmul", a.data @ b.data, (a, b))


def transpose(a):
    a = as_tensor(a)
    if a.ndim < 2:
        raise ContractViolation("transpose needs at least 2 dimensions")
    return _make("transpose", np.swapaxes(a.data, -1, -2), (a,))


def reshape(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ContractViolation(f"reshape: cannot view {a.shape} as {shape}") from None
    return _make("reshape", data, (a,), a.shape)


def concat(tensors, axis=-1):
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ContractViolation("concat of nothing")
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise ContractViolation(f"concat: {e}") from None
    ax = axis % data.ndim
    return _make("concat", data, ts, (ax, tuple(t.shape[ax] for t in ts)))


def stack(tensors, axis=0):
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ContractViolation("stack of nothing")
    try:
        data = np.stack([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise ContractViolation(f"stack: {e}") from None
    return _make("stack", data, ts, axis % data.ndim)


def _has_array(key):
    if not isinstance(key, tuple):
        key = (key,)
    return any(isinstance(k, (np.ndarray, list)) for k in key)


def getitem(a, key):
    a = as_tensor(a)
    try:
        data = a.data[key]
    except IndexError as e:
        raise ContractViolation(f"index: {e}") from None
    if not isinstance(data, np.ndarray):
        data = np.asarray(data)
    return _make("getitem", data, (a,), (key, a.shape))


def scatter_add(g, key, shape):
    """Zeros of ``shape`` with ``g`` accumulated at ``key`` (adjoint of getitem)."""
    g = as_tensor(g)
    out = np.zeros(shape)
    if _has_array(key):
        np.add.at(out, key, g.data)
    else:
        out[key] = g.data
    return _make("scatter_add", out, (g,), (key, tuple(shape)))


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    return _make("sum", a.data.sum(axis=axes, keepdims=keepdims), (a,), (axes, keepdims))


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if n == 0:
        raise ContractViolation("mean over an empty axis")
    return scale(sum(a, axes, keepdims), 1.0 / n)


def broadcast_to(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ContractViolation(f"cannot broadcast {a.shape} to {shape}") from None
    return _make("broadcast_to", data, (a,), a.shape)


def sum_to(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    return _make("sum_to", _sum_to_np(a.data, shape), (a,), shape)


def tanh(a):
    a = as_tensor(a)
    return _make("tanh", np.tanh(a.data), (a,))


def sigmoid(a):
    a = as_tensor(a)
    return _make("sigmoid", expit(a.data), (a,))


def exp(a):
    a = as_tensor(a)
    return _make("exp", np.exp(a.data), (a,))


def log(a):
    a = as_tensor(a)
    bad = a.data <= 0
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DomainError(f"log of non-positive value {a.data[idx]!r} at index {idx}", idx)
    return _make("log", np.log(a.data), (a,))


def relu(a):
    a = as_tensor(a)
    return _make("relu", np.maximum(a.data, 0.0), (a,))


def softmax(a):
    """Softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return _make("softmax", e / e.sum(axis=-1, keepdims=True), (a,))


def log_softmax(a):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    return _make("log_softmax", z - np.log(np.exp(z).sum(axis=-1, keepdims=True)), (a,))


# ---------------------------------------------------------------------------
# vector-Jacobian products, written with the kernels above so they can be
# recorded when a second-order graph is wanted

def _vjp_add(g, node, needs):
    a, b = node.inputs
    return [sum_to(g, a.shape) if needs[0] else None,
            sum_to(g, b.shape) if needs[1] else None]


def _vjp_sub(g, node, needs):
    a, b = node.inputs
    return [sum_to(g, a.shape) if needs[0] else None,
            scale(sum_to(g, b.shape), -1.0) if needs[1] else None]


def _vjp_mul(g, node, needs):
    a, b = node.inputs
    return [sum_to(mul(g, b), a.shape) if needs[0] else None,
            sum_to(mul(g, a), b.shape) if needs[1] else None]


def _vjp_div(g, node, needs):
    a, b = node.inputs
    ga = gb = None
    if needs[0]:
        ga = sum_to(div(g, b), a.shape)
    if needs[1]:
        gb = scale(sum_to(div(mul(g, node.out), b), b.shape), -1.0)
    return [ga, gb]


def _vjp_scale(g, node, needs):
    return [scale(g, node.payload)]


def _vjp_matmul(g, node, needs):
    a, b = node.inputs
    ga = gb = None
    if needs[0]:
        ga = sum_to(matmul(g, transpose(b)), a.shape)
    if needs[1]:
        gb = sum_to(matmul(transpose(a), g), b.shape)
    return [ga, gb]


def _vjp_transpose(g, node, needs):
    return [transpose(g)]


def _vjp_reshape(g, node, needs):
    return [reshape(g, node.payload)]


def _vjp_concat(g, node, needs):
    axis, sizes = node.payload
    out, start = [], 0
    for need, n in zip(needs, sizes):
        if need:
            key = (slice(None),) * axis + (slice(start, start + n),)
            out.append(getitem(g, key))
        else:
            out.append(None)
        start += n
    return out


def _vjp_stack(g, node, needs):
    axis = node.payload
    return [getitem(g, (slice(None),) * axis + (i,)) if need else None
            for i, need in enumerate(needs)]


def _vjp_getitem(g, node, needs):
    key, shape = node.payload
    return [scatter_add(g, key, shape)]


def _vjp_scatter_add(g, node, needs):
    key, _ = node.payload
    return [getitem(g, key)]


def _vjp_sum(g, node, needs):
    axes, keepdims = node.payload
    a = node.inputs[0]
    if not keepdims:
        kshape = tuple(1 if i in axes else s for i, s in enumerate(a.shape))
        g = reshape(g, kshape)
    return [broadcast_to(g, a.shape)]


def _vjp_broadcast_to(g, node, needs):
    return [sum_to(g, node.payload)]


def _vjp_sum_to(g, node, needs):
    return [broadcast_to(g, node.inputs[0].shape)]


def _vjp_tanh(g, node, needs):
    y = node.out
    return [mul(g, sub(1.0, mul(y, y)))]


def _vjp_sigmoid(g, node, needs):
    y = node.out
    return [mul(g, mul(y, sub(1.0, y)))]


def _vjp_exp(g, node, needs):
    return [mul(g, node.out)]


def _vjp_log(g, node, needs):
    return [div(g, node.inputs[0])]


def _vjp_relu(g, node, needs):
    return [mul(g, Tensor(node.inputs[0].data > 0))]


def _vjp_softmax(g, node, needs):
    y = node.out
    return [mul(y, sub(g, sum(mul(g, y), -1, keepdims=True)))]


def _vjp_log_softmax(g, node, needs):
    p = exp(node.out)
    return [sub(g, mul(p, sum(g, -1, keepdims=True)))]


VJPS = {
    "add": _vjp_add, "sub": _vjp_sub, "mul": _vjp_mul, "div": _vjp_div,
    "scale": _vjp_scale, "matmul": _vjp_matmul, "transpose": _vjp_transpose,
    "reshape": _vjp_reshape, "concat": _vjp_concat, "stack": _vjp_stack,
    "getitem": _vjp_getitem, "scatter_add": _vjp_scatter_add, "sum": _vjp_sum,
    "broadcast_to": _vjp_broadcast_to, "sum_to": _vjp_sum_to,
    "tanh": _vjp_tanh, "sigmoid": _vjp_sigmoid, "exp": _vjp_exp,
    "log": _vjp_log, "relu": _vjp_relu, "softmax": _vjp_softmax,
    "log_softmax": _vjp_log_softmax,
}

_KERNELS = {
    "add": add, "sub": sub, "mul": mul, "div": div, "scalar-mul": scale,
    "matmul": matmul, "transpose": transpose, "reshape": reshape,
    "concat": lambda *ts, axis=-1: concat(ts, axis),
    "stack": lambda *ts, axis=0: stack(ts, axis),
    "slice": getitem, "sum": sum, "mean": mean, "tanh": tanh,
    "sigmoid": sigmoid, "exp": exp, "log": log, "softmax": softmax,
    "log_softmax": log_softmax, "relu": relu,
}


def op_kernel(kind, *inputs, **kwargs):
    """Dispatch a kernel by name, e.g. ``op_kernel("matmul", a, b)``."""
    try:
        fn = _KERNELS[kind]
    except KeyError:
        raise ContractViolation(f"unknown kernel {kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------

def _relevant(graph, upto, sources):
    nodes = graph.nodes
    rel = bytearray(upto + 1)
    for idx in sources:
        if idx <= upto:
            rel[idx] = 1
    for idx in range(upto + 1):
        if rel[idx]:
            continue
        for t in nodes[idx].inputs:
            if t.graph is graph and rel[t.node]:
                rel[idx] = 1
                break
    return rel


def backward(graph, loss, wrt, create_graph=False):
    """Gradients of scalar ``loss`` with respect to the named leaves ``wrt``.

    Returns ``{name: Tensor}``. Leaves the loss does not depend on get an
    exact zero gradient. With ``create_graph=True`` the returned gradients
    are nodes of ``graph`` and can be differentiated further.

    ``wrt`` may also be a ``{key: Tensor}`` dict of recorded intermediate
    tensors (e.g. parameters after an inner SGD step); gradients are then
    returned under the same keys.
    """
    if loss.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    leaves = {}
    if isinstance(wrt, dict):
        for key, t in wrt.items():
            if t.graph is not graph:
                raise ContractViolation(f"{key!r} is not recorded on this graph")
            leaves[key] = t
    else:
        for name in ([wrt] if isinstance(wrt, str) else list(wrt)):
            if name not in graph.params:
                raise ContractViolation(f"{name!r} is not a leaf of this graph")
            leaves[name] = graph.params[name]
    targets = {t.node for t in leaves.values()}
    if loss.graph is not graph:
        return {n: Tensor(np.zeros(t.shape)) for n, t in leaves.items()}

    top = loss.node
    nodes = graph.nodes
    rel = _relevant(graph, top, [t.node for t in leaves.values()])
    found = {}
    grads = {top: Tensor(np.ones(loss.shape))}
    ctx = _resume(graph) if create_graph else no_record()
    with ctx:
        for idx in range(top, -1, -1):
            g = grads.pop(idx, None)
            if g is None or not rel[idx]:
                continue
            node = nodes[idx]
            if idx in targets:
                found[idx] = g
            if node.kind == "param":
                continue
            needs = [t.graph is graph and bool(rel[t.node]) for t in node.inputs]
            for t, need, gi in zip(node.inputs, needs, VJPS[node.kind](g, node, needs)):
                if not need or gi is None:
                    continue
                prev = grads.get(t.node)
                grads[t.node] = gi if prev is None else add(prev, gi)
    out = {}
    for name, leaf in leaves.items():
        g = found.get(leaf.node)
        out[name] = g if g is not None else Tensor(np.zeros(leaf.shape))
    return out


def second_order_grad(graph, loss, inner_wrt, outer_wrt, outer_fn):
    """Differentiate an expression built from first-order gradients.

    ``outer_fn`` receives ``backward(graph, loss, inner_wrt, create_graph=True)``
    and returns a scalar Tensor; the result is its gradient w.r.t. ``outer_wrt``.
    """
    inner = backward(graph, loss, inner_wrt, create_graph=True)
    with _resume(graph):
        outer = outer_fn(inner)
    return backward(graph, outer, outer_wrt)
