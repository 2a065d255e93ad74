"""Dense float64 tensors with a small reverse-mode gradient engine.

Nodes are evaluated eagerly as they are built (define-by-run); every node
records its parents and a closure that pushes the output gradient back to
them. ``Graph`` wraps a builder function so that a computation can be run
forward on named inputs and then differentiated with respect to its named
parameters and inputs.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when a node is constructed from inputs of incompatible shapes."""


class EvaluationError(ValueError):
    """Raised when a graph is evaluated on non-finite input."""


class GraphStateError(RuntimeError):
    """Raised when backward is requested before a forward pass."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward: Callable | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.op = op
        self.id = next(_ids)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, id={self.id}, shape={self.shape})"

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self, seed: np.ndarray | float | None = None) -> None:
        """Accumulate gradients of this node into every reachable ``.grad``."""
        if seed is None:
            if self.data.size != 1:
                raise ShapeError(f"node {self.id}: seed required for non-scalar output {self.shape}")
            seed = np.ones_like(self.data)
        seed = np.asarray(seed, dtype=DTYPE)
        if seed.shape != self.shape:
            raise ShapeError(f"node {self.id}: seed shape {seed.shape} != output shape {self.shape}")
        order = _topological(self)
        for node in order:
            if node._parents:
                node.grad = None
        self._accumulate(seed)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, -as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, other)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node._parents:
            if p.id not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, op: str, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    return Tensor(data, op=op, parents=tuple(parents), backward=backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op} node {next(_ids)}: cannot broadcast {a.shape} with {b.shape}") from None


# elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _node(a.data + b.data, "add", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, "mul", (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        a._accumulate(g * c)

    return _node(a.data * c, "scale", (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        a._accumulate(g * mask)

    return _node(a.data * mask, "relu", (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out)

    return _node(out, "exp", (a,), backward)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise EvaluationError(f"log node {next(_ids)}: non-positive input")

    def backward(g):
        a._accumulate(g / a.data)

    return _node(np.log(a.data), "log", (a,), backward)


# reductions

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _node(out, "sum", (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def max(a: Tensor, axis: int = -1) -> Tensor:  # noqa: A001
    """Max along one axis; the gradient goes to the first maximal entry."""
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        a._accumulate(full)

    return _node(out, "max", (a,), backward)


def logsumexp(x: np.ndarray, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    out = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    return out if keepdims else out.squeeze(axis)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    out = a.data - logsumexp(a.data, axis=axis, keepdims=True)
    p = np.exp(out)

    def backward(g):
        a._accumulate(g - p * g.sum(axis=axis, keepdims=True))

    return _node(out, "log_softmax", (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    p = np.exp(a.data - logsumexp(a.data, axis=axis, keepdims=True))

    def backward(g):
        a._accumulate(p * (g - (g * p).sum(axis=axis, keepdims=True)))

    return _node(p, "softmax", (a,), backward)


# linear algebra and indexing

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul node {next(_ids)}: {a.shape} @ {b.shape}")

    def backward(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return _node(a.data @ b.data, "matmul", (a, b), backward)


def gather(a: Tensor, index, axis: int = 0) -> Tensor:
    index = np.asarray(index, dtype=np.intp)
    n = a.shape[axis]
    if index.size and (index.min() < -n or index.max() >= n):
        raise ShapeError(f"gather node {next(_ids)}: index out of range for axis size {n}")

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (slice(None),) * (axis % a.data.ndim) + (index,), g)
        a._accumulate(full)

    return _node(np.take(a.data, index, axis=axis), "gather", (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape node {next(_ids)}: {a.shape} -> {tuple(shape)}") from None

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _node(out, "reshape", (a,), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)

    def backward(g):
        a._accumulate(g.transpose(inverse))

    return _node(a.data.transpose(axes), "transpose", (a,), backward)


def l2_normalize_rows(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize along the last axis; gradient is projected onto the tangent space."""
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    if np.any(norm < eps):
        row = int(np.argwhere(norm.reshape(-1) < eps)[0, 0])
        raise EvaluationError(f"l2_normalize node: row {row} has norm below {eps}")
    out = a.data / norm

    def backward(g):
        a._accumulate((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm)

    return _node(out, "l2_normalize", (a,), backward)


# spatial ops on NHWC maps

def conv2d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """2-D cross-correlation of an (N, H, W, C) map with an (O, C, k, k) kernel.

    Zero padding of (k - 1) / 2 keeps the spatial size at stride 1. No bias.
    """
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[3] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d node {next(_ids)}: input {x.shape}, kernel {w.shape}")
    k = w.shape[2]
    if k % 2 == 0:
        raise ShapeError(f"conv2d node {next(_ids)}: even kernel size {k}")
    n, h, wd, c = x.shape
    o = w.shape[0]
    pad = (k - 1) // 2
    wmat = w.data.transpose(0, 2, 3, 1).reshape(o, k * k * c)
    if k == 1:
        xs = x.data[:, ::stride, ::stride]
        ho, wo = xs.shape[1:3]
        cols = xs.reshape(-1, c)
    else:
        xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
        ho, wo = win.shape[1:3]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)
    out = (cols @ wmat.T).reshape(n, ho, wo, o)

    def backward(g):
        gflat = g.reshape(-1, o)
        w._accumulate((gflat.T @ cols).reshape(o, k, k, c).transpose(0, 3, 1, 2))
        if not x.requires_grad:
            return
        if stride == 1 and k > 1:
            # transposed conv: correlate the padded gradient with the flipped kernel
            gp = np.pad(g, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
            gwin = sliding_window_view(gp, (k, k), axis=(1, 2))
            gcols = gwin.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * wd, k * k * o)
            wflip = w.data[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(c, k * k * o)
            x._accumulate((gcols @ wflip.T).reshape(n, h, wd, c))
            return
        dcols = (gflat @ wmat).reshape(n, ho, wo, k, k, c)
        if k == 1:
            if stride == 1:
                x._accumulate(dcols[:, :, :, 0, 0])
                return
            dx = np.zeros_like(x.data)
            dx[:, ::stride, ::stride] = dcols[:, :, :, 0, 0]
            x._accumulate(dx)
            return
        dxp = np.zeros((n, h + 2 * pad, wd + 2 * pad, c))
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, :, i, j]
        x._accumulate(dxp[:, pad:pad + h, pad:pad + wd])

    return _node(out, f"conv2d/s{stride}", (x, w), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool node {next(_ids)}: expected NHWC, got {x.shape}")
    hw = x.shape[1] * x.shape[2]

    def backward(g):
        x._accumulate(np.broadcast_to(g[:, None, None, :] / hw, x.shape))

    return _node(x.data.mean(axis=(1, 2)), "gap", (x,), backward)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"upsample node {next(_ids)}: expected NHWC, got {x.shape}")
    out = x.data.repeat(factor, axis=1).repeat(factor, axis=2)
    n, h, w, c = x.shape

    def backward(g):
        x._accumulate(g.reshape(n, h, factor, w, factor, c).sum(axis=(2, 4)))

    return _node(out, f"upsample/x{factor}", (x,), backward)


def custom(inputs: Sequence[Tensor], value, vjp: Callable[[np.ndarray], Sequence[np.ndarray]],
           op: str = "custom") -> Tensor:
    """Wrap a kernel with a hand-written vector-Jacobian product.

    ``vjp(g)`` returns one gradient per input, each shaped like that input.
    """
    inputs = tuple(inputs)

    def backward(g):
        for t, gi in zip(inputs, vjp(g)):
            if gi is not None:
                t._accumulate(gi)

    return _node(np.asarray(value, dtype=DTYPE), op, inputs, backward)


class Graph:
    """A reusable computation over named parameters and inputs.

    ``build`` receives a mapping of name -> Tensor (parameters and inputs
    together) and returns a mapping of output name -> Tensor.
    """

    def __init__(self, build: Callable[[Mapping[str, Tensor]], Mapping[str, Tensor]],
                 params: Mapping[str, np.ndarray] | None = None):
        self.build = build
        self.params = {k: np.asarray(v, dtype=DTYPE) for k, v in (params or {}).items()}
        self._leaves: dict[str, Tensor] | None = None
        self._outputs: dict[str, Tensor] | None = None

    def forward(self, inputs: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        leaves = {}
        for name, value in self.params.items():
            leaves[name] = Tensor(value, requires_grad=True)
        for name, value in inputs.items():
            arr = np.asarray(value, dtype=DTYPE)
            if not np.all(np.isfinite(arr)):
                raise EvaluationError(f"input {name!r} contains non-finite values")
            leaves[name] = Tensor(arr, requires_grad=True)
        outputs = dict(self.build(leaves))
        self._leaves, self._outputs = leaves, outputs
        return {k: v.data for k, v in outputs.items()}

    def backward(self, seed, output: str | None = None) -> dict[str, np.ndarray]:
        if self._outputs is None:
            raise GraphStateError("backward called before forward")
        if output is None:
            if len(self._outputs) != 1:
                raise GraphStateError("graph has several outputs; name the one to differentiate")
            output = next(iter(self._outputs))
        for leaf in self._leaves.values():
            leaf.grad = None
        self._outputs[output].backward(seed)
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in self._leaves.items()}


def forward(graph: Graph, inputs: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return graph.forward(inputs)


def backward(graph: Graph, output_seed, output: str | None = None) -> dict[str, np.ndarray]:
    return graph.backward(output_seed, output)


def finite_diff_check(fn: Callable[[np.ndarray], float], point, step: float = 1e-5,
                      grad=None, coords: Iterable[int] | None = None) -> float:
    """Largest ``|analytic - central| / max(1, |analytic|)`` over coordinates.

    ``fn`` maps an array to a scalar. ``grad`` is the analytic gradient at
    ``point``; when omitted, ``fn`` must return ``(value, grad)``. Non-smooth
    points (e.g. ``|x|`` at 0) yield arbitrary errors; the check only means
    something where ``fn`` is differentiable.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(point, dtype=DTYPE, copy=True)

    def value(z):
        out = fn(z)
        return float(out[0] if isinstance(out, tuple) else out)

    if grad is None:
        grad = fn(x.copy())[1]
    grad = np.asarray(grad, dtype=DTYPE).reshape(-1)
    flat = x.reshape(-1)
    worst = 0.0
    for i in (range(flat.size) if coords is None else coords):
        orig = flat[i]
        flat[i] = orig + step
        fp = value(x)
        flat[i] = orig - step
        fm = value(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            coord = tuple(int(c) for c in np.unravel_index(i, x.shape))
            raise EvaluationError(f"non-finite evaluation at coordinate {coord}")
        numeric = (fp - fm) / (2 * step)
        err = abs(grad[i] - numeric) / np.maximum(1.0, abs(grad[i]))
        worst = np.maximum(worst, err)
    return float(worst)
