"""Small define-by-run reverse-mode autodiff over dense float64 arrays.

A :class:`Tape` records every op whose inputs carry a node on that tape.
Tensors without a node are constants: frozen parameters, data, and the
output of :func:`stopgradient`.  Gradients are only ever computed for
leaves created with :meth:`Tape.watch`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf


class ShapeError(ValueError):
    pass


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    # maps the upstream gradient to one gradient per input
    vjp: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)
    gradients: dict[int, np.ndarray] = field(default_factory=dict)

    def watch(self, value) -> "Tensor":
        """Register a trainable leaf and return it as a tracked tensor."""
        data = np.array(value, dtype=np.float64)
        self.nodes.append(Node("leaf", (), None))
        return Tensor(data, len(self.nodes) - 1, self)


class Tensor:
    __slots__ = ("data", "node_id", "tape")

    def __init__(self, data, node_id: int | None = None, tape: Tape | None = None):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim == 0:
            data = data.reshape(1)
        self.data = data
        self.node_id = node_id
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.node_id is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(np.array(x, dtype=np.float64))


def _emit(op, data, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Wrap ``data``; record a node only if some input is tracked."""
    tracked = [t for t in inputs if t.tracked]
    if not tracked:
        return Tensor(data)
    tape = tracked[0].tape
    for t in tracked[1:]:
        if t.tape is not tape:
            raise ValueError("inputs recorded on different tapes")
    # constant inputs get a placeholder id of -1; backward skips them
    ids = tuple(t.node_id if t.tracked else -1 for t in inputs)
    tape.nodes.append(Node(op, ids, vjp))
    return Tensor(data, len(tape.nodes) - 1, tape)


def _same_shape(op, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise ---------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    av, bv = a.data, b.data
    return _emit("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return _emit("gelu", x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


def stopgradient(a: Tensor) -> Tensor:
    """Identity on values; the result is a constant, so no gradient flows back."""
    return Tensor(a.data)


# -- linear algebra ------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects rank-2 operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims {a.shape} @ {b.shape}")
    av, bv = a.data, b.data
    return _emit("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """``x[..., j] + b[j]``; the only broadcasting op besides :func:`scale`."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"bias_add: {x.shape} + {b.shape}")
    axes = tuple(range(x.data.ndim - 1))
    return _emit("bias_add", x.data + b.data, (x, b), lambda g: (g, g.sum(axis=axes)))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return bias_add(matmul(x, w), b)


def batched_matvec(a: Tensor, v: Tensor) -> Tensor:
    """``out[i, j] = sum_k a[i, j, k] * v[i, k]``."""
    if a.data.ndim != 3 or v.data.ndim != 2 or a.shape[0] != v.shape[0] or a.shape[2] != v.shape[1]:
        raise ShapeError(f"batched_matvec: {a.shape} x {v.shape}")
    av, vv = a.data, v.data
    out = np.einsum("ijk,ik->ij", av, vv)

    def vjp(g):
        return g[:, :, None] * vv[:, None, :], np.einsum("ijk,ij->ik", av, g)

    return _emit("batched_matvec", out, (a, v), vjp)


# -- reductions and reshaping ---------------------------------------------

def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = a.shape
    if axis is None:
        return _emit("sum", np.array([a.data.sum()]), (a,), lambda g: (np.full(shape, g[0]),))
    axis = axis % a.data.ndim
    out = a.data.sum(axis=axis)
    return _emit("sum", out, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.shape
    return _emit("mean", np.array([a.data.mean()]), (a,), lambda g: (np.full(shape, g[0] / n),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    ndim = parts[0].data.ndim
    axis = axis % ndim
    sizes = [p.shape[axis] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    splits = np.cumsum(sizes)[:-1]
    return _emit("concat", out, tuple(parts), lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    shapes = {p.shape for p in parts}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mismatched shapes {sorted(shapes)}")
    out = np.stack([p.data for p in parts], axis=axis)
    axis = axis % out.ndim
    n = len(parts)
    return _emit("stack", out, tuple(parts),
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


# -- softmax and loss ------------------------------------------------------

def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    y = _softmax(a.data, axis)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", y, (a,), vjp)


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy_loss: logits {logits.shape}, labels {labels.shape}")
    b, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range [0, {c})")
    x = logits.data
    z = x - x.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    loss = -logp[np.arange(b), labels].mean()

    def vjp(g):
        d = np.exp(logp)
        d[np.arange(b), labels] -= 1.0
        return (d * (g[0] / b),)

    return _emit("cross_entropy", np.array([loss]), (logits,), vjp)


# -- backward --------------------------------------------------------------

def backward(root: Tensor, wrt: Sequence[Tensor] | None = None):
    """Run reverse accumulation from a scalar ``root``.

    Returns the full ``node_id -> gradient`` map (also stored on the tape),
    or, when ``wrt`` is given, a list of gradients aligned with it.  Tensors
    not reachable from ``root`` (including constants) get zeros.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.tracked:
        grads: dict[int, np.ndarray] = {}
    else:
        tape = root.tape
        grads = {root.node_id: np.ones_like(root.data)}
        for nid in range(root.node_id, -1, -1):
            g = grads.get(nid)
            node = tape.nodes[nid]
            if g is None or node.vjp is None:
                continue
            for pid, pg in zip(node.inputs, node.vjp(g)):
                if pid < 0:
                    continue
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        tape.gradients = grads
    if wrt is None:
        return grads
    return [grads.get(t.node_id, np.zeros_like(t.data)) if t.tracked else np.zeros_like(t.data)
            for t in wrt]


def grad(fn: Callable[..., Tensor], *args):
    """Gradient of scalar ``fn(*tensors)`` w.r.t. each positional array."""
    tape = Tape()
    leaves = [tape.watch(a) for a in args]
    out = fn(*leaves)
    return out.data[0], backward(out, leaves)
