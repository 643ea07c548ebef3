"""Dense-tensor arithmetic with an explicit reverse-mode gradient tape.

Deliberately small: numpy arrays (float64 first), a tape (`Graph`) that
records ops in construction order, and the dozen-odd op kinds a masked
autoencoder with feature distillation actually needs. There is no
broadcasting beyond the per-op rules documented below; anything else is a
shape error that names the op and the offending shapes.

Op kinds and their shape rules:

    matmul       a @ b; both 2-D, or both k-D (k>=3) with identical
                 leading dims (batched matmul, used for per-head attention)
    add, mul     elementwise; identical shapes, or b is a vector matching
                 a's last axis (row broadcast, used for biases and
                 layer-norm affine terms)
    scale        a * factor (python scalar attr)
    concat       along `axis` (default 0); other dims identical
    gather       rows of a along axis 0 at integer `indices`; repeated
                 indices accumulate gradient
    transpose    permute by `axes` (default: reverse)
    reshape      to `shape`, same total size
    softmax      last axis, numerically stable
    layer_norm   last axis, population variance, `eps` added to variance
    gelu         exact erf form, x * Phi(x)
    mean, sum    full reduction to a scalar
    squared_difference, absolute_difference
                 elementwise on identical shapes
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
from scipy.special import erf

LAYER_NORM_EPS = 1e-6

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_tensor_ids = itertools.count()


class ShapeMismatch(ValueError):
    """An op received inputs whose shapes violate its rule."""


class Tensor:
    """A dense real-valued array plus the grad-tracking flag.

    Values are immutable by convention once created; only the trainer
    rebinds `.data` between optimization steps.
    """

    __slots__ = ("data", "requires_grad", "id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.id = next(_tensor_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, id={self.id})"


@dataclass
class Node:
    """One recorded operation: kind, input tensors, produced tensor."""

    op: str
    inputs: tuple[Tensor, ...]
    out: Tensor
    attrs: dict


class Graph:
    """Gradient tape. Construction order is the topological order.

    Used as a context manager; ops applied while a graph is active are
    recorded iff their output requires grad. With no active graph, apply()
    is a plain forward evaluation (how the frozen teacher runs).
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Graph":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.pop()


_ACTIVE: list[Graph] = []


def active_graph() -> Graph | None:
    return _ACTIVE[-1] if _ACTIVE else None


# ---------------------------------------------------------------------------
# op registry


def _shape_err(op: str, detail: str, *shapes) -> ShapeMismatch:
    names = " and ".join(str(tuple(s)) for s in shapes)
    return ShapeMismatch(f"{op}: {detail} (shapes {names})")


def _fwd_matmul(d, attrs):
    a, b = d
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise _shape_err("matmul", "both operands must be 2-D or equally batched", a.shape, b.shape)
    if a.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise _shape_err("matmul", "batch dims differ", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2]:
        raise _shape_err("matmul", "inner dims differ", a.shape, b.shape)
    return a @ b


def _bwd_matmul(d, out, g, attrs):
    a, b = d
    return [g @ b.swapaxes(-1, -2), a.swapaxes(-1, -2) @ g]


def _check_elementwise(op, a, b):
    if a.shape == b.shape:
        return "same"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1:] == b.shape:
        return "row"
    raise _shape_err(op, "operands must match exactly or b must be a last-axis vector", a.shape, b.shape)


def _reduce_row(g, a_shape):
    # collapse a full-shape gradient onto a last-axis vector operand
    return g.reshape(-1, a_shape[-1]).sum(axis=0)


def _fwd_add(d, attrs):
    a, b = d
    _check_elementwise("add", a, b)
    return a + b


def _bwd_add(d, out, g, attrs):
    a, b = d
    gb = g if a.shape == b.shape else _reduce_row(g, a.shape)
    return [g, gb]


def _fwd_mul(d, attrs):
    a, b = d
    _check_elementwise("mul", a, b)
    return a * b


def _bwd_mul(d, out, g, attrs):
    a, b = d
    ga = g * b
    gb = g * a if a.shape == b.shape else _reduce_row(g * a, a.shape)
    return [ga, gb]


def _fwd_scale(d, attrs):
    return d[0] * attrs["factor"]


def _bwd_scale(d, out, g, attrs):
    return [g * attrs["factor"]]


def _fwd_concat(d, attrs):
    axis = attrs.get("axis", 0)
    ref = d[0]
    for a in d[1:]:
        if a.ndim != ref.ndim or a.shape[:axis] + a.shape[axis + 1 :] != ref.shape[:axis] + ref.shape[axis + 1 :]:
            raise _shape_err("concat", f"non-axis dims differ (axis={axis})", ref.shape, a.shape)
    return np.concatenate(d, axis=axis)


def _bwd_concat(d, out, g, attrs):
    axis = attrs.get("axis", 0)
    sizes = [a.shape[axis] for a in d]
    splits = np.cumsum(sizes)[:-1]
    return list(np.split(g, splits, axis=axis))


def _fwd_gather(d, attrs):
    (a,) = d
    idx = np.asarray(attrs["indices"], dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeMismatch(f"gather: indices must be 1-D, got shape {tuple(idx.shape)}")
    if a.ndim < 1:
        raise _shape_err("gather", "operand must have a leading axis", a.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeMismatch(f"gather: index out of range for leading axis of length {a.shape[0]}")
    return a[idx]


def _bwd_gather(d, out, g, attrs):
    (a,) = d
    idx = np.asarray(attrs["indices"], dtype=np.intp)
    ga = np.zeros_like(a)
    np.add.at(ga, idx, g)
    return [ga]


def _fwd_transpose(d, attrs):
    (a,) = d
    axes = attrs.get("axes")
    if axes is not None and len(axes) != a.ndim:
        raise _shape_err("transpose", f"axes {tuple(axes)} do not match rank", a.shape)
    return np.transpose(a, axes)


def _bwd_transpose(d, out, g, attrs):
    axes = attrs.get("axes")
    if axes is None:
        return [np.transpose(g)]
    return [np.transpose(g, np.argsort(axes))]


def _fwd_reshape(d, attrs):
    (a,) = d
    shape = tuple(attrs["shape"])
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise _shape_err("reshape", f"cannot reshape to {shape}", a.shape)
    return a.reshape(shape)


def _bwd_reshape(d, out, g, attrs):
    return [g.reshape(d[0].shape)]


def _fwd_softmax(d, attrs):
    (a,) = d
    if a.ndim < 1:
        raise _shape_err("softmax", "operand must have a last axis", a.shape)
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _bwd_softmax(d, out, g, attrs):
    dot = (g * out).sum(axis=-1, keepdims=True)
    return [out * (g - dot)]


def _fwd_layer_norm(d, attrs):
    (a,) = d
    if a.ndim < 1:
        raise _shape_err("layer_norm", "operand must have a last axis", a.shape)
    eps = attrs.get("eps", LAYER_NORM_EPS)
    mu = a.mean(axis=-1, keepdims=True)
    var = a.var(axis=-1, keepdims=True)
    return (a - mu) / np.sqrt(var + eps)


def _bwd_layer_norm(d, out, g, attrs):
    (a,) = d
    eps = attrs.get("eps", LAYER_NORM_EPS)
    var = a.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    gm = g.mean(axis=-1, keepdims=True)
    gym = (g * out).mean(axis=-1, keepdims=True)
    return [inv * (g - gm - out * gym)]


def _fwd_gelu(d, attrs):
    (a,) = d
    return 0.5 * a * (1.0 + erf(a * _INV_SQRT2))


def _bwd_gelu(d, out, g, attrs):
    (a,) = d
    cdf = 0.5 * (1.0 + erf(a * _INV_SQRT2))
    pdf = np.exp(-0.5 * a * a) * _INV_SQRT_2PI
    return [g * (cdf + a * pdf)]


def _fwd_mean(d, attrs):
    return np.asarray(d[0].mean())


def _bwd_mean(d, out, g, attrs):
    (a,) = d
    return [np.full_like(a, float(g) / a.size)]


def _fwd_sum(d, attrs):
    return np.asarray(d[0].sum())


def _bwd_sum(d, out, g, attrs):
    (a,) = d
    return [np.full_like(a, float(g))]


def _check_same(op, a, b):
    if a.shape != b.shape:
        raise _shape_err(op, "operands must have identical shapes", a.shape, b.shape)


def _fwd_sqdiff(d, attrs):
    a, b = d
    _check_same("squared_difference", a, b)
    diff = a - b
    return diff * diff


def _bwd_sqdiff(d, out, g, attrs):
    a, b = d
    diff = a - b
    return [2.0 * diff * g, -2.0 * diff * g]


def _fwd_absdiff(d, attrs):
    a, b = d
    _check_same("absolute_difference", a, b)
    return np.abs(a - b)


def _bwd_absdiff(d, out, g, attrs):
    a, b = d
    s = np.sign(a - b)
    return [s * g, -s * g]


_OPS: dict[str, tuple[Callable, Callable]] = {
    "matmul": (_fwd_matmul, _bwd_matmul),
    "add": (_fwd_add, _bwd_add),
    "mul": (_fwd_mul, _bwd_mul),
    "scale": (_fwd_scale, _bwd_scale),
    "concat": (_fwd_concat, _bwd_concat),
    "gather": (_fwd_gather, _bwd_gather),
    "transpose": (_fwd_transpose, _bwd_transpose),
    "reshape": (_fwd_reshape, _bwd_reshape),
    "softmax": (_fwd_softmax, _bwd_softmax),
    "layer_norm": (_fwd_layer_norm, _bwd_layer_norm),
    "gelu": (_fwd_gelu, _bwd_gelu),
    "mean": (_fwd_mean, _bwd_mean),
    "sum": (_fwd_sum, _bwd_sum),
    "squared_difference": (_fwd_sqdiff, _bwd_sqdiff),
    "absolute_difference": (_fwd_absdiff, _bwd_absdiff),
}

OP_KINDS = tuple(sorted(_OPS))


def apply(op_kind: str, *inputs: Tensor, **attrs) -> Tensor:
    """Evaluate an op, recording it on the active graph when differentiable."""
    try:
        fwd, _ = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op kind {op_kind!r}; known kinds: {', '.join(OP_KINDS)}") from None
    for t in inputs:
        if not isinstance(t, Tensor):
            raise TypeError(f"{op_kind}: inputs must be Tensors, got {type(t).__name__}")
    out = Tensor(fwd([t.data for t in inputs], attrs))
    out.requires_grad = any(t.requires_grad for t in inputs)
    g = active_graph()
    if g is not None and out.requires_grad:
        g.nodes.append(Node(op_kind, tuple(inputs), out, attrs))
    return out


def backward(graph: Graph, root: Tensor, leaves: Iterable[Tensor] = ()) -> dict[int, Tensor]:
    """Reverse-sweep the tape from a scalar root.

    Returns a map from tensor id to gradient for every requires-grad leaf
    that the graph touched, plus zeros for any tensor in `leaves` that the
    root does not depend on.
    """
    if root.shape != ():
        raise ValueError(f"backward root must be scalar-shaped, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {root.id: np.ones((), dtype=root.data.dtype)}
    produced = {n.out.id for n in graph.nodes}
    for node in reversed(graph.nodes):
        g = grads.get(node.out.id)
        if g is None:
            continue
        _, bwd = _OPS[node.op]
        input_grads = bwd([t.data for t in node.inputs], node.out.data, g, node.attrs)
        for t, ig in zip(node.inputs, input_grads):
            if ig is None or not t.requires_grad:
                continue
            if t.id in grads:
                grads[t.id] = grads[t.id] + ig
            else:
                grads[t.id] = ig

    result: dict[int, Tensor] = {}
    for node in graph.nodes:
        for t in node.inputs:
            if t.requires_grad and t.id not in produced and t.id not in result:
                result[t.id] = Tensor(grads.get(t.id, np.zeros_like(t.data)))
    for t in leaves:
        if t.id not in result:
            result[t.id] = Tensor(np.zeros_like(t.data))
    return result


def finite_difference_gradient(f: Callable[[Tensor], float], theta: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a pure scalar function of `theta`.

    The independent oracle for every backward() check. Perturbs theta.data
    in place and restores it; f must be deterministic in theta alone.
    """
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    flat = theta.data.reshape(-1)
    out = np.empty(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(theta))
        flat[i] = orig - h
        fm = float(f(theta))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise ValueError(f"non-finite evaluation at coordinate {i} ({fp}, {fm})")
        out[i] = (fp - fm) / (2.0 * h)
    return Tensor(out.reshape(theta.shape))


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """L2 relative error between two gradients, floored for near-zero pairs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), floor)
    return float(np.linalg.norm(a - b)) / denom


# thin wrappers so call sites read as math rather than strings


def matmul(a, b):
    return apply("matmul", a, b)


def add(a, b):
    return apply("add", a, b)


def mul(a, b):
    return apply("mul", a, b)


def scale(a, factor):
    return apply("scale", a, factor=float(factor))


def concat(*tensors, axis=0):
    return apply("concat", *tensors, axis=axis)


def gather(a, indices):
    return apply("gather", a, indices=np.asarray(indices, dtype=np.intp))


def transpose(a, axes=None):
    return apply("transpose", a, axes=axes)


def reshape(a, shape):
    return apply("reshape", a, shape=tuple(shape))


def softmax(a):
    return apply("softmax", a)


def layer_norm(a, eps=LAYER_NORM_EPS):
    return apply("layer_norm", a, eps=eps)


def gelu(a):
    return apply("gelu", a)


def mean(a):
    return apply("mean", a)


def tsum(a):
    return apply("sum", a)


def squared_difference(a, b):
    return apply("squared_difference", a, b)


def absolute_difference(a, b):
    return apply("absolute_difference", a, b)
