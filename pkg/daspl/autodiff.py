"""
Autodiff Module

This module provides the dense float64 tensor engine that all DA-SPL math is
built on: an op catalog with forward and backward rules, tape-style
reverse-mode differentiation, and a central-difference gradient checker.

The graph is rebuilt on every forward pass. Each op output remembers the op
kind, its inputs and the values its backward rule needs; ``backward`` walks
those records in reverse topological order.
"""

import itertools
import logging
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from daspl.errors import ContractError, DomainError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

COSINE_EPS = 1e-12
GELU_C = math.sqrt(2.0 / math.pi)

_ids = itertools.count()
_grad_mode = threading.local()

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording for the current thread inside the block."""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


# ==================== Tensor ====================

@dataclass
class GradNode:
    """One recorded operation: op kind, input tensors and saved forward values."""

    kind: str
    inputs: Tuple["Tensor", ...]
    saved: Dict[str, Any]
    attrs: Dict[str, Any] = field(default_factory=dict)


class Tensor:
    """
    Dense n-dimensional float64 array that can take part in a gradient graph.

    Args:
        data: Anything ``np.array`` accepts. Always copied to a contiguous
              float64 array.
        requires_grad: Whether ``backward`` should produce a gradient for
                       this tensor.
        name: Optional label used in diagnostics (gradient checks, non-finite
              reports, checkpoints).
    """

    def __init__(self, data: Any, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.uid = next(_ids)
        self._node: Optional[GradNode] = None

    @classmethod
    def _wrap(cls, value: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(value, dtype=np.float64, order="C")
        out.requires_grad = False
        out.grad = None
        out.name = None
        out.uid = next(_ids)
        out._node = None
        return out

    # -- introspection ----------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # -- arithmetic sugar -------------------------------------------------

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return self.__mul__(other)

    def __neg__(self) -> "Tensor":
        return scalar_mul(self, -1.0)

    def __truediv__(self, other: float) -> "Tensor":
        if not isinstance(other, (int, float)):
            raise ContractError("tensor division is only defined for a python scalar divisor")
        return scalar_mul(self, 1.0 / float(other))

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        return slice_(self, index)

    # -- method forms of catalog ops --------------------------------------

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Optional[Sequence[int]] = None) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

    def abs(self) -> "Tensor":
        return abs_(self)

    def softmax(self, axis: int = -1) -> "Tensor":
        return softmax(self, axis=axis)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def gelu(self) -> "Tensor":
        return gelu(self)


def as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=np.float64))


# ==================== Op registry ====================

ForwardRule = Callable[..., Tuple[np.ndarray, Dict[str, Any]]]
BackwardRule = Callable[[np.ndarray, GradNode, np.ndarray], Tuple[Optional[np.ndarray], ...]]


@dataclass(frozen=True)
class OpRule:
    forward: ForwardRule
    backward: BackwardRule


_OPS: Dict[str, OpRule] = {}


def register_op(kind: str, forward: ForwardRule, backward: BackwardRule) -> None:
    _OPS[kind] = OpRule(forward, backward)


def forward_op(kind: str, inputs: Sequence[ArrayLike], **attrs: Any) -> Tensor:
    """
    Run one catalog op and record it in the graph when any input needs grads.

    Args:
        kind (str): Tag of a registered op.
        inputs: Input tensors (plain arrays and scalars are wrapped as
                constants).
        **attrs: Op attributes such as ``axis`` or ``index``.

    Returns:
        Tensor: The result. It carries a ``GradNode`` when grad mode is on and
        at least one input requires grad.

    Raises:
        ContractError: Unknown op kind.
        ShapeError: Input shapes are invalid for the op.
        DomainError: log/sqrt of an out-of-domain value.

    Examples:
        >>> forward_op("softmax", [Tensor([0.0, 0.0])]).data
        array([0.5, 0.5])
    """
    rule = _OPS.get(kind)
    if rule is None:
        raise ContractError(f"unknown op kind '{kind}'")
    tensors = tuple(as_tensor(x) for x in inputs)
    value, saved = rule.forward(*(t.data for t in tensors), **attrs)
    out = Tensor._wrap(value)
    if is_grad_enabled() and any(t.requires_grad for t in tensors):
        out.requires_grad = True
        out._node = GradNode(kind, tensors, saved, attrs)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _expand_reduced(grad: np.ndarray, shape: Tuple[int, ...], axis: Any, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(grad.reshape([1] * len(shape)), shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            grad = np.expand_dims(grad, a)
    return np.broadcast_to(grad, shape)


# -- linear algebra and layout ---------------------------------------------

def _matmul_fwd(a, b):
    if a.ndim < 1 or b.ndim < 2:
        raise ShapeError(f"matmul: needs a ndim>=1 and b ndim>=2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    vector = a.ndim == 1
    a2 = a[None, :] if vector else a
    try:
        out = np.matmul(a2, b)
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}") from None
    if vector:
        out = out[..., 0, :]
    return out, {"vector": vector}


def _matmul_bwd(grad, node, out):
    a, b = (t.data for t in node.inputs)
    vector = node.saved["vector"]
    a2 = a[None, :] if vector else a
    g2 = grad[..., None, :] if vector else grad
    ga = gb = None
    if node.inputs[0].requires_grad:
        ga = _unbroadcast(np.matmul(g2, np.swapaxes(b, -1, -2)), a2.shape).reshape(a.shape)
    if node.inputs[1].requires_grad:
        gb = _unbroadcast(np.matmul(np.swapaxes(a2, -1, -2), g2), b.shape)
    return ga, gb


register_op("matmul", _matmul_fwd, _matmul_bwd)


def _transpose_fwd(a, axes=None):
    if axes is None:
        if a.ndim < 2:
            raise ShapeError(f"transpose: needs ndim>=2, got {a.shape}")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    return np.transpose(a, axes), {"axes": axes}


def _transpose_bwd(grad, node, out):
    return (np.transpose(grad, np.argsort(node.saved["axes"])),)


register_op("transpose", _transpose_fwd, _transpose_bwd)


def _reshape_fwd(a, shape):
    try:
        return a.reshape(shape), {}
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None


def _reshape_bwd(grad, node, out):
    return (grad.reshape(node.inputs[0].shape),)


register_op("reshape", _reshape_fwd, _reshape_bwd)


def _concat_fwd(*arrays, axis=0):
    if not arrays:
        raise ContractError("concat: needs at least one input")
    ndim = arrays[0].ndim
    ax = axis % ndim
    for arr in arrays[1:]:
        if arr.ndim != ndim or any(
            arr.shape[d] != arrays[0].shape[d] for d in range(ndim) if d != ax
        ):
            raise ShapeError(
                f"concat: shapes {arrays[0].shape} and {arr.shape} differ outside axis {axis}"
            )
    sizes = [arr.shape[ax] for arr in arrays]
    return np.concatenate(arrays, axis=ax), {"sizes": sizes, "axis": ax}


def _concat_bwd(grad, node, out):
    splits = np.cumsum(node.saved["sizes"])[:-1]
    return tuple(np.split(grad, splits, axis=node.saved["axis"]))


register_op("concat", _concat_fwd, _concat_bwd)


def _slice_fwd(a, index):
    try:
        return np.array(a[index]), {}
    except IndexError as exc:
        raise ShapeError(f"slice: index {index!r} invalid for shape {a.shape}: {exc}") from None


def _is_basic_index(index: Any) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(
        p is None or p is Ellipsis
        or (isinstance(p, (int, np.integer, slice)) and not isinstance(p, (bool, np.bool_)))
        for p in parts
    )


def _slice_bwd(grad, node, out):
    full = np.zeros(node.inputs[0].shape)
    index = node.attrs["index"]
    if _is_basic_index(index):
        # basic indexing never repeats an element
        full[index] = grad
    else:
        np.add.at(full, index, grad)
    return (full,)


register_op("slice", _slice_fwd, _slice_bwd)


def _embedding_fwd(table, ids):
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"embedding: ids outside [0, {table.shape[0]})")
    return table[ids], {"ids": ids}


def _embedding_bwd(grad, node, out):
    full = np.zeros(node.inputs[0].shape)
    np.add.at(full, node.saved["ids"], grad)
    return (full,)


register_op("embedding", _embedding_fwd, _embedding_bwd)


# -- elementwise arithmetic ------------------------------------------------

def _add_fwd(a, b):
    _check_broadcast("add", a, b)
    return a + b, {}


def _add_bwd(grad, node, out):
    a, b = node.inputs
    return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)


register_op("add", _add_fwd, _add_bwd)


def _sub_fwd(a, b):
    _check_broadcast("sub", a, b)
    return a - b, {}


def _sub_bwd(grad, node, out):
    a, b = node.inputs
    return _unbroadcast(grad, a.shape), _unbroadcast(-grad, b.shape)


register_op("sub", _sub_fwd, _sub_bwd)


def _mul_fwd(a, b):
    _check_broadcast("mul", a, b)
    return a * b, {}


def _mul_bwd(grad, node, out):
    a, b = node.inputs
    ga = _unbroadcast(grad * b.data, a.shape) if a.requires_grad else None
    gb = _unbroadcast(grad * a.data, b.shape) if b.requires_grad else None
    return ga, gb


register_op("mul", _mul_fwd, _mul_bwd)


def _scalar_mul_fwd(a, c):
    return a * c, {}


def _scalar_mul_bwd(grad, node, out):
    return (grad * node.attrs["c"],)


register_op("scalar_mul", _scalar_mul_fwd, _scalar_mul_bwd)


def _clamp_min_fwd(a, floor):
    return np.maximum(a, floor), {}


def _clamp_min_bwd(grad, node, out):
    return (grad * (node.inputs[0].data > node.attrs["floor"]),)


register_op("clamp_min", _clamp_min_fwd, _clamp_min_bwd)


# -- reductions ------------------------------------------------------------

def _sum_fwd(a, axis=None, keepdims=False):
    return np.asarray(np.sum(a, axis=axis, keepdims=keepdims)), {}


def _sum_bwd(grad, node, out):
    shape = node.inputs[0].shape
    return (_expand_reduced(grad, shape, node.attrs.get("axis"), node.attrs.get("keepdims", False)).copy(),)


register_op("sum", _sum_fwd, _sum_bwd)


def _mean_fwd(a, axis=None, keepdims=False):
    return np.asarray(np.mean(a, axis=axis, keepdims=keepdims)), {"count": a.size // max(1, np.asarray(np.sum(a, axis=axis, keepdims=keepdims)).size)}


def _mean_bwd(grad, node, out):
    shape = node.inputs[0].shape
    expanded = _expand_reduced(grad, shape, node.attrs.get("axis"), node.attrs.get("keepdims", False))
    return (expanded / node.saved["count"],)


register_op("mean", _mean_fwd, _mean_bwd)


# -- unary maps ------------------------------------------------------------

def _exp_fwd(a):
    return np.exp(a), {}


def _exp_bwd(grad, node, out):
    return (grad * out,)


register_op("exp", _exp_fwd, _exp_bwd)


def _log_fwd(a):
    if np.any(a <= 0):
        raise DomainError(f"log: input has non-positive entries (min {a.min():.3g})")
    return np.log(a), {}


def _log_bwd(grad, node, out):
    return (grad / node.inputs[0].data,)


register_op("log", _log_fwd, _log_bwd)


def _sqrt_fwd(a):
    if np.any(a < 0):
        raise DomainError(f"sqrt: input has negative entries (min {a.min():.3g})")
    return np.sqrt(a), {}


def _sqrt_bwd(grad, node, out):
    return (grad * 0.5 / out,)


register_op("sqrt", _sqrt_fwd, _sqrt_bwd)


def _abs_fwd(a):
    return np.abs(a), {}


def _abs_bwd(grad, node, out):
    return (grad * np.sign(node.inputs[0].data),)


register_op("abs", _abs_fwd, _abs_bwd)


def _softmax_fwd(a, axis=-1):
    shifted = a - np.max(a, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True), {}


def _softmax_bwd(grad, node, out):
    axis = node.attrs.get("axis", -1)
    return (out * (grad - np.sum(grad * out, axis=axis, keepdims=True)),)


register_op("softmax", _softmax_fwd, _softmax_bwd)


def _sigmoid_fwd(a):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * a)), {}


def _sigmoid_bwd(grad, node, out):
    return (grad * out * (1.0 - out),)


register_op("sigmoid", _sigmoid_fwd, _sigmoid_bwd)


def _log_sigmoid_fwd(a):
    return -(np.maximum(-a, 0.0) + np.log1p(np.exp(-np.abs(a)))), {}


def _log_sigmoid_bwd(grad, node, out):
    return (grad * 0.5 * (1.0 - np.tanh(0.5 * node.inputs[0].data)),)


register_op("log_sigmoid", _log_sigmoid_fwd, _log_sigmoid_bwd)


def _tanh_fwd(a):
    return np.tanh(a), {}


def _tanh_bwd(grad, node, out):
    return (grad * (1.0 - out * out),)


register_op("tanh", _tanh_fwd, _tanh_bwd)


def _relu_fwd(a):
    return np.maximum(a, 0.0), {}


def _relu_bwd(grad, node, out):
    return (grad * (node.inputs[0].data > 0),)


register_op("relu", _relu_fwd, _relu_bwd)


def _gelu_fwd(a):
    inner = GELU_C * (a + 0.044715 * a ** 3)
    t = np.tanh(inner)
    return 0.5 * a * (1.0 + t), {"t": t}


def _gelu_bwd(grad, node, out):
    a = node.inputs[0].data
    t = node.saved["t"]
    d_inner = GELU_C * (1.0 + 3 * 0.044715 * a ** 2)
    return (grad * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * d_inner),)


register_op("gelu", _gelu_fwd, _gelu_bwd)


def _cosine_fwd(u, v, axis=-1):
    if u.shape != v.shape:
        raise ShapeError(f"cosine_similarity: shapes differ, {u.shape} vs {v.shape}")
    nu = np.sqrt(np.sum(u * u, axis=axis, keepdims=True))
    nv = np.sqrt(np.sum(v * v, axis=axis, keepdims=True))
    raw = nu * nv
    denom = np.maximum(raw, COSINE_EPS)
    dot = np.sum(u * v, axis=axis, keepdims=True)
    cos = dot / denom
    saved = {"nu": nu, "nv": nv, "denom": denom, "floored": raw < COSINE_EPS, "cos": cos}
    return np.squeeze(cos, axis=axis), saved


def _cosine_bwd(grad, node, out):
    u, v = (t.data for t in node.inputs)
    axis = node.attrs.get("axis", -1)
    s = node.saved
    g = np.expand_dims(grad, axis)
    floored = s["floored"]
    safe_nu2 = np.where(floored, 1.0, s["nu"] ** 2)
    safe_nv2 = np.where(floored, 1.0, s["nv"] ** 2)
    gu = v / s["denom"] - np.where(floored, 0.0, s["cos"] * u / safe_nu2)
    gv = u / s["denom"] - np.where(floored, 0.0, s["cos"] * v / safe_nv2)
    return g * gu, g * gv


register_op("cosine_similarity", _cosine_fwd, _cosine_bwd)


# ==================== Functional API ====================

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    return forward_op("matmul", [a, b])


def transpose(a: ArrayLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    return forward_op("transpose", [a], axes=None if axes is None else tuple(axes))


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    return forward_op("reshape", [a], shape=tuple(shape))


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    return forward_op("concat", list(tensors), axis=axis)


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    """Stack equally shaped tensors along a new axis (reshape + concat)."""
    parts = []
    for t in tensors:
        t = as_tensor(t)
        ax = axis % (t.ndim + 1)
        parts.append(reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]))
    return concat(parts, axis=axis)


def slice_(a: ArrayLike, index: Any) -> Tensor:
    return forward_op("slice", [a], index=index)


def embedding(table: ArrayLike, ids: Any) -> Tensor:
    return forward_op("embedding", [table], ids=np.asarray(ids, dtype=np.int64))


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    return forward_op("add", [a, b])


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    return forward_op("sub", [a, b])


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    return forward_op("mul", [a, b])


def scalar_mul(a: ArrayLike, c: float) -> Tensor:
    return forward_op("scalar_mul", [a], c=float(c))


def clamp_min(a: ArrayLike, floor: float) -> Tensor:
    return forward_op("clamp_min", [a], floor=float(floor))


def sum_(a: ArrayLike, axis: Any = None, keepdims: bool = False) -> Tensor:
    return forward_op("sum", [a], axis=axis, keepdims=keepdims)


def mean(a: ArrayLike, axis: Any = None, keepdims: bool = False) -> Tensor:
    return forward_op("mean", [a], axis=axis, keepdims=keepdims)


def exp(a: ArrayLike) -> Tensor:
    return forward_op("exp", [a])


def log(a: ArrayLike) -> Tensor:
    return forward_op("log", [a])


def sqrt(a: ArrayLike) -> Tensor:
    return forward_op("sqrt", [a])


def abs_(a: ArrayLike) -> Tensor:
    return forward_op("abs", [a])


def softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    return forward_op("softmax", [a], axis=axis)


def sigmoid(a: ArrayLike) -> Tensor:
    return forward_op("sigmoid", [a])


def log_sigmoid(a: ArrayLike) -> Tensor:
    return forward_op("log_sigmoid", [a])


def tanh(a: ArrayLike) -> Tensor:
    return forward_op("tanh", [a])


def relu(a: ArrayLike) -> Tensor:
    return forward_op("relu", [a])


def gelu(a: ArrayLike) -> Tensor:
    return forward_op("gelu", [a])


def cosine_similarity(u: ArrayLike, v: ArrayLike, axis: int = -1) -> Tensor:
    return forward_op("cosine_similarity", [u, v], axis=axis)


# ==================== Backward ====================

@dataclass
class GradGraph:
    """Recorded operations reachable from one output, inputs before outputs."""

    nodes: List[Tensor]

    @classmethod
    def from_output(cls, output: Tensor) -> "GradGraph":
        order: List[Tensor] = []
        visited = set()
        # iterative DFS; long RNN unrolls exceed the recursion limit
        stack_: List[Tuple[Tensor, bool]] = [(output, False)]
        while stack_:
            tensor, expanded = stack_.pop()
            if expanded:
                order.append(tensor)
                continue
            if tensor.uid in visited:
                continue
            visited.add(tensor.uid)
            stack_.append((tensor, True))
            if tensor._node is not None:
                for parent in tensor._node.inputs:
                    if parent.requires_grad and parent.uid not in visited:
                        stack_.append((parent, False))
        return cls(order)


def backward(loss: Tensor) -> Dict[int, np.ndarray]:
    """
    Reverse-mode pass from a scalar loss.

    Gradients are summed over fan-out. Every leaf that requires grad gets its
    ``grad`` attribute accumulated (call ``ParamStore.zero_grad`` between
    steps).

    Args:
        loss (Tensor): Scalar produced by a recorded graph.

    Returns:
        dict: Tensor uid → gradient array for every tensor in the graph.

    Raises:
        ContractError: ``loss`` is not a scalar or nothing in its history
                       requires grad.

    Examples:
        >>> x = Tensor(3.0, requires_grad=True)
        >>> _ = backward(x * x)
        >>> float(x.grad)
        6.0
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward called on a tensor with no recorded graph")
    graph = GradGraph.from_output(loss)
    grads: Dict[int, np.ndarray] = {loss.uid: np.ones_like(loss.data)}
    for tensor in reversed(graph.nodes):
        grad = grads.get(tensor.uid)
        if grad is None:
            continue
        node = tensor._node
        if node is None:
            tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
            continue
        rule = _OPS[node.kind]
        input_grads = rule.backward(grad, node, tensor.data)
        for parent, g in zip(node.inputs, input_grads):
            if g is None or not parent.requires_grad:
                continue
            g = np.asarray(g, dtype=np.float64).reshape(parent.shape)
            if parent.uid in grads:
                grads[parent.uid] = grads[parent.uid] + g
            else:
                grads[parent.uid] = g
    return grads


# ==================== Gradient checking ====================

def first_non_finite(named: Iterable[Tuple[str, Any]]) -> Optional[str]:
    """Return the name of the first tensor/array holding a NaN or Inf."""
    for name, value in named:
        data = value.data if isinstance(value, Tensor) else np.asarray(value)
        if not np.all(np.isfinite(data)):
            return name
    return None


def grad_check(function: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5) -> float:
    """
    Compare analytic gradients against central finite differences.

    Args:
        function: Deterministic zero-argument callable returning a scalar
                  Tensor; it reads the current values of ``params``.
        params: Leaf tensors to perturb.
        step (float): Finite-difference step, must be positive.

    Returns:
        float: max over every parameter entry of
        |analytic − numeric| / max(1, |analytic|).

    Raises:
        ContractError: ``step`` is not positive.
        NonFiniteError: The function produced NaN/Inf; the message names the
                        parameter entry that was being perturbed.

    Examples:
        >>> w = Tensor([0.5, -1.0], requires_grad=True)
        >>> x = np.array([2.0, 3.0])
        >>> grad_check(lambda: (w * x).sum(), [w]) < 1e-10
        True
    """
    if step <= 0:
        raise ContractError(f"grad_check step must be positive, got {step}")
    for p in params:
        p.grad = None
        p.data = np.asarray(p.data, order="C")
    out = function()
    if not np.isfinite(out.data).all():
        raise NonFiniteError("function value is not finite", "<unperturbed>")
    backward(out)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    worst = 0.0
    with no_grad():
        for index, (p, a) in enumerate(zip(params, analytic)):
            flat = p.data.reshape(-1)
            a_flat = a.reshape(-1)
            label = p.name or f"param[{index}]"
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + step
                f_plus = function().item()
                flat[i] = original - step
                f_minus = function().item()
                flat[i] = original
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise NonFiniteError("perturbed function value is not finite", f"{label}[{i}]")
                numeric = (f_plus - f_minus) / (2.0 * step)
                err = abs(a_flat[i] - numeric) / max(1.0, abs(a_flat[i]))
                worst = max(worst, err)
    logger.debug("grad_check over %d tensors: max relative error %.3e", len(params), worst)
    return worst
