"""Define-by-run reverse-mode differentiation over float64 numpy arrays.

A :class:`Tape` records every primitive applied to tracked tensors while it is
active; :func:`backward` walks the records in reverse to accumulate
vector-Jacobian products.  Arrays of any rank are supported; the trailing two
axes are the matrix axes for ``matmul`` and leading axes broadcast.
"""
from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "forward_primitive",
    "backward",
    "grad_check",
    "PRIMITIVES",
    "matmul",
    "add",
    "scalar_mul",
    "mul",
    "softmax",
    "layer_norm",
    "relu",
    "sigmoid",
    "log",
    "mean",
    "concat",
    "slice_",
    "masked_fill",
    "sum_",
    "square",
    "transpose",
    "reshape",
    "clamp",
    "grl",
]

LN_EPS = 1e-5

_ids = itertools.count(1)
_local = threading.local()


class ShapeError(ValueError):
    """Operand shapes do not conform to a primitive's contract."""


class Tensor:
    """An n-d float64 array that can take part in a recorded computation."""

    __slots__ = ("data", "grad", "node_id", "requires_grad")

    def __init__(self, data: Any, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) \
            else data.astype(np.float64, copy=False)
        self.grad: np.ndarray | None = None
        self.node_id = next(_ids)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __float__(self) -> float:
        return self.item()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node_id={self.node_id})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scalar_mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(scalar_mul(self, -1.0), other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        axes = list(range(self.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
        return transpose(self, tuple(axes))


@dataclass
class Record:
    kind: str
    inputs: tuple[int, ...]
    output: int
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] = field(repr=False)


class Tape:
    """Ordered log of primitive applications.

    Use as a context manager; operations executed inside the block on tensors
    with ``requires_grad`` (or on outputs of earlier recorded ops) are logged.
    """

    def __init__(self):
        self.records: list[Record] = []
        self.leaves: dict[int, Tensor] = {}
        self._tracked: set[int] = set()

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            self.leaves[t.node_id] = t
            self._tracked.add(t.node_id)

    def is_tracked(self, t: Tensor) -> bool:
        return t.node_id in self._tracked

    def gradient(self, loss: Tensor, tensors: Iterable[Tensor]) -> list[np.ndarray]:
        grads = backward(self, loss)
        return [grads.get(t.node_id, np.zeros_like(t.data)) for t in tensors]


def active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- primitive registry -------------------------------------------------------
# Each entry maps input arrays + attrs to (output array, vjp).  The vjp maps the
# upstream gradient to one gradient per input (None = no gradient).

PRIMITIVES: dict[str, Callable[..., tuple[np.ndarray, Callable]]] = {}


def _primitive(kind: str):
    def deco(fn):
        PRIMITIVES[kind] = fn
        return fn
    return deco


@_primitive("matmul")
def _matmul(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a, b)

    def vjp(g):
        if b.ndim == 2 and a.ndim > 2:
            # shared weight matrix: fold the leading axes into one GEMM
            ga = np.matmul(g, b.T)
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
        gb = np.matmul(np.swapaxes(a, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return out, vjp


@_primitive("add")
def _add(a, b):
    out = a + b

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return out, vjp


@_primitive("scalar_mul")
def _scalar_mul(a, c: float):
    out = a * c
    return out, lambda g: (g * c,)


@_primitive("elementwise_mul")
def _mul(a, b):
    out = a * b

    def vjp(g):
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)
    return out, vjp


@_primitive("row_softmax_masked")
def _softmax(x, mask=None):
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if np.any(mask.all(axis=-1)):
            raise ShapeError("row_softmax_masked: a row is fully masked")
        x = np.where(mask, -np.inf, x)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)
    return y, vjp


@_primitive("layer_norm")
def _layer_norm(x, gamma, beta, eps: float = LN_EPS):
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(
            f"layer_norm: scale {gamma.shape} / shift {beta.shape} do not match rows of {x.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma + beta

    def vjp(g):
        dxhat = g * gamma
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)
    return out, vjp


@_primitive("relu")
def _relu(x):
    on = x > 0
    return np.where(on, x, 0.0), lambda g: (g * on,)


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@_primitive("sigmoid")
def _sigmoid(x):
    y = _sigmoid_np(x)
    return y, lambda g: (g * y * (1.0 - y),)


@_primitive("log")
def _log(x):
    return np.log(x), lambda g: (g / x,)


@_primitive("mean_over_axis")
def _mean(x, axis: int | tuple[int, ...] | None = None, keepdims: bool = False):
    out = x.mean(axis=axis, keepdims=keepdims)
    count = x.size // max(out.size, 1) if axis is not None else x.size

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)
    return out, vjp


@_primitive("concat")
def _concat(*xs, axis: int = 0):
    out = np.concatenate(xs, axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))
    return out, vjp


@_primitive("slice")
def _slice(x, index):
    out = x[index]

    def vjp(g):
        gx = np.zeros_like(x)
        gx[index] = g
        return (gx,)
    return np.array(out), vjp


@_primitive("masked_fill")
def _masked_fill(x, mask, value: float = 0.0):
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    keep = ~mask
    return np.where(mask, value, x), lambda g: (g * keep,)


@_primitive("sum")
def _sum(x, axis: int | None = None, keepdims: bool = False):
    out = x.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return np.asarray(out), vjp


@_primitive("square")
def _square(x):
    return x * x, lambda g: (2.0 * x * g,)


@_primitive("transpose")
def _transpose(x, axes: tuple[int, ...] | None = None):
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    return np.transpose(x, axes), lambda g: (np.transpose(g, inverse),)


@_primitive("reshape")
def _reshape(x, shape: tuple[int, ...]):
    return x.reshape(shape), lambda g: (g.reshape(x.shape),)


@_primitive("clamp")
def _clamp(x, lo: float = -np.inf, hi: float = np.inf):
    inside = (x >= lo) & (x <= hi)
    return np.clip(x, lo, hi), lambda g: (g * inside,)


@_primitive("grl")
def _grl(x, lam: float = 1.0):
    if lam < 0:
        raise ValueError(f"grl: lambda must be >= 0, got {lam}")
    return x.copy(), lambda g: (-lam * g,)


def forward_primitive(kind: str, inputs: Sequence[Any], attrs: dict | None = None) -> Tensor:
    """Apply primitive ``kind`` and record it on the active tape if needed."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    tensors = [_as_tensor(x) for x in inputs]
    arrays = [t.data for t in tensors]
    try:
        out, vjp = fn(*arrays, **(attrs or {}))
    except ShapeError:
        raise
    except ValueError as exc:
        shapes = ", ".join(str(a.shape) for a in arrays)
        raise ShapeError(f"{kind}: {exc} (shapes {shapes})") from exc
    result = Tensor(out)
    tape = active_tape()
    if tape is not None:
        for t in tensors:
            if t.requires_grad and t.node_id not in tape._tracked:
                tape.watch(t)
        if any(t.node_id in tape._tracked for t in tensors):
            tape.records.append(Record(kind, tuple(t.node_id for t in tensors),
                                       result.node_id, vjp))
            tape._tracked.add(result.node_id)
    return result


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``loss`` for every node on ``tape``.

    Watched leaves that the loss does not depend on map to zeros.  Gradients
    are also stored on the leaf tensors' ``grad`` attribute.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.get(rec.output)
        if g is None:
            continue
        for nid, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or nid not in tape._tracked:
                continue
            if nid in grads:
                grads[nid] = grads[nid] + gi
            else:
                grads[nid] = gi
    for nid, leaf in tape.leaves.items():
        if nid not in grads:
            grads[nid] = np.zeros_like(leaf.data)
        leaf.grad = grads[nid]
    return grads


def grad_check(f: Callable[[Tensor], Tensor], x0: Any, h: float = 1e-5,
               numeric_f: Callable[[np.ndarray], float] | None = None) -> float:
    """Max relative error between the taped gradient of ``f`` and central differences.

    ``numeric_f`` overrides the function differenced numerically; use it when
    the backward pass intentionally differs from the forward derivative
    (gradient reversal).
    """
    x0 = np.array(x0.data if isinstance(x0, Tensor) else x0, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        tape.watch(leaf)
        out = f(leaf)
    if out.size != 1 or not np.all(np.isfinite(out.data)):
        raise ValueError("grad_check: f must return a finite scalar")
    analytic = backward(tape, out)[leaf.node_id].reshape(-1)

    def evaluate(x: np.ndarray) -> float:
        if numeric_f is not None:
            val = float(numeric_f(x))
        else:
            val = f(Tensor(x)).item()
        if not np.isfinite(val):
            raise ValueError("grad_check: f is not finite near x0")
        return val

    flat = x0.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        xp = flat.copy()
        xp[i] += h
        xm = flat.copy()
        xm[i] -= h
        numeric[i] = (evaluate(xp.reshape(x0.shape)) - evaluate(xm.reshape(x0.shape))) / (2 * h)
    if flat.size == 0:
        return 0.0
    err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(err.max())


# --- functional surface -------------------------------------------------------

def matmul(a, b) -> Tensor:
    return forward_primitive("matmul", [a, b])


def add(a, b) -> Tensor:
    return forward_primitive("add", [a, b])


def scalar_mul(a, c: float) -> Tensor:
    return forward_primitive("scalar_mul", [a], {"c": float(c)})


def mul(a, b) -> Tensor:
    return forward_primitive("elementwise_mul", [a, b])


def softmax(x, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` marks blocked entries with True."""
    return forward_primitive("row_softmax_masked", [x], {"mask": mask})


def layer_norm(x, scale, shift, eps: float = LN_EPS) -> Tensor:
    return forward_primitive("layer_norm", [x, scale, shift], {"eps": eps})


def relu(x) -> Tensor:
    return forward_primitive("relu", [x])


def sigmoid(x) -> Tensor:
    return forward_primitive("sigmoid", [x])


def log(x) -> Tensor:
    return forward_primitive("log", [x])


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    return forward_primitive("mean_over_axis", [x], {"axis": axis, "keepdims": keepdims})


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    return forward_primitive("concat", list(xs), {"axis": axis})


def slice_(x, index) -> Tensor:
    return forward_primitive("slice", [x], {"index": index})


def masked_fill(x, mask, value: float = 0.0) -> Tensor:
    return forward_primitive("masked_fill", [x], {"mask": mask, "value": value})


def sum_(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    return forward_primitive("sum", [x], {"axis": axis, "keepdims": keepdims})


def square(x) -> Tensor:
    return forward_primitive("square", [x])


def transpose(x, axes: tuple[int, ...] | None = None) -> Tensor:
    return forward_primitive("transpose", [x], {"axes": axes})


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    return forward_primitive("reshape", [x], {"shape": tuple(shape)})


def clamp(x, lo: float = -np.inf, hi: float = np.inf) -> Tensor:
    return forward_primitive("clamp", [x], {"lo": lo, "hi": hi})


def grl(x, lam: float) -> Tensor:
    """Identity forward; multiplies the incoming gradient by ``-lam`` on the way back."""
    return forward_primitive("grl", [x], {"lam": float(lam)})
