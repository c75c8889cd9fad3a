"""Dense tensors with reverse-mode automatic differentiation.

Everything trainable in this package runs through the primitives here: a
``Tensor`` wraps a numpy array, and every differentiable operation appends a
node to the active ``Tape``. Because nodes are appended in execution order,
the tape is already topologically sorted and ``backward`` simply walks it in
reverse, accumulating gradients into ``Tensor.grad``.

Operations executed while no tape is active are plain numpy forwards with no
bookkeeping, which is what inference paths use.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DegenerateInputError, ShapeError

_TAPE_STACK: list["Tape"] = []

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A dense row-major array with an optional gradient slot.

    ``requires_grad=True`` marks a leaf (parameter); its gradient slot is
    allocated eagerly so that parameters untouched by a backward pass report
    an explicit zero gradient rather than ``None``.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Arithmetic operators build on the module-level primitives.
    def __add__(self, other):
        return add(self, _coerce(other, self))

    def __radd__(self, other):
        return add(_coerce(other, self), self)

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self))

    def __rmul__(self, other):
        return mul(_coerce(other, self), self)

    def __truediv__(self, other):
        return div(self, _coerce(other, self))

    def __rtruediv__(self, other):
        return div(_coerce(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _coerce(other, self))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)


class TapeNode:
    """One recorded primitive: references to operands and a backward closure."""

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor,
                 backward_fn: Callable[[np.ndarray], None]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Execution-ordered operation record (a Wengert list).

    Appending at execution time guarantees the topological invariant: every
    node's inputs were produced by earlier nodes or are leaves.
    """

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _TAPE_STACK.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
            backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap ``out_data``; register a node only when a tape is listening."""
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(TapeNode(op, inputs, out, backward_fn))
    else:
        out.requires_grad = False
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise and reduction primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bk(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _record("add", (a, b), out, bk)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bk(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _record("sub", (a, b), out, bk)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bk(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _record("mul", (a, b), out, bk)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def bk(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _record("div", (a, b), out, bk)


def neg(a: Tensor) -> Tensor:
    def bk(g):
        _accumulate(a, -g)

    return _record("neg", (a,), -a.data, bk)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bk(g):
        _accumulate(a, g * out)

    return _record("exp", (a,), out, bk)


def log(a: Tensor) -> Tensor:
    def bk(g):
        _accumulate(a, g / a.data)

    return _record("log", (a,), np.log(a.data), bk)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bk(g):
        _accumulate(a, g * 0.5 / out)

    return _record("sqrt", (a,), out, bk)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    with np.errstate(over="ignore"):
        out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))

    def bk(g):
        _accumulate(a, g * out * (1.0 - out))

    return _record("sigmoid", (a,), out, bk)


def gelu(a: Tensor) -> Tensor:
    """Exact erf-based GELU; smooth everywhere, which keeps finite-difference
    gradient checks free of kink noise."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * phi

    def bk(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        _accumulate(a, g * (phi + x * pdf))

    return _record("gelu", (a,), out, bk)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    out = np.maximum(a.data, floor)

    def bk(g):
        _accumulate(a, g * (a.data > floor))

    return _record("clamp_min", (a,), out, bk)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bk(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(ge, a.data.shape).copy())

    return _record("sum", (a,), out, bk)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.shape[axis]

    def bk(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g / count, a.data.shape).copy())
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(ge / count, a.data.shape).copy())

    return _record("mean", (a,), out, bk)


# ---------------------------------------------------------------------------
# Linear-algebra and structural primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    A, B = a.data, b.data
    if A.ndim not in (1, 2) or B.ndim not in (1, 2):
        raise ShapeError(f"matmul supports 1-D/2-D operands, got {A.shape} @ {B.shape}")
    if A.shape[-1] != B.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {A.shape} @ {B.shape}")
    out = A @ B

    def bk(g):
        if a.requires_grad:
            if A.ndim == 1 and B.ndim == 1:
                ga = g * B
            elif A.ndim == 1:
                ga = B @ g
            elif B.ndim == 1:
                ga = np.outer(g, B)
            else:
                ga = g @ B.T
            _accumulate(a, ga)
        if b.requires_grad:
            if A.ndim == 1 and B.ndim == 1:
                gb = g * A
            elif A.ndim == 1:
                gb = np.outer(A, g)
            else:
                gb = A.T @ g
            _accumulate(b, gb)

    return _record("matmul", (a, b), out, bk)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got shape {a.data.shape}")

    def bk(g):
        _accumulate(a, g.T)

    return _record("transpose", (a,), a.data.T, bk)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def bk(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _record("reshape", (a,), out, bk)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bk(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, piece)

    return _record("concat", tuple(tensors), out, bk)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; the embedding primitive."""
    idx = np.asarray(ids, dtype=np.int64)
    out = table.data[idx]

    def bk(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, idx, g)
        _accumulate(table, buf)

    return _record("gather_rows", (table,), out, bk)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"slice_cols expects a 2-D tensor, got shape {a.data.shape}")
    out = a.data[:, start:stop]

    def bk(g):
        buf = np.zeros_like(a.data)
        buf[:, start:stop] = g
        _accumulate(a, buf)

    return _record("slice_cols", (a,), out, bk)


def pick(a: Tensor, idx) -> Tensor:
    """Per-row column selection: ``out[i] = a[i, idx[i]]``."""
    if a.data.ndim != 2:
        raise ShapeError(f"pick expects a 2-D tensor, got shape {a.data.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(a.data.shape[0])
    out = a.data[rows, idx]

    def bk(g):
        buf = np.zeros_like(a.data)
        buf[rows, idx] = g
        _accumulate(a, buf)

    return _record("pick", (a,), out, bk)


def scatter_add(weights: Tensor, ids, size: int) -> Tensor:
    """Scatter ``weights`` onto a vocabulary axis: ``out[..., v] = Σ_{j: ids[j]=v} w[..., j]``."""
    idx = np.asarray(ids, dtype=np.int64)
    w = weights.data
    if w.ndim == 1:
        out = np.zeros(size, dtype=w.dtype)
        np.add.at(out, idx, w)

        def bk(g):
            _accumulate(weights, g[idx])

    elif w.ndim == 2:
        rows = np.arange(w.shape[0])[:, None]
        out = np.zeros((w.shape[0], size), dtype=w.dtype)
        np.add.at(out, (rows, idx[None, :]), w)

        def bk(g):
            _accumulate(weights, g[:, idx])

    else:
        raise ShapeError(f"scatter_add expects 1-D/2-D weights, got shape {w.shape}")
    return _record("scatter_add", (weights,), out, bk)


# ---------------------------------------------------------------------------
# Fused softmax and the named composite operations
# ---------------------------------------------------------------------------

def softmax(logits: Tensor, mask=None, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax; masked positions come out exactly zero.

    Raises ``DegenerateInputError`` if any slice along ``axis`` is fully
    masked.
    """
    x = logits.data
    bool_mask = None
    if mask is not None:
        bool_mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not bool_mask.any(axis=axis).all():
            raise DegenerateInputError("softmax row is fully masked")
        x = np.where(bool_mask, x, -np.inf)
    mx = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - mx)
    p = e / e.sum(axis=axis, keepdims=True)

    def bk(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        _accumulate(logits, p * (g - inner))

    return _record("softmax", (logits,), p, bk)


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` with explicit shape validation."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(
            f"affine expects 2-D x and weight, got x {x.data.shape}, W {weight.data.shape}")
    if x.data.shape[1] != weight.data.shape[0]:
        raise ShapeError(
            f"affine inner dimensions disagree: x {x.data.shape} vs W {weight.data.shape}")
    if bias.data.shape != (weight.data.shape[1],):
        raise ShapeError(
            f"affine bias shape {bias.data.shape} does not match W {weight.data.shape}")
    return add(matmul(x, weight), bias)


def attention(q: Tensor, k: Tensor, v: Tensor, mask=None,
              additive_bias: Optional[Tensor] = None,
              scale: bool = True) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention returning ``(output, weights)``.

    ``additive_bias`` is broadcast over query rows and added to the logits
    before the softmax, so passing a per-key score bias reproduces the biased
    single-head form used by the copy layer.
    """
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise ShapeError(
            f"attention expects 2-D Q/K/V, got {q.data.shape}, {k.data.shape}, {v.data.shape}")
    if q.data.shape[1] != k.data.shape[1]:
        raise ShapeError(
            f"attention feature dims disagree: Q {q.data.shape} vs K {k.data.shape}")
    if k.data.shape != v.data.shape:
        raise ShapeError(
            f"attention K/V shapes disagree: {k.data.shape} vs {v.data.shape}")
    scores = matmul(q, transpose(k))
    if scale:
        scores = mul(scores, _coerce(1.0 / math.sqrt(q.data.shape[1]), scores))
    if additive_bias is not None:
        scores = add(scores, additive_bias)
    weights = softmax(scores, mask=mask, axis=-1)
    out = matmul(weights, v)
    return out, weights


# ---------------------------------------------------------------------------
# Backward pass and the finite-difference oracle
# ---------------------------------------------------------------------------

def backward(loss: Tensor, tape: Tape) -> None:
    """Populate gradients of everything on ``tape`` reachable from ``loss``."""
    if loss.data.ndim != 0:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ContractError("loss was not recorded on a tape (no tracked inputs)")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node.output.grad is not None:
            node.backward_fn(node.output.grad)


def finite_difference_check(f: Callable[[Sequence[Tensor]], Tensor],
                            params: Sequence[Tensor],
                            eps: float = 1e-5,
                            max_coords_per_param: Optional[int] = None,
                            rng: Optional[np.random.Generator] = None) -> float:
    """Compare analytic gradients of ``f(params)`` against central differences.

    Returns the maximum relative error over the sampled coordinates, where
    the relative error uses ``max(|analytic|, |numeric|, 1.0)`` as the
    denominator so near-zero gradients are compared absolutely.

    ``f`` must be deterministic; it is re-evaluated with individual parameter
    coordinates perturbed in place.
    """
    params = list(params)
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        p.grad[...] = 0.0
    with Tape() as tape:
        loss = f(params)
    backward(loss, tape)
    analytic = [p.grad.copy() for p in params]

    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for p, ana in zip(params, analytic):
        n = p.data.size
        if max_coords_per_param is None or n <= max_coords_per_param:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        flat = p.data.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            f_plus = float(f(params).data)
            flat[c] = orig - eps
            f_minus = float(f(params).data)
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(ana.reshape(-1)[c])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            worst = max(worst, rel)
    return worst
