"""Dense 2-D tensors with tape-based reverse-mode differentiation.

Every value is a float64 matrix. Operations executed while a :class:`Tape`
is active and touching at least one tensor with ``requires_grad`` are
recorded; :func:`backward` replays the tape in reverse to fill ``.grad`` on
the leaves. Outside a tape the same functions are plain numpy forwards.
"""

from __future__ import annotations

import contextvars
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erf, expit


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class GradientError(RuntimeError):
    """Backward or optimizer contract violated."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"Tensor must be 2-D, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    @property
    def T(self):
        return transpose(self)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# tape

@dataclass
class _Record:
    inputs: tuple[Tensor, ...]
    output: Tensor
    adjoint: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager; nested tapes are allowed and the innermost
    one receives the records.
    """

    records: list[_Record] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


_ACTIVE: contextvars.ContextVar[Tape | None] = contextvars.ContextVar("mspt_tape", default=None)


def _record(out_data: np.ndarray, inputs: tuple[Tensor, ...], adjoint) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    out.requires_grad = needs
    if needs:
        tape = _ACTIVE.get()
        if tape is not None:
            tape.records.append(_Record(inputs, out, adjoint))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.shape != (1, 1):
        raise GradientError(f"backward needs a 1x1 loss, got shape {loss.shape}")
    produced = {id(r.output) for r in tape.records}
    adj: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for rec in reversed(tape.records):
        g = adj.pop(id(rec.output), None)
        if g is None:
            continue
        grads = rec.adjoint(g)
        for t, gt in zip(rec.inputs, grads):
            if gt is None or not t.requires_grad:
                continue
            key = id(t)
            if key in produced:
                prev = adj.get(key)
                adj[key] = gt if prev is None else prev + gt
            else:
                t.grad = gt.copy() if t.grad is None else t.grad + gt
    if id(loss) not in produced and loss.requires_grad:
        loss.grad = np.ones((1, 1)) if loss.grad is None else loss.grad + 1.0


# ---------------------------------------------------------------------------
# operations

def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[1] == shape[1]:
        return g.sum(axis=0, keepdims=True)
    if shape == (1, 1):
        return g.sum().reshape(1, 1)
    raise DimensionError(f"cannot reduce gradient of shape {g.shape} to {shape}")


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.rows == 1 and b.cols == a.cols:
        return
    if b.shape == (1, 1):
        return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    A, B = a.data, b.data

    def adjoint(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return _record(A @ B, (a, b), adjoint)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a 1 x cols row broadcast over rows."""
    b = _as_tensor(b)
    _check_broadcast(a, b, "add")
    sb = b.shape
    return _record(a.data + b.data, (a, b), lambda g: (g, _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    b = _as_tensor(b)
    _check_broadcast(a, b, "sub")
    sb = b.shape
    return _record(a.data - b.data, (a, b), lambda g: (g, -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    b = _as_tensor(b)
    _check_broadcast(a, b, "mul")
    A, B = a.data, b.data
    sb = b.shape
    return _record(A * B, (a, b), lambda g: (g * B, _unbroadcast(g * A, sb)))


def matmul_nt(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b.T`` with one fixed reduction per entry.

    Every output entry is reduced the same way regardless of its position,
    so permuting the rows of ``b`` permutes the output columns bit for bit.
    BLAS kernels do not promise that for remainder rows.
    """
    if a.cols != b.cols:
        raise DimensionError(f"matmul_nt: shapes {a.shape} and {b.shape} do not align")
    A, B = a.data, b.data

    def adjoint(g):
        return (g @ B if a.requires_grad else None, g.T @ A if b.requires_grad else None)

    return _record(np.einsum("ik,jk->ij", A, B), (a, b), adjoint)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def transpose(a: Tensor) -> Tensor:
    return _record(np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    rows = {p.rows for p in parts}
    if len(rows) != 1:
        raise DimensionError(f"concat_cols: row counts differ: {[p.shape for p in parts]}")
    widths = [p.cols for p in parts]
    edges = np.cumsum([0] + widths)

    def adjoint(g):
        return [g[:, edges[i]:edges[i + 1]] for i in range(len(parts))]

    return _record(np.concatenate([p.data for p in parts], axis=1), tuple(parts), adjoint)


def flatten(a: Tensor) -> Tensor:
    """Row-major reshape to a single 1 x (rows*cols) row."""
    shape = a.shape
    return _record(a.data.reshape(1, -1).copy(), (a,), lambda g: (g.reshape(shape),))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _record(np.array([[a.data.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))


def mean_rows(a: Tensor) -> Tensor:
    """Column-wise mean over rows, 1 x cols."""
    n = a.rows
    return _record(a.data.mean(axis=0, keepdims=True), (a,), lambda g: (np.repeat(g / n, n, axis=0),))


def max_rows(a: Tensor) -> Tensor:
    """Column-wise max over rows, 1 x cols; gradient routed to the first maximiser."""
    idx = a.data.argmax(axis=0)
    cols = np.arange(a.cols)
    shape = a.shape

    def adjoint(g):
        out = np.zeros(shape)
        out[idx, cols] = g[0]
        return (out,)

    return _record(a.data[idx, cols].reshape(1, -1), (a,), adjoint)


def softmax_rows(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    # summing in sorted order makes each row independent of its column order
    y = e / np.sort(e, axis=1).sum(axis=1, keepdims=True)

    def adjoint(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _record(y, (a,), adjoint)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    y = expit(a.data)
    return _record(y, (a,), lambda g: (g * y * (1.0 - y),))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x) with the erf-based normal CDF."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def adjoint(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _record(x * cdf, (a,), adjoint)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalisation over the feature axis with population variance."""
    if gain.shape != (1, a.cols) or bias.shape != (1, a.cols):
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must be (1, {a.cols})"
        )
    x = a.data
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    G = gain.data

    def adjoint(g):
        dxhat = g * G
        dx = inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        return (dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True))

    return _record(xhat * G + bias.data, (a, gain, bias), adjoint)


def cross_entropy_loss(logits: Tensor, label: int) -> Tensor:
    if logits.rows != 1:
        raise DimensionError(f"cross_entropy_loss expects 1 x d_out logits, got {logits.shape}")
    if not 0 <= label < logits.cols:
        raise IndexError(f"label {label} out of range for {logits.cols} classes")
    z = logits.data[0]
    m = z.max()
    lse = m + math.log(np.exp(z - m).sum())
    p = np.exp(z - lse)

    def adjoint(g):
        d = p.copy()
        d[label] -= 1.0
        return (g[0, 0] * d.reshape(1, -1),)

    return _record(np.array([[lse - z[label]]]), (logits,), adjoint)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], state: AdamState) -> None:
    """One in-place Adam update with decoupled weight decay.

    Weight decay is applied as ``p -= lr * wd * p`` before the moment
    update, independently of the gradient.
    """
    for name, p in params.items():
        if p.grad is None:
            raise GradientError(f"parameter {name!r} has no gradient")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        if state.lr == 0.0:
            continue
        if state.weight_decay:
            p.data -= state.lr * state.weight_decay * p.data
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
