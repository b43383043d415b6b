"""
Dense tensor arithmetic with tape-based reverse-mode differentiation.

Tensors wrap contiguous numpy arrays of 32-bit reals (64-bit is preserved
when fed in, which the finite-difference checker relies on). Operations
record themselves on the innermost active ``Tape``; ``backward`` walks the
tape in reverse creation order and accumulates gradients additively into
``Tensor.grad``. Each op is deterministic: fixed iteration order, no
reduction-order ambiguity.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Operand dimensions are inconsistent with the operation."""


class NumericError(ArithmeticError):
    """Non-finite input where finite values are required."""


class IndexSelectionError(IndexError):
    """Row-index list is out of range or not strictly increasing."""


class ContractError(ValueError):
    """An operation precondition was violated."""


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------


class Tensor:
    """Shape-tagged dense array of reals with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, order="C")
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.size == 0:
            raise ShapeError("tensor dims must all be >= 1")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """Detached copy of the underlying array."""
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Thin sugar over the free functions; keeps model code readable.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(arr: np.ndarray) -> Tensor:
    # Internal fast path: wrap an array we just computed, no copy/validation.
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.requires_grad = False
    t.grad = None
    return t


_TAPE_STACK = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_TAPE_STACK, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive applications for one backward pass.

    Used as a context manager; ops executed inside record a node whenever an
    input requires grad. Nodes are appended in creation order, so reverse
    iteration is a valid topological order.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_TAPE_STACK, "stack", None)
        if stack is None:
            stack = []
            _TAPE_STACK.stack = stack
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def record(out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Attach ``out`` to the active tape if any input carries gradient.

    ``backward_fn(dout)`` must return one array (or None) per entry of
    ``inputs``. Exposed so higher-level modules can define fused primitives
    with hand-written backward rules.
    """
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append((out, tuple(inputs), backward_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` on every requires-grad tensor reachable from ``loss``.

    Gradients accumulate additively into existing ``grad`` buffers; run
    ``zero_grad`` between passes unless accumulation is intended.
    """
    if loss.data.size != 1:
        raise ContractError("backward requires a scalar loss")
    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for out, inputs, backward_fn in reversed(tape.nodes):
        dout = flowing.get(id(out))
        if dout is None:
            continue
        grads = backward_fn(dout)
        for tensor, g in zip(inputs, grads):
            if g is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in flowing:
                flowing[key] = flowing[key] + g
            else:
                flowing[key] = g
                holders[key] = tensor
    for key, tensor in holders.items():
        if not tensor.requires_grad:
            continue
        g = flowing[key].astype(tensor.data.dtype, copy=False)
        tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def _require_2d(x: Tensor, name: str) -> None:
    if x.data.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {x.data.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. a (m,k) @ b (k,n) -> (m,n)."""
    _require_2d(a, "matmul lhs")
    _require_2d(b, "matmul rhs")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}"
        )
    out = _wrap(a.data @ b.data)

    def bwd(dout):
        return dout @ b.data.T, a.data.T @ dout

    return record(out, (a, b), bwd)


def transpose(x: Tensor) -> Tensor:
    _require_2d(x, "transpose")
    out = _wrap(np.ascontiguousarray(x.data.T))

    def bwd(dout):
        return (np.ascontiguousarray(dout.T),)

    return record(out, (x,), bwd)


def _is_scalar_operand(b) -> bool:
    return isinstance(b, (int, float, np.floating, np.integer)) or (
        isinstance(b, Tensor) and b.data.size == 1
    )


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum; b is a tensor of identical shape or a scalar."""
    if _is_scalar_operand(b) and not isinstance(b, Tensor):
        out = _wrap(a.data + float(b))

        def bwd(dout):
            return (dout,)

        return record(out, (a,), bwd)
    if not isinstance(b, Tensor):
        raise ShapeError("add expects a Tensor or scalar operand")
    if b.data.size == 1 and b.data.shape != a.data.shape:
        out = _wrap(a.data + b.data.reshape(-1)[0])

        def bwd(dout):
            return dout, dout.sum().reshape(b.data.shape)

        return record(out, (a, b), bwd)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = _wrap(a.data + b.data)

    def bwd(dout):
        return dout, dout

    return record(out, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; b is a tensor of identical shape or a scalar."""
    if _is_scalar_operand(b) and not isinstance(b, Tensor):
        return scale(a, float(b))
    if not isinstance(b, Tensor):
        raise ShapeError("mul expects a Tensor or scalar operand")
    if b.data.size == 1 and b.data.shape != a.data.shape:
        s = b.data.reshape(-1)[0]
        out = _wrap(a.data * s)

        def bwd(dout):
            return dout * s, (dout * a.data).sum().reshape(b.data.shape)

        return record(out, (a, b), bwd)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = _wrap(a.data * b.data)

    def bwd(dout):
        return dout * b.data, dout * a.data

    return record(out, (a, b), bwd)


def scale(x: Tensor, s: float) -> Tensor:
    """Multiply every element by the python scalar ``s``."""
    s = float(s)
    out = _wrap(x.data * s)

    def bwd(dout):
        return (dout * s,)

    return record(out, (x,), bwd)


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """x (m,n) + v (1,n) broadcast over rows; the bias-add primitive."""
    _require_2d(x, "add_rowvec lhs")
    if v.data.shape != (1, x.data.shape[1]):
        raise ShapeError(
            f"add_rowvec expects v of shape (1,{x.data.shape[1]}), got {v.data.shape}"
        )
    out = _wrap(x.data + v.data)

    def bwd(dout):
        return dout, dout.sum(axis=0, keepdims=True)

    return record(out, (x, v), bwd)


def row_scale(x: Tensor, s: Tensor) -> Tensor:
    """Scale row i of x (m,n) by the scalar s[i]; s is (m,1) or (m,)."""
    _require_2d(x, "row_scale lhs")
    m = x.data.shape[0]
    if s.data.shape not in ((m, 1), (m,)):
        raise ShapeError(f"row_scale expects s of shape ({m},1), got {s.data.shape}")
    col = s.data.reshape(m, 1)
    out = _wrap(x.data * col)

    def bwd(dout):
        return dout * col, (dout * x.data).sum(axis=1, keepdims=True).reshape(s.data.shape)

    return record(out, (x, s), bwd)


def mean_axis(x: Tensor, axis: int) -> Tensor:
    """Arithmetic mean along one axis."""
    if not 0 <= axis < x.data.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.data.shape}")
    n = x.data.shape[axis]
    out_arr = x.data.mean(axis=axis)
    if out_arr.ndim == 0:
        out_arr = out_arr.reshape(1)
    out = _wrap(out_arr)

    def bwd(dout):
        expanded = np.expand_dims(dout.reshape(out_arr.shape), axis)
        return (np.broadcast_to(expanded / n, x.data.shape).copy(),)

    return record(out, (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements as a (1,) tensor."""
    out = _wrap(x.data.sum().reshape(1))

    def bwd(dout):
        return (np.full_like(x.data, dout.reshape(-1)[0]),)

    return record(out, (x,), bwd)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction for stability."""
    _require_2d(x, "softmax_rows")
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows received NaN input")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = _wrap(y)

    def bwd(dout):
        inner = (dout * y).sum(axis=1, keepdims=True)
        return (y * (dout - inner),)

    return record(out, (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta_: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardization followed by the (gamma, beta) affine map."""
    _require_2d(x, "layer_norm")
    if eps <= 0:
        raise ContractError("layer_norm eps must be > 0")
    n = x.data.shape[1]
    g = gamma.data.reshape(1, n)
    b = beta_.data.reshape(1, n)
    mu = x.data.mean(axis=1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = _wrap(xhat * g + b)

    def bwd(dout):
        dxhat = dout * g
        dx = inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        dgamma = (dout * xhat).sum(axis=0).reshape(gamma.data.shape)
        dbeta = dout.sum(axis=0).reshape(beta_.data.shape)
        return dx, dgamma, dbeta

    return record(out, (x, gamma, beta_), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    u = _GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)
    out = _wrap(0.5 * x.data * (1.0 + t))

    def bwd(dout):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
        return (dout * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return record(out, (x,), bwd)


def _check_indices(idx: np.ndarray, n: int, *, allow_empty: bool = False) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        if allow_empty:
            return idx
        raise IndexSelectionError("index list is empty")
    if idx.min() < 0 or idx.max() >= n:
        raise IndexSelectionError(f"index out of range for {n} rows: {idx}")
    if idx.size > 1 and not (np.diff(idx) > 0).all():
        raise IndexSelectionError(f"indices must be strictly increasing: {idx}")
    return idx


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows by a strictly increasing index list."""
    _require_2d(x, "gather_rows")
    idx = _check_indices(idx, x.data.shape[0])
    out = _wrap(x.data[idx])

    def bwd(dout):
        dx = np.zeros_like(x.data)
        dx[idx] = dout
        return (dx,)

    return record(out, (x,), bwd)


def scatter_rows(base: Tensor, idx, rows: Tensor, additive: bool = False) -> Tensor:
    """Copy of ``base`` with rows at ``idx`` replaced by (or added from) ``rows``."""
    _require_2d(base, "scatter_rows base")
    _require_2d(rows, "scatter_rows rows")
    idx = _check_indices(idx, base.data.shape[0], allow_empty=True)
    if rows.data.shape != (idx.size, base.data.shape[1]) and idx.size > 0:
        raise ShapeError(
            f"scatter_rows rows shape {rows.data.shape} does not match "
            f"({idx.size},{base.data.shape[1]})"
        )
    out_arr = base.data.astype(np.result_type(base.data, rows.data), copy=True)
    if idx.size:
        if additive:
            out_arr[idx] += rows.data
        else:
            out_arr[idx] = rows.data
    out = _wrap(out_arr)

    def bwd(dout):
        dbase = dout.copy()
        if idx.size and not additive:
            dbase[idx] = 0.0
        drows = dout[idx] if idx.size else np.zeros_like(rows.data)
        return dbase, drows

    return record(out, (base, rows), bwd)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous column slice x[:, start:stop]."""
    _require_2d(x, "slice_cols")
    n = x.data.shape[1]
    if not (0 <= start < stop <= n):
        raise IndexSelectionError(f"column slice [{start}:{stop}) invalid for {n} cols")
    out = _wrap(np.ascontiguousarray(x.data[:, start:stop]))

    def bwd(dout):
        dx = np.zeros_like(x.data)
        dx[:, start:stop] = dout
        return (dx,)

    return record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3) -> float:
    """Max relative error between the tape gradient of ``f`` and central differences.

    ``f`` must map a tensor to a scalar tensor. Evaluation runs in float64
    (the probe tensor is upcast and propagates through the ops) so the
    difference quotient is meaningful; relative error uses the denominator
    max(|analytic|, |numeric|, 1e-8) per element.
    """
    if not (1e-5 <= eps <= 1e-2):
        raise ContractError("finite_diff_check eps must lie in [1e-5, 1e-2]")
    base = Tensor(np.asarray(x.data, dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        out = f(base)
        if out.data.size != 1:
            raise ContractError("finite_diff_check requires a scalar-valued f")
        backward(out, tape)
    analytic = (
        base.grad.reshape(-1).astype(np.float64)
        if base.grad is not None
        else np.zeros(base.data.size)
    )
    numeric = np.empty_like(analytic)
    for i in range(base.data.size):
        plus = base.data.copy()
        plus.flat[i] += eps
        minus = base.data.copy()
        minus.flat[i] -= eps
        numeric[i] = (f(Tensor(plus)).item() - f(Tensor(minus)).item()) / (2 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
