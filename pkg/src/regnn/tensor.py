"""Dense tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their inputs requires a gradient. Outside a tape every operation is a
plain numpy computation, which is what inference uses.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = total(x)
    >>> backward(tape, loss)
    >>> x.grad
    array([1., 1., 1.])
"""

from __future__ import annotations

import threading
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "grad_check",
    "constant",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "activation",
    "sigmoid",
    "tanh",
    "exp",
    "softmax",
    "concat",
    "gather",
    "tile_rows",
    "reshape",
    "total",
    "cross_entropy",
]


class Tensor:
    """A numpy array plus an optional accumulated gradient."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def values(self) -> list[float]:
        """Row-major flat copy of the data."""
        return self.data.ravel().tolist()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; each call goes through the recorded ops below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


def _not_scalar(t: Tensor):
    raise ContractError(f"expected a scalar tensor, got shape {t.shape}")


class _Record(NamedTuple):
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations.

    A tape belongs to the thread that entered it; other threads keep their
    own tapes.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.records)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def constant(data, dtype=np.float64) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype))


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    needs = False
    for t in inputs:
        if t.requires_grad:
            needs = True
            break
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out.grad = None
    out.name = None
    if needs:
        tape = _active_tape()
        if tape is not None:
            tape.records.append(_Record(out, inputs, bwd))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# operations


def matmul(a, b) -> Tensor:
    """Matrix product ``a @ b``.

    ``a`` may carry leading batch dimensions; ``b`` is a matrix or a vector.
    """
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    if b.data.ndim > 2 or a.data.ndim == 0 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def bwd(g):
        if bd.ndim == 1:
            ga = g[..., None] * bd
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1)
        elif ad.ndim == 1:
            ga = bd @ g
            gb = np.outer(ad, g)
        else:
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _emit(out, (a, b), bwd)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape == b.data.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(x: Tensor, factor: float) -> Tensor:
    f = x.dtype.type(factor)
    return _emit(x.data * f, (x,), lambda g: (g * f,))


def sigmoid(x: Tensor) -> Tensor:
    # tanh form never overflows
    y = 0.5 + 0.5 * np.tanh(0.5 * x.data)
    return _emit(y, (x,), lambda g: (g * y * (1 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit(y, (x,), lambda g: (g * (1 - y * y),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    raise ValueError(f"unknown activation {kind!r}")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _emit(y, (x,), lambda g: (g * y,))


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``, stabilised by max subtraction.

    ``mask`` (boolean, broadcastable to ``x``) marks the live entries; a slice
    with no live entries comes out as all zeros.
    """
    x = _as_tensor(x)
    d = x.data
    if d.ndim == 0 or d.shape[axis] == 0:
        raise DimensionError(f"softmax over an empty axis (shape {d.shape})")
    if mask is None:
        z = d - d.max(axis=axis, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=axis, keepdims=True)
    else:
        mask = np.broadcast_to(mask, d.shape)
        masked = np.where(mask, d, -np.inf)
        top = masked.max(axis=axis, keepdims=True)
        top = np.where(np.isfinite(top), top, 0)
        e = np.where(mask, np.exp(np.where(mask, d - top, 0)), 0).astype(d.dtype, copy=False)
        s = e.sum(axis=axis, keepdims=True)
        y = e / np.where(s > 0, s, 1)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit(y, (x,), bwd)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Join tensors along ``axis`` (the last one by default)."""
    if not parts:
        raise DimensionError("concat of zero tensors")
    ndim = parts[0].data.ndim
    if any(p.data.ndim != ndim for p in parts):
        raise DimensionError(f"concat rank mismatch: {[p.shape for p in parts]}")
    if len(parts) == 1:
        return parts[0]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise DimensionError(f"concat shape mismatch: {[p.shape for p in parts]}") from None
    ax = axis % ndim
    edges = np.concatenate([[0], np.cumsum([p.shape[ax] for p in parts])]).tolist()
    lead = (slice(None),) * ax

    def bwd(g):
        return tuple(g[lead + (slice(a, b),)] for a, b in zip(edges[:-1], edges[1:]))

    return _emit(out, tuple(parts), bwd)


def gather(x: Tensor, index) -> Tensor:
    """Rows of ``x`` selected by an integer index array of any shape."""
    if isinstance(index, slice):
        return _row_slice(x, index)
    idx = np.asarray(index, dtype=np.intp)
    d = x.data
    out = d[idx]

    def bwd(g):
        full = np.zeros_like(d)
        if idx.ndim == 1 and idx.size <= 1:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _emit(out, (x,), bwd)


def _row_slice(x: Tensor, rows: slice) -> Tensor:
    d = x.data

    def bwd(g):
        full = np.zeros_like(d)
        full[rows] = g
        return (full,)

    return _emit(d[rows], (x,), bwd)


def tile_rows(x: Tensor, count: int) -> Tensor:
    """Stack ``count`` copies of a vector (or ``1 x d`` row) into ``count x d``."""
    d = x.data
    row = d.reshape(1, -1)
    out = np.repeat(row, count, axis=0)
    return _emit(out, (x,), lambda g: (g.sum(axis=0).reshape(d.shape),))


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def total(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Sum of entries, over all axes or just ``axis``."""
    src = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _emit(out, (x,), bwd)


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean negative log-likelihood of integer targets under softmax(logits).

    ``logits`` is ``(K,)`` with a scalar target or ``(n, K)`` with ``n`` targets.
    """
    d = logits.data
    rows = d.reshape(-1, d.shape[-1])
    tgt = np.atleast_1d(np.asarray(target, dtype=np.intp))
    k = rows.shape[1]
    if tgt.shape[0] != rows.shape[0]:
        raise DimensionError(f"cross_entropy: {rows.shape[0]} rows but {tgt.shape[0]} targets")
    if np.any(tgt < 0) or np.any(tgt >= k):
        raise ContractError(f"target out of range [0, {k}): {tgt.tolist()}")
    z = rows - rows.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    n = rows.shape[0]
    loss = -logp[np.arange(n), tgt].sum() / n

    def bwd(g):
        p = np.exp(logp)
        p[np.arange(n), tgt] -= 1
        return ((g * p / n).reshape(d.shape).astype(d.dtype, copy=False),)

    return _emit(np.asarray(loss, dtype=d.dtype), (logits,), bwd)


# ---------------------------------------------------------------------------
# gradients


def backward(tape: Tape, loss: Tensor) -> None:
    """Propagate d(loss)/d(.) through every record on ``tape``.

    Leaf tensors (not produced on the tape) accumulate into ``.grad`` so that
    several backward passes sum, which is how batches are accumulated.
    Intermediate tensors receive their gradient for this pass only.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(r.output) for r in tape.records}
    if id(loss) not in produced and not loss.requires_grad:
        raise ContractError("loss was not recorded on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        rec.output.grad = g
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = inp
    if id(loss) not in produced:
        leaves[id(loss)] = loss
    for key, leaf in leaves.items():
        g = grads[key].astype(leaf.dtype, copy=False)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def grad_check(f: Callable[..., Tensor], inputs: Sequence, eps: float = 1e-5) -> float:
    """Largest relative gap between tape gradients and central differences.

    ``f`` maps the input tensors to a scalar tensor. Inputs are promoted to
    64-bit; the returned error is ``|analytic - numeric| / max(1, |numeric|)``
    maximised over every coordinate of every input.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    xs = [Tensor(np.array(_as_tensor(x).data, dtype=np.float64), requires_grad=True) for x in inputs]
    with Tape() as tape:
        out = f(*xs)
    if not np.all(np.isfinite(out.data)):
        raise NumericError("function value is not finite")
    backward(tape, out)
    worst = 0.0
    for x in xs:
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            up = float(f(*xs).data)
            flat[k] = orig - eps
            down = float(f(*xs).data)
            flat[k] = orig
            numeric = (up - down) / (2 * eps)
            a = float(analytic.reshape(-1)[k])
            if not (np.isfinite(numeric) and np.isfinite(a)):
                raise NumericError(f"non-finite gradient at coordinate {k} of input shape {x.shape}")
            worst = max(worst, abs(a - numeric) / max(1.0, abs(numeric)))
    return worst
