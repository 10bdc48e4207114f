"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything is stored as 64-bit floats in row-major order. A forward pass
records its operations onto the innermost active :class:`Graph` (a tape
rebuilt per pass); :func:`backward` replays the tape in reverse and sums
gradients across fan-out. Reductions are sequential numpy reductions, so
identical inputs give bitwise-identical results.

Only the operations the models actually need are provided; there is no
general broadcasting machinery beyond what those operations use.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf, expit

from .errors import DimensionError, NumericError, ParameterError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """A dense float64 array plus gradient bookkeeping.

    Attributes:
        array: the values, shaped. Row-major (C order) semantics throughout.
        requires_grad: whether backward should produce a gradient for this
            tensor when it participates as a leaf.
        grad: accumulated gradient, same shape as ``array`` (or None).
    """

    __slots__ = ("array", "requires_grad", "grad", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.array = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def size(self) -> int:
        return self.array.size

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the values (copies only if non-contiguous)."""
        return self.array.reshape(-1)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.array.copy())

    def item(self) -> float:
        if self.array.size != 1:
            raise DimensionError(f"item() needs a size-1 tensor, got shape {self.shape}")
        return float(self.array.reshape(-1)[0])

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # arithmetic sugar; all routed through the module-level ops below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def permute(self, *axes) -> "Tensor":
        return permute(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes)

    def narrow(self, axis: int, start: int, length: int) -> "Tensor":
        return narrow(self, axis, start, length)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)


@dataclass
class _Op:
    inputs: tuple
    output: Tensor
    backward: object  # callable(out_grad) -> tuple of per-input gradients (or None)


@dataclass
class Graph:
    """Tape of recorded operations, in execution (topological) order."""

    ops: list = field(default_factory=list)

    def __enter__(self) -> "Graph":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPES.pop()
        return False

    @property
    def output(self) -> Tensor:
        if not self.ops:
            raise DimensionError("graph is empty, no output tensor")
        return self.ops[-1].output


_TAPES: list[Graph] = []


def _tape() -> Graph | None:
    return _TAPES[-1] if _TAPES else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(inputs: tuple, out: Tensor, backward) -> Tensor:
    tape = _tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.ops.append(_Op(inputs, out, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gd, sd) in enumerate(zip(g.shape, shape)):
        if sd == 1 and gd != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.array + b.array)

    def bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _record((a, b), out, bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.array - b.array)

    def bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _record((a, b), out, bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.array * b.array)

    def bw(g):
        return (
            _unbroadcast(g * b.array, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.array, b.shape) if b.requires_grad else None,
        )

    return _record((a, b), out, bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.array / b.array)

    def bw(g):
        ga = _unbroadcast(g / b.array, a.shape) if a.requires_grad else None
        gb = (
            _unbroadcast(-g * a.array / (b.array * b.array), b.shape)
            if b.requires_grad
            else None
        )
        return ga, gb

    return _record((a, b), out, bw)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, numpy batch broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.array.ndim < 2 or b.array.ndim < 2:
        raise DimensionError(
            f"matmul needs >=2-d operands, got {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner extents differ: {a.shape} @ {b.shape}"
        )
    out = Tensor(a.array @ b.array)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.array, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.array, -1, -2) @ g, b.shape)
        return ga, gb

    return _record((a, b), out, bw)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.array.reshape(shape))

    def bw(g):
        return (g.reshape(a.shape),)

    return _record((a,), out, bw)


def permute(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    out = Tensor(np.transpose(a.array, axes))
    inv = np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return _record((a,), out, bw)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries from ``start`` along ``axis``."""
    a = _as_tensor(a)
    ax = axis % a.array.ndim
    if start < 0 or length < 0 or start + length > a.shape[ax]:
        raise DimensionError(
            f"narrow [{start}:{start + length}] out of range for axis {ax} of {a.shape}"
        )
    idx = [slice(None)] * a.array.ndim
    idx[ax] = slice(start, start + length)
    out = Tensor(a.array[tuple(idx)])

    def bw(g):
        full = np.zeros(a.shape, dtype=np.float64)
        full[tuple(idx)] = g
        return (full,)

    return _record((a,), out, bw)


def concat(tensors, axis: int) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.array for t in ts], axis=axis))
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        parts = np.split(g, splits, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, ts))

    return _record(tuple(ts), out, bw)


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.broadcast_to(a.array, shape))

    def bw(g):
        return (_unbroadcast(g, a.shape),)

    return _record((a,), out, bw)


def _segment_sum_rows(shape, idx: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Scatter-add g's leading entries into zeros(shape) at row indices idx."""
    full = np.zeros(shape, dtype=np.float64)
    flat_idx = idx.reshape(-1)
    if flat_idx.size == 0:
        return full
    g2 = np.ascontiguousarray(g).reshape(flat_idx.size, -1)
    order = np.argsort(flat_idx, kind="stable")
    sorted_idx = flat_idx[order]
    starts = np.concatenate([[0], np.flatnonzero(np.diff(sorted_idx)) + 1])
    sums = np.add.reduceat(g2[order], starts, axis=0)
    full.reshape(shape[0], -1)[sorted_idx[starts]] += sums
    return full


def gather_rows(a, idx) -> Tensor:
    """Select rows (axis 0) of ``a`` by an integer index array of any shape."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(a.array[idx])

    def bw(g):
        return (_segment_sum_rows(a.shape, idx, g),)

    return _record((a,), out, bw)


def take_along_last(a, idx) -> Tensor:
    """Gather entries along the last axis; ``idx`` shape = a.shape[:-1] + (k,)."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape[:-1] != a.shape[:-1]:
        raise DimensionError(
            f"take_along_last index shape {idx.shape} does not match {a.shape}"
        )
    out = Tensor(np.take_along_axis(a.array, idx, axis=-1))
    lead = int(np.prod(a.shape[:-1], dtype=np.int64)) if a.array.ndim > 1 else 1

    def bw(g):
        full = np.zeros(a.shape, dtype=np.float64)
        f2 = full.reshape(lead, a.shape[-1])
        i2 = idx.reshape(lead, idx.shape[-1])
        g2 = g.reshape(lead, idx.shape[-1])
        rows = np.repeat(np.arange(lead), idx.shape[-1])
        np.add.at(f2, (rows, i2.reshape(-1)), g2.reshape(-1))
        return (full,)

    return _record((a,), out, bw)


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.array.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _record((a,), out, bw)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.array.mean(axis=axis, keepdims=keepdims))
    count = a.array.size if axis is None else a.shape[axis]

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, a.shape).copy(),)

    return _record((a,), out, bw)


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``.

    Entries of exactly -inf are admitted (they receive weight 0), provided
    every slice along the axis keeps at least one finite entry.
    """
    a = _as_tensor(a)
    ax = axis % max(a.array.ndim, 1) if a.array.ndim else 0
    if a.array.ndim == 0 or a.shape[ax] == 0:
        raise DimensionError(f"softmax over empty axis {axis} of shape {a.shape}")
    shifted = a.array - a.array.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=ax, keepdims=True)
    out = Tensor(y)

    def bw(g):
        dot = (g * y).sum(axis=ax, keepdims=True)
        return (y * (g - dot),)

    return _record((a,), out, bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    ax = axis % max(a.array.ndim, 1) if a.array.ndim else 0
    if a.array.ndim == 0 or a.shape[ax] == 0:
        raise DimensionError(f"log_softmax over empty axis {axis} of shape {a.shape}")
    shifted = a.array - a.array.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=ax, keepdims=True))
    out = Tensor(shifted - lse)
    sm = np.exp(out.array)

    def bw(g):
        return (g - sm * g.sum(axis=ax, keepdims=True),)

    return _record((a,), out, bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ParameterError(f"layer_norm eps must be positive, got {eps}")
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm affine params must have shape ({d},), "
            f"got {gamma.shape} and {beta.shape}"
        )
    mu = x.array.mean(axis=-1, keepdims=True)
    xmu = x.array - mu
    var = (xmu * xmu).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xmu * inv
    out = Tensor(gamma.array * xhat + beta.array)

    def bw(g):
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = _unbroadcast(g * xhat, gamma.shape)
        if beta.requires_grad:
            gb = _unbroadcast(g, beta.shape)
        if x.requires_grad:
            dxhat = g * gamma.array
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, gg, gb

    return _record((x, gamma, beta), out, bw)


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = _as_tensor(a)
    x = a.array
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor(x * cdf)

    def bw(g):
        return (g * (cdf + x * np.exp(-0.5 * x * x) * _INV_SQRT2PI),)

    return _record((a,), out, bw)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    y = expit(a.array)
    out = Tensor(y)

    def bw(g):
        return (g * y * (1.0 - y),)

    return _record((a,), out, bw)


# ---------------------------------------------------------------------------
# backward pass


def backward(graph: Graph, seed, output: Tensor | None = None) -> None:
    """Accumulate gradients of ``output`` (default: last recorded op) into leaves.

    Gradients sum across fan-out. Leaves with ``requires_grad`` receive (or
    accumulate into) ``.grad``; everything else is discarded.
    """
    out = output if output is not None else graph.output
    seed_arr = seed.array if isinstance(seed, Tensor) else np.asarray(seed, dtype=np.float64)
    if seed_arr.shape != out.array.shape:
        raise DimensionError(
            f"seed shape {seed_arr.shape} does not match output shape {out.array.shape}"
        )
    grads: dict[int, np.ndarray] = {id(out): np.array(seed_arr, dtype=np.float64)}
    holders: dict[int, Tensor] = {id(out): out}
    for op in reversed(graph.ops):
        g = grads.pop(id(op.output), None)
        holders.pop(id(op.output), None)
        if g is None:
            continue
        for t, gi in zip(op.inputs, op.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                holders[key] = t
    for key, t in holders.items():
        gi = grads[key].reshape(t.shape)
        t.grad = gi if t.grad is None else t.grad + gi


# ---------------------------------------------------------------------------
# gradient verification harness


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    worst_index: int
    passed: bool


@dataclass
class GradCheckReport:
    eps: float
    tol: float
    params: list[ParamCheck]

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    def summary(self) -> str:
        lines = [f"gradient check: eps={self.eps} tol={self.tol}"]
        for p in self.params:
            status = "ok" if p.passed else "FAIL"
            lines.append(f"  {status:4s} {p.name}: max rel err {p.max_rel_error:.3e}")
        return "\n".join(lines)


def finite_difference_check(f, params: dict, eps: float = 1e-4, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f()`` against central differences.

    ``f`` must be a deterministic zero-argument callable returning a scalar
    Tensor computed from the given parameter tensors. Relative error uses a
    max(|analytic|, |numeric|, 1e-8) denominator. The default step balances
    truncation against float64 cancellation for O(1) loss values.
    """
    if not 0 < eps <= 1e-2:
        raise ParameterError(f"eps must be in (0, 1e-2], got {eps}")

    for t in params.values():
        t.zero_grad()
    with Graph() as g:
        loss = f()
    if loss.array.size != 1:
        raise DimensionError(f"f must return a scalar, got shape {loss.shape}")
    if not np.isfinite(loss.array).all():
        raise NumericError("f returned a non-finite value")
    backward(g, np.ones_like(loss.array), output=loss)

    checks = []
    for name in sorted(params):
        t = params[name]
        analytic = (
            t.grad.reshape(-1) if t.grad is not None else np.zeros(t.size)
        )
        flat = t.array.flat  # in-place element access even if non-contiguous
        numeric = np.zeros(t.size)
        for i in range(t.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f().item()
            flat[i] = orig - eps
            lo = f().item()
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError(f"f non-finite while perturbing {name}[{i}]")
            numeric[i] = (hi - lo) / (2.0 * eps)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        rel = np.abs(analytic - numeric) / denom
        worst = int(np.argmax(rel)) if rel.size else 0
        worst_err = float(rel[worst]) if rel.size else 0.0
        checks.append(ParamCheck(name, worst_err, worst, worst_err <= tol))
    return GradCheckReport(eps=eps, tol=tol, params=checks)
