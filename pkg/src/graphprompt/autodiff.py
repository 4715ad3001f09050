"""A small reverse-mode differentiation engine over dense numpy arrays.

Every operation returns a :class:`Tensor`. When any input requires a
gradient, the output remembers its inputs and the name of its backward
rule; :func:`backward` linearises the recorded graph into a :class:`Tape`
and walks it in reverse. Backward rules live in ``BACKWARD_RULES`` so tests
can swap one out (see :func:`corrupt_backward`).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import numpy as np
import scipy.sparse as sp

from .errors import ContractError, ShapeError

DEFAULT_DTYPE = np.float32
NORM_EPS = 1e-12


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "inputs", "ctx")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = None
        self.inputs = ()
        self.ctx = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        return div_scalar(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _result(data, op: str, inputs: tuple, ctx=None) -> Tensor:
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.op = op
        out.inputs = inputs
        out.ctx = ctx
    return out


# ---------------------------------------------------------------------------
# forward operations
# ---------------------------------------------------------------------------

def _binary_shapes(op, x: Tensor, y: Tensor) -> bool:
    """Return True when ``y`` is a row vector broadcast over matrix ``x``."""
    if x.shape == y.shape:
        return False
    if x.data.ndim == 2 and y.data.ndim == 1 and y.shape[0] == x.shape[1]:
        return True
    raise ShapeError(op, x.shape, y.shape)


def add(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    row = _binary_shapes("add", x, y)
    return _result(x.data + y.data, "add", (x, y), row)


def sub(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    row = _binary_shapes("sub", x, y)
    return _result(x.data - y.data, "sub", (x, y), row)


def mul(x, y) -> Tensor:
    """Elementwise product; ``y`` may be a row vector applied to every row."""
    x, y = as_tensor(x), as_tensor(y)
    row = _binary_shapes("mul", x, y)
    return _result(x.data * y.data, "mul", (x, y), row)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    return _result(x.data * x.dtype.type(c), "scale", (x,), float(c))


def div_scalar(x, c: float) -> Tensor:
    if not isinstance(c, (int, float)) or c == 0:
        raise ContractError(f"div_scalar needs a nonzero python scalar, got {c!r}")
    x = as_tensor(x)
    return _result(x.data / x.dtype.type(c), "div_scalar", (x,), float(c))


def matmul(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    if x.data.ndim != 2 or y.data.ndim != 2 or x.shape[1] != y.shape[0]:
        raise ShapeError("matmul", x.shape, y.shape)
    return _result(x.data @ y.data, "matmul", (x, y))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("transpose", x.shape)
    return _result(np.ascontiguousarray(x.data.T), "transpose", (x,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.maximum(x.data, 0), "relu", (x,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, "exp", (x,), out)


def log(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.log(x.data), "log", (x,))


def _segment_sum_array(values: np.ndarray, segment_ids: np.ndarray, num_segments: int) -> np.ndarray:
    """Row sums per segment, accumulated in float64 in the original row order.

    Implemented as a sparse (segments x rows) 0/1 matrix product.
    """
    counts = np.bincount(segment_ids, minlength=num_segments)
    indptr = np.zeros(num_segments + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    if np.any(segment_ids[1:] < segment_ids[:-1]):
        cols = np.argsort(segment_ids, kind="stable")
    else:
        cols = np.arange(segment_ids.shape[0], dtype=np.int64)
    m = sp.csr_matrix(
        (np.ones(cols.shape[0]), cols, indptr), shape=(num_segments, values.shape[0])
    )
    return np.asarray(m @ values.astype(np.float64, copy=False)).astype(values.dtype, copy=False)


def segment_sum(values, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of ``values`` into ``num_segments`` buckets given by ``segment_ids``."""
    values = as_tensor(values)
    ids = np.asarray(segment_ids, dtype=np.int64)
    if values.data.ndim != 2 or ids.shape != (values.shape[0],):
        raise ShapeError("segment_sum", values.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= num_segments):
        raise IndexError(
            f"segment_sum: segment id out of range [0, {num_segments}): "
            f"min {ids.min()}, max {ids.max()}"
        )
    out = _segment_sum_array(values.data, ids, num_segments)
    return _result(out, "segment_sum", (values,), ids)


def gather(x, index) -> Tensor:
    """Select rows ``x[index]``."""
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    if x.data.ndim != 2:
        raise ShapeError("gather", x.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(f"gather: row index out of range for {x.shape[0]} rows")
    return _result(x.data[idx], "gather", (x,), idx)


def l2_normalize(x) -> Tensor:
    """Scale each row (or the single vector) to unit length; norms clamp at 1e-12."""
    x = as_tensor(x)
    d = x.data if x.data.ndim == 2 else x.data.reshape(1, -1)
    norm = np.sqrt(np.sum(d.astype(np.float64) ** 2, axis=1, keepdims=True)).astype(d.dtype)
    clamped = np.maximum(norm, d.dtype.type(NORM_EPS))
    out = (d / clamped).reshape(x.shape)
    return _result(out, "l2_normalize", (x,), (norm, clamped, out))


def dot(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    if x.data.ndim != 1 or x.shape != y.shape:
        raise ShapeError("dot", x.shape, y.shape)
    return _result(np.dot(x.data, y.data), "dot", (x, y))


def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    return _result(np.sum(x.data, axis=axis), "sum", (x,), axis)


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return div_scalar(sum(x, axis), n)


def concat(tensors: Iterable, axis: int = 1) -> Tensor:
    """Concatenate along the feature axis."""
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ContractError("concat needs at least one tensor")
    rows = {t.shape[0] for t in ts}
    if axis != 1 or len(rows) != 1 or any(t.data.ndim != 2 for t in ts):
        raise ShapeError("concat", *(t.shape for t in ts))
    widths = [t.shape[1] for t in ts]
    return _result(np.concatenate([t.data for t in ts], axis=1), "concat", ts, widths)


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    return _result(np.clip(x.data, lo, hi), "clip", (x,), (lo, hi))


# ---------------------------------------------------------------------------
# backward rules: rule(grad_out, out, inputs, ctx) -> tuple of input grads
# ---------------------------------------------------------------------------

def _sum_rows_if(row: bool, g: np.ndarray) -> np.ndarray:
    return g.sum(axis=0) if row else g


def _b_add(g, out, inputs, row):
    return g, _sum_rows_if(row, g)


def _b_sub(g, out, inputs, row):
    return g, -_sum_rows_if(row, g)


def _b_mul(g, out, inputs, row):
    x, y = inputs
    return g * y.data, _sum_rows_if(row, g * x.data)


def _b_scale(g, out, inputs, c):
    return (g * g.dtype.type(c),)


def _b_div_scalar(g, out, inputs, c):
    return (g / g.dtype.type(c),)


def _b_matmul(g, out, inputs, ctx):
    x, y = inputs
    return g @ y.data.T, x.data.T @ g


def _b_transpose(g, out, inputs, ctx):
    return (np.ascontiguousarray(g.T),)


def _b_relu(g, out, inputs, ctx):
    # subgradient at exactly zero is zero
    return (g * (inputs[0].data > 0),)


def _b_exp(g, out, inputs, e):
    return (g * e,)


def _b_log(g, out, inputs, ctx):
    return (g / inputs[0].data,)


def _b_segment_sum(g, out, inputs, ids):
    return (g[ids],)


def _b_gather(g, out, inputs, idx):
    return (_segment_sum_array(g, idx, inputs[0].shape[0]),)


def _b_l2_normalize(g, out, inputs, ctx):
    norm, clamped, y = ctx
    shape = inputs[0].shape
    g2 = g.reshape(norm.shape[0], -1)
    y2 = y.reshape(norm.shape[0], -1)
    active = norm >= norm.dtype.type(NORM_EPS)
    proj = g2 - y2 * np.sum(g2 * y2, axis=1, keepdims=True)
    gx = np.where(active, proj, g2) / clamped
    return (gx.reshape(shape),)


def _b_dot(g, out, inputs, ctx):
    x, y = inputs
    return g * y.data, g * x.data


def _b_sum(g, out, inputs, axis):
    shape = inputs[0].shape
    if axis is None:
        return (np.broadcast_to(g, shape).copy(),)
    return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)


def _b_concat(g, out, inputs, widths):
    bounds = np.cumsum([0, *widths])
    return tuple(np.ascontiguousarray(g[:, a:b]) for a, b in zip(bounds[:-1], bounds[1:]))


def _b_clip(g, out, inputs, bounds):
    lo, hi = bounds
    x = inputs[0].data
    return (g * ((x >= lo) & (x <= hi)),)


BACKWARD_RULES: dict[str, Callable] = {
    "add": _b_add,
    "sub": _b_sub,
    "mul": _b_mul,
    "scale": _b_scale,
    "div_scalar": _b_div_scalar,
    "matmul": _b_matmul,
    "transpose": _b_transpose,
    "relu": _b_relu,
    "exp": _b_exp,
    "log": _b_log,
    "segment_sum": _b_segment_sum,
    "gather": _b_gather,
    "l2_normalize": _b_l2_normalize,
    "dot": _b_dot,
    "sum": _b_sum,
    "concat": _b_concat,
    "clip": _b_clip,
}


@contextlib.contextmanager
def corrupt_backward(op: str, factor: float = 1.5):
    """Temporarily scale the gradient produced by one backward rule.

    Fault-injection hook for exercising the gradient checker.
    """
    if op not in BACKWARD_RULES:
        raise KeyError(f"unknown op {op!r}")
    original = BACKWARD_RULES[op]

    def broken(g, out, inputs, ctx):
        return tuple(None if gi is None else gi * factor for gi in original(g, out, inputs, ctx))

    BACKWARD_RULES[op] = broken
    try:
        yield
    finally:
        BACKWARD_RULES[op] = original


# ---------------------------------------------------------------------------
# tape and backward pass
# ---------------------------------------------------------------------------

class Tape:
    """Operations reachable from a root tensor, in topological order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [t for t in self.nodes if t.is_leaf]


def backward(loss: Tensor, params: Mapping[str, Tensor] | None = None) -> dict:
    """Propagate d(loss)/d(.) to every leaf that requires a gradient.

    Gradients accumulate over repeated uses of a tensor and are stored on
    each leaf's ``.grad``. With ``params`` given, returns ``{name: grad}``
    with zeros for parameters the loss does not touch; otherwise returns
    ``{id(leaf): grad}``.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.from_root(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g
            grads[id(node)] = g
            continue
        input_grads = BACKWARD_RULES[node.op](g, node.data, node.inputs, node.ctx)
        for parent, pg in zip(node.inputs, input_grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype).reshape(parent.shape)
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    if params is None:
        return {id(t): t.grad for t in tape.leaves()}
    out = {}
    reached = {id(t) for t in tape.leaves()}
    for name, t in params.items():
        out[name] = t.grad if id(t) in reached and t.grad is not None else np.zeros_like(t.data)
        t.grad = out[name]
    return out


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_relative_error: float
    checked: int
    excluded: int
    worst: tuple[str, int] | None

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_relative_error < tol


def gradient_check(
    loss_fn: Callable[[dict], Tensor],
    params: Mapping[str, np.ndarray],
    step: float = 1e-4,
    kink_tol: float = 1e-2,
    floor: float = 1e-8,
) -> GradCheckResult:
    """Compare analytic gradients against central differences in float64.

    ``loss_fn`` receives ``{name: Tensor}`` and returns a scalar Tensor.
    An entry is excluded as nondifferentiable (a relu input at or near zero)
    when its one-sided differences disagree by more than ``kink_tol``
    relative, or when central differences at ``step`` and ``step / 10``
    disagree by more than 1e-5 relative. Relative errors use
    ``max(|analytic|, |numeric|, floor)`` as denominator so entries at the
    float64 roundoff level of the differences do not dominate.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tensors = {k: Tensor(v.copy(), requires_grad=True) for k, v in base.items()}
    analytic = backward(loss_fn(tensors), tensors)

    def f(values):
        return float(loss_fn({k: Tensor(v) for k, v in values.items()}).data)

    def diffs(flat, i, h):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(base)
        flat[i] = orig - h
        fm = f(base)
        flat[i] = orig
        return fp, fm

    f0 = f(base)
    worst_err, worst_at, checked, excluded = 0.0, None, 0, 0
    for name, arr in base.items():
        flat = arr.reshape(-1)
        for i in range(flat.shape[0]):
            fp, fm = diffs(flat, i, step)
            plus, minus = (fp - f0) / step, (f0 - fm) / step
            numeric = (fp - fm) / (2 * step)
            fp2, fm2 = diffs(flat, i, step / 10)
            fine = (fp2 - fm2) / (step / 5)
            kink = abs(plus - minus) > kink_tol * max(1.0, abs(plus), abs(minus))
            # a smooth loss gives O(step^2) disagreement between the two scales
            if kink or abs(numeric - fine) > 1e-5 * max(abs(numeric), abs(fine), 1e-4):
                excluded += 1
                continue
            a = float(analytic[name].reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            checked += 1
            if err > worst_err:
                worst_err, worst_at = err, (name, i)
    return GradCheckResult(worst_err, checked, excluded, worst_at)


def finite_diff_check(loss_fn, params, step: float = 1e-4) -> float:
    """Maximum relative error between analytic and central-difference gradients."""
    return gradient_check(loss_fn, params, step).max_relative_error
