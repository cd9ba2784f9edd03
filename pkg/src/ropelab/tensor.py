"""Dense float64 tensors with reverse-mode automatic differentiation.

This is the substrate for everything else in the package.  A ``Tensor``
wraps a row-major float64 numpy array; every differentiable operation
records a ``TapeNode`` linking the output to its inputs together with a
backward rule.  ``backward`` on a scalar loss replays the reachable nodes
in reverse topological order and accumulates gradients into every tensor
that has ``requires_grad`` set.

Conventions:
  * all values are float64; token ids travel as plain integer numpy arrays
  * slice / concat / transpose / reshape copy rather than alias
  * any operation whose output contains NaN or Inf raises NonFiniteError
    naming the operation, so bad numerics surface where they happen
  * repeated backward calls accumulate into ``grad``; clearing is explicit
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf, expit

from .exceptions import NonFiniteError, ParameterError, RangeError, ShapeError

_grad_enabled = True

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation paths)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


class TapeNode:
    """One recorded operation: inputs, output, and its backward rule."""

    __slots__ = ("op", "inputs", "output", "rule")

    def __init__(self, op: str, inputs: tuple, output: "Tensor",
                 rule: Callable[[np.ndarray], None]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.rule = rule

    def __repr__(self) -> str:
        return f"TapeNode({self.op})"


class ComputationTape:
    """Operations reachable from a loss, in topological order.

    ``nodes[i].inputs`` only ever reference outputs of earlier nodes or
    leaf tensors, so iterating ``reversed(nodes)`` visits every consumer
    before its producers.
    """

    def __init__(self, nodes: list):
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


class Tensor:
    """Dense float64 value with an optional gradient buffer."""

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node: Optional[TapeNode] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """Copy of the value with no tape history."""
        return Tensor(self.data.copy())

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.data.shape)}{flag})"

    # Operator sugar; the module-level functions do the real work.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _acc(t: Tensor, g: np.ndarray) -> None:
    """Accumulate a gradient contribution into t.grad."""
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _record(op: str, inputs: tuple, out_data: np.ndarray,
            rule: Callable[[np.ndarray], None]) -> Tensor:
    _check_finite(op, out_data)
    out = Tensor(out_data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = TapeNode(op, inputs, out, rule)
    return out


def trace(loss: Tensor) -> ComputationTape:
    """Topologically ordered tape of every operation reaching `loss`."""
    order: list[TapeNode] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            if id(t) not in seen:
                seen.add(id(t))
                order.append(t.node)
            continue
        if id(t) in seen:
            continue
        if t.node is None:
            seen.add(id(t))
            continue
        stack.append((t, True))
        for parent in t.node.inputs:
            if id(parent) not in seen:
                stack.append((parent, False))
    return ComputationTape(order)


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Visits each recorded node exactly once, in reverse topological order,
    accumulating into ``grad`` of every reachable tensor with
    ``requires_grad`` set.  Calling backward twice adds the gradients
    again; call ``zero_grad`` between steps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    tape = trace(loss)
    if len(tape) == 0:
        raise ShapeError("backward on a tensor with no recorded operations")
    _acc(loss, np.ones_like(loss.data))
    for node in reversed(tape.nodes):
        g = node.output.grad
        if g is None:
            continue
        node.rule(g)


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: shapes {a.data.shape} and {b.data.shape} do not broadcast") from e

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            _acc(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g, b.data.shape))

    return _record("add", (a, b), out, rule)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    try:
        out = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"sub: shapes {a.data.shape} and {b.data.shape} do not broadcast") from e

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            _acc(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(-g, b.data.shape))

    return _record("sub", (a, b), out, rule)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: shapes {a.data.shape} and {b.data.shape} do not broadcast") from e

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            _acc(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _record("mul", (a, b), out, rule)


def neg(x) -> Tensor:
    x = _coerce(x)

    def rule(g: np.ndarray) -> None:
        if x.requires_grad:
            _acc(x, -g)

    return _record("neg", (x,), -x.data, rule)


# ---------------------------------------------------------------------------
# Linear algebra and shape surgery
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes, broadcasting the rest."""
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2 operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions disagree, {a.data.shape} versus {b.data.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(
            f"matmul: batch dimensions do not broadcast, {a.data.shape} versus {b.data.shape}"
        ) from e

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _acc(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _acc(b, _unbroadcast(gb, b.data.shape))

    return _record("matmul", (a, b), out, rule)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    """Permute axes; the result is a fresh contiguous copy, not a view."""
    x = _coerce(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    inverse = tuple(int(i) for i in np.argsort(axes))

    def rule(g: np.ndarray) -> None:
        if x.requires_grad:
            _acc(x, np.ascontiguousarray(np.transpose(g, inverse)))

    return _record("transpose", (x,), out, rule)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _coerce(x)
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape).copy()
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {x.data.shape} as {shape}") from e

    def rule(g: np.ndarray) -> None:
        if x.requires_grad:
            _acc(x, g.reshape(x.data.shape))

    return _record("reshape", (x,), out, rule)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of `length` entries along one axis (a copy)."""
    x = _coerce(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"narrow: axis {axis} out of range for shape {x.data.shape}")
    axis = axis % x.ndim
    dim = x.data.shape[axis]
    if length < 0 or start < 0 or start + length > dim:
        raise ShapeError(
            f"narrow: slice [{start}, {start + length}) exceeds axis of size {dim}")
    index = tuple(slice(None) if i != axis else slice(start, start + length)
                  for i in range(x.ndim))
    out = np.ascontiguousarray(x.data[index])

    def rule(g: np.ndarray) -> None:
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[index] = g
            _acc(x, gx)

    return _record("narrow", (x,), out, rule)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [_coerce(p) for p in parts]
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: incompatible shapes {[p.data.shape for p in parts]}") from e
    axis = axis % out.ndim
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def rule(g: np.ndarray) -> None:
        pieces = np.split(g, offsets, axis=axis)
        for p, piece in zip(parts, pieces):
            if p.requires_grad:
                _acc(p, piece)

    return _record("concat", tuple(parts), out, rule)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    x = _coerce(x)
    out = np.asarray(x.data.sum())

    def rule(g: np.ndarray) -> None:
        if x.requires_grad:
            _acc(x, np.broadcast_to(g, x.data.shape))

    return _record("sum_all", (x,), out, rule)


def mean_all(x: Tensor) -> Tensor:
    x = _coerce(x)
    if x.data.size == 0:
        raise ShapeError("mean_all of an empty tensor")
    scale = 1.0 / x.data.size
    out = np.asarray(x.data.sum() * scale)

    def rule(g: np.ndarray) -> None:
        if x.requires_grad:
            _acc(x, np.broadcast_to(g * scale, x.data.shape))

    return _record("mean_all", (x,), out, rule)


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------

def gelu(x) -> Tensor:
    """Exact Gaussian-CDF gelu, x * Phi(x)."""
    x = _coerce(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = x.data * cdf

    def rule(g: np.ndarray) -> None:
        if x.requires_grad:
            pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
            _acc(x, g * (cdf + x.data * pdf))

    return _record("gelu", (x,), out, rule)


def silu(x) -> Tensor:
    """x * sigmoid(x)."""
    x = _coerce(x)
    s = expit(x.data)
    out = x.data * s

    def rule(g: np.ndarray) -> None:
        if x.requires_grad:
            _acc(x, g * (s * (1.0 + x.data * (1.0 - s))))

    return _record("silu", (x,), out, rule)


# ---------------------------------------------------------------------------
# Softmax family
# ---------------------------------------------------------------------------

def softmax_lastdim(x) -> Tensor:
    """Row-stable softmax over the last axis."""
    x = _coerce(x)
    if x.ndim < 1 or x.data.shape[-1] == 0:
        raise ShapeError(f"softmax_lastdim: no last dimension in shape {x.data.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def rule(g: np.ndarray) -> None:
        if x.requires_grad:
            inner = (g * y).sum(axis=-1, keepdims=True)
            _acc(x, y * (g - inner))

    return _record("softmax_lastdim", (x,), y, rule)


def masked_softmax_lastdim(x, keep: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to positions where `keep` is True.

    Excluded positions behave as if their logit were negative infinity: they
    get exactly zero weight and exactly zero gradient, and the output stays
    finite.  ``keep`` is a boolean mask broadcastable to ``x.shape``; every
    row must keep at least one position.
    """
    x = _coerce(x)
    if x.ndim < 1 or x.data.shape[-1] == 0:
        raise ShapeError(f"masked_softmax_lastdim: no last dimension in shape {x.data.shape}")
    keep = np.asarray(keep, dtype=bool)
    try:
        keep_b = np.broadcast_to(keep, x.data.shape)
    except ValueError as e:
        raise ShapeError(
            f"masked_softmax_lastdim: mask {keep.shape} does not broadcast to {x.data.shape}"
        ) from e
    if not keep_b.any(axis=-1).all():
        raise ShapeError("masked_softmax_lastdim: some row masks out every position")
    masked = np.where(keep_b, x.data, -np.inf)
    shifted = masked - masked.max(axis=-1, keepdims=True)
    e = np.where(keep_b, np.exp(np.where(keep_b, shifted, 0.0)), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def rule(g: np.ndarray) -> None:
        if x.requires_grad:
            inner = (g * y).sum(axis=-1, keepdims=True)
            _acc(x, y * (g - inner))

    return _record("masked_softmax_lastdim", (x,), y, rule)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardization over the last axis, then affine gain and bias.

    The variance is floored at ``eps`` rather than shifted by it, so any row
    with variance above the floor is normalized to unit variance exactly and
    constant rows map to zero instead of blowing up.
    """
    x, gain, bias = _coerce(x), _coerce(gain), _coerce(bias)
    if eps <= 0.0:
        raise ParameterError(f"layer_norm: eps must be positive, got {eps}")
    d = x.data.shape[-1] if x.ndim >= 1 else 0
    if x.ndim < 1 or d == 0:
        raise ShapeError(f"layer_norm: no feature axis in shape {x.data.shape}")
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain {gain.data.shape} and bias {bias.data.shape} must be ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    active = var >= eps  # where the variance floor is not engaged
    inv = 1.0 / np.sqrt(np.maximum(var, eps))
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def rule(g: np.ndarray) -> None:
        if x.requires_grad:
            gg = g * gain.data
            mean_gg = gg.mean(axis=-1, keepdims=True)
            mean_gx = (gg * xhat).mean(axis=-1, keepdims=True)
            _acc(x, inv * (gg - mean_gg - np.where(active, xhat * mean_gx, 0.0)))
        lead = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            _acc(gain, (g * xhat).sum(axis=lead))
        if bias.requires_grad:
            _acc(bias, g.sum(axis=lead))

    return _record("layer_norm", (x, gain, bias), out, rule)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Scale each row to unit root-mean-square over the last axis, then gain.

    As with :func:`layer_norm`, ``eps`` floors the mean square instead of
    shifting it: rows with mean square above the floor come out with RMS
    exactly 1 (before the gain), and all-zero rows map to zero.
    """
    x, gain = _coerce(x), _coerce(gain)
    if eps <= 0.0:
        raise ParameterError(f"rms_norm: eps must be positive, got {eps}")
    d = x.data.shape[-1] if x.ndim >= 1 else 0
    if x.ndim < 1 or d == 0:
        raise ShapeError(f"rms_norm: no feature axis in shape {x.data.shape}")
    if gain.data.shape != (d,):
        raise ShapeError(f"rms_norm: gain shape {gain.data.shape} must be ({d},)")
    ms = (x.data * x.data).mean(axis=-1, keepdims=True)
    active = ms >= eps
    inv = 1.0 / np.sqrt(np.maximum(ms, eps))
    xhat = x.data * inv
    out = xhat * gain.data

    def rule(g: np.ndarray) -> None:
        if x.requires_grad:
            gg = g * gain.data
            mean_gx = (gg * xhat).mean(axis=-1, keepdims=True)
            _acc(x, inv * (gg - np.where(active, xhat * mean_gx, 0.0)))
        if gain.requires_grad:
            _acc(gain, (g * xhat).sum(axis=tuple(range(g.ndim - 1))))

    return _record("rms_norm", (x, gain), out, rule)


# ---------------------------------------------------------------------------
# Token-indexed operations
# ---------------------------------------------------------------------------

def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of `table` (vocab x dim) by integer id."""
    table = _coerce(table)
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.data.shape}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError(f"embedding: ids must be integers, got dtype {ids.dtype}")
    vocab = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise RangeError(
            f"embedding: ids span [{ids.min()}, {ids.max()}] outside vocab of {vocab}")
    out = table.data[ids]
    flat_ids = ids.reshape(-1)

    def rule(g: np.ndarray) -> None:
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, flat_ids, g.reshape(-1, table.data.shape[1]))
            _acc(table, gt)

    return _record("embedding", (table,), out, rule)


def cross_entropy_with_logits(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood (nats) of `targets` under `logits`.

    ``logits`` has shape [..., vocab]; ``targets`` holds integer ids of
    shape ``logits.shape[:-1]``.  ``mask``, if given, weights each position
    (zero drops it) and the mean runs over total mask weight.  Computed via
    a shifted log-sum-exp, so huge logits do not overflow.
    """
    logits = _coerce(logits)
    targets = np.asarray(targets)
    if logits.ndim < 2:
        raise ShapeError(f"cross_entropy_with_logits: logits must be at least 2-D, "
                         f"got {logits.data.shape}")
    vocab = logits.data.shape[-1]
    if targets.shape != logits.data.shape[:-1]:
        raise ShapeError(f"cross_entropy_with_logits: targets {targets.shape} must match "
                         f"logit rows {logits.data.shape[:-1]}")
    if not np.issubdtype(targets.dtype, np.integer):
        raise ShapeError(f"cross_entropy_with_logits: targets must be integers, "
                         f"got dtype {targets.dtype}")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise RangeError(f"cross_entropy_with_logits: targets span [{targets.min()}, "
                         f"{targets.max()}] outside vocab of {vocab}")
    flat = logits.data.reshape(-1, vocab)
    flat_t = targets.reshape(-1)
    n = flat.shape[0]
    if mask is None:
        w = np.ones(n, dtype=np.float64)
    else:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != targets.shape:
            raise ShapeError(f"cross_entropy_with_logits: mask {mask.shape} must match "
                             f"targets {targets.shape}")
        w = mask.reshape(-1)
    total_w = w.sum()
    if total_w <= 0.0:
        raise ParameterError("cross_entropy_with_logits: mask keeps no positions")
    m = flat.max(axis=-1, keepdims=True)
    shifted = flat - m
    e = np.exp(shifted)
    z = e.sum(axis=-1)
    rows = np.arange(n)
    nll = np.log(z) - shifted[rows, flat_t]
    out = np.asarray((nll * w).sum() / total_w)

    def rule(g: np.ndarray) -> None:
        if logits.requires_grad:
            p = e / z[:, None]
            p[rows, flat_t] -= 1.0
            p *= (w / total_w)[:, None] * g.reshape(())
            _acc(logits, p.reshape(logits.data.shape))

    return _record("cross_entropy_with_logits", (logits,), out, rule)
