"""Dense float64 tensors with tape-based reverse-mode differentiation.

Graphs are recorded onto an explicit :class:`Tape` used as a context
manager; outside any tape, every op is plain (and cheaper) numpy compute.
The reverse sweep replays the recorded entries exactly once, in reverse
execution order.  Tapes are tracked per thread, so independent graphs may
run concurrently on different threads.

Every op verifies its output is finite and raises :class:`NonFiniteError`
otherwise; overflow never propagates silently.
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "NonFiniteError",
    "ShapeError",
    "as_tensor",
    "add",
    "sub",
    "hadamard",
    "scale",
    "smul",
    "matmul",
    "sigmoid",
    "tanh",
    "relu",
    "concat",
    "slice_axis",
    "reshape",
    "stack_rows",
    "total",
    "conv1d",
    "max_over_time",
    "avg_over_time",
    "mse_loss",
    "mae_sum_loss",
    "grad_check",
]


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or infinity."""


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = _LOCAL.stack = []
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def _ensure_finite(values: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(values).all():
        raise NonFiniteError(f"{op} produced a non-finite value")
    return values


class Tensor:
    """Dense array of 64-bit reals, row-major."""

    def __init__(self, values, _op: str = "tensor"):
        arr = np.asarray(values, dtype=np.float64)
        _ensure_finite(arr, _op)
        self.values = arr
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.values.reshape(()))

    def backward(self) -> None:
        """Run the reverse sweep of the tape this tensor was recorded on."""
        if self.tape is None:
            raise ValueError("tensor was not recorded on any tape")
        self.tape.backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    # operator sugar; strict shapes, no broadcasting
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        other = as_tensor(other)
        if other.shape == () and self.shape != ():
            return smul(self, other)
        if self.shape == () and other.shape != ():
            return smul(other, self)
        return hadamard(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))


class Parameter(Tensor):
    """Trainable tensor with a stable name and an accumulated gradient."""

    def __init__(self, values, name: str):
        super().__init__(values, _op=f"parameter {name}")
        self.name = name
        self.grad = np.zeros_like(self.values)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


class Tape:
    """Ordered record of executed ops, replayed once in reverse order.

    Gradient accumulation is additive: leaf tensors (parameters,
    constants) keep whatever is already in ``.grad``, so two backward
    calls without zeroing double a parameter's gradient.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple, tuple]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self) -> int:
        return len(self._entries)

    def backward(self, loss: Tensor) -> None:
        """Populate gradients of every leaf reachable from ``loss``."""
        if loss.values.shape != ():
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.values.shape}")
        if loss.tape is not self:
            raise ValueError("loss was not recorded on this tape")
        # Adjoints of intermediates live in a scratch map so repeated
        # sweeps stay correct; only leaves accumulate into .grad.
        adjoint: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
        for out, parents, grad_fns in reversed(self._entries):
            g = adjoint.pop(id(out), None)
            if g is None:
                continue
            out.grad = g
            for parent, fn in zip(parents, grad_fns):
                if fn is None:
                    continue
                contrib = fn(g)
                if parent.tape is self:
                    key = id(parent)
                    if key in adjoint:
                        adjoint[key] = adjoint[key] + contrib
                    else:
                        adjoint[key] = contrib
                else:
                    parent.grad = contrib if parent.grad is None else parent.grad + contrib


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _apply(values: np.ndarray, op: str, parents: tuple, grad_fns: tuple) -> Tensor:
    out = Tensor(_ensure_finite(np.asarray(values, dtype=np.float64), op), _op=op)
    tape = _active_tape()
    if tape is not None:
        out.tape = tape
        tape._entries.append((out, parents, grad_fns))
    return out


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} needs equal shapes, got {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# elementwise ops

def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    return _apply(a.values + b.values, "add", (a, b), (lambda g: g, lambda g: g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")
    return _apply(a.values - b.values, "sub", (a, b), (lambda g: g, lambda g: -g))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "hadamard")
    av, bv = a.values, b.values
    return _apply(av * bv, "hadamard", (a, b), (lambda g: g * bv, lambda g: g * av))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _apply(a.values * c, "scale", (a,), (lambda g: g * c,))


def smul(a: Tensor, s: Tensor) -> Tensor:
    """Multiply a tensor by a scalar-shaped tensor (both differentiable)."""
    if s.shape != ():
        raise ShapeError(f"smul needs a scalar second operand, got shape {s.shape}")
    av, sv = a.values, s.values
    return _apply(
        av * sv,
        "smul",
        (a, s),
        (lambda g: g * sv, lambda g: np.asarray((g * av).sum())),
    )


def sigmoid(a: Tensor) -> Tensor:
    x = a.values
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _apply(out, "sigmoid", (a,), (lambda g: g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.values)
    return _apply(out, "tanh", (a,), (lambda g: g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    x = a.values
    mask = x > 0
    return _apply(np.where(mask, x, 0.0), "relu", (a,), (lambda g: g * mask,))


# ---------------------------------------------------------------------------
# shape ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; also matrix @ vector and vector @ matrix."""
    av, bv = a.values, b.values
    if av.ndim == 2 and bv.ndim == 2:
        if av.shape[1] != bv.shape[0]:
            raise ShapeError(f"matmul inner dims disagree: {av.shape} @ {bv.shape}")
        return _apply(av @ bv, "matmul", (a, b),
                      (lambda g: g @ bv.T, lambda g: av.T @ g))
    if av.ndim == 2 and bv.ndim == 1:
        if av.shape[1] != bv.shape[0]:
            raise ShapeError(f"matmul inner dims disagree: {av.shape} @ {bv.shape}")
        return _apply(av @ bv, "matmul", (a, b),
                      (lambda g: np.outer(g, bv), lambda g: av.T @ g))
    if av.ndim == 1 and bv.ndim == 2:
        if av.shape[0] != bv.shape[0]:
            raise ShapeError(f"matmul inner dims disagree: {av.shape} @ {bv.shape}")
        return _apply(av @ bv, "matmul", (a, b),
                      (lambda g: bv @ g, lambda g: np.outer(av, g)))
    raise ShapeError(f"matmul supports 2-D/1-D operands only, got {av.ndim}-D @ {bv.ndim}-D")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    sizes = [t.values.shape[axis] for t in tensors]
    out = np.concatenate([t.values for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def block_grad(i):
        lo, hi = offsets[i], offsets[i + 1]

        def fn(g):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)]

        return fn

    return _apply(out, "concat", tuple(tensors),
                  tuple(block_grad(i) for i in range(len(tensors))))


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.values.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = a.shape

    def fn(g):
        full = np.zeros(shape, dtype=np.float64)
        full[idx] = g
        return full

    return _apply(a.values[idx].copy(), "slice", (a,), (fn,))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _apply(a.values.reshape(shape), "reshape", (a,),
                  (lambda g: g.reshape(old),))


def stack_rows(vectors) -> Tensor:
    """Stack 1-D tensors of equal length into a matrix, one per row."""
    vectors = list(vectors)
    return concat([reshape(v, (1, v.shape[0])) for v in vectors], axis=0)


def total(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar."""
    shape = a.shape
    return _apply(a.values.sum(), "total", (a,),
                  (lambda g: np.full(shape, g, dtype=np.float64),))


# ---------------------------------------------------------------------------
# sequence ops

def conv1d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Valid convolution of an L x D sequence with F kernels of width k.

    out[t, f] = bias[f] + sum_{j<k, d<D} x[t+j, d] * kernels[f, j, d]
    """
    xv, kv, bv = x.values, kernels.values, bias.values
    if xv.ndim != 2 or kv.ndim != 3 or bv.ndim != 1:
        raise ShapeError("conv1d needs input LxD, kernels Fxk xD, bias F")
    L, D = xv.shape
    F, k, Dk = kv.shape
    if Dk != D:
        raise ShapeError(f"kernel feature width {Dk} != input width {D}")
    if bv.shape[0] != F:
        raise ShapeError(f"bias length {bv.shape[0]} != filter count {F}")
    if k > L:
        raise ShapeError(f"kernel size {k} exceeds sequence length {L}")
    windows = np.lib.stride_tricks.sliding_window_view(xv, k, axis=0)  # (L-k+1, D, k)
    out = np.einsum("tdj,fjd->tf", windows, kv) + bv

    def grad_x(g):
        dx = np.zeros_like(xv)
        for j in range(k):
            dx[j:j + g.shape[0], :] += g @ kv[:, j, :]
        return dx

    return _apply(
        out,
        "conv1d",
        (x, kernels, bias),
        (grad_x,
         lambda g: np.einsum("tf,tdj->fjd", g, windows),
         lambda g: g.sum(axis=0)),
    )


def max_over_time(x: Tensor) -> Tensor:
    """Per-column maximum of an L x D matrix; ties break to the first row."""
    xv = x.values
    if xv.ndim != 2:
        raise ShapeError(f"max_over_time needs a 2-D input, got shape {x.shape}")
    idx = xv.argmax(axis=0)

    def fn(g):
        dx = np.zeros_like(xv)
        dx[idx, np.arange(xv.shape[1])] = g
        return dx

    return _apply(xv.max(axis=0), "max_over_time", (x,), (fn,))


def avg_over_time(x: Tensor) -> Tensor:
    """Per-column mean of an L x D matrix."""
    xv = x.values
    if xv.ndim != 2:
        raise ShapeError(f"avg_over_time needs a 2-D input, got shape {x.shape}")
    L = xv.shape[0]
    return _apply(xv.mean(axis=0), "avg_over_time", (x,),
                  (lambda g: np.tile(g / L, (L, 1)),))


# ---------------------------------------------------------------------------
# losses

def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """(1/n) * sum((pred - target)^2), as a scalar."""
    _require_same_shape(pred, target, "mse_loss")
    n = pred.size
    if n == 0:
        raise ShapeError("mse_loss needs at least one element")
    diff = pred.values - target.values
    return _apply(
        np.asarray((diff * diff).mean()),
        "mse_loss",
        (pred, target),
        (lambda g: g * 2.0 * diff / n, lambda g: g * -2.0 * diff / n),
    )


def mae_sum_loss(pred: Tensor, target: Tensor) -> Tensor:
    """sum(|pred - target|), as a scalar; subgradient 0 at exact ties."""
    _require_same_shape(pred, target, "mae_sum_loss")
    diff = pred.values - target.values
    sign = np.sign(diff)
    return _apply(
        np.asarray(np.abs(diff).sum()),
        "mae_sum_loss",
        (pred, target),
        (lambda g: g * sign, lambda g: g * -sign),
    )


# ---------------------------------------------------------------------------
# finite-difference checking

def grad_check(function, params, eps: float = 1e-5) -> float:
    """Compare tape gradients of ``function()`` against central differences.

    ``function`` must rebuild its graph from the current parameter values
    on every call and return a scalar tensor.  Returns the worst relative
    error ``|a - b| / max(1e-8, |a| + |b|)`` over every coordinate of
    ``params``.
    """
    params = list(params)
    for p in params:
        p.grad = np.zeros_like(p.values)
    with Tape() as tape:
        out = function()
    tape.backward(out)
    analytic = [p.grad.copy() for p in params]

    def value() -> float:
        return float(function().values)

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.values.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = value()
            flat[i] = orig - eps
            lo = value()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(aflat[i] - numeric) / max(1e-8, abs(aflat[i]) + abs(numeric))
            if err > worst:
                worst = err
    return worst
