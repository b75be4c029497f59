"""Minimal dense-tensor library with reverse-mode automatic differentiation.

Everything is float64 and row-major.  Operations record themselves on a
thread-local tape; ``backward(loss)`` replays the tape in reverse to
populate ``.grad`` on every reachable tensor that requires gradients, then
clears the tape (one backward per recorded graph).  The op set is exactly
what a tiny encoder transformer plus its training losses need; there is no
general broadcasting beyond the bias/affine cases used by the model.

``custom_gradient`` is the extension point for operations whose backward
rule intentionally differs from the true derivative (straight-through
estimators and friends).
"""

import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(ArithmeticError):
    """A forward value or gradient came out NaN or infinite."""


_STATE = threading.local()
_FINITE_CHECKS = True


def set_finite_checks(enabled):
    """Toggle NaN/Inf checking on op outputs and gradients; returns previous."""
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    return prev


def _check_finite(arr, what):
    # one reduction pass: any NaN/Inf makes the sum non-finite
    if _FINITE_CHECKS and not np.isfinite(np.sum(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


def _tape():
    tape = getattr(_STATE, "tape", None)
    if tape is None:
        tape = []
        _STATE.tape = tape
    return tape


def _grad_enabled():
    return getattr(_STATE, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / evaluation)."""
    prev = _grad_enabled()
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = prev


def tape_length():
    return len(_tape())


def clear_tape():
    _tape().clear()


class Tensor:
    """Dense float64 array tracked for reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:  # 0-d arrays are already contiguous
            arr = np.ascontiguousarray(arr)
        _check_finite(arr, "tensor data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def sum(self):
        return sum_all(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return mul(self, 1.0 / float(scalar))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, requires_grad):
    out = Tensor.__new__(Tensor)
    arr = np.asarray(data, dtype=np.float64)
    _check_finite(arr, "op output")
    out.data = arr
    out.requires_grad = requires_grad and _grad_enabled()
    out.grad = None
    return out


def _record(out, parents, backward_fn):
    if out.requires_grad:
        _tape().append((out, parents, backward_fn))


def _accumulate(tensor, grad):
    if grad is None or not tensor.requires_grad:
        return
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != tensor.data.shape:
        raise ShapeError(
            f"gradient shape {grad.shape} does not match tensor shape {tensor.data.shape}"
        )
    _check_finite(grad, "gradient")
    tensor.grad = grad if tensor.grad is None else tensor.grad + grad


def backward(loss):
    """Populate .grad for every requires_grad tensor reachable from loss.

    The loss must be a scalar.  Consumes (clears) the active tape.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.shape != ():
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = _tape()
    _accumulate(loss, np.ones((), dtype=np.float64))
    for out, parents, backward_fn in reversed(tape):
        if out.grad is None:
            continue
        grads = backward_fn(out.grad)
        for parent, grad in zip(parents, grads):
            _accumulate(parent, grad)
    tape.clear()


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    """Elementwise a + b; b may be same-shape, a trailing-shape bias, or a scalar."""
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        out = _result(a.data + float(b), a.requires_grad)
        _record(out, (a,), lambda g: (g,))
        return out
    b = _as_tensor(b)
    if a.data.shape == b.data.shape:
        out = _result(a.data + b.data, a.requires_grad or b.requires_grad)
        _record(out, (a, b), lambda g: (g, g))
        return out
    if b.ndim < a.ndim and a.data.shape[a.ndim - b.ndim:] == b.data.shape:
        out = _result(a.data + b.data, a.requires_grad or b.requires_grad)

        def bwd(g):
            return g, g.reshape((-1,) + b.data.shape).sum(axis=0)

        _record(out, (a, b), bwd)
        return out
    raise ShapeError(f"cannot add shapes {a.data.shape} and {b.data.shape}")


def neg(a):
    a = _as_tensor(a)
    out = _result(-a.data, a.requires_grad)
    _record(out, (a,), lambda g: (-g,))
    return out


def mul(a, b):
    """Elementwise a * b for same-shape tensors, or tensor times scalar."""
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        c = float(b)
        out = _result(a.data * c, a.requires_grad)
        _record(out, (a,), lambda g: (g * c,))
        return out
    b = _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"cannot multiply shapes {a.data.shape} and {b.data.shape}")
    out = _result(a.data * b.data, a.requires_grad or b.requires_grad)

    def bwd(g):
        return (g * b.data if a.requires_grad else None,
                g * a.data if b.requires_grad else None)

    _record(out, (a, b), bwd)
    return out


def matmul(a, b):
    """Matrix product over the last two axes.

    Supported operand layouts: 2-D @ 2-D, N-D @ 2-D (shared right factor,
    e.g. activations times a weight matrix), and N-D @ N-D with identical
    leading dimensions (per-sample attention products).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have at least 2 dimensions")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}"
        )
    if b.ndim != 2 and a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError(
            f"matmul leading dimensions differ: {a.data.shape} @ {b.data.shape}"
        )
    out = _result(a.data @ b.data, a.requires_grad or b.requires_grad)

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ (b.data.T if b.ndim == 2 else np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.data.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    _record(out, (a, b), bwd)
    return out


def transpose_last2(a):
    a = _as_tensor(a)
    out = _result(np.swapaxes(a.data, -1, -2), a.requires_grad)
    _record(out, (a,), lambda g: (np.swapaxes(g, -1, -2),))
    return out


def permute(a, axes):
    """Axis permutation (contiguous copy so downstream matmuls stay fast)."""
    a = _as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = _result(np.ascontiguousarray(np.transpose(a.data, axes)), a.requires_grad)
    _record(out, (a,), lambda g: (np.ascontiguousarray(np.transpose(g, inverse)),))
    return out


def reshape(a, shape):
    a = _as_tensor(a)
    out = _result(a.data.reshape(shape), a.requires_grad)
    _record(out, (a,), lambda g: (g.reshape(a.data.shape),))
    return out


def concat(tensors, axis=-1):
    """Concatenate tensors along an axis; backward splits the gradient."""
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    out = _result(data, any(t.requires_grad for t in tensors))
    offsets = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def bwd(g):
        return tuple(np.split(g, offsets, axis=axis))

    _record(out, tuple(tensors), bwd)
    return out


def sum_all(a):
    a = _as_tensor(a)
    out = _result(a.data.sum(), a.requires_grad)
    _record(out, (a,), lambda g: (np.broadcast_to(g, a.data.shape).copy(),))
    return out


def mean_axis(a, axis):
    """Mean along one axis (token pooling)."""
    a = _as_tensor(a)
    n = a.data.shape[axis]
    out = _result(a.data.mean(axis=axis), a.requires_grad)

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g / n, axis), a.data.shape).copy(),)

    _record(out, (a,), bwd)
    return out


def embedding_lookup(table, ids):
    """Gather rows of table by integer id array; backward scatter-adds."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError("embedding id out of range")
    out = _result(table.data[ids], table.requires_grad)

    def bwd(g):
        # segment-sum via stable sort; much faster than np.add.at here
        flat_ids = ids.ravel()
        rows = g.reshape(-1, g.shape[-1])
        order = np.argsort(flat_ids, kind="stable")
        sorted_ids = flat_ids[order]
        starts = np.concatenate(([0], np.flatnonzero(np.diff(sorted_ids)) + 1))
        sums = np.add.reduceat(rows[order], starts, axis=0)
        gt = np.zeros_like(table.data)
        gt[sorted_ids[starts]] = sums
        return (gt,)

    _record(out, (table,), bwd)
    return out


def softmax_rows(a):
    """Row-stable softmax over the last axis."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _result(y, a.requires_grad)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    _record(out, (a,), bwd)
    return out


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError("layer_norm affine parameters must have shape (d,)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _result(xhat * gamma.data + beta.data, x.requires_grad or gamma.requires_grad
                  or beta.requires_grad)

    def bwd(g):
        gx = ggamma = gbeta = None
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    _record(out, (x, gamma, beta), bwd)
    return out


def gelu(x):
    """Exact Gaussian-CDF gelu: x * Phi(x)."""
    x = _as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = _result(x.data * cdf, x.requires_grad)

    def bwd(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (cdf + x.data * pdf),)

    _record(out, (x,), bwd)
    return out


def soft_cross_entropy(student_logits, teacher_probs):
    """Mean over rows of the cross-entropy between teacher rows and softmax(logits).

    Teacher rows must be valid distributions (nonnegative, sum 1 within
    1e-6); gradients flow to the logits only.
    """
    student_logits = _as_tensor(student_logits)
    p = teacher_probs.data if isinstance(teacher_probs, Tensor) else np.asarray(
        teacher_probs, dtype=np.float64)
    z = student_logits.data
    if z.ndim != 2 or p.shape != z.shape:
        raise ShapeError(
            f"expected matching (N, c) shapes, got {z.shape} and {p.shape}"
        )
    if np.any(p < 0.0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
        raise ValueError("teacher rows must be nonnegative and sum to 1 (+-1e-6)")
    n = z.shape[0]
    zmax = z.max(axis=-1, keepdims=True)
    logp = z - (zmax + np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True)))
    contrib = np.where(p > 0.0, p * logp, 0.0)
    out = _result(-contrib.sum() / n, student_logits.requires_grad)

    def bwd(g):
        q = np.exp(logp)
        return (float(g) * (q - p) / n,)

    _record(out, (student_logits,), bwd)
    return out


def custom_gradient(forward_fn, backward_fn):
    """Build a differentiable op whose backward rule is supplied verbatim.

    ``forward_fn(*arrays) -> array`` computes the value; autodiff never
    looks inside it.  ``backward_fn(upstream, *arrays)`` must return one
    gradient (or None) per input, each matching that input's shape.
    """

    def op(*inputs):
        tensors = tuple(_as_tensor(t) for t in inputs)
        arrays = tuple(t.data for t in tensors)
        out = _result(forward_fn(*arrays), any(t.requires_grad for t in tensors))

        def bwd(g):
            grads = backward_fn(g, *arrays)
            if not isinstance(grads, (tuple, list)) or len(grads) != len(tensors):
                raise ShapeError(
                    f"backward_fn must return {len(tensors)} gradients"
                )
            for t, grad in zip(tensors, grads):
                if grad is not None and np.shape(grad) != t.data.shape:
                    raise ShapeError(
                        f"backward_fn gradient shape {np.shape(grad)} does not "
                        f"match input shape {t.data.shape}"
                    )
            return grads

        _record(out, tensors, bwd)
        return out

    return op
