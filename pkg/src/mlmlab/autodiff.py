"""Dense float tensors with reverse-mode automatic differentiation.

Every operation builds a node in a computation graph; ``backward`` linearizes
the graph feeding a scalar loss into a :class:`Tape` (topological order) and
walks it once in reverse, accumulating gradients into ``Tensor.grad``.

Conventions:

* float64 everywhere by default.  A float32 mode exists as a training-speed
  option (create parameters with ``dtype=np.float32``); gradient checking is
  only meaningful in float64.
* Gradient accumulation is additive; callers reset grads between steps.
* Graphs are confined to one thread; ``no_grad`` disables recording per
  thread so probe/eval passes leave no graph behind.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "no_grad",
    "tensor",
    "constant",
    "add",
    "sub",
    "neg",
    "mul",
    "div",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "tsum",
    "tmean",
    "log_softmax",
    "softmax",
    "gelu",
    "layer_norm",
    "dropout",
    "embedding_gather",
    "take_index",
    "concat",
    "l2_norm",
    "cosine",
    "backward",
    "gradcheck",
    "GradcheckReport",
]

COSINE_NORM_EPS = 1e-12  # norm floor: g = h - e can be exactly zero at init
LAYER_NORM_EPS = 1e-12

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class _ThreadState(threading.local):
    def __init__(self):
        self.grad_enabled = True


_state = _ThreadState()


class no_grad:
    """Context manager: operations inside do not record graph nodes."""

    def __enter__(self):
        self._prev = _state.grad_enabled
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    """n-dimensional float array, optionally participating in the gradient tape.

    ``data`` is a row-major numpy array.  ``grad`` is a same-shape accumulator,
    allocated lazily on the first backward pass and only for tensors with
    ``requires_grad``.  Tensors are immutable after construction except for
    grad accumulation.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, dtype=np.float64):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None

    # -- introspection ----------------------------------------------------

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
        return float(self.data.reshape(()))

    def detach(self):
        """Same values, cut from the graph."""
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def tensor(data, requires_grad=False, dtype=np.float64):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def constant(data, dtype=np.float64):
    """Graph constant: values participate in math, never receive gradients."""
    return Tensor(data, requires_grad=False, dtype=dtype)


def _as_tensor(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.data.dtype)


def _node(data, parents, backward_fn):
    """Wrap an op result; records parents/backward only when grad is live."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- arithmetic -------------------------------------------------------------


def add(a, b):
    out = a.data + b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                         _unbroadcast(g, b.data.shape)))


def sub(a, b):
    out = a.data - b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                         _unbroadcast(-g, b.data.shape)))


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    out = a.data * b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.data.shape),
                                         _unbroadcast(g * a.data, b.data.shape)))


def div(a, b):
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.data.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data),
                                         b.data.shape)))


def scale(a, s):
    """Multiply by a python scalar."""
    s = float(s)
    return _node(a.data * s, (a,), lambda g: (g * s,))


def matmul(a, b):
    """Matrix product with numpy stacking semantics (both operands >= 2-D)."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(
            f"matmul requires 2-D or stacked operands, got shapes "
            f"{a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(
            f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def backward_fn(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return _node(out, (a, b), backward_fn)


def transpose(a, axes=None):
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = list(range(a.data.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inverse),))


def reshape(a, shape):
    orig = a.data.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _node(np.asarray(out), (a,), backward_fn)


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape) / count,)

    return _node(np.asarray(out), (a,), backward_fn)


# -- nonlinearities ----------------------------------------------------------


def log_softmax(a, axis=-1):
    """Numerically stable log-softmax along ``axis`` (max-subtraction)."""
    if a.data.shape[axis] < 1:
        raise ValueError(f"log_softmax along empty axis {axis} of {a.data.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), backward_fn)


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), backward_fn)


def gelu(a):
    """Exact erf-based gelu: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def backward_fn(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return _node(out, (a,), backward_fn)


def layer_norm(x, gain, bias, eps=LAYER_NORM_EPS):
    """Normalize over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    out = xhat * gain.data + bias.data

    def backward_fn(g):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        reduce_axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=reduce_axes)
        dbias = g.sum(axis=reduce_axes)
        return dx, dgain, dbias

    return _node(out, (x, gain, bias), backward_fn)


def dropout(x, p, rng, train):
    """Inverted dropout: scales by 1/(1-p) at train time, identity at eval."""
    if not train or p <= 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p) / (1.0 - p)
    return _node(x.data * keep, (x,), lambda g: (g * keep,))


# -- gathers / structure -----------------------------------------------------


def embedding_gather(table, ids):
    """Select rows of a 2-D ``table`` by an integer array ``ids``.

    Output shape is ``ids.shape + (row_width,)``; backward scatter-adds into
    the table so repeated ids accumulate.
    """
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        bad = np.argwhere((ids < 0) | (ids >= table.data.shape[0]))[0]
        raise ValueError(
            f"id {ids[tuple(bad)]} at position {tuple(bad)} is outside "
            f"table of {table.data.shape[0]} rows")
    out = table.data[ids]

    def backward_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (gt,)

    return _node(out, (table,), backward_fn)


def take_index(x, ids):
    """Pick one entry along the last axis per leading position.

    ``ids`` has shape ``x.shape[:-1]``; output ``out[...] = x[..., ids[...]]``.
    """
    ids = np.asarray(ids)
    flat = x.data.reshape(-1, x.data.shape[-1])
    rows = np.arange(flat.shape[0])
    out = flat[rows, ids.reshape(-1)].reshape(ids.shape)

    def backward_fn(g):
        gx = np.zeros_like(flat)
        gx[rows, ids.reshape(-1)] = g.reshape(-1)
        return (gx.reshape(x.data.shape),)

    return _node(out, (x,), backward_fn)


def concat(parts, axis=0):
    parts = list(parts)
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        pieces = []
        for i in range(len(parts)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(idx)])
        return tuple(pieces)

    return _node(out, parts, backward_fn)


def l2_norm(x, axis=-1, keepdims=False, eps=0.0):
    """Euclidean norm along ``axis``, floored at ``eps``.

    Inside the floor the gradient is zero, which keeps losses built on
    near-zero vectors finite.
    """
    sq = (x.data * x.data).sum(axis=axis, keepdims=keepdims)
    raw = np.sqrt(sq)
    out = np.maximum(raw, eps)

    def backward_fn(g):
        if not keepdims:
            ge = np.expand_dims(g, axis)
            norm = np.expand_dims(out, axis)
            live = np.expand_dims(raw > eps, axis)
        else:
            ge, norm, live = g, out, raw > eps
        return (np.where(live, x.data / np.where(live, norm, 1.0) * ge, 0.0),)

    return _node(np.asarray(out), (x,), backward_fn)


def cosine(a, b, eps=COSINE_NORM_EPS):
    """Cosine similarity of two 1-D tensors with eps-floored norms."""
    if a.data.shape != b.data.shape or a.data.ndim != 1:
        raise ValueError(
            f"cosine expects equal-length vectors, got {a.data.shape} "
            f"and {b.data.shape}")
    dot = tsum(mul(a, b))
    return div(dot, mul(l2_norm(a, eps=eps), l2_norm(b, eps=eps)))


# -- backward ----------------------------------------------------------------


class Tape:
    """Topologically ordered record of the operations feeding ``root``.

    Every node appears after all producers of its inputs; backward walks the
    record exactly once in reverse.
    """

    def __init__(self, root):
        order = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.nodes = order

    def __len__(self):
        return len(self.nodes)


def backward(loss):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor feeding loss.

    Repeated calls without resetting grads accumulate.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    tape = Tape(loss)
    flows = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = flows.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = np.zeros_like(node.data)
        node.grad += g
        if node._backward_fn is None:
            continue
        for parent, pg in zip(node._parents, node._backward_fn(g)):
            if not parent.requires_grad or pg is None:
                continue
            acc = flows.get(id(parent))
            if acc is None:
                flows[id(parent)] = pg.astype(node.data.dtype, copy=True) \
                    if pg.dtype != node.data.dtype else np.array(pg, copy=True)
            else:
                acc += pg


# -- gradient verification ----------------------------------------------------


@dataclass
class GradcheckInput:
    """Per-input summary of a finite-difference comparison."""
    index: int
    max_rel_err: float
    worst_coord: tuple
    analytic: float
    numeric: float
    checked: int


@dataclass
class GradcheckReport:
    tol: float
    delta: float
    inputs: list = field(default_factory=list)

    @property
    def max_rel_err(self):
        return max((i.max_rel_err for i in self.inputs), default=0.0)

    @property
    def passed(self):
        return self.max_rel_err < self.tol

    def summary(self):
        lines = []
        for i in self.inputs:
            lines.append(
                f"input[{i.index}]: checked {i.checked} coords, "
                f"max rel err {i.max_rel_err:.3e} at {i.worst_coord} "
                f"(analytic {i.analytic:.6e}, numeric {i.numeric:.6e})")
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"{verdict}: max rel err {self.max_rel_err:.3e} vs tol {self.tol:.1e}")
        return "\n".join(lines)


def gradcheck(f, inputs, delta=1e-5, tol=1e-6, sample=None, rng=None):
    """Compare analytic gradients of ``f(*inputs)`` against central differences.

    ``f`` must be scalar-valued and a pure function of the input data.  Every
    coordinate of every input is checked unless ``sample`` caps the number of
    coordinates per input (chosen by ``rng``), which keeps large parameter
    sets tractable.  Relative error is |a - n| / max(|a|, |n|, 1).
    """
    for t in inputs:
        t.grad = None
    out = f(*inputs)
    if out.data.size != 1:
        raise ValueError("gradcheck requires a scalar-valued function")
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in inputs]

    if sample is not None and rng is None:
        rng = np.random.default_rng(0)

    report = GradcheckReport(tol=tol, delta=delta)
    for idx, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if sample is not None and flat.size > sample:
            coords = rng.choice(flat.size, size=sample, replace=False)
        worst = (0.0, (), 0.0, 0.0)
        with no_grad():
            for c in coords:
                orig = flat[c]
                flat[c] = orig + delta
                f_plus = f(*inputs).item()
                flat[c] = orig - delta
                f_minus = f(*inputs).item()
                flat[c] = orig
                numeric = (f_plus - f_minus) / (2.0 * delta)
                a = analytic[idx].reshape(-1)[c]
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
                if rel > worst[0]:
                    worst = (rel, np.unravel_index(c, t.data.shape), a, numeric)
        report.inputs.append(GradcheckInput(
            index=idx, max_rel_err=worst[0], worst_coord=worst[1],
            analytic=worst[2], numeric=worst[3], checked=len(coords)))
    return report
