"""Dense tensors with define-by-run reverse-mode differentiation.

Every op builds its output eagerly with numpy and, when any input tracks
gradients, attaches a :class:`Node` holding the inputs and a backward rule.
:func:`backward` linearises the graph reachable from a scalar loss into a
:class:`Tape` (topological order) and replays it in reverse.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

DTYPE = np.float64
NORM_EPS = 1e-12
BN_EPS = 1e-5

_node_ids = itertools.count()
_kink_log: Optional[list] = None


def note_branch(state) -> None:
    """Record the discrete branch taken by a non-smooth op (sign pattern, argmax).

    Only active inside :func:`gradcheck`; two evaluations that record
    different branches straddle a kink.
    """
    if _kink_log is not None:
        _kink_log.append(np.asarray(state).tobytes())


class Node:
    __slots__ = ("id", "inputs", "backward", "name")

    def __init__(self, inputs, backward, name):
        self.id = next(_node_ids)
        self.inputs = inputs
        self.backward = backward
        self.name = name


class Tensor:
    """An n-dimensional float64 array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional[Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def node_id(self) -> Optional[int]:
        return None if self.node is None else self.node.id

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {name}")


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable, name: str) -> Tensor:
    _check_finite(data, name)
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(tuple(inputs), backward, name)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` over the axes that broadcasting expanded to reach it."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# tape


@dataclass
class Tape:
    """Recorded operations in topological order (inputs before outputs)."""

    nodes: list = field(default_factory=list)
    outputs: list = field(default_factory=list)

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        tape = cls()
        seen = set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if t.node is None:
                continue
            if expanded:
                tape.nodes.append(t.node)
                tape.outputs.append(t)
                continue
            if t.node.id in seen:
                continue
            seen.add(t.node.id)
            stack.append((t, True))
            for inp in t.node.inputs:
                if inp.node is not None and inp.node.id not in seen:
                    stack.append((inp, False))
        return tape

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
    if loss.ndim != 0 and loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = Tape.record(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, node in zip(reversed(tape.outputs), reversed(tape.nodes)):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp.node is None:
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
            else:
                key = id(inp)
                grads[key] = ig if key not in grads else grads[key] + ig
    if loss.node is None and loss.requires_grad:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
    return tape


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    """Elementwise product; a python scalar operand gives scalar-mul."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return mul(a, float(c))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), bw, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def tabs(x: Tensor) -> Tensor:
    """|x| with subgradient 0 at x == 0."""
    s = np.sign(x.data)
    note_branch(s)
    return _make(np.abs(x.data), (x,), lambda g: (g * s,), "abs")


def clamp_min(x: Tensor, lo: float) -> Tensor:
    mask = x.data > lo
    note_branch(mask)
    return _make(np.where(mask, x.data, lo), (x,), lambda g: (g * mask,), "clamp_min")


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)) evaluated without overflow."""
    xd = x.data
    out = np.logaddexp(0.0, xd)

    def bw(g):
        # sigmoid, stable on both tails
        sig = np.exp(-np.logaddexp(0.0, -xd))
        return (g * sig,)

    return _make(out, (x,), bw, "softplus")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _make(out, (x,), bw, "gelu")


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(keep))


# ---------------------------------------------------------------------------
# reductions and structure


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def broadcast_to(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(np.broadcast_to(x.data, shape).copy(), (x,),
                 lambda g: (unbroadcast(g, old),), "broadcast_to")


def getitem(x: Tensor, index) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate gradient."""
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(x.data[index], dtype=DTYPE), (x,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise DimensionError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return tuple(out)

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        a = axis if axis >= 0 else len(shape) + 1 + axis
        shape.insert(a, 1)
        expanded.append(reshape(t, tuple(shape)))
    return concat(expanded, axis)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def l2_norm(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    xd = x.data
    out = np.sqrt(np.sum(xd * xd, axis=axis, keepdims=True))

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * xd / np.maximum(out, NORM_EPS),)

    res = out if keepdims else np.squeeze(out, axis=axis)
    return _make(res, (x,), bw, "l2_norm")


def normalize(x: Tensor, axis: int = -1, eps: float = NORM_EPS) -> Tensor:
    return div(x, clamp_min(l2_norm(x, axis, keepdims=True), eps))


def cosine_similarity(u: Tensor, v: Tensor, axis: int = -1, eps: float = NORM_EPS) -> Tensor:
    """dot(u, v) / (max(|u|, eps) * max(|v|, eps)) along ``axis``."""
    u, v = as_tensor(u), as_tensor(v)
    if u.shape[axis] != v.shape[axis]:
        raise DimensionError(f"cosine_similarity: feature extents differ, {u.shape} vs {v.shape}")
    dot = tsum(mul(u, v), axis=axis)
    nu = clamp_min(l2_norm(u, axis), eps)
    nv = clamp_min(l2_norm(v, axis), eps)
    return div(dot, mul(nu, nv))


def squared_euclidean_distance_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Matrix of ||a_i - b_j||^2 for row sets a [m x d] and b [n x d]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"distance matrix needs [m x d] and [n x d], got {a.shape}, {b.shape}")
    ad, bd = a.data, b.data
    out = (ad * ad).sum(1)[:, None] + (bd * bd).sum(1)[None, :] - 2.0 * ad @ bd.T
    out = np.maximum(out, 0.0)

    def bw(g):
        ga = 2.0 * (g.sum(1)[:, None] * ad - g @ bd)
        gb = 2.0 * (g.sum(0)[:, None] * bd - g.T @ ad)
        return ga, gb

    return _make(out, (a, b), bw, "sq_dist")


# ---------------------------------------------------------------------------
# normalisation and probability


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = BN_EPS) -> Tensor:
    xd = x.data
    mu = xd.mean(-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    d = xd.shape[-1]

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        gx = g * gd
        dx = inv * (gx - gx.mean(-1, keepdims=True) - xhat * (gx * xhat).sum(-1, keepdims=True) / d)
        return dx, dgamma, dbeta

    return _make(xhat * gd + beta.data, (x, gamma, beta), bw, "layer_norm")


def batch_norm_1d(
    x: Tensor,
    gamma: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = BN_EPS,
) -> Tensor:
    """Bias-free batch norm over the batch axis of a [B x D] input.

    In training mode the running statistics are updated in place.
    """
    from .errors import BatchTooSmallError

    xd = x.data
    if xd.ndim != 2:
        raise DimensionError(f"batch_norm_1d expects [B x D], got {xd.shape}")
    b = xd.shape[0]
    gd = gamma.data
    if not training:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (xd - running_mean) * inv
        return _make(xhat * gd, (x, gamma),
                     lambda g: (g * gd * inv, (g * xhat).sum(0)), "batch_norm_eval")
    if b < 2:
        raise BatchTooSmallError(f"batch_norm_1d in training mode needs B >= 2, got {b}")
    mu = xd.mean(0)
    xc = xd - mu
    var = (xc * xc).mean(0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    running_mean *= 1.0 - momentum
    running_mean += momentum * mu
    running_var *= 1.0 - momentum
    running_var += momentum * var * b / (b - 1)

    def bw(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(0) - xhat * (gx * xhat).mean(0))
        return dx, (g * xhat).sum(0)

    return _make(xhat * gd, (x, gamma), bw, "batch_norm_train")


def cross_entropy(logits: Tensor, labels: np.ndarray, label_smoothing: float = 0.0) -> Tensor:
    """Mean softmax cross-entropy of [B x K] logits against integer labels."""
    labels = np.asarray(labels)
    b, k = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"label out of range [0, {k})")
    logp = log_softmax(logits, axis=-1)
    nll = -mean(getitem(logp, (np.arange(b), labels)))
    if label_smoothing <= 0.0:
        return nll
    smooth = -mean(logp)
    return add(scale(nll, 1.0 - label_smoothing), scale(smooth, label_smoothing))


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradcheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    kink_mask: np.ndarray
    tol: float

    @property
    def max_error(self) -> float:
        valid = self.rel_error[~self.kink_mask]
        return float(valid.max()) if valid.size else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol

    @property
    def worst_index(self) -> Optional[tuple]:
        err = np.where(self.kink_mask, -np.inf, self.rel_error)
        if not np.isfinite(err).any():
            return None
        return np.unravel_index(int(np.argmax(err)), err.shape)

    @property
    def num_kinks(self) -> int:
        return int(self.kink_mask.sum())


def gradcheck(
    f: Callable[[Tensor], Tensor],
    x,
    step: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-4,
) -> GradcheckReport:
    """Compare tape gradients of scalar ``f`` at ``x`` with central differences.

    Relative error per coordinate is |a - n| / max(|a|, |n|, floor). A
    coordinate whose +/- step evaluations take a different branch of some
    non-smooth op (|.|, clamp, hard-example argmax) than the base point is
    flagged in ``kink_mask`` and left out of the pass/fail decision.
    """
    global _kink_log
    x0 = np.array(as_tensor(x).data, dtype=DTYPE)
    xt = Tensor(x0.copy(), requires_grad=True)
    backward(f(xt))
    analytic = np.zeros_like(x0) if xt.grad is None else xt.grad.copy()

    def fval(arr):
        global _kink_log
        _kink_log = []
        try:
            val = float(f(Tensor(arr)).data)
            return val, _kink_log
        finally:
            _kink_log = None

    _, base = fval(x0)
    numeric = np.empty_like(x0)
    kinks = np.zeros(x0.shape, dtype=bool)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xp[i] += step
        xm = flat.copy()
        xm[i] -= step
        (fp, bp), (fm, bm) = fval(xp.reshape(x0.shape)), fval(xm.reshape(x0.shape))
        idx = np.unravel_index(i, x0.shape)
        numeric[idx] = (fp - fm) / (2 * step)
        kinks[idx] = bp != base or bm != base
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    return GradcheckReport(analytic, numeric, rel, kinks, tol)
