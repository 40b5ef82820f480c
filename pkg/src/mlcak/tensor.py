"""Reverse-mode autodiff engine on dense float64 arrays.

A ``Tensor`` wraps a numpy float64 array. While a ``Tape`` is active (as a
context manager), every operation whose inputs require gradients appends one
node to the tape; ``backward(loss)`` replays the tape once in reverse and
accumulates gradients into the ``.grad`` buffer of every requires-grad leaf.
Outside a tape nothing is recorded, which is the inference / frozen-teacher
path.

Kernels are deliberately few: exactly what a pre-norm ViT encoder and the
distillation losses need. All math is float64 and deterministic.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf as _erf

from .errors import ContractError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "reshape",
    "transpose",
    "concat",
    "narrow",
    "broadcast_to",
    "add_n",
    "tsum",
    "tmean",
    "exp",
    "log",
    "sqrt",
    "abs_",
    "relu",
    "sigmoid",
    "softplus",
    "gelu",
    "softmax",
    "log_softmax",
    "layer_norm",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class _Node:
    """One tape entry: op label, input node ids, and the vjp closure."""

    __slots__ = ("op", "inputs", "vjp", "leaf")

    def __init__(self, op, inputs, vjp, leaf=None):
        self.op = op
        self.inputs = inputs  # tuple of node ids; -1 marks a constant slot
        self.vjp = vjp  # grad_out -> tuple of input grads (None for constants)
        self.leaf = leaf  # the Tensor itself, for leaf nodes


class Tape:
    """Append-only record of one forward pass.

    Use as a context manager around the ops whose gradients are needed::

        with Tape():
            loss = ...
        backward(loss)

    Nodes are appended in execution order, so every node's inputs precede it
    and a single reverse scan is a valid backward traversal.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape contexts must nest properly"
        # unlink leaves so long-lived tensors (parameters) never keep a dead
        # tape -- and its recorded batch arrays -- alive between steps; the
        # nodes themselves stay intact for a backward() after the block
        for node in self.nodes:
            t = node.leaf
            if t is not None and t.tape is self:
                t.tape = None
                t.node_id = None
        return False

    def _append(self, node: _Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """Dense float64 array with optional gradient and tape linkage."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self.tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """The underlying array (not a copy)."""
        return self.data

    def detach(self) -> "Tensor":
        """Same values, no grad requirement, no tape linkage."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out.node_id = None
        out.tape = None
        return out

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; scalars are treated as constants
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
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a supported kernel")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _node_id_for(t: Tensor, tape: Tape) -> int:
    """Node id of ``t`` on ``tape``, registering a leaf if needed.

    Tapes are rebuilt every step, so a tensor whose linkage points at an old
    tape is re-registered fresh.
    """
    if t.tape is tape and t.node_id is not None:
        return t.node_id
    nid = tape._append(_Node("leaf", (), None, leaf=t))
    t.tape = tape
    t.node_id = nid
    return nid


def _record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap an op result, appending a tape node when gradients are live."""
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is None or not any(t.requires_grad or t.tape is tape for t in inputs):
        return out
    ids = tuple(
        _node_id_for(t, tape) if (t.requires_grad or t.tape is tape) else -1 for t in inputs
    )
    out.requires_grad = True
    out.tape = tape
    out.node_id = tape._append(_Node(op, ids, vjp))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Single reverse scan over the tape; gradients of fan-out nodes accumulate
    additively. Grad buffers on leaves accumulate across calls (clear with
    ``zero_grad``).
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None or loss.node_id is None or not tape.nodes:
        raise ContractError("backward() called on a tensor with no recorded tape")
    grads: list[Optional[np.ndarray]] = [None] * len(tape.nodes)
    grads[loss.node_id] = np.ones_like(loss.data)
    for nid in range(loss.node_id, -1, -1):
        g = grads[nid]
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.leaf is not None:
            t = node.leaf
            if t.requires_grad:
                if t.grad is None:
                    t.grad = g.copy()
                else:
                    t.grad += g
            continue
        in_grads = node.vjp(g)
        for iid, ig in zip(node.inputs, in_grads):
            if iid < 0 or ig is None:
                continue
            if grads[iid] is None:
                grads[iid] = np.ascontiguousarray(ig)
            else:
                grads[iid] = grads[iid] + ig
        grads[nid] = None  # free as we go


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise binary ops (numpy broadcasting, unbroadcast on the way back)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    # closures capture shapes/arrays only, never Tensors: a captured Tensor
    # would tie the tape into a reference cycle and pin every batch's arrays
    a_shape, b_shape = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

    return _record("add", out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data
    a_shape, b_shape = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)

    return _record("sub", out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record("mul", out, (a, b), vjp)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


# ---------------------------------------------------------------------------
# matmul


def matmul(a, b) -> Tensor:
    """Matrix product, batched over leading axes with numpy semantics."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        # reduce batch dims that were broadcast
        if ga.shape != ad.shape:
            ga = _unbroadcast(ga, ad.shape)
        if gb.shape != bd.shape:
            gb = _unbroadcast(gb, bd.shape)
        return ga, gb

    return _record("matmul", out, (a, b), vjp)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    out = a.data.reshape(shape)
    in_shape = a.shape
    return _record("reshape", out, (a,), lambda g: (g.reshape(in_shape),))


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(int(x) for x in axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return _record("transpose", out, (a,), lambda g: (g.transpose(inv),))


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concat of an empty list")
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", out, tuple(ts), vjp)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis`` (dim kept)."""
    a = _as_tensor(a)
    if not (0 <= axis < a.ndim):
        raise ShapeError(f"narrow axis {axis} out of range for shape {a.shape}")
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}] exceeds axis {axis} of {a.shape}")
    idx = tuple(slice(None) if i != axis else slice(start, start + length) for i in range(a.ndim))
    out = a.data[idx]
    in_shape = a.shape

    def vjp(g):
        full = np.zeros(in_shape, dtype=np.float64)
        full[idx] = g
        return (full,)

    return _record("narrow", out, (a,), vjp)


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    out = np.broadcast_to(a.data, shape)
    in_shape = a.shape
    return _record("broadcast_to", np.ascontiguousarray(out), (a,), lambda g: (_unbroadcast(g, in_shape),))


def add_n(tensors) -> Tensor:
    """Elementwise sum of same-shaped tensors (one node for the whole fan-in)."""
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("add_n of an empty list")
    shape = ts[0].shape
    for t in ts[1:]:
        if t.shape != shape:
            raise ShapeError(f"add_n shape mismatch: {shape} vs {t.shape}")
    out = ts[0].data.copy()
    for t in ts[1:]:
        out += t.data
    n = len(ts)
    return _record("add_n", out, tuple(ts), lambda g: (g,) * n)


# ---------------------------------------------------------------------------
# reductions


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    in_shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, in_shape).copy(),)
        gx = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gx, in_shape).copy(),)

    return _record("sum", np.asarray(out), (a,), vjp)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    in_shape = a.shape
    count = a.data.size if axis is None else a.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, in_shape).copy(),)
        gx = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gx / count, in_shape).copy(),)

    return _record("mean", np.asarray(out), (a,), vjp)


# ---------------------------------------------------------------------------
# elementwise unary ops


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _record("log", np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _record("sqrt", out, (a,), lambda g: (g * (0.5 / out),))


def abs_(a) -> Tensor:
    a = _as_tensor(a)
    sign = np.sign(a.data)
    return _record("abs", np.abs(a.data), (a,), lambda g: (g * sign,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid(a.data)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    """log(1 + exp(x)), overflow-safe for any x."""
    a = _as_tensor(a)
    ad = a.data
    out = np.maximum(ad, 0.0) + np.log1p(np.exp(-np.abs(ad)))
    sig = _sigmoid(ad)
    return _record("softplus", out, (a,), lambda g: (g * sig,))


def gelu(a) -> Tensor:
    """Exact Gaussian-error-linear unit x * Phi(x) (erf form, no tanh approx)."""
    a = _as_tensor(a)
    ad = a.data
    phi_cdf = 0.5 * (1.0 + _erf(ad * _INV_SQRT2))
    out = ad * phi_cdf
    pdf = np.exp(-0.5 * ad * ad) * _INV_SQRT2PI
    return _record("gelu", out, (a,), lambda g: (g * (phi_cdf + ad * pdf),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# normalizations


def _check_axis(a: Tensor, axis: int) -> int:
    if not (-a.ndim <= axis < a.ndim):
        raise ShapeError(f"axis {axis} out of range for shape {a.shape}")
    axis = axis % a.ndim
    if a.shape[axis] == 0:
        raise ShapeError(f"empty slice along axis {axis} of shape {a.shape}")
    return axis


def softmax(a, axis: int = -1) -> Tensor:
    """Max-shifted softmax; every slice along ``axis`` sums to 1."""
    a = _as_tensor(a)
    axis = _check_axis(a, axis)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _record("softmax", out, (a,), vjp)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    axis = _check_axis(a, axis)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def vjp(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", out, (a,), vjp)


def layer_norm(a, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit (population) variance, then scale-shift."""
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be > 0, got {eps}")
    a, gamma, beta = _as_tensor(a), _as_tensor(gamma), _as_tensor(beta)
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm gamma/beta must have shape ({d},), got {gamma.shape} and {beta.shape}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data
    gd = gamma.data

    def vjp(g):
        dxhat = g * gd
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = (dxhat - m1 - xhat * m2) * inv
        red = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=red)
        dbeta = g.sum(axis=red)
        return dx, dgamma, dbeta

    return _record("layer_norm", out, (a, gamma, beta), vjp)
