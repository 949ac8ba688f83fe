"""Minimal reverse-mode automatic differentiation over numpy arrays.

Operations record themselves on the active :class:`Tape` (one per thread) when
at least one input requires a gradient. :func:`backward` walks the tape once in
reverse order and leaves ``dloss/dleaf`` in ``leaf.grad``.

Feature tensors are channels-last throughout the package, i.e. ``[..., M, C]``.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

_state = threading.local()


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Misuse of a tape (e.g. running backward twice)."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity reached an operation that cannot handle it."""


class Tensor:
    """Dense array plus optional gradient, tracked by the active tape."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_size(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _raise_size(t: Tensor):
    raise DimensionError(f"item() needs a single element, got shape {t.shape}")


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of operations, replayed backwards exactly once.

    Use as a context manager; nested tapes shadow the outer one for the thread.
    ``updates`` collects side effects (batch-norm running statistics) that the
    owner applies with :meth:`commit` after gradients are reduced.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.updates: list[Callable[[], None]] = []
        self.consumed = False
        self._prev = None

    def __enter__(self) -> "Tape":
        self._prev = getattr(_state, "tape", None)
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._prev
        self._prev = None

    def record(self, out: Tensor, parents: tuple[Tensor, ...], fn) -> None:
        if self.consumed:
            raise TapeError("tape already consumed by backward(); call reset() first")
        out.node_id = len(self.nodes)
        self.nodes.append(_Node(out, parents, fn))

    def reset(self) -> None:
        self.nodes = []
        self.updates = []
        self.consumed = False

    def commit(self) -> None:
        for update in self.updates:
            update()
        self.updates = []

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Tape | None:
    return getattr(_state, "tape", None)


class no_grad:
    """Suspend recording on this thread."""

    def __enter__(self):
        self._prev = getattr(_state, "tape", None)
        _state.tape = None

    def __exit__(self, *exc):
        _state.tape = self._prev


def backward(tape: Tape, loss: Tensor, accumulate: bool = True) -> list[tuple[Tensor, np.ndarray]]:
    """Propagate ``dloss`` through ``tape``.

    With ``accumulate`` the leaf gradients are added into ``leaf.grad``;
    otherwise they are only returned, in first-reached order, so that several
    shards can be reduced by a single owner.
    """
    if tape.consumed:
        raise TapeError("backward() already ran on this tape")
    if loss.data.size != 1:
        raise DimensionError(f"loss must be a scalar, got shape {loss.shape}")
    tape.consumed = True
    nodes = tape.nodes

    def on_tape(t: Tensor) -> bool:
        nid = t.node_id
        return nid is not None and nid < len(nodes) and nodes[nid].out is t

    leaves: dict[int, list] = {}
    if not on_tape(loss):
        if loss.requires_grad:
            leaves[id(loss)] = [loss, np.ones_like(loss.data)]
        return _finish_leaves(leaves, accumulate)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if on_tape(parent):
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            else:
                slot = leaves.get(id(parent))
                if slot is None:
                    leaves[id(parent)] = [parent, np.array(pg, dtype=parent.dtype, copy=True)]
                else:
                    slot[1] = slot[1] + pg
    return _finish_leaves(leaves, accumulate)


def _finish_leaves(leaves, accumulate):
    out = []
    for leaf, g in leaves.values():
        g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
        if accumulate:
            leaf.grad = g if leaf.grad is None else leaf.grad + g
        out.append((leaf, g))
    return out


# --------------------------------------------------------------------------
# frozen discrete choices (used by grad_check to replay argmax decisions and
# activation branches, so finite differences never straddle a kink)


def frozen(compute: Callable[[], object]):
    """Evaluate a discrete decision, or replay the one recorded by grad_check."""
    mode = getattr(_state, "freeze_mode", None)
    if mode == "replay":
        value = _state.freeze_store[_state.freeze_pos]
        _state.freeze_pos += 1
        return value
    value = compute()
    if mode == "record":
        _state.freeze_store.append(value)
    return value


def replaying() -> bool:
    return getattr(_state, "freeze_mode", None) == "replay"


# --------------------------------------------------------------------------
# helpers


def _result(data: np.ndarray, parents: tuple[Tensor, ...], fn) -> Tensor:
    tape = getattr(_state, "tape", None)
    if tape is not None and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        tape.record(out, parents, fn)
        return out
    return Tensor(data)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def fn(g):
        return unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)

    return _result(out, (a, b), fn)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    pos = frozen(lambda: a.data > 0)
    out = np.where(pos, a.data, a.data * a.dtype.type(slope))
    return _result(out, (a,), lambda g: (np.where(pos, g, g * g.dtype.type(slope)),))


def relu(a: Tensor) -> Tensor:
    return leaky_relu(a, 0.0)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    below, above = frozen(lambda: (a.data < lo, a.data > hi))
    inside = (~below & ~above).astype(a.dtype)
    out = np.where(below, a.dtype.type(lo), np.where(above, a.dtype.type(hi), a.data))
    return _result(out, (a,), lambda g: (g * inside,))


def activation(a: Tensor, kind: str) -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu(a, 0.2)
    if kind == "relu":
        return relu(a)
    if kind == "none":
        return a
    raise ValueError(f"unknown activation {kind!r}")


# --------------------------------------------------------------------------
# reductions and shape


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _result(out, (a,), fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    if count == 0:
        raise DimensionError("mean over an empty axis")
    return mul(sum_(a, axes, keepdims), 1.0 / count)


def amax(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; the gradient goes to the first maximal entry."""
    if a.shape[axis] == 0:
        raise DimensionError("max over an empty axis")
    idx = frozen(lambda: np.argmax(a.data, axis=axis))
    idx_k = np.expand_dims(idx, axis)
    out = np.take_along_axis(a.data, idx_k, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def fn(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        full = np.zeros(a.shape, dtype=a.dtype)
        np.put_along_axis(full, idx_k, gk, axis=axis)
        return (full,)

    return _result(out, (a,), fn)


def pool(a: Tensor, axis: int, kind: str = "max", keepdims: bool = False) -> Tensor:
    if kind == "max":
        return amax(a, axis, keepdims)
    if kind == "avg":
        return mean(a, axis, keepdims)
    raise ValueError(f"unknown pooling {kind!r}")


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def expand_dims(a: Tensor, axis: int) -> Tensor:
    out = np.expand_dims(a.data, axis)
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    out = np.broadcast_to(a.data, shape)
    return _result(out, (a,), lambda g: (unbroadcast(g, a.shape),))


def norm(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; zero vectors get a zero gradient."""
    out = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    safe = np.where(out > 0, out, 1.0)
    live = out > 0

    def fn(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.where(live, gk * a.data / safe, 0.0).astype(a.dtype),)

    return _result(out if keepdims else np.squeeze(out, axis), (a,), fn)


def getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def fn(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        np.add.at(full, key, g)
        return (full,)

    return _result(np.array(out, copy=True), (a,), fn)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    cuts = np.cumsum(sizes)[:-1]
    return _result(out, tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=ax)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim
    return _result(out, tuple(tensors),
                   lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(tensors))))


# --------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _result(out, (a, b), fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` applied to the last axis; weight is out x in."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear expects {weight.shape[1]} input channels, got {x.shape[-1]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(*lead, weight.shape[0])

    def fn(g):
        g2 = g.reshape(-1, weight.shape[0])
        gx = (g2 @ weight.data).reshape(x.shape)
        gw = g2.T @ x2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, fn)


def gather(feats: Tensor, idx: np.ndarray) -> Tensor:
    """Row gather: ``[B, P, C]`` with ``idx[B, ...]`` -> ``[B, ..., C]``.

    Unbatched ``[P, C]`` with any-shaped ``idx`` is accepted as well.
    """
    idx = np.asarray(idx, dtype=np.int64)
    if feats.ndim == 2:
        rows, n_rows, flat = feats.data, feats.shape[0], idx.reshape(-1)
        out_shape = idx.shape + (feats.shape[1],)
    elif feats.ndim == 3:
        b, p, c = feats.shape
        if idx.shape[0] != b:
            raise DimensionError(f"gather batch mismatch: {feats.shape} vs idx {idx.shape}")
        rows, n_rows = feats.data.reshape(b * p, c), b * p
        offsets = (np.arange(b) * p).reshape((b,) + (1,) * (idx.ndim - 1))
        flat = (idx + offsets).reshape(-1)
        out_shape = idx.shape + (c,)
    else:
        raise DimensionError("gather expects [P, C] or [B, P, C] features")
    if flat.size and (flat.min() < 0 or flat.max() >= n_rows):
        raise IndexError("gather index out of range")
    out = rows[flat].reshape(out_shape)

    def fn(g):
        g2 = g.reshape(flat.size, -1)
        scatter = sp.csr_matrix(
            (np.ones(flat.size, dtype=g.dtype), (flat, np.arange(flat.size))),
            shape=(n_rows, flat.size),
        )
        return (np.asarray(scatter @ g2).reshape(feats.shape),)

    return _result(out, (feats,), fn)


# --------------------------------------------------------------------------
# softmax family


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _softmax_vjp(s: np.ndarray, g: np.ndarray, axis: int) -> np.ndarray:
    return s * (g - (g * s).sum(axis=axis, keepdims=True))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    s = _softmax_np(a.data, axis)
    return _result(s, (a,), lambda g: (_softmax_vjp(s, g, axis),))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _result(out, (a,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


def _onehot_argmax(x: np.ndarray, axis: int) -> np.ndarray:
    idx = np.expand_dims(np.argmax(x, axis=axis), axis)
    out = np.zeros_like(x)
    np.put_along_axis(out, idx, 1.0, axis=axis)
    return out


def hard_softmax_st(a: Tensor, axis: int = -1) -> Tensor:
    """Straight-through selection: one-hot argmax forward, softmax gradient back.

    Ties go to the lowest index. Under grad_check replay the recorded one-hot is
    reused and the forward becomes ``onehot + softmax(x) - softmax(x0)``, whose
    true derivative is the straight-through gradient.
    """
    if a.shape[axis] < 1:
        raise DimensionError("hard_softmax_st over an empty axis")
    if not np.all(np.isfinite(a.data)):
        raise NonFiniteError("hard_softmax_st received non-finite logits")
    s = _softmax_np(a.data, axis)
    onehot, s0 = frozen(lambda: (_onehot_argmax(a.data, axis), s))
    out = onehot + (s - s0) if replaying() else onehot.copy()
    return _result(out, (a,), lambda g: (_softmax_vjp(s, g, axis),))


# --------------------------------------------------------------------------
# regularisation and normalisation


def dropout(a: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    rng = rng if rng is not None else np.random.default_rng()
    mask = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation over all leading axes of a channels-last input.

    Returns the output; in training mode the running statistics update is
    queued on the active tape (or applied at once when no tape is active).
    """
    if not training:
        scale = gamma.data / np.sqrt(running_var + eps)
        shift = beta.data - running_mean * scale
        xhat = (x.data - running_mean) / np.sqrt(running_var + eps)

        def fn_eval(g):
            g2 = g.reshape(-1, g.shape[-1])
            return g * scale, (g2 * xhat.reshape(g2.shape)).sum(0), g2.sum(0)

        return _result((x.data * scale + shift).astype(x.dtype), (x, gamma, beta), fn_eval)

    c = x.shape[-1]
    x2 = x.data.reshape(-1, c)
    count = x2.shape[0]
    mu = x2.mean(axis=0)
    centered = x2 - mu
    var = np.einsum("ij,ij->j", centered, centered) / count
    del centered
    inv = 1.0 / np.sqrt(var + eps)
    scale = gamma.data * inv
    out = x.data * scale + (beta.data - mu * scale)

    def fn(g):
        g2 = g.reshape(-1, c)
        sum_g = g2.sum(0)
        sum_gx = np.einsum("ij,ij->j", g2, x2)
        sum_gxhat = inv * (sum_gx - mu * sum_g)
        dgamma, dbeta = sum_gxhat, sum_g
        c1 = -scale * inv * sum_gxhat / count
        c0 = -scale * sum_g / count - mu * c1
        dx = g * scale + x.data * c1 + c0
        return dx, dgamma, dbeta

    unbiased = var * count / max(count - 1, 1)

    def update():
        running_mean[...] = (1.0 - momentum) * running_mean + momentum * mu
        running_var[...] = (1.0 - momentum) * running_var + momentum * unbiased

    tape = active_tape()
    if tape is not None:
        tape.updates.append(update)
    else:
        update()
    return _result(out, (x, gamma, beta), fn)


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = sqrt(add(sum_(mul(a, a), axis, keepdims=True), eps))
    return div(a, norm)


# --------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, labels, axis: int = 0) -> Tensor:
    """Mean negative log-likelihood; ``axis`` indexes classes (classes x B by default)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise DimensionError("cross_entropy expects 2-D logits")
    lp = log_softmax(logits, axis=axis)
    n_classes = logits.shape[axis]
    if labels.ndim != 1 or labels.size != logits.shape[1 - axis % 2]:
        raise DimensionError(f"{labels.size} labels for a batch of {logits.shape[1 - axis % 2]}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise IndexError("label outside class range")
    onehot = np.zeros(lp.shape, dtype=logits.dtype)
    if axis % 2 == 0:
        onehot[labels, np.arange(labels.size)] = 1.0
    else:
        onehot[np.arange(labels.size), labels] = 1.0
    return neg(mul(sum_(mul(lp, onehot)), 1.0 / labels.size))


def cosine_error(pred: Tensor, target, axis: int = 0) -> Tensor:
    """Mean over points of ``1 - |cos(pred, target)|``; targets are unit vectors."""
    target = as_tensor(target, pred)
    dot = sum_(mul(pred, target), axis)
    norm = sqrt(sum_(mul(pred, pred), axis))
    data = np.abs(dot.data) / np.maximum(norm.data, np.finfo(pred.dtype).tiny)
    sign = np.sign(dot.data)
    safe = np.maximum(norm.data, np.finfo(pred.dtype).tiny)
    live = norm.data > 0

    def fn(g):
        gd = np.where(live, g * sign / safe, 0.0)
        gn = np.where(live, -g * data / safe, 0.0)
        return gd.astype(pred.dtype), gn.astype(pred.dtype)

    cos_abs = _result(data.astype(pred.dtype), (dot, norm), fn)
    return mean(sub(1.0, cos_abs))


# --------------------------------------------------------------------------
# finite-difference checking


def grad_check(build: Callable[[], Tensor], leaves: Iterable[Tensor], eps: float = 1e-5,
               max_coords: int | None = 24, rng: np.random.Generator | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``build`` must construct the scalar loss from ``leaves`` (cast to float64
    here). Discrete decisions taken through :func:`frozen` are recorded on the
    reference pass and replayed on every perturbed pass. Error per coordinate is
    ``|a - b| / max(1, |a|, |b|)``.
    """
    leaves = list(leaves)
    rng = rng if rng is not None else np.random.default_rng(0)
    for leaf in leaves:
        leaf.data = leaf.data.astype(np.float64)
        leaf.grad = None
        leaf.requires_grad = True

    prev = (getattr(_state, "freeze_mode", None), getattr(_state, "freeze_store", None),
            getattr(_state, "freeze_pos", 0))
    _state.freeze_mode, _state.freeze_store, _state.freeze_pos = "record", [], 0
    try:
        with Tape() as tape:
            loss = build()
        backward(tape, loss)
        analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
                    for leaf in leaves]

        def evaluate() -> float:
            _state.freeze_pos = 0
            with no_grad():
                return float(build().data)

        _state.freeze_mode = "replay"
        worst = 0.0
        for leaf, ga in zip(leaves, analytic):
            flat = leaf.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                up = evaluate()
                flat[i] = orig - eps
                down = evaluate()
                flat[i] = orig
                numeric = (up - down) / (2.0 * eps)
                a = float(ga.reshape(-1)[i])
                err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                worst = max(worst, err)
        return worst
    finally:
        _state.freeze_mode, _state.freeze_store, _state.freeze_pos = prev
