"""Dense float64 tensors with a dynamic reverse-mode tape.

Data is stored row-major (C order) in a numpy ``float64`` array. Every
differentiable operation appends one node to the active :class:`Tape` when
the tape is recording and at least one input requires a gradient. Nodes are
appended in execution order, so the tape is topologically sorted by
construction and :func:`backward` just walks it in reverse.

Broadcasting follows numpy rules for the elementwise ops; gradients are
summed back to each operand's shape.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from sdl.errors import (
    InvalidAxis,
    NonFiniteEvaluation,
    NonFiniteValue,
    NonScalarLoss,
    ShapeMismatch,
    TapeNotRecording,
)

_ids = itertools.count(1)


@dataclass
class Node:
    out: "Tensor"
    parents: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class Tape:
    """Ordered record of differentiable operations."""

    nodes: list[Node] = field(default_factory=list)
    recording: bool = True

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        self.nodes.clear()


_TAPE = Tape()


def get_tape() -> Tape:
    return _TAPE


@contextlib.contextmanager
def inference_mode() -> Iterator[Tape]:
    """Disable recording; no nodes are appended inside this block."""
    prev = _TAPE.recording
    _TAPE.recording = False
    try:
        yield _TAPE
    finally:
        _TAPE.recording = prev


@contextlib.contextmanager
def recording() -> Iterator[Tape]:
    prev = _TAPE.recording
    _TAPE.recording = True
    try:
        yield _TAPE
    finally:
        _TAPE.recording = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.asarray(arr, dtype=np.float64, order="C")
        t.grad = None
        t.requires_grad = requires_grad
        t.node_id = next(_ids)
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _not_scalar(t: Tensor) -> float:
    raise NonScalarLoss(f"tensor of shape {t.shape} is not a scalar")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def _check_finite(arr: np.ndarray, op: str) -> None:
    # a finite sum implies finite entries; only rescan when the sum is not finite
    if not math.isfinite(float(np.sum(arr))) and not np.all(np.isfinite(arr)):
        raise NonFiniteValue(f"{op} produced a non-finite value")


# ops that can turn finite inputs into inf/nan
_GUARDED = frozenset({"exp", "log", "div", "sqrt", "square", "mul", "softmax", "log_softmax", "layer_norm"})


def _make(out: np.ndarray, parents: Sequence[Tensor], back, op: str) -> Tensor:
    if op in _GUARDED:
        _check_finite(out, op)
    needs = _TAPE.recording and any(p.requires_grad for p in parents)
    t = Tensor._wrap(out, requires_grad=needs)
    if needs:
        _TAPE.nodes.append(Node(t, tuple(parents), back))
    return t


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _axis_tuple(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise InvalidAxis(f"axis {a} out of range for {ndim}-d tensor")
        out.append(a % ndim)
    return tuple(out)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeMismatch(f"sub: {a.shape} vs {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}") from exc
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def back(g):
        return (
            unbroadcast(g * bd, ad.shape) if need_a else None,
            unbroadcast(g * ad, bd.shape) if need_b else None,
        )

    return _make(out, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data / b.data
    except ValueError as exc:
        raise ShapeMismatch(f"div: {a.shape} vs {b.shape}") from exc
    ad, bd = a.data, b.data
    return _make(
        out,
        (a, b),
        lambda g: (unbroadcast(g / bd, ad.shape), unbroadcast(-g * ad / (bd * bd), bd.shape)),
        "div",
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    th = x2 * 0.044715
    th += 1.0
    th *= x
    th *= _GELU_C
    np.tanh(th, out=th)
    out = th + 1.0
    out *= x
    out *= 0.5

    def back(g):
        # d/dx = 0.5 (1 + th) + 0.5 x (1 - th^2) c (1 + 3k x^2)
        d = x2 * (3 * 0.044715)
        d += 1.0
        d *= _GELU_C * 0.5
        d *= x
        sech2 = th * th
        np.subtract(1.0, sech2, out=sech2)
        d *= sech2
        d += 0.5
        d += 0.5 * th
        d *= g
        return (d,)

    return _make(out, (a,), back, "gelu")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product with numpy ``@`` semantics (leading dims broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    shared = bd.ndim == 2
    try:
        if shared:
            # fold leading dims into rows: one GEMM instead of a batched loop
            out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))
        else:
            out = ad @ bd
    except ValueError as exc:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}") from exc
    need_a, need_b = a.requires_grad, b.requires_grad

    def back(g):
        ga = gb = None
        if shared:
            g2 = g.reshape(-1, g.shape[-1])
            if need_a:
                ga = (g2 @ bd.T).reshape(ad.shape)
            if need_b:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g2
            return ga, gb
        if need_a:
            ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if need_b:
            gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(out, (a, b), back, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for a 2-D ``w`` shared across the leading dims of ``x``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or (b is not None and b.shape != (w.shape[1],)):
        raise ShapeMismatch(f"linear: x {x.shape}, w {w.shape}, b {None if b is None else b.shape}")
    xd, wd = x.data, w.data
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd
    if b is not None:
        out += b.data
    out = out.reshape(xd.shape[:-1] + (wd.shape[1],))
    need_x = x.requires_grad

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape) if need_x else None
        gw = x2.T @ g2
        return (gx, gw) if b is None else (gx, gw, g2.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, back, "linear")


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, d_k: float | None = None) -> Tensor:
    """``softmax(q k^T / sqrt(d_k)) v`` over the last two axes, as one node."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2] or q.shape[:-2] != k.shape[:-2] or k.shape[:-2] != v.shape[:-2]:
        raise ShapeMismatch(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    c = 1.0 / math.sqrt(q.shape[-1] if d_k is None else d_k)
    qd, kd, vd = q.data, k.data, v.data
    s = qd @ np.swapaxes(kd, -1, -2)
    s *= c
    s -= s.max(axis=-1, keepdims=True)
    p = np.exp(s, out=s)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ vd

    def back(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gp = g @ np.swapaxes(vd, -1, -2)
        gs = gp - (gp * p).sum(axis=-1, keepdims=True)
        gs *= p
        gs *= c
        gq = gs @ kd
        gk = np.swapaxes(gs, -1, -2) @ qd
        return gq, gk, gv

    return _make(out, (q, k, v), back, "attention")


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(f"reshape: {a.shape} -> {shape}") from exc
    src = a.shape
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    if sorted(ax % a.ndim if -a.ndim <= ax < a.ndim else -1 for ax in axes) != list(range(a.ndim)):
        raise InvalidAxis(f"transpose axes {axes} invalid for {a.ndim}-d tensor")
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    src = a.shape

    def back(g):
        full = np.zeros(src)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out), (a,), back, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeMismatch("concat of an empty list")
    axis = _axis_tuple(axis, tensors[0].ndim)[0]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    src = a.shape

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(out), (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, a.ndim)
    n = math.prod(a.shape[ax] for ax in axes)
    return scale(tsum(a, axes, keepdims), 1.0 / n)


# ---------------------------------------------------------------- nn primitives


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    (ax,) = _axis_tuple(axis, x.ndim)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=ax, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return _make(out, (x,), back, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    (ax,) = _axis_tuple(axis, x.ndim)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=ax, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=ax, keepdims=True),), "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(f"layer_norm: last dim {d}, gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data
    out = xhat * gd + beta.data
    lead = tuple(range(x.ndim - 1))

    def back(g):
        gx_hat = g * gd
        gx = rstd * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gamma, beta), back, "layer_norm")


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean of squared differences over every element."""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"mse_loss: {pred.shape} vs {target.shape}")
    diff = pred - target
    return mean(square(diff))


def cross_entropy(logits: Tensor, labels, weights=None, reduction: str = "mean") -> Tensor:
    """Per-row cross-entropy of ``logits`` (rows x classes) against integer labels.

    With ``weights`` each row's loss is multiplied by its weight before the
    reduction; ``"mean"`` divides by the row count, not by the weight sum.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatch(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    lp = log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    per_row = scale(tsum(mul(lp, onehot), axis=1), -1.0)
    if weights is not None:
        w = np.asarray(weights.data if isinstance(weights, Tensor) else weights, dtype=np.float64)
        if w.shape != per_row.shape:
            raise ShapeMismatch(f"cross_entropy: weights {w.shape} vs rows {per_row.shape}")
        per_row = mul(per_row, w)
    if reduction == "none":
        return per_row
    if reduction == "sum":
        return tsum(per_row)
    return mean(per_row)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    norm = sqrt(tsum(square(x), axis=axis, keepdims=True))
    return div(x, norm)


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"cosine_similarity: {a.shape} vs {b.shape}")
    return tsum(mul(l2_normalize(a, axis), l2_normalize(b, axis)), axis=axis)


# ---------------------------------------------------------------- differentiation


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Accumulates into ``.grad`` of every leaf with ``requires_grad`` and
    returns ``{node_id: grad}`` for those leaves. The tape is cleared.
    """
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    if not _TAPE.recording:
        raise TapeNotRecording("backward called while the tape is in inference mode")
    if not loss.requires_grad:
        raise TapeNotRecording("loss was not recorded on the tape (built in inference mode or from constants)")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape)}
    leaves: dict[int, Tensor] = {}
    produced = set()
    for node in reversed(_TAPE.nodes):
        produced.add(node.out.node_id)
        g = grads.pop(node.out.node_id, None)
        if g is None:
            continue
        pgrads = node.backward(g)
        for p, pg in zip(node.parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if p.node_id in grads:
                grads[p.node_id] = grads[p.node_id] + pg
            else:
                grads[p.node_id] = pg
            leaves.setdefault(p.node_id, p)
    out: dict[int, np.ndarray] = {}
    for nid, g in grads.items():
        t = leaves.get(nid)
        if t is None or nid in produced:
            continue
        g = np.asarray(g, dtype=np.float64, order="C")
        t.grad = g if t.grad is None else t.grad + g
        out[nid] = t.grad
    _TAPE.clear()
    return out


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, h: float = 1e-6) -> Tensor:
    """Central-difference gradient of a scalar function of ``x``."""
    base = x.data.astype(np.float64, copy=True)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    with inference_mode():
        for i in range(flat.size):
            orig = flat[i]
            try:
                flat[i] = orig + h
                fp = float(_scalar(f(Tensor._wrap(base.copy()))))
                flat[i] = orig - h
                fm = float(_scalar(f(Tensor._wrap(base.copy()))))
            except NonFiniteValue as exc:
                raise NonFiniteEvaluation(f"f is not finite around coordinate {i}") from exc
            finally:
                flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteEvaluation(f"f is not finite around coordinate {i}")
            gflat[i] = (fp - fm) / (2.0 * h)
    return Tensor._wrap(grad)


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        return v.item()
    return float(v)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b|| / (||a|| + ||b||)``; 0 when both vanish."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    den = np.linalg.norm(a) + np.linalg.norm(b)
    if den == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / den)
