"""Dense float64 tensors with a tape-based reverse-mode autodiff.

Every operation that touches a tensor with ``requires_grad`` records itself on
the tape that is active in the current thread::

    with Tape() as tape:
        loss = reduce_sum(mul(x, x))
    tape.backward(loss)     # or backward(loss)
    x.grad

Outputs are checked for NaN/Inf and the offending op raises immediately.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "Tape", "ShapeError", "NonFiniteError", "TapeError",
    "tensor", "zeros_like", "forward_primitive", "backward",
    "add", "mul", "scalar_mul", "matmul", "conv2d", "relu", "reshape",
    "global_avg_pool", "softmax_cross_entropy", "hinge_loss", "reduce_sum", "abs_",
    "PRIMITIVES",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor constructed from non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar over the primitives
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __sub__(self, other):
        return add(self, scalar_mul(_wrap(other), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros_like(x: Tensor) -> Tensor:
    return Tensor(np.zeros_like(x.data))


_local = threading.local()


def _current_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive applications, consumed by one backward pass."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeError("tape already consumed by backward")
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        out.requires_grad = True
        out._tape = self
        self.records.append((out, inputs, vjp))

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise TapeError("backward called twice on the same tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        if not self.records:
            raise TapeError("backward: tape is empty")
        produced = {id(out) for out, _, _ in self.records}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, inputs, vjp in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = vjp(g)
            for inp, gi in zip(inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is not None:
                leaf.grad = np.asarray(g, dtype=np.float64).reshape(leaf.shape)
        self.records.clear()
        self.consumed = True


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf that ``loss`` depends on."""
    if loss._tape is None:
        raise TapeError("loss was not recorded on any tape")
    loss._tape.backward(loss)


def _finish(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: non-finite output")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out._tape = None
    if any(t.requires_grad for t in inputs):
        tape = _current_tape()
        if tape is not None:
            tape.record(out, inputs, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---- primitives ------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _finish("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _finish("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _finish("scalar_mul", a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _finish("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    src = a.shape
    return _finish("reshape", out, (a,), lambda g: (g.reshape(src),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _finish("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def abs_(a: Tensor) -> Tensor:
    # subgradient at 0 is 0
    sgn = np.sign(a.data)
    return _finish("abs", np.abs(a.data), (a,), lambda g: (g * sgn,))


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    src = a.shape
    if axis is None:
        out = np.asarray(a.data.sum())
        return _finish("reduce_sum", out, (a,), lambda g: (np.broadcast_to(g, src).copy(),))
    out = a.data.sum(axis=axis)
    return _finish("reduce_sum", out, (a,),
                   lambda g: (np.broadcast_to(np.expand_dims(g, axis), src).copy(),))


def global_avg_pool(a: Tensor) -> Tensor:
    if a.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected (N, C, H, W), got {a.shape}")
    n, c, h, w = a.shape
    scale = 1.0 / (h * w)

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None] * scale, (n, c, h, w)).copy(),)

    return _finish("global_avg_pool", a.data.mean(axis=(2, 3)), (a,), vjp)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> tuple[np.ndarray, int, int]:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (N, C, H, W) input with (O, C, kh, kw) kernels."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, ck, kh, kw = w.shape
    if c != ck:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ck}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride {stride} / padding {padding}")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}")
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    wm = w.data.reshape(o, -1)
    out = (cols @ wm.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    need_x = x.requires_grad

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(w.shape)
        gx = None
        if need_x:
            dcols = (g2 @ wm).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
        return gx, gw

    return _finish("conv2d", np.ascontiguousarray(out), (x, w), vjp)


def _check_logits(op: str, logits: Tensor, labels: np.ndarray) -> np.ndarray:
    if logits.data.ndim != 2:
        raise ShapeError(f"{op}: expected (N, K) scores, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != logits.shape[0]:
        raise ShapeError(f"{op}: {logits.shape[0]} score rows but {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeError(f"{op}: labels outside [0, {logits.shape[1]})")
    return labels


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    labels = _check_logits("softmax_cross_entropy", logits, labels)
    z = logits.data
    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    per = logsum - shifted[np.arange(n), labels]
    scale = 1.0 / n if reduction == "mean" else 1.0
    probs = np.exp(shifted - logsum[:, None])

    def vjp(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (g * scale),)

    return _finish("softmax_cross_entropy", np.asarray(per.sum() * scale), (logits,), vjp)


def hinge_loss(scores: Tensor, labels, margin: float = 1.0, reduction: str = "mean") -> Tensor:
    """Multiclass hinge: sum over wrong classes j of max(0, margin + s_j - s_y)."""
    labels = _check_logits("hinge_loss", scores, labels)
    s = scores.data
    n = s.shape[0]
    rows = np.arange(n)
    viol = margin + s - s[rows, labels][:, None]
    viol[rows, labels] = 0.0
    active = viol > 0
    scale = 1.0 / n if reduction == "mean" else 1.0

    def vjp(g):
        d = active.astype(np.float64)
        d[rows, labels] = -d.sum(axis=1)
        return (d * (g * scale),)

    return _finish("hinge_loss", np.asarray(np.where(active, viol, 0.0).sum() * scale), (scores,), vjp)


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "mul": mul,
    "scalar-mul": scalar_mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "reshape": reshape,
    "global-average-pool": global_avg_pool,
    "softmax-cross-entropy": softmax_cross_entropy,
    "hinge-loss": hinge_loss,
    "reduce-sum": reduce_sum,
    "abs": abs_,
}


def forward_primitive(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Apply primitive ``kind`` by name; non-tensor arguments go in ``attrs``."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **attrs)
