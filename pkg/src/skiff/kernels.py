"""Dense tensor kernels with hand-derived backward passes.

Forward math is plain numpy over float32 (float64 during gradient
checking). Matrix products accumulate in float64 and round once to the
input precision, which makes results independent of BLAS blocking order
and bit-identical to a naive left-to-right loop oracle.

When a GradTape is active, every kernel whose output depends on a tensor
that requires gradients appends a record holding the inputs, the output
and a closure from output gradient to input gradients. backward() replays
the records in reverse forward order and accumulates into Tensor.grad.
"""

from __future__ import annotations

import math
import threading

import numpy as np

from .errors import ConfigError, NumericError, ShapeError, StateError

NEG_INF = -1.0e9

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = []
        _local.tapes = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A numpy array plus gradient bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


class _Record:
    __slots__ = ("name", "inputs", "output", "backward")

    def __init__(self, name, inputs, output, backward):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward = backward


class GradTape:
    """Records kernel applications for reverse-order replay.

    backward_ops counts the records actually executed during backward(),
    so a model with frozen submodules shows a strictly smaller count than
    the same model fully trainable.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._done = False
        self.backward_ops = 0

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise StateError("gradient tapes must be exited in LIFO order")
        stack.pop()

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        if self._done:
            raise StateError("backward() already ran on this tape")
        if loss.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        self._done = True
        loss.grad = np.ones_like(loss.data)
        for rec in reversed(self._records):
            out_grad = rec.output.grad
            if out_grad is None:
                continue
            self.backward_ops += 1
            grads = rec.backward(out_grad)
            for inp, g in zip(rec.inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                if g.shape != inp.data.shape:
                    raise ShapeError(
                        f"{rec.name}: gradient shape {g.shape} does not match "
                        f"input shape {inp.data.shape}"
                    )
                inp.grad = g if inp.grad is None else inp.grad + g


def _emit(name: str, inputs: tuple[Tensor, ...], out: Tensor, backward) -> Tensor:
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape._records.append(_Record(name, inputs, out, backward))
    return out


def _requires(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def _as_tensor(x, like) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if isinstance(like, Tensor) else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _accum_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product accumulated in float64, rounded to the input dtype.

    The single rounding at the end makes the result equal, bit for bit, to
    a naive loop that sums left to right in float64, so it does not depend
    on how the BLAS blocks the reduction.
    """
    out64 = np.matmul(a.astype(np.float64, copy=False), b.astype(np.float64, copy=False))
    dtype = np.result_type(a.dtype, b.dtype)
    return out64.astype(dtype, copy=False)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = Tensor(_accum_matmul(a.data, b.data), requires_grad=_requires(a, b))
    a_data, b_data = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(_accum_matmul(g, b_data.swapaxes(-1, -2)), a_data.shape)
        if b.requires_grad:
            gb = _unbroadcast(_accum_matmul(a_data.swapaxes(-1, -2), g), b_data.shape)
        return ga, gb

    return _emit("matmul", (a, b), out, backward)


def add(a, b) -> Tensor:
    b = _as_tensor(b, a)
    a = _as_tensor(a, b)
    out = Tensor(a.data + b.data, requires_grad=_requires(a, b))

    def backward(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _emit("add", (a, b), out, backward)


def sub(a, b) -> Tensor:
    b = _as_tensor(b, a)
    a = _as_tensor(a, b)
    out = Tensor(a.data - b.data, requires_grad=_requires(a, b))

    def backward(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(-g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _emit("sub", (a, b), out, backward)


def mul(a, b) -> Tensor:
    b = _as_tensor(b, a)
    a = _as_tensor(a, b)
    out = Tensor(a.data * b.data, requires_grad=_requires(a, b))
    a_data, b_data = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * b_data, a_data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a_data, b_data.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", (a, b), out, backward)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, requires_grad=a.requires_grad)
    return _emit("neg", (a,), out, lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0), requires_grad=a.requires_grad)
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _emit("relu", (a,), out, backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Split on sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = Tensor(s, requires_grad=a.requires_grad)

    def backward(g):
        return (g * s * (1.0 - s),)

    return _emit("sigmoid", (a,), out, backward)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, shifted by the row max for stability."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s, requires_grad=a.requires_grad)

    def backward(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _emit("softmax", (a,), out, backward)


def log_softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    ls = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = Tensor(ls, requires_grad=a.requires_grad)

    def backward(g):
        return (g - np.exp(ls) * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax", (a,), out, backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data, requires_grad=_requires(x, gain, bias))
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx = ggain = gbias = None
        if gain.requires_grad:
            ggain = (g * xhat).sum(axis=lead)
        if bias.requires_grad:
            gbias = g.sum(axis=lead)
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            gx = inv * (dxhat - m1 - xhat * m2)
        return gx, ggain, gbias

    return _emit("layer_norm", (x, gain, bias), out, backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of an embedding table by integer id."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"ids out of range [0, {table.shape[0]}) for embedding table"
        )
    out = Tensor(table.data[ids], requires_grad=table.requires_grad)

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _emit("embedding", (table,), out, backward)


def concat(parts: list[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis),
                 requires_grad=_requires(*parts))
    sizes = [p.data.shape[axis] for p in parts]

    def backward(g):
        splits = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        return tuple(s if p.requires_grad else None for p, s in zip(parts, splits))

    return _emit("concat", tuple(parts), out, backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape), requires_grad=a.requires_grad)
    orig = a.data.shape

    def backward(g):
        return (g.reshape(orig),)

    return _emit("reshape", (a,), out, backward)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    out = Tensor(a.data.transpose(axes), requires_grad=a.requires_grad)
    if axes is None:
        inverse = None
    else:
        inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return _emit("transpose", (a,), out, backward)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start, stop) along one axis."""
    n = a.shape[axis]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice [{start}:{stop}) out of range for axis extent {n}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = Tensor(a.data[index], requires_grad=a.requires_grad)

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[index] = g
        return (ga,)

    return _emit("slice_axis", (a,), out, backward)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), requires_grad=a.requires_grad)
    shape = a.data.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("reduce_sum", (a,), out, backward)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims), requires_grad=a.requires_grad)
    shape = a.data.shape
    count = a.data.size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape) / count,)

    return _emit("reduce_mean", (a,), out, backward)


def gather_last(a: Tensor, ids: np.ndarray) -> Tensor:
    """Pick one entry along the last axis per leading position."""
    ids = np.asarray(ids)
    if ids.shape != a.shape[:-1]:
        raise ShapeError(f"gather_last ids shape {ids.shape} must equal {a.shape[:-1]}")
    picked = np.take_along_axis(a.data, ids[..., None], axis=-1)[..., 0]
    out = Tensor(picked, requires_grad=a.requires_grad)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, ids[..., None], g[..., None], axis=-1)
        return (ga,)

    return _emit("gather_last", (a,), out, backward)


def masked_max(x: Tensor, keep: np.ndarray, axis: int) -> Tensor:
    """Max over one axis, considering only positions where keep is True.

    The gradient flows to the first position attaining the max, matching
    numpy argmax tie handling.
    """
    keep = np.broadcast_to(np.asarray(keep, dtype=bool), x.shape)
    masked = np.where(keep, x.data, -np.inf)
    values = masked.max(axis=axis)
    if np.isneginf(values).any():
        raise ShapeError("masked_max: some slice has no unmasked position")
    idx = masked.argmax(axis=axis)
    out = Tensor(values, requires_grad=x.requires_grad)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _emit("masked_max", (x,), out, backward)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy between logits and 0/1 targets."""
    t = np.asarray(targets, dtype=logits.data.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"targets shape {t.shape} must equal logits shape {logits.shape}")
    z = logits.data
    # max(z, 0) - z*t + log(1 + exp(-|z|)) is exact and never overflows.
    elem = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = Tensor(np.asarray(elem.mean(), dtype=z.dtype), requires_grad=logits.requires_grad)
    n = z.size

    def backward(g):
        return ((_sigmoid(z) - t) * (g / n),)

    return _emit("bce_with_logits", (logits,), out, backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w.T + b with w stored as (out_features, in_features)."""
    y = matmul(x, transpose(w))
    if b is not None:
        y = add(y, b)
    return y


def causal_mask(n: int, dtype=np.float32) -> np.ndarray:
    """Additive (n, n) mask: NEG_INF above the diagonal, 0 elsewhere."""
    mask = np.zeros((n, n), dtype=dtype)
    mask[np.triu_indices(n, k=1)] = NEG_INF
    return mask


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(B, L, d) -> (B, heads, L, d // heads)."""
    b, length, d = x.shape
    if d % heads != 0:
        raise ConfigError(f"model width {d} is not divisible by {heads} heads")
    x = reshape(x, (b, length, heads, d // heads))
    return transpose(x, (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """(B, heads, L, dh) -> (B, L, heads * dh)."""
    b, heads, length, dh = x.shape
    x = transpose(x, (0, 2, 1, 3))
    return reshape(x, (b, length, heads * dh))


def attention_core(qh: Tensor, kh: Tensor, vh: Tensor, mask: np.ndarray | None) -> Tensor:
    """Scaled dot-product attention over split heads (B, H, L, dh)."""
    dh = qh.shape[-1]
    scores = matmul(qh, transpose(kh, (0, 1, 3, 2)))
    scores = mul(scores, 1.0 / math.sqrt(dh))
    if mask is not None:
        scores = add(scores, mask.astype(scores.dtype, copy=False))
    return matmul(softmax(scores), vh)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                         wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
                         mask=None) -> Tensor:
    """Multi-head attention with projections and output projection inside.

    q, k, v are (L, d) or (B, L, d); the four weights are (d, d) and carry
    no bias terms. mask is None, the string "causal", or an additive array
    broadcastable to the score shape (B, heads, Lq, Lk).
    """
    squeeze = q.ndim == 2
    if squeeze:
        q = reshape(q, (1,) + q.shape)
        k = reshape(k, (1,) + k.shape)
        v = reshape(v, (1,) + v.shape)
    if isinstance(mask, str):
        if mask != "causal":
            raise ConfigError(f"unknown attention mask kind: {mask!r}")
        if q.shape[1] != k.shape[1]:
            raise ShapeError("causal mask needs equal query and key lengths")
        mask = causal_mask(q.shape[1], dtype=q.data.dtype)
    qh = split_heads(linear(q, wq), heads)
    kh = split_heads(linear(k, wk), heads)
    vh = split_heads(linear(v, wv), heads)
    ctx = merge_heads(attention_core(qh, kh, vh, mask))
    out = linear(ctx, wo)
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out


def grad_check(f, point: Tensor, epsilon: float = 1e-4) -> float:
    """Compare tape gradients of a scalar function against central differences.

    Everything runs in float64. Returns the worst relative error
    |analytic - numeric| / max(1, |analytic|) over all coordinates.
    """
    if not (1e-5 <= epsilon <= 1e-3):
        raise ConfigError(f"epsilon {epsilon} outside [1e-5, 1e-3]")
    x = Tensor(point.data.astype(np.float64), requires_grad=True)
    with GradTape() as tape:
        out = f(x)
        if out.size != 1:
            raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise NumericError("grad_check: function value is not finite")
    tape.backward(out)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
    if not np.isfinite(analytic).all():
        raise NumericError("grad_check: analytic gradient is not finite")

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        for sign, slot in ((1.0, 0), (-1.0, 1)):
            bumped = flat.copy()
            bumped[i] += sign * epsilon
            val = f(Tensor(bumped.reshape(x.data.shape))).item()
            if not math.isfinite(val):
                raise NumericError("grad_check: perturbed function value is not finite")
            if slot == 0:
                plus = val
            else:
                minus = val
        numeric[i] = (plus - minus) / (2.0 * epsilon)
    a = analytic.reshape(-1)
    rel = np.abs(a - numeric) / np.maximum(1.0, np.abs(a))
    return float(rel.max()) if rel.size else 0.0
