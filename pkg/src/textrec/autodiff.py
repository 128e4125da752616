"""Reverse-mode automatic differentiation on numpy buffers.

A `Tensor` wraps a float array plus a same-shaped gradient buffer. Ops are
plain functions; while a `Tape` is active they record a backward rule, and
`backward()` replays the rules in reverse to fill the `.grad` buffers of
every reachable tensor with ``requires_grad``. Without an active tape the
same functions run as ordinary (and cheaper) numpy forward passes.

Storage is float32 by default; reductions accumulate in float64 before
casting back. A tape is meant for a single forward/backward cycle on one
thread and is discarded afterwards.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

# Additive-mask sentinel standing in for -inf. Anything <= MASK_THRESHOLD
# counts as masked; exact zeros are enforced after the softmax.
NEG_INF = -1e9
MASK_THRESHOLD = -1e8

LOG_EPS = 1e-12
LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class DegenerateRowError(ValueError):
    """A softmax slice had every position masked."""


class GraphError(RuntimeError):
    """Backward called on something that is not a recorded scalar."""


class Tensor:
    """n-dimensional float array with a paired gradient buffer."""

    __slots__ = ("values", "grad", "requires_grad")

    def __init__(self, values, requires_grad: bool = False, dtype=np.float32):
        self.values = np.asarray(values, dtype=dtype)
        self.grad = np.zeros_like(self.values)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.values.astype(dtype), requires_grad=self.requires_grad, dtype=dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar (delegates to the module-level ops)
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of operations for one forward pass.

    Usage::

        with Tape() as tape:
            loss = ...
        backward(loss, tape)
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
        self.nodes.append((out, inputs, backward_fn))

    def __enter__(self) -> "Tape":
        _push_tape(self)
        return self

    def __exit__(self, *exc) -> None:
        _pop_tape(self)

    def __len__(self) -> int:
        return len(self.nodes)


_TAPE_STACK: list[Tape] = []


def _push_tape(tape: Tape) -> None:
    _TAPE_STACK.append(tape)


def _pop_tape(tape: Tape) -> None:
    assert _TAPE_STACK and _TAPE_STACK[-1] is tape
    _TAPE_STACK.pop()


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _make_out(values: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result, recording the backward rule if a tape is active."""
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=requires, dtype=values.dtype)
    tape = active_tape()
    if tape is not None and requires:
        tape.record(out, tuple(inputs), backward_fn)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Fill `.grad` of every requires_grad tensor reachable from `loss`.

    Gradients accumulate: calling backward twice without zero_grad doubles
    them. Tensors cut off by `detach` receive nothing.
    """
    if loss.size != 1:
        raise GraphError(f"backward expects a scalar loss, got shape {loss.shape}")
    flow: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    touched: dict[int, Tensor] = {id(loss): loss}
    for out, inputs, backward_fn in reversed(tape.nodes):
        dout = flow.get(id(out))
        if dout is None:
            continue
        grads = backward_fn(dout)
        for tensor, g in zip(inputs, grads):
            if g is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in flow:
                flow[key] = flow[key] + g
            else:
                flow[key] = g
                touched[key] = tensor
    for key, tensor in touched.items():
        tensor.grad += flow[key].astype(tensor.grad.dtype, copy=False)


def detach(x: Tensor) -> Tensor:
    """Same values, no gradient path back to the producer."""
    return Tensor(x.values.copy(), requires_grad=False, dtype=x.dtype)


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _coerce(other, like: Tensor) -> Tensor:
    if isinstance(other, Tensor):
        return other
    return Tensor(np.asarray(other, dtype=like.dtype))


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    values = a.values + b.values

    def backward_fn(dout):
        return (_sum_to_shape(dout, a.shape), _sum_to_shape(dout, b.shape))

    return _make_out(values, (a, b), backward_fn)


def sub(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    values = a.values - b.values

    def backward_fn(dout):
        return (_sum_to_shape(dout, a.shape), -_sum_to_shape(dout, b.shape))

    return _make_out(values, (a, b), backward_fn)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return scale(a, float(b))
    b = _coerce(b, a)
    values = a.values * b.values
    a_vals, b_vals = a.values, b.values

    def backward_fn(dout):
        return (
            _sum_to_shape(dout * b_vals, a.shape),
            _sum_to_shape(dout * a_vals, b.shape),
        )

    return _make_out(values, (a, b), backward_fn)


def scale(a: Tensor, s: float) -> Tensor:
    values = a.values * a.dtype.type(s)

    def backward_fn(dout):
        return (dout * s,)

    return _make_out(values, (a,), backward_fn)


def relu(x: Tensor) -> Tensor:
    values = np.maximum(x.values, 0)
    positive = x.values > 0

    def backward_fn(dout):
        return (dout * positive,)

    return _make_out(values, (x,), backward_fn)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Smooth gating nonlinearity (tanh formulation)."""
    v = x.values
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    values = 0.5 * v * (1.0 + t)

    def backward_fn(dout):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v**2)
        local = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t**2) * dinner
        return (dout * local,)

    return _make_out(values.astype(v.dtype), (x,), backward_fn)


def sigmoid(x: Tensor) -> Tensor:
    v = x.values
    values = np.where(v >= 0, 1.0 / (1.0 + np.exp(-v)), np.exp(v) / (1.0 + np.exp(v)))
    values = values.astype(v.dtype)

    def backward_fn(dout):
        return (dout * values * (1.0 - values),)

    return _make_out(values, (x,), backward_fn)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old_shape = x.shape
    values = x.values.reshape(shape)

    def backward_fn(dout):
        return (dout.reshape(old_shape),)

    return _make_out(values, (x,), backward_fn)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    values = np.ascontiguousarray(x.values.transpose(axes))

    def backward_fn(dout):
        return (dout.transpose(inverse),)

    return _make_out(values, (x,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    values = np.concatenate([t.values for t in tensors], axis=axis)
    extents = [t.shape[axis] for t in tensors]
    splits = np.cumsum(extents)[:-1]

    def backward_fn(dout):
        return tuple(np.split(dout, splits, axis=axis))

    return _make_out(values, tuple(tensors), backward_fn)


def upsample_nearest(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Nearest-neighbour resize of the two trailing spatial dims (B,C,H,W)."""
    in_h, in_w = x.shape[-2], x.shape[-1]
    out_h, out_w = size
    rows = (np.arange(out_h) * in_h // out_h).astype(np.intp)
    cols = (np.arange(out_w) * in_w // out_w).astype(np.intp)
    values = x.values[..., rows, :][..., cols]

    def backward_fn(dout):
        dx = np.zeros(x.shape, dtype=dout.dtype)
        np.add.at(dx, (..., rows[:, None], cols[None, :]), dout)
        return (dx,)

    return _make_out(values, (x,), backward_fn)


# ---------------------------------------------------------------------------
# matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    values = np.matmul(a.values, b.values)
    a_vals, b_vals = a.values, b.values

    def backward_fn(dout):
        da = np.matmul(dout, np.swapaxes(b_vals, -1, -2))
        db = np.matmul(np.swapaxes(a_vals, -1, -2), dout)
        return (_sum_to_shape(da, a.shape), _sum_to_shape(db, b.shape))

    return _make_out(values, (a, b), backward_fn)


# ---------------------------------------------------------------------------
# softmax / normalization / loss


def masked_softmax(logits: Tensor, mask: Optional[np.ndarray] = None, on_empty: str = "error") -> Tensor:
    """Softmax over the last axis with an optional additive mask.

    Mask entries at or below ``MASK_THRESHOLD`` zero out their position
    exactly. A slice with every position masked raises
    `DegenerateRowError` unless ``on_empty="zeros"``, in which case that
    slice becomes an all-zero row (the caller's degenerate fallback).
    """
    z = logits.values
    if mask is not None:
        mask = np.asarray(mask, dtype=z.dtype)
        z = z + mask
        keep = np.broadcast_to(mask > MASK_THRESHOLD, z.shape)
    else:
        keep = None

    z64 = z.astype(np.float64)
    z64 = z64 - z64.max(axis=-1, keepdims=True)
    e = np.exp(z64)
    if keep is not None:
        e = e * keep
    denom = e.sum(axis=-1, keepdims=True)
    empty = denom == 0.0
    if empty.any():
        if on_empty == "error":
            raise DegenerateRowError("softmax slice has every position masked")
        denom = np.where(empty, 1.0, denom)
    probs = (e / denom).astype(logits.dtype)

    def backward_fn(dout):
        inner = (dout * probs).sum(axis=-1, keepdims=True)
        dz = probs * (dout - inner)
        return (_sum_to_shape(dz, logits.shape),)

    return _make_out(probs, (logits,), backward_fn)


def softmax(logits: Tensor) -> Tensor:
    return masked_softmax(logits, mask=None)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize each last-axis slice to zero mean / unit variance, then affine."""
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match feature dim {c}")
    v64 = x.values.astype(np.float64)
    mean = v64.mean(axis=-1, keepdims=True)
    var = v64.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((v64 - mean) * inv_std).astype(x.dtype)
    values = xhat * gain.values + bias.values

    def backward_fn(dout):
        lead_axes = tuple(range(dout.ndim - 1))
        dgain = (dout * xhat).sum(axis=lead_axes) if lead_axes else dout * xhat
        dbias = dout.sum(axis=lead_axes) if lead_axes else dout.copy()
        dxhat = (dout * gain.values).astype(np.float64)
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv_std * (dxhat - m1 - xhat * m2)
        return (dx.astype(x.dtype), dgain, dbias)

    return _make_out(values, (x, gain, bias), backward_fn)


def cross_entropy(
    pred: Tensor,
    targets: np.ndarray,
    loss_mask: np.ndarray,
    from_logits: bool = False,
) -> Tensor:
    """Mean -log p(target) over unmasked positions.

    `pred` has shape (..., c); `targets` and `loss_mask` have the leading
    shape. With ``from_logits`` a numerically-stable log-softmax is applied
    first; otherwise entries are treated as probabilities and clamped to
    [LOG_EPS, 1].
    """
    targets = np.asarray(targets, dtype=np.intp)
    loss_mask = np.asarray(loss_mask, dtype=bool)
    if pred.shape[:-1] != targets.shape or targets.shape != loss_mask.shape:
        raise ShapeError(f"cross_entropy shapes disagree: pred {pred.shape}, targets {targets.shape}, mask {loss_mask.shape}")
    n = int(loss_mask.sum())
    if n == 0:
        raise ValueError("cross_entropy: every position is masked out")
    onehot_index = tuple(np.indices(targets.shape)) + (targets,)

    if from_logits:
        z = pred.values.astype(np.float64)
        z = z - z.max(axis=-1, keepdims=True)
        log_probs = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        picked = log_probs[onehot_index]
        value = -(picked * loss_mask).sum() / n

        def backward_fn(dout):
            p = np.exp(log_probs)
            p[onehot_index] -= 1.0
            p *= (loss_mask / n)[..., None]
            return ((p * dout).astype(pred.dtype),)

    else:
        clamped = np.clip(pred.values.astype(np.float64), LOG_EPS, 1.0)
        picked = np.log(clamped[onehot_index])
        value = -(picked * loss_mask).sum() / n
        inside = (pred.values > LOG_EPS) & (pred.values < 1.0)

        def backward_fn(dout):
            dp = np.zeros(pred.shape, dtype=np.float64)
            dp[onehot_index] = -(loss_mask / n) / clamped[onehot_index]
            dp *= inside
            return ((dp * dout).astype(pred.dtype),)

    out_values = np.asarray(value, dtype=pred.dtype)
    return _make_out(out_values, (pred,), backward_fn)


def soft_cross_entropy(logits: Tensor, target_probs: np.ndarray, loss_mask: np.ndarray) -> Tensor:
    """Mean -sum_c q_c log softmax(logits)_c over unmasked positions.

    With a one-hot `target_probs` this equals `cross_entropy(from_logits=True)`.
    """
    q = np.asarray(target_probs, dtype=np.float64)
    loss_mask = np.asarray(loss_mask, dtype=bool)
    if logits.shape != q.shape or logits.shape[:-1] != loss_mask.shape:
        raise ShapeError(f"soft_cross_entropy shapes disagree: logits {logits.shape}, targets {q.shape}, mask {loss_mask.shape}")
    n = int(loss_mask.sum())
    if n == 0:
        raise ValueError("soft_cross_entropy: every position is masked out")
    z = logits.values.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    value = -((q * log_probs).sum(axis=-1) * loss_mask).sum() / n

    def backward_fn(dout):
        p = np.exp(log_probs)
        dz = (p * q.sum(axis=-1, keepdims=True) - q) * (loss_mask / n)[..., None]
        return ((dz * dout).astype(logits.dtype),)

    out_values = np.asarray(value, dtype=logits.dtype)
    return _make_out(out_values, (logits,), backward_fn)


def reduce_sum(x: Tensor) -> Tensor:
    value = np.asarray(x.values.sum(dtype=np.float64), dtype=x.dtype)

    def backward_fn(dout):
        return (np.broadcast_to(dout, x.shape).astype(x.dtype),)

    return _make_out(value, (x,), backward_fn)


def reduce_mean(x: Tensor) -> Tensor:
    n = x.size
    value = np.asarray(x.values.sum(dtype=np.float64) / n, dtype=x.dtype)

    def backward_fn(dout):
        return ((np.broadcast_to(dout, x.shape) / n).astype(x.dtype),)

    return _make_out(value, (x,), backward_fn)


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (B,Cin,H,W) with (Cout,Cin,kh,kw)."""
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride {stride} or padding {padding}")
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d operands, got {x.shape} and {kernel.shape}")
    batch, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"conv2d kernel {kernel.shape} exceeds padded input {x.shape} (padding={padding})")
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1

    if padding:
        xp = np.pad(x.values, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.values
    cols = np.empty((batch, cin, kh, kw, out_h, out_w), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride]
    cols2 = cols.reshape(batch, cin * kh * kw, out_h * out_w)
    kflat = kernel.values.reshape(cout, cin * kh * kw)
    out = np.matmul(kflat, cols2).reshape(batch, cout, out_h, out_w)
    if bias is not None:
        out = out + bias.values.reshape(1, cout, 1, 1)

    def backward_fn(dout):
        dflat = dout.reshape(batch, cout, out_h * out_w)
        dkernel = np.einsum("bci,bki->ck", dflat, cols2).reshape(kernel.shape)
        dcols = np.matmul(kflat.T, dflat).reshape(batch, cin, kh, kw, out_h, out_w)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += dcols[:, :, i, j]
        dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        if bias is not None:
            dbias = dout.sum(axis=(0, 2, 3))
            return (dx, dkernel, dbias)
        return (dx, dkernel)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _make_out(out, inputs, backward_fn)


# ---------------------------------------------------------------------------
# positional encoding


def positional_encoding(length: int, dim: int, dtype=np.float32) -> Tensor:
    """Deterministic sinusoidal position table: sin on even channels, cos on odd."""
    if dim % 2 != 0:
        raise ValueError(f"positional_encoding needs an even dim, got {dim}")
    positions = np.arange(length, dtype=np.float64)[:, None]
    channels = np.arange(0, dim, 2, dtype=np.float64)[None, :]
    angles = positions / np.power(10000.0, channels / dim)
    table = np.empty((length, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return Tensor(table.astype(dtype))


# ---------------------------------------------------------------------------
# gradient checking

def finite_difference_check(
    build: Callable[[list[Tensor]], Tensor],
    tensors: list[Tensor],
    h: float = 1e-3,
    rtol: float = 1e-4,
    atol: float = 1e-6,
) -> float:
    """Compare analytic gradients against central finite differences.

    `build` maps the given tensors to a scalar Tensor. Everything should be
    float64 for the stated tolerances to be meaningful. Returns the largest
    relative error seen; raises AssertionError when |a - n| > atol + rtol|n|
    for any element.
    """
    with Tape() as tape:
        loss = build(tensors)
    for t in tensors:
        t.zero_grad()
    backward(loss, tape)
    analytic = [t.grad.copy() for t in tensors]

    worst = 0.0
    for idx, t in enumerate(tensors):
        flat = t.values.reshape(-1)
        numeric = np.zeros_like(flat)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = build(tensors).item()
            flat[k] = orig - h
            down = build(tensors).item()
            flat[k] = orig
            numeric[k] = (up - down) / (2 * h)
        numeric = numeric.reshape(t.shape)
        a = analytic[idx]
        err = np.abs(a - numeric)
        bound = atol + rtol * np.abs(numeric)
        if np.any(err > bound):
            worst_idx = np.unravel_index(np.argmax(err - bound), err.shape)
            raise AssertionError(
                f"gradient mismatch on tensor {idx} at {worst_idx}: analytic {a[worst_idx]}, numeric {numeric[worst_idx]}"
            )
        denom = np.maximum(np.abs(numeric), 1.0)
        worst = max(worst, float((err / denom).max()) if err.size else 0.0)
    return worst
