"""Reverse-mode automatic differentiation on dense float64 numpy arrays.

A Tensor wraps an ndarray plus an optional gradient slot.  Operations are
plain module functions; while a Tape is active they append records that
backward() later replays in reverse.  With no active tape every call is a
pure forward evaluation, which is how inference and the numeric side of
check_gradients run.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


_TAPE_STACK: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def grad_array(self) -> np.ndarray:
        """Gradient as an array, zeros if nothing reached this tensor."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return mul(self, _wrap(-1.0))


def _wrap(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


class Tape:
    """Ordered record of executed ops for one forward pass."""

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._records)


def record(out: Tensor, inputs: tuple[Tensor, ...], grad_fn) -> None:
    """Append one op record to the active tape, if recording applies.

    grad_fn maps the output gradient to a tuple of per-input gradients
    (None for inputs that need none).  Exposed so sibling modules can
    define primitives with custom backward rules.
    """
    if _TAPE_STACK and out.requires_grad:
        _TAPE_STACK[-1]._records.append((out, inputs, grad_fn))


def _result(data, inputs) -> Tensor:
    needs = any(t.requires_grad for t in inputs if t is not None)
    return Tensor(data, requires_grad=needs)


def backward(loss: Tensor, tape: Tape) -> None:
    """Replay the tape in reverse, accumulating gradients additively.

    Every requires_grad tensor that participated in the recorded forward
    ends up with a grad array; those off the path from loss keep zeros.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    seen: set[int] = set()
    for out, inputs, _ in tape._records:
        for t in (out, *inputs):
            if t is not None and t.requires_grad and id(t) not in seen:
                seen.add(id(t))
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad = loss.grad + np.ones_like(loss.data)
    for out, inputs, grad_fn in reversed(tape._records):
        g = out.grad
        if g is None or not np.any(g):
            continue
        grads = grad_fn(g)
        for t, dg in zip(inputs, grads):
            if t is None or dg is None or not t.requires_grad:
                continue
            t.grad += dg


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise arithmetic with broadcasting


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to the given operand shape (inverse of broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "add")
    out = _result(a.data + b.data, (a, b))
    record(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "sub")
    out = _result(a.data - b.data, (a, b))
    record(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "mul")
    out = _result(a.data * b.data, (a, b))

    def grad_fn(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    record(out, (a, b), grad_fn)
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "div")
    out = _result(a.data / b.data, (a, b))

    def grad_fn(g):
        ga = _unbroadcast(g / b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape) if b.requires_grad else None
        return ga, gb

    record(out, (a, b), grad_fn)
    return out


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def relu(x: Tensor) -> Tensor:
    out = _result(np.maximum(x.data, 0.0), (x,))
    mask = x.data > 0.0
    record(out, (x,), lambda g: (g * mask,))
    return out


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(x.data > 0.0, 1.0, slope)
    out = _result(x.data * factor, (x,))
    record(out, (x,), lambda g: (g * factor,))
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    out = _result(s, (x,))
    record(out, (x,), lambda g: (g * s * (1.0 - s),))
    return out


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    pos = z >= 0
    s = np.empty_like(z)
    s[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    s[~pos] = e / (1.0 + e)
    return s


def log_sigmoid(x: Tensor) -> Tensor:
    # log(sigmoid(z)) = -softplus(-z), computed without overflow
    z = x.data
    val = np.where(z >= 0, -np.log1p(np.exp(-np.abs(z))), z - np.log1p(np.exp(-np.abs(z))))
    out = _result(val, (x,))
    s = _stable_sigmoid(z)
    record(out, (x,), lambda g: (g * (1.0 - s),))
    return out


def square(x: Tensor) -> Tensor:
    out = _result(x.data * x.data, (x,))
    record(out, (x,), lambda g: (g * 2.0 * x.data,))
    return out


def sqrt(x: Tensor) -> Tensor:
    r = np.sqrt(x.data)
    out = _result(r, (x,))
    record(out, (x,), lambda g: (g * 0.5 / r,))
    return out


def absolute(x: Tensor) -> Tensor:
    out = _result(np.abs(x.data), (x,))
    sign = np.sign(x.data)
    record(out, (x,), lambda g: (g * sign,))
    return out


# ---------------------------------------------------------------------------
# reductions and shape plumbing


def sum_all(x: Tensor) -> Tensor:
    out = _result(np.asarray(x.data.sum()), (x,))
    record(out, (x,), lambda g: (np.broadcast_to(g, x.data.shape).copy(),))
    return out


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = _result(np.asarray(x.data.mean()), (x,))
    record(out, (x,), lambda g: (np.broadcast_to(g / n, x.data.shape).copy(),))
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = _result(x.data.reshape(shape), (x,))
    record(out, (x,), lambda g: (g.reshape(x.data.shape),))
    return out


def stop_gradient(x: Tensor) -> Tensor:
    """Forward identity that blocks gradient flow."""
    return Tensor(x.data.copy())


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError(f"concat_channels needs 4-d inputs, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise ShapeError(f"concat_channels: shapes {a.data.shape} and {b.data.shape} disagree off-channel")
    ca = a.data.shape[1]
    out = _result(np.concatenate([a.data, b.data], axis=1), (a, b))
    record(out, (a, b), lambda g: (g[:, :ca].copy(), g[:, ca:].copy()))
    return out


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"slice_channels needs a 4-d input, got {x.data.shape}")
    if not (0 <= start < stop <= x.data.shape[1]):
        raise ValueError(f"slice_channels: bad range [{start}:{stop}] for {x.data.shape[1]} channels")
    out = _result(x.data[:, start:stop].copy(), (x,))

    def grad_fn(g):
        dx = np.zeros_like(x.data)
        dx[:, start:stop] = g
        return (dx,)

    record(out, (x,), grad_fn)
    return out


# ---------------------------------------------------------------------------
# softmax


def softmax_vec(x: Tensor) -> Tensor:
    """Softmax over a 1-d vector."""
    if x.data.ndim != 1 or x.data.size == 0:
        raise ValueError(f"softmax_vec needs a non-empty 1-d input, got shape {x.data.shape}")
    shifted = x.data - x.data.max()
    e = np.exp(shifted)
    s = e / e.sum()
    out = _result(s, (x,))
    record(out, (x,), lambda g: (s * (g - float(np.dot(g, s))),))
    return out


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax along the channel axis of a (b, c, h, w) tensor."""
    if x.data.ndim != 4:
        raise ShapeError(f"softmax_channels needs a 4-d input, got {x.data.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)
    out = _result(s, (x,))
    record(out, (x,), lambda g: (s * (g - (g * s).sum(axis=1, keepdims=True)),))
    return out


# ---------------------------------------------------------------------------
# spatial ops


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    b, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = windows.shape[2], windows.shape[3]
    # (b, oh, ow, c*k*k)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b, oh, ow, c * k * k)
    return cols, oh, ow


def _col2im(cols: np.ndarray, xshape, k: int, stride: int, pad: int) -> np.ndarray:
    b, c, h, w = xshape
    oh, ow = cols.shape[1], cols.shape[2]
    patches = cols.reshape(b, oh, ow, c, k, k)
    padded = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    for i in range(k):
        for j in range(k):
            padded[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += (
                patches[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if pad:
        return padded[:, :, pad:-pad, pad:-pad]
    return padded


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation with zero padding.

    x (b, c_in, h, w), weight (c_out, c_in, k, k), bias (c_out,) or None.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d needs 4-d input and kernel, got {x.data.shape} and {weight.data.shape}")
    b, c_in, h, w = x.data.shape
    c_out, kc, k, k2 = weight.data.shape
    if kc != c_in:
        raise ShapeError(f"conv2d: kernel expects {kc} channels, input has {c_in} (input {x.data.shape}, kernel {weight.data.shape})")
    if k != k2:
        raise ShapeError(f"conv2d: kernel must be square, got {weight.data.shape}")
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ShapeError(f"conv2d: kernel {k}x{k} exceeds padded input {h + 2 * pad}x{w + 2 * pad}")
    cols, oh, ow = _im2col(x.data, k, stride, pad)
    wmat = weight.data.reshape(c_out, c_in * k * k)
    res = cols @ wmat.T  # (b, oh, ow, c_out)
    if bias is not None:
        res = res + bias.data
    out_data = res.transpose(0, 3, 1, 2)
    inputs = (x, weight, bias) if bias is not None else (x, weight)
    out = _result(out_data, inputs)

    def grad_fn(g):
        gm = g.transpose(0, 2, 3, 1)  # (b, oh, ow, c_out)
        dx = dw = db = None
        if x.requires_grad:
            dcols = gm @ wmat  # (b, oh, ow, c_in*k*k)
            dx = _col2im(dcols, x.data.shape, k, stride, pad)
        if weight.requires_grad:
            dw = np.einsum("bijo,bijf->of", gm, cols).reshape(weight.data.shape)
        if bias is not None and bias.requires_grad:
            db = gm.sum(axis=(0, 1, 2))
        return (dx, dw, db) if bias is not None else (dx, dw)

    record(out, inputs, grad_fn)
    return out


def avg_pool2d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping mean pooling; spatial dims must divide by window."""
    if x.data.ndim != 4:
        raise ShapeError(f"avg_pool2d needs a 4-d input, got {x.data.shape}")
    b, c, h, w = x.data.shape
    if h % window or w % window:
        raise ShapeError(f"avg_pool2d: window {window} does not divide spatial dims of {x.data.shape}")
    oh, ow = h // window, w // window
    out_data = x.data.reshape(b, c, oh, window, ow, window).mean(axis=(3, 5))
    out = _result(out_data, (x,))
    inv = 1.0 / (window * window)

    def grad_fn(g):
        dx = np.repeat(np.repeat(g * inv, window, axis=2), window, axis=3)
        return (dx,)

    record(out, (x,), grad_fn)
    return out


def upsample_nearest(x: Tensor, scale: int) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_nearest needs a 4-d input, got {x.data.shape}")
    out = _result(np.repeat(np.repeat(x.data, scale, axis=2), scale, axis=3), (x,))
    b, c, h, w = x.data.shape

    def grad_fn(g):
        return (g.reshape(b, c, h, scale, w, scale).sum(axis=(3, 5)),)

    record(out, (x,), grad_fn)
    return out


def unfold(x: Tensor, patch: int) -> Tensor:
    """Split (b, c, h, w) into non-overlapping patches: (b*gh*gw, c, patch, patch).

    Patch order is row-major over the grid, batch-major overall, so
    fold() with the same grid restores the input exactly.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"unfold needs a 4-d input, got {x.data.shape}")
    b, c, h, w = x.data.shape
    if h % patch or w % patch:
        raise ShapeError(f"unfold: patch {patch} does not divide spatial dims of {x.data.shape}")
    gh, gw = h // patch, w // patch
    blocks = x.data.reshape(b, c, gh, patch, gw, patch)
    out_data = blocks.transpose(0, 2, 4, 1, 3, 5).reshape(b * gh * gw, c, patch, patch)
    out = _result(out_data, (x,))

    def grad_fn(g):
        gb = g.reshape(b, gh, gw, c, patch, patch).transpose(0, 3, 1, 4, 2, 5)
        return (gb.reshape(b, c, h, w),)

    record(out, (x,), grad_fn)
    return out


def fold(patches: Tensor, grid_h: int, grid_w: int) -> Tensor:
    """Inverse of unfold for the same grid: (b*gh*gw, c, p, p) -> (b, c, gh*p, gw*p)."""
    if patches.data.ndim != 4:
        raise ShapeError(f"fold needs a 4-d input, got {patches.data.shape}")
    q, c, p, p2 = patches.data.shape
    if p != p2:
        raise ShapeError(f"fold: patches must be square, got {patches.data.shape}")
    if q % (grid_h * grid_w):
        raise ShapeError(f"fold: {q} patches do not fit a {grid_h}x{grid_w} grid")
    b = q // (grid_h * grid_w)
    blocks = patches.data.reshape(b, grid_h, grid_w, c, p, p).transpose(0, 3, 1, 4, 2, 5)
    out = _result(blocks.reshape(b, c, grid_h * p, grid_w * p), (patches,))

    def grad_fn(g):
        gb = g.reshape(b, c, grid_h, p, grid_w, p).transpose(0, 2, 4, 1, 3, 5)
        return (gb.reshape(q, c, p, p),)

    record(out, (patches,), grad_fn)
    return out


# ---------------------------------------------------------------------------
# structured products


def gram(x: Tensor) -> Tensor:
    """Channel co-activation matrix: (b, c, h, w) -> (b, 1, c, c).

    Entry [i, j] is the dot product of channel maps i and j over all
    spatial positions.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"gram needs a 4-d input, got {x.data.shape}")
    b, c, h, w = x.data.shape
    flat = x.data.reshape(b, c, h * w)
    gmat = flat @ flat.transpose(0, 2, 1)
    out = _result(gmat[:, None, :, :], (x,))

    def grad_fn(g):
        gs = g[:, 0] + g[:, 0].transpose(0, 2, 1)
        return ((gs @ flat).reshape(b, c, h, w),)

    record(out, (x,), grad_fn)
    return out


def mix_rows(weights: Tensor, rows: Tensor) -> Tensor:
    """Per-position convex mix of a row bank.

    weights (q, n, 1, 1), rows (n, d) -> (q, d, 1, 1) where each output
    position is the weight vector times the row matrix.
    """
    if weights.data.ndim != 4 or weights.data.shape[2:] != (1, 1):
        raise ShapeError(f"mix_rows: weights must be (q, n, 1, 1), got {weights.data.shape}")
    if rows.data.ndim != 2:
        raise ShapeError(f"mix_rows: rows must be 2-d, got {rows.data.shape}")
    q, n = weights.data.shape[:2]
    if n != rows.data.shape[0]:
        raise ShapeError(f"mix_rows: {n} weights vs {rows.data.shape[0]} rows")
    w2 = weights.data.reshape(q, n)
    out_data = (w2 @ rows.data).reshape(q, rows.data.shape[1], 1, 1)
    out = _result(out_data, (weights, rows))

    def grad_fn(g):
        g2 = g.reshape(q, rows.data.shape[1])
        dw = (g2 @ rows.data.T).reshape(weights.data.shape) if weights.requires_grad else None
        dr = w2.T @ g2 if rows.requires_grad else None
        return dw, dr

    record(out, (weights, rows), grad_fn)
    return out


# ---------------------------------------------------------------------------
# gradient checking


def check_gradients(fn, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between taped and central-difference gradients.

    fn must map the tensor to a scalar Tensor and be pure.  Relative
    error per element uses max(|analytic|, |numeric|, 1e-8) in the
    denominator.
    """
    prior = x.requires_grad
    x.requires_grad = True
    x.grad = None
    tape = Tape()
    with tape:
        out = fn(x)
    if out.data.size != 1:
        raise ValueError(f"check_gradients needs a scalar-valued fn, got shape {out.data.shape}")
    backward(out, tape)
    analytic = x.grad_array().copy()
    x.grad = None
    x.requires_grad = prior
    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(fn(x).data)
        flat[i] = orig - eps
        fm = float(fn(x).data)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())
