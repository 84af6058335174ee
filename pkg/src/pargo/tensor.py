"""Dense 2-D tensor math with reverse-mode differentiation.

Values are row-major numpy buffers in float32 (training) or float64
(verification). Differentiable operations record their inputs and a
vector-Jacobian closure on the output tensor; `backward` walks that
implicit tape in reverse topological order. The tape lives only in the
tensors created by one forward pass and is discarded with them, so there
is no persistent graph and reruns with the same seed are bit-identical.

Broadcasting is deliberately limited to bias addition over rows; anything
larger lives outside this module.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigError, MaskError, ShapeError

DTYPES = {"float32": np.float32, "float64": np.float64}
LN_EPS = 1e-5

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_STATE = threading.local()


def _tape_on() -> bool:
    return getattr(_STATE, "tape", True)


class no_tape:
    """Context manager disabling gradient recording (cheap inference)."""

    def __enter__(self):
        self._prev = _tape_on()
        _STATE.tape = False
        return self

    def __exit__(self, *exc):
        _STATE.tape = self._prev
        return False


def as_dtype(dtype) -> type:
    """Resolve a dtype name or numpy dtype to float32/float64."""
    if isinstance(dtype, str):
        if dtype not in DTYPES:
            raise ConfigError(f"unsupported dtype {dtype!r}; expected 'float32' or 'float64'")
        return DTYPES[dtype]
    dt = np.dtype(dtype)
    if dt == np.float32:
        return np.float32
    if dt == np.float64:
        return np.float64
    raise ConfigError(f"unsupported dtype {dt}; expected float32 or float64")


class Tensor:
    """A dense array with an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(as_dtype(dtype), copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple["Tensor", ...] = ()
        self._vjp: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, dtype=dtype, requires_grad=True)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = Tensor(data)
    if _tape_on() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def backward(loss: Tensor) -> None:
    """Populate .grad on every tensor the scalar loss depends on.

    Gradients accumulate by summation over all paths; leaves keep their
    grads until explicitly cleared.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        grads = node._vjp(node.grad)
        for p, g in zip(node._parents, grads):
            if not p.requires_grad or g is None:
                continue
            if p.grad is None:
                p.grad = np.array(g, dtype=p.data.dtype)
            else:
                p.grad += g


def _check_binary(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} shape mismatch: {a.shape} vs {b.shape}")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op} dtype mismatch: {a.data.dtype} vs {b.data.dtype}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary("add", a, b)
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_binary("sub", a, b)
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary("mul", a, b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: float) -> Tensor:
    return _node(a.data * a.data.dtype.type(s), (a,), lambda g: (g * s,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-broadcast bias add: (n, c) + (c,)."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias expects (n, c) + (c,), got {x.shape} + {b.shape}")
    return _node(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"matmul dtype mismatch: {a.data.dtype} vs {b.data.dtype}")
    ad, bd = a.data, b.data
    return _node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return _node(np.ascontiguousarray(a.data.T), (a,), lambda g: (np.ascontiguousarray(g.T),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if axis not in (0, 1):
        raise ShapeError(f"concat axis must be 0 or 1, got {axis}")
    if not parts:
        raise ShapeError("concat of zero tensors")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(parts))
        )

    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), vjp)


def _slice(a: Tensor, start: int, stop: int, axis: int) -> Tensor:
    n = a.shape[axis]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice [{start}:{stop}] out of bounds for axis {axis} of {a.shape}")

    def vjp(g):
        z = np.zeros_like(a.data)
        if axis == 0:
            z[start:stop] = g
        else:
            z[:, start:stop] = g
        return (z,)

    sl = a.data[start:stop] if axis == 0 else a.data[:, start:stop]
    return _node(np.ascontiguousarray(sl), (a,), vjp)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    return _slice(a, start, stop, axis=0)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    return _slice(a, start, stop, axis=1)


def sum_all(a: Tensor) -> Tensor:
    return _node(a.data.sum(dtype=a.data.dtype).reshape(()), (a,), lambda g: (np.full_like(a.data, g),))


def mean_rows(a: Tensor) -> Tensor:
    """(n, c) -> (1, c) mean over rows."""
    if a.data.ndim != 2 or a.shape[0] == 0:
        raise ShapeError(f"mean_rows expects a non-empty matrix, got {a.shape}")
    n = a.shape[0]
    return _node(a.data.mean(axis=0, keepdims=True), (a,), lambda g: (np.repeat(g / n, n, axis=0),))


def mask_bits(mask) -> np.ndarray:
    """Accept an AttentionMask-like object (has .bits) or a bool matrix."""
    bits = getattr(mask, "bits", mask)
    bits = np.asarray(bits)
    if bits.dtype != np.bool_ or bits.ndim != 2:
        raise MaskError(f"mask must be a 2-D boolean matrix, got dtype {bits.dtype}, ndim {bits.ndim}")
    return bits


def masked_softmax(scores: Tensor, mask) -> Tensor:
    """Row-wise softmax restricted to visible positions.

    Masked positions are excluded from the max and the normalizing sum, so
    their output is exactly 0.0 and their score values can never influence
    the visible outputs.
    """
    bits = mask_bits(mask)
    if bits.shape != scores.shape:
        raise MaskError(f"mask shape {bits.shape} does not match scores shape {scores.shape}")
    empty = ~bits.any(axis=1)
    if empty.any():
        rows = np.flatnonzero(empty)
        raise MaskError(f"softmax over fully masked row(s) {rows.tolist()}")
    s = np.where(bits, scores.data, -np.inf)
    m = s.max(axis=1, keepdims=True)
    e = np.exp(s - m)  # exp(-inf) == 0.0, so masked entries vanish exactly
    p = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        gp = g * p
        return (gp - p * gp.sum(axis=1, keepdims=True),)

    return _node(p, (scores,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize each row to zero mean / unit variance, then scale and shift."""
    if x.data.ndim != 2 or gain.data.ndim != 1 or bias.data.ndim != 1:
        raise ShapeError(f"layer_norm expects (n, c), (c,), (c,); got {x.shape}, {gain.shape}, {bias.shape}")
    if gain.shape[0] != x.shape[1] or bias.shape[0] != x.shape[1]:
        raise ShapeError(f"layer_norm width mismatch: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(LN_EPS))
    xh = xc * inv
    gd = gain.data

    def vjp(g):
        gg = g * gd
        gx = inv * (gg - gg.mean(axis=1, keepdims=True) - xh * (gg * xh).mean(axis=1, keepdims=True))
        return (gx, (g * xh).sum(axis=0), g.sum(axis=0))

    return _node(xh * gd + bias.data, (x, gain, bias), vjp)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with the bias broadcast over rows."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear shape mismatch: {x.shape} x {w.shape}")
    if b.data.ndim != 1 or b.shape[0] != w.shape[1]:
        raise ShapeError(f"linear bias shape {b.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data

    def vjp(g):
        return (g @ wd.T, xd.T @ g, g.sum(axis=0))

    return _node(xd @ wd + b.data, (x, w, b), vjp)


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    e = erf(xd * _INV_SQRT2)

    def vjp(g):
        d = 0.5 * (1.0 + e) + xd * np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        return (g * d,)

    return _node((0.5 * xd * (1.0 + e)).astype(xd.dtype, copy=False), (x,), vjp)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer labels against row-softmaxed logits."""
    ld = logits.data
    y = np.asarray(labels)
    if ld.ndim != 2:
        raise ShapeError(f"cross entropy expects (n, k) logits, got {logits.shape}")
    if y.shape != (ld.shape[0],) or not np.issubdtype(y.dtype, np.integer):
        raise ShapeError(f"labels must be {ld.shape[0]} integers, got shape {y.shape} dtype {y.dtype}")
    if y.min(initial=0) < 0 or y.max(initial=0) >= ld.shape[1]:
        raise ShapeError(f"label out of range for {ld.shape[1]} classes")
    n = ld.shape[0]
    m = ld.max(axis=1, keepdims=True)
    z = np.exp(ld - m)
    lse = m[:, 0] + np.log(z.sum(axis=1))
    loss = (lse - ld[np.arange(n), y]).mean(dtype=ld.dtype)
    p = z / z.sum(axis=1, keepdims=True)

    def vjp(g):
        gr = p.copy()
        gr[np.arange(n), y] -= 1.0
        gr *= g / n
        return (gr,)

    return _node(np.asarray(loss, dtype=ld.dtype).reshape(()), (logits,), vjp)


@dataclass
class AttentionWeights:
    """Projection weights for one multi-head attention block.

    The key projection carries no bias: a shift shared by all keys adds
    the same constant to every visible score in a row, which softmax
    cancels exactly, so such a bias could never receive gradient.
    """

    wq: Tensor
    bq: Tensor
    wk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for field in ("wq", "bq", "wk", "wv", "bv", "wo", "bo"):
            yield f"{prefix}.{field}", getattr(self, field)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, mask, weights: AttentionWeights, heads: int) -> Tensor:
    """Masked scaled dot-product attention with per-head score scale 1/sqrt(c/heads)."""
    c = q.shape[1]
    if c % heads != 0:
        raise ConfigError(f"width {c} is not divisible by {heads} heads")
    if k.shape != v.shape:
        raise ShapeError(f"key/value shape mismatch: {k.shape} vs {v.shape}")
    bits = mask_bits(mask)
    if bits.shape != (q.shape[0], k.shape[0]):
        raise MaskError(f"mask shape {bits.shape} does not match ({q.shape[0]}, {k.shape[0]}) attention")
    qp = linear(q, weights.wq, weights.bq)
    kp = matmul(k, weights.wk)
    vp = linear(v, weights.wv, weights.bv)
    dh = c // heads
    inv = 1.0 / math.sqrt(dh)
    outs = []
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        qh, kh, vh = slice_cols(qp, lo, hi), slice_cols(kp, lo, hi), slice_cols(vp, lo, hi)
        attn = masked_softmax(scale(matmul(qh, transpose(kh)), inv), bits)
        outs.append(matmul(attn, vh))
    merged = outs[0] if heads == 1 else concat(outs, axis=1)
    return linear(merged, weights.wo, weights.bo)
