"""Dense tensors with reverse-mode automatic differentiation on numpy.

Two global precision modes: "fp64" (verification; finite checks on) and
"fp32" (training). The mode is process-global because finite-difference
gradient checks are meaningless at fp32.

Tensors are immutable after construction except for gradient accumulation.
A single forward/backward tape is single-threaded; independent tapes must
not share gradient accumulators.
"""

import math

import numpy as np
from scipy.special import erf

_MODE = "fp64"

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

MASK_NEG = -1e30  # additive mask sentinel; large-negative keeps grads exact zeros


class NumericError(RuntimeError):
    """Raised on NaN/Inf detection or other numeric contract violations."""


def set_mode(mode):
    """Set the global precision mode: "fp64" (verification) or "fp32"."""
    global _MODE
    if mode not in ("fp32", "fp64"):
        raise ValueError(f"unknown precision mode {mode!r}")
    _MODE = mode


def get_mode():
    return _MODE


def dtype():
    """Active numpy dtype for the current mode."""
    return np.float64 if _MODE == "fp64" else np.float32


class Rng:
    """Deterministic random stream on a Philox counter-based generator.

    Identical seed gives an identical stream on every platform. Substreams
    are derived by keying Philox with (seed, tag-hash) so consumers can be
    added or removed without perturbing each other.
    """

    def __init__(self, seed, _key2=0):
        self.seed = int(seed)
        self._key2 = int(_key2)
        self._gen = np.random.Generator(
            np.random.Philox(key=np.array([self.seed, self._key2], dtype=np.uint64))
        )

    def stream(self, tag):
        """Derive an independent substream named by `tag`."""
        h = 1469598103934665603  # FNV-1a over the tag bytes
        for b in str(tag).encode("utf-8"):
            h = ((h ^ b) * 1099511628211) & 0xFFFFFFFFFFFFFFFF
        return Rng(self.seed, h)

    def normal(self, shape, scale=1.0):
        return (self._gen.standard_normal(shape, dtype=np.float64) * scale).astype(dtype())

    def uniform(self, shape, low=0.0, high=1.0):
        return self._gen.uniform(low, high, size=shape).astype(dtype())

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)

    def choice(self, seq):
        return seq[int(self._gen.integers(0, len(seq)))]

    def permutation(self, n):
        return self._gen.permutation(n)


def _as_array(data):
    arr = np.asarray(data, dtype=dtype())
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return arr


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    """Row-major dense array participating in a reverse-mode tape.

    `grad` accumulates across backward() calls until reset to None.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, _check=True):
        if isinstance(data, np.ndarray) and data.dtype == dtype():
            self.data = data
        else:
            self.data = _as_array(data)
        if _check and _MODE == "fp64" and not _parents:
            # Leaves may carry deliberate -inf mask sentinels but never NaN.
            if np.isnan(self.data).any():
                raise NumericError("NaN in tensor construction")
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward

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
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def _coerce(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(out_data, parents, backward_fn):
    if _MODE == "fp64" and not np.isfinite(out_data).all():
        raise NumericError("non-finite value in op result")
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(out_data, _check=False)
    return Tensor(out_data, requires_grad=True, _parents=tuple(parents),
                  _backward=backward_fn, _check=False)


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


# -- elementwise -------------------------------------------------------

def add(a, b):
    a, b = _coerce(a), _coerce(b)
    out = a.data + b.data

    def back(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(out, (a, b), back)


def sub(a, b):
    a, b = _coerce(a), _coerce(b)
    out = a.data - b.data

    def back(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(out, (a, b), back)


def neg(a):
    def back(g):
        _accum(a, -g)

    return _make(-a.data, (a,), back)


def mul(a, b):
    a, b = _coerce(a), _coerce(b)
    out = a.data * b.data

    def back(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), back)


def gelu(x):
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = (x.data * cdf).astype(x.data.dtype)

    def back(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        _accum(x, g * (cdf + x.data * pdf))

    return _make(out, (x,), back)


# -- shape -------------------------------------------------------------

def reshape(x, shape):
    old = x.shape
    out = x.data.reshape(shape)

    def back(g):
        _accum(x, g.reshape(old))

    return _make(out, (x,), back)


def permute(x, axes):
    axes = tuple(axes)
    inv = np.argsort(axes)
    out = np.ascontiguousarray(x.data.transpose(axes))

    def back(g):
        _accum(x, g.transpose(inv))

    return _make(out, (x,), back)


def concat(tensors, axis=0):
    tensors = [(_coerce(t)) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _make(out, tuple(tensors), back)


def narrow(x, axis, start, length):
    """Contiguous slice of `length` along `axis` starting at `start`."""
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = np.ascontiguousarray(x.data[idx])

    def back(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        _accum(x, full)

    return _make(out, (x,), back)


# -- reductions --------------------------------------------------------

def tsum(x, axis=None, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)
    if np.ndim(out) == 0:
        out = out.reshape(1)

    def back(g):
        if axis is None:
            _accum(x, np.full(x.shape, float(g.reshape(-1)[0]), dtype=x.data.dtype))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(x, np.broadcast_to(gg, x.shape).copy())

    return _make(out, (x,), back)


def tmean(x):
    n = x.size
    out = x.data.mean().reshape(1)

    def back(g):
        _accum(x, np.full(x.shape, float(g.reshape(-1)[0]) / n, dtype=x.data.dtype))

    return _make(out, (x,), back)


# -- linear algebra ----------------------------------------------------

def matmul(a, b):
    """Stacked matrix product; last two axes are the matrix dims, leading
    axes broadcast. Raises on inner-dimension mismatch."""
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accum(a, _unbroadcast(ga, a.shape))
        _accum(b, _unbroadcast(gb, b.shape))

    return _make(out, (a, b), back)


# -- normalization / attention ----------------------------------------

def softmax_lastdim(x):
    """Stable softmax along the last axis; masked -inf/-1e30 entries go to 0."""
    m = np.max(x.data, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x.data - m)
    denom = e.sum(axis=-1, keepdims=True)
    out = e / denom

    def back(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        _accum(x, out * (g - dot))

    return _make(out, (x,), back)


def logsumexp_lastdim(x):
    m = np.max(x.data, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s))[..., 0]

    def back(g):
        _accum(x, np.expand_dims(g, -1) * (e / s))

    return _make(out, (x,), back)


def gather_lastdim(x, idx):
    """x[..., idx] along the last axis; idx shape == x.shape[:-1]."""
    idx = np.asarray(idx)
    out = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def back(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx[..., None], np.expand_dims(g, -1), axis=-1)
        _accum(x, full)

    return _make(out, (x,), back)


def layernorm(x, gain, bias, eps=1e-5):
    """Per-token normalization over the last axis, then affine."""
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ValueError("layernorm gain/bias must match the last dim")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = x.shape[-1]

    def back(g):
        gy = g * gain.data
        gmean = gy.mean(axis=-1, keepdims=True)
        gdot = (gy * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv * (gy - gmean - xhat * gdot))
        red = tuple(range(x.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=red))
        _accum(bias, g.sum(axis=red))

    return _make(out, (x, gain, bias), back)


def gather_rows(table, ids):
    """Embedding lookup: rows of `table` (V x D) at integer `ids`."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("token id out of range for embedding table")
    out = table.data[ids]

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        _accum(table, gt)

    return _make(out, (table,), back)


# -- tape --------------------------------------------------------------

def backward(loss):
    """Reverse accumulation from a scalar loss over its tape."""
    if loss.size != 1:
        raise ValueError("backward requires a scalar loss")
    topo, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        if node._parents:
            # interior activations: free the accumulator once consumed
            node.grad = None
    loss.grad = np.ones_like(loss.data)


def parameter(rng, shape, scale=None, tag=""):
    """Trainable tensor with N(0, scale^2) init (scale defaults to fan-in)."""
    if scale is None:
        fan_in = shape[0] if len(shape) > 1 else max(shape[0], 1)
        scale = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.normal(shape, scale), requires_grad=True)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=dtype()), requires_grad=requires_grad)


def ones(shape, requires_grad=False):
    return Tensor(np.ones(shape, dtype=dtype()), requires_grad=requires_grad)


def constant(data):
    return Tensor(np.asarray(data, dtype=dtype()))
