"""Dense 2-D tensors with reverse-mode autodiff, a deterministic
counter-based RNG, and a simulated half-precision mode.

Scalars are 0-d tensors. Broadcasting is limited to scalars and a row bias
over a matrix; everything heavier is out of scope by design.
"""

from __future__ import annotations

import enum
import hashlib
from contextlib import contextmanager
from contextvars import ContextVar

import numpy as np

from .errors import ContractError, DimensionError

# ---------------------------------------------------------------------------
# precision


class PrecisionMode(enum.Enum):
    EXACT = "exact"
    SIM_HALF = "simhalf"


_MANTISSA_BITS = 11
_MANTISSA_SCALE = float(1 << _MANTISSA_BITS)

_active_mode: ContextVar[PrecisionMode] = ContextVar("precision_mode", default=PrecisionMode.EXACT)


def quantize_half(values: np.ndarray) -> np.ndarray:
    """Round-to-nearest-even quantization of the significand to 11 bits.

    Keeps the float64 exponent, so the pass is idempotent and the relative
    error is bounded by 2**-11 for every finite input (no range clipping at
    the half-precision boundary).
    """
    arr = np.asarray(values, dtype=np.float64)
    m, e = np.frexp(arr)
    with np.errstate(over="ignore"):
        out = np.ldexp(np.round(m * _MANTISSA_SCALE) / _MANTISSA_SCALE, e)
    # round-to-even can step past the float64 ceiling; truncate there instead
    blown = np.isinf(out) & np.isfinite(arr)
    if np.any(blown):
        out = np.where(blown, np.ldexp(np.trunc(m * _MANTISSA_SCALE) / _MANTISSA_SCALE, e), out)
    return out


def active_mode() -> PrecisionMode:
    return _active_mode.get()


@contextmanager
def precision(mode: PrecisionMode):
    """Select the precision applied to every op output inside the block."""
    token = _active_mode.set(mode)
    try:
        yield
    finally:
        _active_mode.reset(token)


def _finish(values: np.ndarray) -> np.ndarray:
    if _active_mode.get() is PrecisionMode.SIM_HALF:
        return quantize_half(values)
    return values


def maybe_quantize(values: np.ndarray) -> np.ndarray:
    """Quantize raw arrays under the active mode (for protocol-level code)."""
    return _finish(np.asarray(values, dtype=np.float64))


# ---------------------------------------------------------------------------
# deterministic rng


class Rng:
    """Counter-based generator: the (seed, stream path) pair fixes the sequence.

    Streams are derived by hashing labels, so independent components can pull
    randomness in any order without perturbing each other.
    """

    def __init__(self, seed: int, path: str = ""):
        self.seed = int(seed)
        self.path = path
        digest = hashlib.blake2b(f"{self.seed}:{path}".encode(), digest_size=16).digest()
        key = np.frombuffer(digest, dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    @property
    def stream_id(self) -> int:
        return int.from_bytes(hashlib.blake2b(self.path.encode(), digest_size=8).digest(), "big")

    def stream(self, label: str) -> "Rng":
        return Rng(self.seed, f"{self.path}/{label}")

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def normal(self, scale: float, shape) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=shape)

    def integers(self, low: int, high: int, shape) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


# ---------------------------------------------------------------------------
# tensor


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce grad back to `shape` after a broadcasted elementwise op."""
    if grad.shape == shape:
        return grad
    g = grad
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """Dense float64 array (at most 2-D) with a reverse-mode tape."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 2:
            raise DimensionError(f"tensors are at most 2-D, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents: tuple = ()

    # -- basics ------------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def copy(self) -> "Tensor":
        t = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        return t

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operators -----------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division only by python scalars")
        return mul(self, Tensor(1.0 / float(other)))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape)


def _wrap(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def compose(data: np.ndarray, parents: tuple, backward) -> Tensor:
    """Build a tensor from a custom op.

    `backward(grad)` receives the output gradient and is responsible for
    accumulating into each parent's ``.grad``. The caller owns quantization
    of ``data``; built-in ops quantize via :func:`_finish` themselves.
    """
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, grad: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += grad


# -- elementwise -------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = _finish(a.data + b.data)
    except ValueError as exc:
        raise DimensionError(f"add: {a.shape} vs {b.shape}") from exc

    def backward(grad):
        _accum(a, _unbroadcast(grad, a.shape))
        _accum(b, _unbroadcast(grad, b.shape))

    return compose(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(grad):
        _accum(a, -grad)

    return compose(_finish(-a.data), (a,), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = _finish(a.data * b.data)
    except ValueError as exc:
        raise DimensionError(f"mul: {a.shape} vs {b.shape}") from exc

    def backward(grad):
        _accum(a, _unbroadcast(grad * b.data, a.shape))
        _accum(b, _unbroadcast(grad * a.data, b.shape))

    return compose(data, (a, b), backward)


def square(a: Tensor) -> Tensor:
    def backward(grad):
        _accum(a, grad * 2.0 * a.data)

    return compose(_finish(a.data * a.data), (a,), backward)


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dims disagree, {a.shape} @ {b.shape}")
    data = _finish(a.data @ b.data)

    def backward(grad):
        _accum(a, grad @ b.data.T)
        _accum(b, a.data.T @ grad)

    return compose(data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    def backward(grad):
        _accum(a, grad.T)

    return compose(a.data.T, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(grad):
        _accum(a, grad.reshape(a.shape))

    return compose(a.data.reshape(shape), (a,), backward)


def tsum(a: Tensor, axis=None) -> Tensor:
    data = _finish(a.data.sum(axis=axis))

    def backward(grad):
        if axis is None:
            _accum(a, np.broadcast_to(grad, a.shape).copy())
        else:
            _accum(a, np.broadcast_to(np.expand_dims(grad, axis), a.shape).copy())

    return compose(data, (a,), backward)


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    if n == 0:
        raise DimensionError("mean over empty axis")
    data = _finish(a.data.mean(axis=axis))

    def backward(grad):
        if axis is None:
            _accum(a, np.broadcast_to(grad / n, a.shape).copy())
        else:
            _accum(a, np.broadcast_to(np.expand_dims(grad, axis) / n, a.shape).copy())

    return compose(data, (a,), backward)


# -- gather / scatter ---------------------------------------------------------


def gather_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def backward(grad):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, grad)
            _accum(a, buf)

    return compose(a.data[idx], (a,), backward)


def gather_cols(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def backward(grad):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, (slice(None), idx), grad)
            _accum(a, buf)

    return compose(a.data[:, idx], (a,), backward)


def concat_rows(parts: list) -> Tensor:
    if not parts:
        raise DimensionError("concat_rows of nothing")
    data = np.vstack([p.data for p in parts])
    sizes = [p.shape[0] for p in parts]

    def backward(grad):
        lo = 0
        for p, s in zip(parts, sizes):
            _accum(p, grad[lo:lo + s])
            lo += s

    return compose(data, tuple(parts), backward)


def concat_cols(parts: list) -> Tensor:
    if not parts:
        raise DimensionError("concat_cols of nothing")
    data = np.hstack([p.data for p in parts])
    sizes = [p.shape[1] for p in parts]

    def backward(grad):
        lo = 0
        for p, s in zip(parts, sizes):
            _accum(p, grad[:, lo:lo + s])
            lo += s

    return compose(data, tuple(parts), backward)


def scatter_cols(pieces: list, width: int) -> Tensor:
    """Assemble columns from (tensor, column-index) pieces; indices must
    partition range(width)."""
    rows = pieces[0][0].shape[0]
    data = np.empty((rows, width), dtype=np.float64)
    idxs = []
    for piece, idx in pieces:
        idx = np.asarray(idx, dtype=np.int64)
        data[:, idx] = piece.data
        idxs.append(idx)

    def backward(grad):
        for (piece, _), idx in zip(pieces, idxs):
            _accum(piece, grad[:, idx])

    return compose(data, tuple(p for p, _ in pieces), backward)


# -- neural-net primitives -----------------------------------------------------


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if x.data.ndim != 2 or x.shape[1] == 0:
        raise DimensionError(f"layernorm over rows needs a non-empty 2-D input, got {x.shape}")
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError("layernorm: gamma/beta must match the last dim")
    n = x.shape[1]
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = _finish(xhat * gamma.data + beta.data)

    def backward(grad):
        if gamma.requires_grad:
            _accum(gamma, (grad * xhat).sum(axis=0))
        if beta.requires_grad:
            _accum(beta, grad.sum(axis=0))
        if x.requires_grad:
            dxhat = grad * gamma.data
            dvar = (dxhat * xc).sum(axis=1, keepdims=True) * (-0.5) * inv ** 3
            dmu = (dxhat * -inv).sum(axis=1, keepdims=True)
            _accum(x, dxhat * inv + dvar * 2.0 * xc / n + dmu / n)

    return compose(data, (x, gamma, beta), backward)


def softmax(x: Tensor) -> Tensor:
    if x.data.ndim != 2 or x.shape[1] == 0:
        raise DimensionError(f"softmax needs a non-empty last dim, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    data = _finish(s)

    def backward(grad):
        if x.requires_grad:
            dot = (grad * s).sum(axis=1, keepdims=True)
            _accum(x, s * (grad - dot))

    return compose(data, (x,), backward)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    u = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(u)
    data = _finish(0.5 * x.data * (1.0 + t))

    def backward(grad):
        if x.requires_grad:
            du = _GELU_C * (1.0 + 3 * 0.044715 * x.data ** 2)
            _accum(x, grad * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du))

    return compose(data, (x,), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels over logit rows."""
    if logits.data.ndim != 2 or logits.shape[1] == 0:
        raise DimensionError(f"cross_entropy needs 2-D logits, got {logits.shape}")
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    m, c = logits.shape
    if labels.shape != (m,):
        raise DimensionError(f"cross_entropy: {m} logit rows vs labels {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ContractError(f"label out of range for {c} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    data = _finish(np.mean(lse - z[np.arange(m), labels]))

    def backward(grad):
        if logits.requires_grad:
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(m), labels] -= 1.0
            _accum(logits, grad * p / m)

    return compose(data, (logits,), backward)


def dropout(x: Tensor, p: float, rng: Rng, training: bool) -> Tensor:
    if not training or p <= 0.0:
        return x
    keep = (rng.uniform(0.0, 1.0, x.shape) >= p) / (1.0 - p)

    def backward(grad):
        _accum(x, grad * keep)

    return compose(_finish(x.data * keep), (x,), backward)


# -- backward ------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate grads of every requires_grad tensor reachable from a scalar loss."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
