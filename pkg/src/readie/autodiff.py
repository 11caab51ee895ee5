"""Reverse-mode automatic differentiation over dense numpy tensors.

Every operation the encoder and the prediction heads need is a primitive
here with a hand-written backward rule: broadcast-aware arithmetic, matmul
(with batch dimensions), softmax / log-softmax / logsumexp, the exact-erf
GeLU, layer normalization, embedding lookup and row gathers.

Tensors carry float data only. Tests run in float64; training defaults to
float32 and can be switched via ``set_default_dtype``. NaN or Inf anywhere
is an error state, checked with ``check_finite`` at the spots where it can
realistically appear (losses, optimizer updates).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf, expit

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def set_default_dtype(dtype) -> None:
    """Set the dtype used for tensors created from python data."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A dense array plus the tape hooks needed for reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

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
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; rich math lives in the module-level functions
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int]):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def backward(self) -> None:
        """Accumulate dself/dleaf into every reachable leaf's ``.grad``.

        Only defined for scalar tensors (loss values).
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad += g


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable[[], None] | None) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = False
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def check_finite(t: Tensor | np.ndarray, what: str = "tensor") -> None:
    data = t.data if isinstance(t, Tensor) else t
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward():
        g = out.grad
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    out = _make(out_data, (a, b), backward)
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward():
        g = out.grad
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    out = _make(out_data, (a, b), backward)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward():
        g = out.grad
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    out = _make(out_data, (a, b), backward)
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def backward():
        g = out.grad
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    out = _make(out_data, (a, b), backward)
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward():
        _accumulate(a, -out.grad)

    out = _make(-a.data, (a,), backward)
    return out


def hadamard(a, b) -> Tensor:
    """Element-wise product of two identically shaped tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"hadamard shape mismatch: {a.shape} vs {b.shape}")
    return mul(a, b)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch-dimension broadcasting.

    Both operands must have ndim >= 2; gradients flow to both.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward():
        g = out.grad
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accumulate(a, _unbroadcast(ga, a.shape))
        _accumulate(b, _unbroadcast(gb, b.shape))

    out = _make(out_data, (a, b), backward)
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward():
        _accumulate(a, out.grad * out_data)

    out = _make(out_data, (a,), backward)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.log(a.data)

    def backward():
        _accumulate(a, out.grad / a.data)

    out = _make(out_data, (a,), backward)
    return out


def square(a) -> Tensor:
    a = as_tensor(a)

    def backward():
        _accumulate(a, out.grad * 2.0 * a.data)

    out = _make(a.data * a.data, (a,), backward)
    return out


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward():
        g = out.grad
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(g, a.shape))

    out = _make(out_data, (a,), backward)
    return out


def tensor_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    denom = a.data.size / max(out_data.size, 1)

    def backward():
        g = out.grad
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(g, a.shape) / denom)

    out = _make(out_data, (a,), backward)
    return out


# ---------------------------------------------------------------------------
# nonlinearities and normalizations


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max subtraction)."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward():
        g = out.grad
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(a, (g - inner) * out_data)

    out = _make(out_data, (a,), backward)
    return out


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def backward():
        g = out.grad
        soft = np.exp(out_data)
        _accumulate(a, g - soft * g.sum(axis=axis, keepdims=True))

    out = _make(out_data, (a,), backward)
    return out


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out_keep = m + np.log(s)
    out_data = out_keep if keepdims else np.squeeze(out_keep, axis=axis)
    soft = e / s

    def backward():
        g = out.grad
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, g * soft)

    out = _make(out_data, (a,), backward)
    return out


def softplus(a) -> Tensor:
    """log(1 + e^x), computed without overflow; derivative is the logistic."""
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))

    def backward():
        _accumulate(a, out.grad * expit(a.data))

    out = _make(out_data, (a,), backward)
    return out


def gelu(a) -> Tensor:
    """Gaussian error linear unit in its exact erf form.

    gelu(x) = 0.5 * x * (1 + erf(x / sqrt(2))); the tanh approximation is
    deliberately not used so gradient checks have a single ground truth.
    """
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out_data = x * cdf

    def backward():
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        _accumulate(a, out.grad * (cdf + x * pdf))

    out = _make(out_data, (a,), backward)
    return out


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    out_data = xhat * gain.data + bias.data
    n = a.shape[-1]

    def backward():
        g = out.grad
        gx = g * gain.data
        term = gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        _accumulate(a, term * inv_std)
        red = tuple(range(g.ndim - 1))
        _accumulate(gain, (g * xhat).sum(axis=red))
        _accumulate(bias, g.sum(axis=red))

    out = _make(out_data, (a, gain, bias), backward)
    return out


# ---------------------------------------------------------------------------
# shape manipulation and lookups


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    orig = a.shape

    def backward():
        _accumulate(a, out.grad.reshape(orig))

    out = _make(a.data.reshape(shape), (a,), backward)
    return out


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward():
        _accumulate(a, out.grad.transpose(inverse))

    out = _make(a.data.transpose(axes), (a,), backward)
    return out


def broadcast_to(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)

    def backward():
        _accumulate(a, _unbroadcast(out.grad, a.shape))

    out = _make(np.broadcast_to(a.data, shape), (a,), backward)
    return out


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward():
        pieces = np.split(out.grad, splits, axis=axis)
        for p, g in zip(parts, pieces):
            _accumulate(p, g)

    out = _make(out_data, tuple(parts), backward)
    return out


def getitem(a, key) -> Tensor:
    """Basic indexing (ints, slices, tuples of those). No advanced indexing;
    use ``take_rows`` or ``embedding`` for integer-array gathers."""
    a = as_tensor(a)
    out_data = a.data[key]

    def backward():
        g = np.zeros_like(a.data)
        g[key] += out.grad
        _accumulate(a, g)

    out = _make(np.array(out_data, copy=True), (a,), backward)
    return out


def take_rows(a, indices) -> Tensor:
    """Gather rows along axis 0; duplicate indices accumulate in backward."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    out_data = a.data[idx]

    def backward():
        g = np.zeros_like(a.data)
        np.add.at(g, idx, out.grad)
        _accumulate(a, g)

    out = _make(out_data, (a,), backward)
    return out


def embedding(table, ids) -> Tensor:
    """Look up rows of ``table`` (V x H) for an integer id array of any shape."""
    table = as_tensor(table)
    idx = np.asarray(ids, dtype=np.int64)
    out_data = table.data[idx]

    def backward():
        g = np.zeros_like(table.data)
        np.add.at(g, idx.reshape(-1), out.grad.reshape(-1, table.shape[-1]))
        _accumulate(table, g)

    out = _make(out_data, (table,), backward)
    return out


# ---------------------------------------------------------------------------
# gradient checking


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
    rel_tol: float = 1e-4,
    abs_floor: float = 1e-6,
) -> float:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` must rebuild the forward pass from the given parameter
    tensors on every call. Returns the worst relative error seen; raises
    AssertionError when any coordinate exceeds ``rel_tol``. Near-zero
    gradient pairs (both below ``abs_floor``) are compared absolutely.
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError("finite-difference checks require float64 parameters")
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                up = float(loss_fn().data)
                flat[i] = orig - h
                down = float(loss_fn().data)
            flat[i] = orig
            gn = (up - down) / (2.0 * h)
            gav = float(ga.reshape(-1)[i])
            scale = max(abs(gav), abs(gn))
            if scale < abs_floor:
                err = abs(gav - gn)
            else:
                err = abs(gav - gn) / scale
            worst = max(worst, err)
            if err > rel_tol:
                raise AssertionError(
                    f"gradient mismatch at {p.shape} index {i}: analytic {gav:.10g} vs numeric {gn:.10g} (err {err:.3g})"
                )
    for p in params:
        p.zero_grad()
    return worst
