"""Reverse-mode automatic differentiation on numpy arrays.

A ``Tensor`` wraps an ndarray. Every differentiable operation appends a
record (inputs, saved intermediates, vector-Jacobian closure) to the
computation tape; ``backward`` replays the tape in reverse creation order,
visiting each node exactly once after all of its consumers. Broadcasting
follows numpy's trailing-dimension alignment. Reductions use numpy's
sequential order, so results are bit-reproducible for a fixed thread count.

Only the operations the model and rasterizer need are provided; this is not
a general-purpose autodiff system.
"""

from __future__ import annotations

import heapq
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "no_grad",
    "set_default_dtype",
    "get_default_dtype",
    "tensor",
    "zeros",
    "ones",
    "concat",
    "stack",
    "take",
    "elementwise",
    "matmul",
    "softmax",
    "layer_norm",
    "attention",
    "transposed_conv_2x",
    "backward",
    "all_finite",
    "finite_difference_check",
    "custom_op",
]

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_SEQ = 0

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in _FLOAT_DTYPES:
        raise ValueError(f"default dtype must be float32 or float64, got {dtype}")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


class no_grad:
    """Context manager disabling tape recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class _Record:
    """One tape entry: the op kind, its inputs, and the saved-state VJP."""

    __slots__ = ("seq", "name", "inputs", "vjp", "calls")

    def __init__(self, seq: int, name: str, inputs: tuple, vjp: Callable):
        self.seq = seq
        self.name = name
        self.inputs = inputs
        self.vjp = vjp
        self.calls = 0  # incremented by backward; used to assert single-visit


class Tensor:
    """N-dimensional float array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_rec")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.type not in _FLOAT_DTYPES:
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._rec: _Record | None = None

    # -- basic introspection ------------------------------------------------
    @property
    def shape(self) -> tuple:
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

    @property
    def node_id(self) -> int | None:
        """Sequence index of the creating tape record (None for leaves)."""
        return self._rec.seq if self._rec is not None else None

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return _cast(self, dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def is_finite(self) -> bool:
        """Validity check: True iff no NaN/Inf anywhere in the values."""
        return bool(np.isfinite(self.data).all())

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def backward(self, grad=None):
        backward(self, grad)


class Tape:
    """Ordered view of the records reachable from a root tensor.

    Records are sorted by creation sequence, which is a topological order:
    walking the list in reverse visits every node after all of its consumers.
    """

    def __init__(self, records: list[_Record]):
        self.records = records

    @staticmethod
    def from_root(root: Tensor) -> "Tape":
        seen: set[int] = set()
        records: list[_Record] = []
        stack = [root]
        while stack:
            t = stack.pop()
            rec = t._rec
            if rec is None or rec.seq in seen:
                continue
            seen.add(rec.seq)
            records.append(rec)
            for inp in rec.inputs:
                if isinstance(inp, Tensor) and inp._rec is not None:
                    stack.append(inp)
        records.sort(key=lambda r: r.seq)
        return Tape(records)

    def __len__(self) -> int:
        return len(self.records)


# -- op plumbing -------------------------------------------------------------


def _coerce(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    if arr.dtype.type not in _FLOAT_DTYPES:
        arr = arr.astype(_DEFAULT_DTYPE)
    return Tensor(arr)


def _result(out_data: np.ndarray, name: str, inputs: tuple, vjp: Callable) -> Tensor:
    out = Tensor(out_data)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        global _SEQ
        _SEQ += 1
        out.requires_grad = True
        out._rec = _Record(_SEQ, name, inputs, vjp)
    return out


def custom_op(name: str, out_data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Register a hand-written primitive (used by the rasterizer kernel).

    ``vjp(grad_out) -> tuple`` must return one gradient array (or None) per
    input, each matching that input's shape.
    """
    return _result(out_data, name, tuple(inputs), vjp)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over dimensions introduced or stretched by broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise binary ops ----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a, b, "add")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, "add", (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a, b, "sub")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, "sub", (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a, b, "mul")

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, "mul", (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data  # divide-by-zero propagates Inf; caught by is_finite

    def vjp(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, "div", (a, b), vjp)


# -- elementwise unary ops -----------------------------------------------------


def neg(a) -> Tensor:
    a = _coerce(a)
    return _result(-a.data, "neg", (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _coerce(a)
    out = np.exp(a.data)
    return _result(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _coerce(a)
    return _result(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _coerce(a)
    out = np.sqrt(a.data)
    return _result(out, "sqrt", (a,), lambda g: (g * (0.5 / out),))


def power(a, p: float) -> Tensor:
    a = _coerce(a)
    p = float(p)
    out = a.data**p
    return _result(out, "pow", (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def absolute(a) -> Tensor:
    a = _coerce(a)
    sign = np.sign(a.data)  # subgradient 0 at the kink
    return _result(np.abs(a.data), "abs", (a,), lambda g: (g * sign,))


def sin(a) -> Tensor:
    a = _coerce(a)
    return _result(np.sin(a.data), "sin", (a,), lambda g: (g * np.cos(a.data),))


def cos(a) -> Tensor:
    a = _coerce(a)
    return _result(np.cos(a.data), "cos", (a,), lambda g: (-g * np.sin(a.data),))


def sigmoid(a) -> Tensor:
    a = _coerce(a)
    # stable two-sided form: exp is only ever taken of a non-positive value
    z = np.exp(-np.abs(a.data))
    out = np.where(a.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _result(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = _coerce(a)
    out = np.tanh(a.data)
    return _result(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = _coerce(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(out, "gelu", (a,), vjp)


def minimum_const(a, c: float) -> Tensor:
    """min(a, c); subgradient passes through only where a < c."""
    a = _coerce(a)
    mask = a.data < c
    return _result(np.minimum(a.data, c), "min_const", (a,), lambda g: (g * mask,))


def maximum_const(a, c: float) -> Tensor:
    a = _coerce(a)
    mask = a.data > c
    return _result(np.maximum(a.data, c), "max_const", (a,), lambda g: (g * mask,))


def _cast(a: Tensor, dtype) -> Tensor:
    dtype = np.dtype(dtype)
    return _result(a.data.astype(dtype), "cast", (a,), lambda g: (g.astype(a.dtype),))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "pow": power,
    "abs": absolute,
    "sin": sin,
    "cos": cos,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "gelu": gelu,
    "min_const": minimum_const,
    "max_const": maximum_const,
}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name (binary ops require ``b``)."""
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    return fn(a) if b is None else fn(a, b)


# -- contractions and reductions ----------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, "matmul", (a, b), vjp)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).copy(),)

    return _result(out, "sum", (a,), vjp)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(reduce_sum(a, axis, keepdims), 1.0 / float(n))


# -- shape ops ------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    shape = tuple(shape)
    return _result(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = _coerce(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), "transpose", (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, key) -> Tensor:
    """Basic (non-duplicating) slicing."""
    a = _coerce(a)

    def vjp(g):
        buf = np.zeros(a.shape, dtype=g.dtype)
        buf[key] = g
        return (buf,)

    return _result(a.data[key].copy(), "getitem", (a,), vjp)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather rows along ``axis``; backward scatter-adds (duplicates allowed)."""
    a = _coerce(a)
    idx = np.asarray(indices)

    def vjp(g):
        buf = np.zeros(a.shape, dtype=g.dtype)
        if axis == 0:
            np.add.at(buf, idx, g)
        else:
            key = (slice(None),) * axis
            np.add.at(np.moveaxis(buf, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (buf,)

    return _result(np.take(a.data, idx, axis=axis), "take", (a,), vjp)


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [_coerce(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([p.data for p in parts], axis=axis), "concat", tuple(parts), vjp)


def stack(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [_coerce(p) for p in parts]
    expanded = [reshape(p, p.shape[:axis] + (1,) + p.shape[axis:]) for p in parts]
    return concat(expanded, axis=axis)


# -- composites the model needs -------------------------------------------------


def softmax(x, axis: int = -1, temperature: float = 1.0) -> Tensor:
    """Temperature softmax with max-subtraction for stability."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    x = _coerce(x)
    z = mul(x, 1.0 / float(temperature))
    # the subtracted max is constant w.r.t. the softmax value, so it is
    # applied at the data level and carries no gradient of its own
    z = sub(z, np.max(z.data, axis=axis, keepdims=True))
    e = exp(z)
    return div(e, reduce_sum(e, axis=axis, keepdims=True))


def layer_norm(x, weight: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance; optional affine."""
    x = _coerce(x)
    if x.shape[-1] < 1:
        raise ShapeError(f"layer_norm needs a non-empty last axis, got {x.shape}")
    mu = reduce_mean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = reduce_mean(mul(xc, xc), axis=-1, keepdims=True)
    y = mul(xc, power(add(var, eps), -0.5))
    if weight is not None:
        y = add(mul(y, weight), bias)
    return y


def attention(q, k, v, heads: int = 1) -> Tensor:
    """Full (unmasked) scaled dot-product multi-head attention.

    Inputs are ``(seq, embed)``; embed must divide evenly into heads.
    """
    q, k, v = _coerce(q), _coerce(k), _coerce(v)
    s, e = q.shape
    if e % heads != 0:
        raise ShapeError(f"embed dim {e} not divisible by {heads} heads")
    dh = e // heads

    def split(t):
        return transpose(reshape(t, (t.shape[0], heads, dh)), (1, 0, 2))  # (h, s, dh)

    qh, kh, vh = split(q), split(k), split(v)
    logits = mul(matmul(qh, transpose(kh, (0, 2, 1))), 1.0 / math.sqrt(dh))
    attn = softmax(logits, axis=-1)
    out = matmul(attn, vh)  # (h, s, dh)
    return reshape(transpose(out, (1, 0, 2)), (s, e))


def transposed_conv_2x(x, kernels, bias: Tensor | None = None) -> Tensor:
    """Transposed convolution, kernel 2, stride 2 (exact 2x upsampling).

    ``x`` is channels-last ``(h, w, c_in)``; ``kernels`` is
    ``(c_in, 2, 2, c_out)``. Stride equals kernel size, so output blocks do
    not overlap and the op reduces to a per-pixel linear map plus unfold.
    """
    x, kernels = _coerce(x), _coerce(kernels)
    h, w, cin = x.shape
    kin, kh, kw, cout = kernels.shape
    if kin != cin or (kh, kw) != (2, 2):
        raise ShapeError(f"kernel shape {kernels.shape} incompatible with input {x.shape}")
    flat = matmul(reshape(x, (h * w, cin)), reshape(kernels, (cin, 4 * cout)))
    blocks = reshape(flat, (h, w, 2, 2, cout))
    out = reshape(transpose(blocks, (0, 2, 1, 3, 4)), (2 * h, 2 * w, cout))
    if bias is not None:
        out = add(out, bias)
    return out


# -- backward -------------------------------------------------------------------


def backward(loss: Tensor, grad=None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable requires_grad leaf.

    ``loss`` must be scalar unless ``grad`` supplies the output gradient.
    Calling twice without clearing ``.grad`` accumulates.
    """
    if grad is None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    else:
        grad = np.asarray(grad, dtype=loss.dtype)
        if grad.shape != loss.shape:
            raise ShapeError(f"gradient shape {grad.shape} != loss shape {loss.shape}")
    if loss._rec is None:
        if loss.requires_grad:
            loss.grad = grad if loss.grad is None else loss.grad + grad
        return

    pending: dict[int, np.ndarray] = {loss._rec.seq: grad}
    by_seq: dict[int, _Record] = {loss._rec.seq: loss._rec}
    heap = [-loss._rec.seq]
    in_heap = {loss._rec.seq}
    while heap:
        seq = -heapq.heappop(heap)
        rec = by_seq.pop(seq)
        g = pending.pop(seq)
        rec.calls += 1
        grads = rec.vjp(g)
        for inp, gin in zip(rec.inputs, grads):
            if gin is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                continue
            irec = inp._rec
            if irec is None:
                inp.grad = gin.copy() if inp.grad is None else inp.grad + gin
            else:
                if irec.seq in pending:
                    pending[irec.seq] = pending[irec.seq] + gin
                else:
                    pending[irec.seq] = gin
                    by_seq[irec.seq] = irec
                if irec.seq not in in_heap:
                    in_heap.add(irec.seq)
                    heapq.heappush(heap, -irec.seq)


def all_finite(*tensors: Tensor) -> bool:
    return all(t.is_finite() for t in tensors)


# -- verification oracle ----------------------------------------------------------


def finite_difference_check(
    f: Callable[..., Tensor],
    xs: Sequence[Tensor],
    h: float = 1e-5,
    kink_mask: Sequence[np.ndarray] | None = None,
) -> float:
    """Max relative error between analytic gradients and central differences.

    ``f`` must map the leaf tensors ``xs`` to a scalar Tensor. Relative error
    at each coordinate is |analytic - numeric| / (|analytic| + |numeric| +
    1e-8). Coordinates flagged in ``kink_mask`` (e.g. exactly at a
    min-with-constant kink) are reported as excluded and do not contribute.
    """
    for x in xs:
        x.grad = None
        x.requires_grad = True
    out = f(*xs)
    backward(out)
    worst = 0.0
    for xi, x in enumerate(xs):
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        aflat = analytic.reshape(-1)
        mask = None
        if kink_mask is not None and kink_mask[xi] is not None:
            mask = np.asarray(kink_mask[xi]).reshape(-1)
        for i in range(flat.size):
            if mask is not None and mask[i]:
                continue
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                fp = float(f(*xs).data)
            flat[i] = orig - h
            with no_grad():
                fm = float(f(*xs).data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            rel = abs(aflat[i] - numeric) / (abs(aflat[i]) + abs(numeric) + 1e-8)
            worst = max(worst, rel)
    return worst


# -- constructors -----------------------------------------------------------------


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or _DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or _DEFAULT_DTYPE), requires_grad=requires_grad)
